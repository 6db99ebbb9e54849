//! Regularized RMSE cost of the surrogate and its backpropagated gradient:
//!
//! `C(β) = √(Σ (Ŵ − W)² / (9L)) + λ₁ Σ|β_p| + λ₂ Σ β_p²`
//!
//! Both penalties run over every parameter, frozen or not.

use super::net::SurrogateNet;
use crate::dataset::Record;
use crate::mesh::{VoltageVector, N_WEIGHTS};
use crate::optim::{Objective, ObjectiveError};
use ndarray::{Array2, ArrayView2, Axis};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("empty batch")]
    Empty,
    #[error("target weight of record {0} is not finite")]
    NonFiniteTarget(usize),
}

/// Normalized inputs and dB targets of one data split.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

impl Batch {
    pub fn new(net: &SurrogateNet, records: &[Record]) -> Result<Self, CostError> {
        if records.is_empty() {
            return Err(CostError::Empty);
        }
        let v: Vec<VoltageVector> = records.iter().map(|r| r.v).collect();
        let mut y = Array2::zeros((records.len(), N_WEIGHTS));
        for (l, (mut row, r)) in y.rows_mut().into_iter().zip(records).enumerate() {
            for (t, &w) in row.iter_mut().zip(r.w.as_array()) {
                if !w.is_finite() {
                    return Err(CostError::NonFiniteTarget(l));
                }
                *t = w;
            }
        }
        Ok(Self { x: net.inputs(&v), y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostValue {
    pub total: f64,
    pub rmse_db: f64,
    pub l1: f64,
    pub l2: f64,
}

/// Cost of `params` (laid out as `net`), writing the full gradient into `grad` when given.
///
/// `h1` may carry precomputed first-hidden-layer activations for this batch;
/// the first-layer gradient is then left at zero, so it must only be used when
/// that layer is frozen.
pub(crate) fn cost_with(
    net: &SurrogateNet,
    params: &[f64],
    batch: &Batch,
    h1: Option<&Array2<f64>>,
    lambda_l1: f64,
    lambda_l2: f64,
    grad: Option<&mut [f64]>,
) -> CostValue {
    let layout = *net.layout();
    let cached = h1.is_some();
    let h1_owned;
    let h1 = match h1 {
        Some(h) => h,
        None => {
            h1_owned = net.layer_forward(params, 1, batch.x.view(), true);
            &h1_owned
        }
    };
    let h2 = net.layer_forward(params, 2, h1.view(), true);
    let mut out = net.layer_forward(params, 3, h2.view(), false);
    let scaling = net.output_scaling();
    // Residuals in dB.
    out.mapv_inplace(|o| scaling.offset_db + scaling.scale_db * o);
    out -= &batch.y;
    let count = (N_WEIGHTS * batch.len()) as f64;
    let sse: f64 = out.iter().map(|r| r * r).sum();
    let rmse = (sse / count).sqrt();
    let l1: f64 = lambda_l1 * params.iter().map(|p| p.abs()).sum::<f64>();
    let l2: f64 = lambda_l2 * params.iter().map(|p| p * p).sum::<f64>();
    let value = CostValue { total: rmse + l1 + l2, rmse_db: rmse, l1, l2 };

    let Some(grad) = grad else {
        return value;
    };
    grad.iter_mut().zip(params).for_each(|(g, &p)| {
        let sign = if p > 0.0 { 1.0 } else if p < 0.0 { -1.0 } else { 0.0 };
        *g = lambda_l1 * sign + 2.0 * lambda_l2 * p;
    });
    if rmse == 0.0 {
        return value;
    }
    // ∂rmse/∂out = residual / (count · rmse), chained through the output scaling.
    let mut delta = out;
    delta *= scaling.scale_db / (count * rmse);

    let accumulate = |grad: &mut [f64], layer: usize, delta: ArrayView2<f64>, input: ArrayView2<f64>| {
        let (rows, fan_in, w, b) = layout.layer(layer);
        let gw = delta.t().dot(&input);
        for (g, v) in grad[w..w + rows * fan_in].iter_mut().zip(gw.iter()) {
            *g += v;
        }
        for (g, v) in grad[b..b + rows].iter_mut().zip(delta.sum_axis(Axis(0)).iter()) {
            *g += v;
        }
    };
    let weights = |layer: usize| {
        let (rows, fan_in, w, _) = layout.layer(layer);
        ArrayView2::from_shape((rows, fan_in), &params[w..w + rows * fan_in]).expect("layout shape")
    };

    accumulate(grad, 3, delta.view(), h2.view());
    let mut d2 = delta.dot(&weights(3));
    ndarray::Zip::from(&mut d2).and(&h2).for_each(|d, &h| *d *= 1.0 - h * h);
    accumulate(grad, 2, d2.view(), h1.view());
    if !cached {
        let mut d1 = d2.dot(&weights(2));
        ndarray::Zip::from(&mut d1).and(h1).for_each(|d, &h| *d *= 1.0 - h * h);
        accumulate(grad, 1, d1.view(), batch.x.view());
    }
    value
}

/// Cost of `net` on `batch` and, when requested, its gradient with frozen entries zeroed.
pub fn cost(net: &SurrogateNet, batch: &Batch, lambda_l1: f64, lambda_l2: f64, grad: Option<&mut [f64]>) -> CostValue {
    match grad {
        None => cost_with(net, net.params(), batch, None, lambda_l1, lambda_l2, None),
        Some(g) => {
            let v = cost_with(net, net.params(), batch, None, lambda_l1, lambda_l2, Some(&mut *g));
            g.iter_mut().zip(net.freeze_mask()).filter(|(_, &m)| m).for_each(|(g, _)| *g = 0.0);
            v
        }
    }
}

/// The cost as a function of the unfrozen parameters only.
pub struct NetObjective<'a> {
    net: &'a SurrogateNet,
    batch: &'a Batch,
    free: Vec<usize>,
    h1: Option<Array2<f64>>,
    lambda_l1: f64,
    lambda_l2: f64,
}

impl<'a> NetObjective<'a> {
    pub fn new(net: &'a SurrogateNet, batch: &'a Batch, lambda_l1: f64, lambda_l2: f64) -> Self {
        let free: Vec<usize> = (0..net.params().len()).filter(|&i| !net.freeze_mask()[i]).collect();
        let h1 = net.first_layer_frozen().then(|| net.layer_forward(net.params(), 1, batch.x.view(), true));
        Self { net, batch, free, h1, lambda_l1, lambda_l2 }
    }

    pub fn free_indices(&self) -> &[usize] {
        &self.free
    }

    /// Current values of the free parameters.
    pub fn initial_point(&self) -> Vec<f64> {
        self.free.iter().map(|&i| self.net.params()[i]).collect()
    }

    /// Full parameter vector with the free entries replaced by `x`.
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut full = self.net.params().to_vec();
        for (&i, &v) in self.free.iter().zip(x) {
            full[i] = v;
        }
        full
    }
}

impl Objective for NetObjective<'_> {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn eval(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, ObjectiveError> {
        let full = self.expand(x);
        let mut full_grad = vec![0.0; full.len()];
        let v = cost_with(self.net, &full, self.batch, self.h1.as_ref(), self.lambda_l1, self.lambda_l2, Some(&mut full_grad));
        for (g, &i) in grad.iter_mut().zip(&self.free) {
            *g = full_grad[i];
        }
        Ok(v.total)
    }
}
