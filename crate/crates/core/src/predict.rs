//! Anything that maps heater voltages to predicted dB weights, and RMSE scoring.

use crate::dataset::Record;
use crate::mesh::{eval_am, AnalyticalModelParams, MeshError, MeshTopology, VoltageVector, N_WEIGHTS};
use serde::{Deserialize, Serialize};

pub trait Predictor: Send + Sync {
    /// Row-major dB predictions for each drive vector.
    fn predict_batch(&self, v: &[VoltageVector]) -> Vec<[f64; N_WEIGHTS]>;

    fn predict(&self, v: &VoltageVector) -> [f64; N_WEIGHTS] {
        self.predict_batch(std::slice::from_ref(v))[0]
    }
}

/// A validated analytical model bound to its topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticalModel {
    pub topology: MeshTopology,
    pub params: AnalyticalModelParams,
}

impl AnalyticalModel {
    pub fn new(topology: MeshTopology, params: AnalyticalModelParams) -> Result<Self, MeshError> {
        params.validate()?;
        Ok(Self { topology, params })
    }
}

impl Predictor for AnalyticalModel {
    fn predict_batch(&self, v: &[VoltageVector]) -> Vec<[f64; N_WEIGHTS]> {
        v.iter()
            .map(|v| {
                *eval_am(&self.params, &self.topology, v)
                    .expect("validated analytical model evaluates finitely")
                    .as_array()
            })
            .collect()
    }
}

/// Overall and per-entry RMSE in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub rmse_db: f64,
    /// Row-major `(i, j)` breakdown.
    pub per_entry_db: [f64; N_WEIGHTS],
    pub count: usize,
}

pub fn rmse_of_predictions(pred: &[[f64; N_WEIGHTS]], records: &[Record]) -> RmseReport {
    assert_eq!(pred.len(), records.len());
    let mut per = [0.0; N_WEIGHTS];
    for (p, r) in pred.iter().zip(records) {
        for (k, acc) in per.iter_mut().enumerate() {
            let d = p[k] - r.w.as_array()[k];
            *acc += d * d;
        }
    }
    let n = records.len().max(1) as f64;
    let total: f64 = per.iter().sum();
    RmseReport {
        rmse_db: (total / (N_WEIGHTS as f64 * n)).sqrt(),
        per_entry_db: per.map(|s| (s / n).sqrt()),
        count: records.len(),
    }
}

pub fn evaluate(model: &dyn Predictor, records: &[Record]) -> RmseReport {
    let v: Vec<VoltageVector> = records.iter().map(|r| r.v).collect();
    rmse_of_predictions(&model.predict_batch(&v), records)
}
