//! Least-squares fitting of the analytical model to dB measurements.
//!
//! The optimizer works on unconstrained coordinates: `ln α = −softplus(−θ)`
//! keeps `α ∈ (0, 1)` and behaves like a plain log for lossy paths, and
//! `ER = 1 + exp(θ)` keeps the extinction ratio above one. Phases are used as is.

use super::lbfgs::{minimize, LbfgsConfig, Objective, ObjectiveError, OptimError, Termination};
use crate::dataset::Record;
use crate::mesh::{
    imbalance_derivative, layout, weight_sensitivities, AnalyticalModelParams, MeshError, MeshTopology, N_AM_PARAMS,
    N_MZI, N_WEIGHTS, V_MAX,
};
use crate::predict::{evaluate, AnalyticalModel};
use crate::rng::{stream, tags};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("training split is empty")]
    EmptyTrain,
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    y + (-(-y).exp_m1()).ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Map natural parameters to optimizer coordinates.
pub fn to_unconstrained(p: &AnalyticalModelParams) -> Vec<f64> {
    let mut x = p.to_vec();
    for k in 0..N_WEIGHTS {
        let a = p.alpha[k].min(1.0 - 1e-15);
        x[layout::alpha(k)] = -softplus_inv(-a.ln());
    }
    x[layout::ER] = (p.er - 1.0).ln();
    x
}

pub fn from_unconstrained(x: &[f64]) -> AnalyticalModelParams {
    let mut nat = x.to_vec();
    for k in 0..N_WEIGHTS {
        nat[layout::alpha(k)] = (-softplus(-x[layout::alpha(k)])).exp();
    }
    nat[layout::ER] = 1.0 + x[layout::ER].exp();
    AnalyticalModelParams::from_slice(&nat)
}

/// Mean squared dB error of the analytical model over a set of records, in unconstrained coordinates.
///
/// Its minimizers coincide with those of the RMSE; the square avoids the cusp of
/// the square root at an exact fit.
pub struct AmObjective<'a> {
    pub topology: &'a MeshTopology,
    pub records: &'a [Record],
}

impl Objective for AmObjective<'_> {
    fn dim(&self) -> usize {
        N_AM_PARAMS
    }

    fn eval(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, ObjectiveError> {
        let p = from_unconstrained(x);
        let r = p.imbalance();
        let scale = 2.0 / (N_WEIGHTS * self.records.len()) as f64;
        let mut sse = 0.0;
        let mut g_ln_alpha = [0.0; N_WEIGHTS];
        let mut g_r = 0.0;
        let mut g_phase_v2 = [[0.0; N_MZI]; N_MZI];
        let mut g_phi0 = [0.0; N_MZI];
        let mut d_phase = [[0.0; N_MZI]; N_WEIGHTS];
        for rec in self.records {
            let phases = p.phases(&rec.v);
            let sens = weight_sensitivities(&p.alpha, r, self.topology, &phases, &mut d_phase)
                .map_err(|e| ObjectiveError(e.to_string()))?;
            let v2 = rec.v.squared();
            let mut g_m = [0.0; N_MZI];
            for k in 0..N_WEIGHTS {
                let res = sens[k].db - rec.w.as_array()[k];
                sse += res * res;
                let w = scale * res;
                g_ln_alpha[k] += w * sens[k].d_ln_alpha;
                g_r += w * sens[k].d_imbalance;
                for m in 0..N_MZI {
                    g_m[m] += w * d_phase[k][m];
                }
            }
            for m in 0..N_MZI {
                g_phi0[m] += g_m[m];
                for n in 0..N_MZI {
                    g_phase_v2[m][n] += g_m[m] * v2[n];
                }
            }
        }
        for k in 0..N_WEIGHTS {
            grad[layout::alpha(k)] = g_ln_alpha[k] * sigmoid(-x[layout::alpha(k)]);
        }
        grad[layout::ER] = g_r * imbalance_derivative(p.er) * (p.er - 1.0);
        for m in 0..N_MZI {
            grad[layout::phi0(m)] = g_phi0[m];
            for n in 0..N_MZI {
                grad[layout::phi2(m, n)] = g_phase_v2[m][n];
            }
        }
        Ok(sse / (N_WEIGHTS * self.records.len()) as f64)
    }
}

/// Starting point of every restart; the static phases are drawn uniformly per restart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmInit {
    pub alpha: f64,
    pub er_db: f64,
    /// Diagonal of φ²; `None` means half a period over the drive range, π/V_max².
    pub phi2_diag: Option<f64>,
    pub v_max: f64,
}

impl Default for AmInit {
    fn default() -> Self {
        Self { alpha: 0.25, er_db: 30.0, phi2_diag: None, v_max: V_MAX }
    }
}

impl AmInit {
    pub fn params(&self, phi0: [f64; N_MZI]) -> AnalyticalModelParams {
        let diag = self.phi2_diag.unwrap_or(PI / (self.v_max * self.v_max));
        let mut phi2 = [[0.0; N_MZI]; N_MZI];
        for (m, row) in phi2.iter_mut().enumerate() {
            row[m] = diag;
        }
        AnalyticalModelParams { alpha: [self.alpha; N_WEIGHTS], er: 10f64.powf(self.er_db / 10.0), phi0, phi2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmFitConfig {
    pub restarts: usize,
    pub init: AmInit,
    pub lbfgs: LbfgsConfig,
}

impl Default for AmFitConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            init: AmInit::default(),
            lbfgs: LbfgsConfig { max_iter: 3000, grad_tol: 1e-10, rel_ftol: 1e-15, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub train_rmse_db: f64,
    pub validation_rmse_db: Option<f64>,
    pub iterations: usize,
    pub termination: Option<Termination>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmFit {
    pub model: AnalyticalModel,
    pub train_rmse_db: f64,
    pub validation_rmse_db: Option<f64>,
    pub best_restart: usize,
    pub restarts: Vec<RestartSummary>,
}

/// Single-start fit from `init`.
pub fn fit_am(
    train: &[Record],
    topology: &MeshTopology,
    init: &AnalyticalModelParams,
    lbfgs: &LbfgsConfig,
) -> Result<(AnalyticalModel, RestartSummary), FitError> {
    if train.is_empty() {
        return Err(FitError::EmptyTrain);
    }
    init.validate()?;
    let obj = AmObjective { topology, records: train };
    let (x, iterations, termination) = match minimize(&obj, &to_unconstrained(init), lbfgs) {
        Ok(m) => (m.x, m.iterations, Some(m.termination)),
        Err(e) => {
            let m = e.into_best()?;
            (m.x, m.iterations, None)
        }
    };
    let model = AnalyticalModel::new(topology.clone(), from_unconstrained(&x))?;
    let train_rmse_db = evaluate(&model, train).rmse_db;
    Ok((model, RestartSummary { train_rmse_db, validation_rmse_db: None, iterations, termination }))
}

/// Multi-start fit; keeps the restart with the lowest validation RMSE (training RMSE when no validation set).
pub fn fit_am_multistart(
    train: &[Record],
    validation: &[Record],
    topology: &MeshTopology,
    cfg: &AmFitConfig,
    seed: u64,
) -> Result<AmFit, FitError> {
    if train.is_empty() {
        return Err(FitError::EmptyTrain);
    }
    let mut rng = stream(seed, tags::AM_RESTARTS);
    let inits: Vec<AnalyticalModelParams> = (0..cfg.restarts.max(1))
        .map(|_| {
            let mut phi0 = [0.0; N_MZI];
            for p in &mut phi0 {
                *p = rng.random_range(0.0..2.0 * PI);
            }
            cfg.init.params(phi0)
        })
        .collect();
    let runs: Vec<(AnalyticalModel, RestartSummary)> = inits
        .par_iter()
        .map(|init| {
            let (model, mut summary) = fit_am(train, topology, init, &cfg.lbfgs)?;
            if !validation.is_empty() {
                summary.validation_rmse_db = Some(evaluate(&model, validation).rmse_db);
            }
            Ok((model, summary))
        })
        .collect::<Result<_, FitError>>()?;
    let score = |s: &RestartSummary| s.validation_rmse_db.unwrap_or(s.train_rmse_db);
    let best_restart = (0..runs.len())
        .min_by(|&a, &b| score(&runs[a].1).total_cmp(&score(&runs[b].1)))
        .expect("at least one restart");
    let restarts: Vec<RestartSummary> = runs.iter().map(|(_, s)| s.clone()).collect();
    let (model, best) = runs.into_iter().nth(best_restart).expect("index in range");
    Ok(AmFit {
        train_rmse_db: best.train_rmse_db,
        validation_rmse_db: best.validation_rmse_db,
        model,
        best_restart,
        restarts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chip::{random_protocol, sweep_protocol, ChipConfig, SweepSpec, VirtualChip};
    use crate::optim::check_gradient;

    fn am_chip() -> VirtualChip {
        let c = VirtualChip::generate(&ChipConfig::default(), 21).unwrap();
        VirtualChip::from_am(c.topology, c.base, 0.0, 0).unwrap()
    }

    #[test]
    fn reparameterization_round_trips() {
        let c = am_chip();
        let back = from_unconstrained(&to_unconstrained(&c.base));
        for (a, b) in back.to_vec().iter().zip(c.base.to_vec()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let c = am_chip();
        let ds = random_protocol(&c, 50, &mut c.noise_stream(0)).unwrap();
        let target = VirtualChip::generate(&ChipConfig::default(), 99).unwrap();
        let recs: Vec<Record> = ds.records().to_vec();
        let obj = AmObjective { topology: &c.topology, records: &recs };
        let x = to_unconstrained(&target.base);
        let r = check_gradient(&obj, &x, 1e-6, 1.0).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn recovers_from_near_truth() {
        let c = am_chip();
        let mut rng = c.noise_stream(1);
        let ds = sweep_protocol(&c, &SweepSpec::default(), &mut rng)
            .unwrap()
            .concat(random_protocol(&c, 300, &mut rng).unwrap())
            .unwrap();
        let mut init = c.base.clone();
        init.phi0.iter_mut().for_each(|p| *p += 0.05);
        init.phi2[0][1] += 0.02;
        init.alpha[3] *= 1.1;
        init.er *= 0.8;
        let (model, s) = fit_am(ds.records(), &c.topology, &init, &AmFitConfig::default().lbfgs).unwrap();
        assert!(s.train_rmse_db < 1e-6, "{s:?}");
        assert!(model.params.alpha.iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn empty_train_is_rejected() {
        let c = am_chip();
        assert!(matches!(fit_am_multistart(&[], &[], &c.topology, &AmFitConfig::default(), 0), Err(FitError::EmptyTrain)));
    }
}
