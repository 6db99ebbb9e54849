//! Network training by L-BFGS with best-validation selection.

use super::cost::{cost, cost_with, Batch, CostError, NetObjective};
use super::net::{Hyperparams, NetError, SurrogateNet};
use crate::dataset::Record;
use crate::optim::{minimize_observed, Control, LbfgsConfig, Objective, OptimError, Termination};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("writing history: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub lbfgs: LbfgsConfig,
    /// Return the iterate with the lowest validation RMSE instead of the last one.
    pub early_selection: bool,
    /// Stop after this many iterations without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lbfgs: LbfgsConfig::default(),
            early_selection: true,
            patience: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    /// `NaN` when no validation set was given.
    pub validation_rmse_db: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: SurrogateNet,
    pub history: Vec<HistoryRow>,
    /// Iteration whose parameters were returned.
    pub selected_iteration: usize,
    pub iterations: usize,
    pub termination: Termination,
    pub train_rmse_db: f64,
    pub validation_rmse_db: Option<f64>,
}

/// Minimize the regularized cost of `net` on `train` over its unfrozen parameters.
///
/// Validation RMSE is tracked at every iteration, starting with the initial point.
/// A line-search breakdown is not an error: the best iterate found so far is kept
/// and reported with [`Termination::Stopped`].
pub fn train(
    net: &SurrogateNet,
    train: &[Record],
    validation: &[Record],
    hyper: &Hyperparams,
    settings: &TrainSettings,
) -> Result<TrainOutcome, TrainError> {
    let batch = Batch::new(net, train)?;
    let val_batch = if validation.is_empty() { None } else { Some(Batch::new(net, validation)?) };
    let obj = NetObjective::new(net, &batch, hyper.lambda_l1, hyper.lambda_l2);
    let x0 = obj.initial_point();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut since_best = 0usize;
    let val_rmse = |x: &[f64]| {
        val_batch.as_ref().map(|vb| cost_with(net, &obj.expand(x), vb, None, 0.0, 0.0, None).rmse_db)
    };

    let (x, iterations, termination) = if obj.dim() == 0 {
        let v = val_rmse(&x0);
        let mut g = [];
        let value = obj.eval(&x0, &mut g).expect("cost evaluation is infallible");
        history.push(HistoryRow { iteration: 0, objective: value, grad_norm: 0.0, validation_rmse_db: v.unwrap_or(f64::NAN) });
        (x0, 0, Termination::GradientTolerance)
    } else {
        let observer = |s: &crate::optim::IterState<'_>| {
            let v = val_rmse(s.x);
            history.push(HistoryRow {
                iteration: s.iteration,
                objective: s.value,
                grad_norm: s.grad_norm,
                validation_rmse_db: v.unwrap_or(f64::NAN),
            });
            let Some(v) = v else { return Control::Continue };
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, s.iteration, s.x.to_vec()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            match settings.patience {
                Some(p) if since_best >= p => Control::Stop,
                _ => Control::Continue,
            }
        };
        let (m, termination) = match minimize_observed(&obj, &x0, &settings.lbfgs, observer) {
            Ok(m) => {
                let t = m.termination;
                (m, t)
            }
            Err(OptimError::LineSearch { best }) => (*best, Termination::Stopped),
            Err(e) => return Err(e.into()),
        };
        (m.x, m.iterations, termination)
    };

    let (x, selected_iteration) = match best {
        Some((_, it, bx)) if settings.early_selection => (bx, it),
        _ => (x, iterations),
    };
    let mut out = net.clone();
    out.params_mut().copy_from_slice(&obj.expand(&x));
    let train_rmse_db = cost(&out, &batch, 0.0, 0.0, None).rmse_db;
    let validation_rmse_db = val_batch.as_ref().map(|vb| cost(&out, vb, 0.0, 0.0, None).rmse_db);
    Ok(TrainOutcome { net: out, history, selected_iteration, iterations, termination, train_rmse_db, validation_rmse_db })
}

pub fn write_history_csv(rows: &[HistoryRow], path: &Path) -> Result<(), std::io::Error> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,objective,grad_norm,validation_rmse_db")?;
    for r in rows {
        writeln!(f, "{},{:.10e},{:.6e},{:.6}", r.iteration, r.objective, r.grad_norm, r.validation_rmse_db)?;
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::mesh::{VoltageVector, WeightMatrixDb};
    use crate::neural::{init_params, FreezeSpec};
    use crate::predict::{evaluate, Predictor};
    use crate::rng::stream;
    use rand::Rng as _;

    fn teacher_data(teacher: &SurrogateNet, n: usize, seed: u64) -> Vec<Record> {
        let mut rng = stream(seed, 0);
        (0..n)
            .map(|_| {
                let v = VoltageVector::new(std::array::from_fn(|_| rng.random_range(0.0..2.0))).unwrap();
                let w = WeightMatrixDb::prediction(teacher.predict(&v)).unwrap();
                Record { v, w, split: Split::Train }
            })
            .collect()
    }

    fn teacher() -> SurrogateNet {
        let h = Hyperparams { n1: 6, n2: 6, lambda_l1: 0.0, lambda_l2: 0.0 };
        let mut t = init_params(&h, 11, 1.0).unwrap();
        let b3 = t.layout().b3;
        t.params_mut()[b3..].iter_mut().for_each(|b| *b -= 10.0);
        t
    }

    #[test]
    fn student_recovers_teacher() {
        let t = teacher();
        let train_set = teacher_data(&t, 400, 1);
        let test_set = teacher_data(&t, 200, 2);
        // A somewhat wider student avoids the symmetric local minima of an exact-size one.
        let h = Hyperparams { n1: 12, n2: 12, lambda_l1: 0.0, lambda_l2: 0.0 };
        let student = init_params(&h, 12, 1.0).unwrap();
        let settings = TrainSettings {
            lbfgs: LbfgsConfig { max_iter: 4000, ..LbfgsConfig::default() },
            early_selection: false,
            patience: None,
        };
        let out = train(&student, &train_set, &[], &h, &settings).unwrap();
        let rmse = evaluate(&out.net, &test_set).rmse_db;
        assert!(rmse < 0.05, "student test RMSE {rmse} after {} iterations ({:?})", out.iterations, out.termination);
    }

    #[test]
    fn fully_frozen_net_is_returned_unchanged() {
        let t = teacher();
        let data = teacher_data(&t, 30, 3);
        let h = Hyperparams { n1: 4, n2: 3, lambda_l1: 1e-3, lambda_l2: 1e-4 };
        let mut net = init_params(&h, 2, 1.0).unwrap();
        net.freeze(&FreezeSpec { layers: vec![1, 2, 3], fraction: 1.0 });
        let out = train(&net, &data, &data, &h, &TrainSettings::default()).unwrap();
        assert_eq!(out.net.params(), net.params());
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn frozen_layer_is_untouched_and_selection_is_best() {
        let t = teacher();
        let data = teacher_data(&t, 60, 4);
        let val = teacher_data(&t, 20, 5);
        let h = Hyperparams { n1: 5, n2: 5, lambda_l1: 0.0, lambda_l2: 0.0 };
        let mut net = init_params(&h, 3, 1.0).unwrap();
        net.freeze(&FreezeSpec::default());
        let settings = TrainSettings { lbfgs: LbfgsConfig { max_iter: 50, ..LbfgsConfig::default() }, ..TrainSettings::default() };
        let out = train(&net, &data, &val, &h, &settings).unwrap();
        let w2 = net.layout().w2;
        assert_eq!(&out.net.params()[..w2], &net.params()[..w2]);
        let min = out.history.iter().map(|r| r.validation_rmse_db).fold(f64::INFINITY, f64::min);
        assert_eq!(out.validation_rmse_db, Some(min));
        assert_eq!(out.history[0].iteration, 0);
    }

    #[test]
    fn patience_stops_early() {
        let t = teacher();
        let data = teacher_data(&t, 60, 6);
        // A validation set from a different function stops improving quickly.
        let other = teacher_data(&init_params(&Hyperparams { n1: 6, n2: 6, lambda_l1: 0.0, lambda_l2: 0.0 }, 99, 1.0).unwrap(), 20, 7);
        let h = Hyperparams { n1: 5, n2: 5, lambda_l1: 0.0, lambda_l2: 0.0 };
        let net = init_params(&h, 3, 1.0).unwrap();
        let settings = TrainSettings { patience: Some(5), ..TrainSettings::default() };
        let out = train(&net, &data, &other, &h, &settings).unwrap();
        assert!(out.iterations <= out.selected_iteration + 5, "{} {}", out.iterations, out.selected_iteration);
    }
}
