//! Linear ensembles of surrogate networks and the percentile statistics used to
//! summarize repeated runs.

use crate::dataset::{subsample_train, Dataset, DatasetError, Record, Split};
use crate::mesh::{VoltageVector, N_WEIGHTS};
use crate::neural::SurrogateNet;
use crate::predict::{rmse_of_predictions, Predictor};
use crate::rng::{derive_seed, stream, tags};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble needs at least one member")]
    NoMembers,
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("ridge lambda grid must be nonempty and nonnegative")]
    Grid,
    #[error("ridge system is singular for every lambda in the grid")]
    Singular,
    #[error("cannot take percentiles of an empty group")]
    EmptyGroup,
    #[error("every member of run {run} failed to train")]
    RunFailed { run: usize },
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Simple,
    Weighted,
}

impl fmt::Display for Combiner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combiner::Simple => "simple",
            Combiner::Weighted => "weighted",
        })
    }
}

/// Member predictions: `preds[k][l]` is the output of member `k` on record `l`.
pub type MemberPredictions = Vec<Vec<[f64; N_WEIGHTS]>>;

/// Combination coefficients, either one per member or one per (entry, member).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    /// Row-major `rows × k`, with `rows` being 1 (shared) or 9 (per entry).
    pub values: Vec<f64>,
    pub per_entry: bool,
}

impl Coefficients {
    pub fn uniform(k: usize) -> Self {
        Self { values: vec![1.0 / k as f64; k], per_entry: false }
    }

    pub fn members(&self) -> usize {
        if self.per_entry {
            self.values.len() / N_WEIGHTS
        } else {
            self.values.len()
        }
    }

    fn get(&self, entry: usize, k: usize) -> f64 {
        if self.per_entry {
            self.values[entry * self.members() + k]
        } else {
            self.values[k]
        }
    }

    /// Combine the first `members()` rows of `preds`.
    pub fn combine(&self, preds: &[Vec<[f64; N_WEIGHTS]>]) -> Vec<[f64; N_WEIGHTS]> {
        let k = self.members();
        let len = preds.first().map_or(0, Vec::len);
        (0..len)
            .map(|l| std::array::from_fn(|e| (0..k).map(|m| self.get(e, m) * preds[m][l][e]).sum()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub members: Vec<SurrogateNet>,
    pub combiner: Combiner,
    pub coefficients: Coefficients,
    pub ridge_lambda: f64,
}

impl EnsembleModel {
    pub fn simple(members: Vec<SurrogateNet>) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::NoMembers);
        }
        let coefficients = Coefficients::uniform(members.len());
        Ok(Self { members, combiner: Combiner::Simple, coefficients, ridge_lambda: 0.0 })
    }

    pub fn weighted(members: Vec<SurrogateNet>, coefficients: Coefficients, ridge_lambda: f64) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::NoMembers);
        }
        let expected = members.len() * if coefficients.per_entry { N_WEIGHTS } else { 1 };
        if coefficients.values.len() != expected {
            return Err(EnsembleError::WeightCount { expected, got: coefficients.values.len() });
        }
        Ok(Self { members, combiner: Combiner::Weighted, coefficients, ridge_lambda })
    }

    /// Fit ridge weights for `members` on `validation`.
    pub fn fit(members: Vec<SurrogateNet>, validation: &[Record], ridge: &RidgeConfig) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::NoMembers);
        }
        let v: Vec<VoltageVector> = validation.iter().map(|r| r.v).collect();
        let preds: MemberPredictions = members.iter().map(|m| m.predict_batch(&v)).collect();
        let fit = fit_weights(&preds, validation, ridge)?;
        Self::weighted(members, fit.coefficients, fit.lambda)
    }
}

impl Predictor for EnsembleModel {
    fn predict_batch(&self, v: &[VoltageVector]) -> Vec<[f64; N_WEIGHTS]> {
        let preds: MemberPredictions = self.members.iter().map(|m| m.predict_batch(v)).collect();
        self.coefficients.combine(&preds)
    }
}

/// How the ridge parameter is chosen on the validation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LambdaSelection {
    /// Lowest RMSE of the fit on the validation set itself.
    InSample,
    /// Lowest K-fold cross-validated RMSE over validation records, then refit on all of them.
    CrossValidated { folds: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RidgeConfig {
    pub grid: Vec<f64>,
    pub per_entry: bool,
    pub selection: LambdaSelection,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self { grid: default_lambda_grid(), per_entry: false, selection: LambdaSelection::CrossValidated { folds: 5, seed: 0 } }
    }
}

/// `{0}` followed by ten log-spaced values from 1e-6 to 1e3.
pub fn default_lambda_grid() -> Vec<f64> {
    std::iter::once(0.0).chain((0..10).map(|i| 10f64.powf(-6.0 + i as f64))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub coefficients: Coefficients,
    pub lambda: f64,
    /// Selection score of each grid point, `NaN` where the system was singular.
    pub scores: Vec<f64>,
}

/// Cholesky solve of the symmetric positive definite `a` (row-major `n × n`); `None` if not positive definite.
pub fn cholesky_solve(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![0.0; n * n];
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..=i {
            let s = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 1e-13 * scale {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Some(x)
}

/// Normal equations `XᵀX`, `Xᵀy` over the chosen records and entries.
fn gram(preds: &[Vec<[f64; N_WEIGHTS]>], targets: &[Record], rows: &[usize], entries: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let k = preds.len();
    let mut xtx = vec![0.0; k * k];
    let mut xty = vec![0.0; k];
    for &l in rows {
        for &e in entries {
            let y = targets[l].w.as_array()[e];
            for a in 0..k {
                let xa = preds[a][l][e];
                xty[a] += xa * y;
                for b in 0..=a {
                    xtx[a * k + b] += xa * preds[b][l][e];
                }
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[b * k + a] = xtx[a * k + b];
        }
    }
    (xtx, xty)
}

fn solve_ridge(xtx: &[f64], xty: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let k = xty.len();
    let mut a = xtx.to_vec();
    (0..k).for_each(|i| a[i * k + i] += lambda);
    cholesky_solve(&a, xty)
}

/// Ridge coefficients for every entry group at one λ.
fn fit_at(preds: &[Vec<[f64; N_WEIGHTS]>], targets: &[Record], rows: &[usize], lambda: f64, per_entry: bool) -> Option<Coefficients> {
    let groups: Vec<Vec<usize>> =
        if per_entry { (0..N_WEIGHTS).map(|e| vec![e]).collect() } else { vec![(0..N_WEIGHTS).collect()] };
    let mut values = Vec::with_capacity(groups.len() * preds.len());
    for entries in &groups {
        let (xtx, xty) = gram(preds, targets, rows, entries);
        values.extend(solve_ridge(&xtx, &xty, lambda)?);
    }
    Some(Coefficients { values, per_entry })
}

fn sse_on(c: &Coefficients, preds: &[Vec<[f64; N_WEIGHTS]>], targets: &[Record], rows: &[usize]) -> f64 {
    let k = c.members();
    rows.iter()
        .map(|&l| {
            (0..N_WEIGHTS)
                .map(|e| {
                    let p: f64 = (0..k).map(|m| c.get(e, m) * preds[m][l][e]).sum();
                    (p - targets[l].w.as_array()[e]).powi(2)
                })
                .sum::<f64>()
        })
        .sum()
}

/// Ridge-regress the validation targets on the member predictions, no intercept.
///
/// A λ whose system is singular is skipped; if that leaves nothing, the
/// smallest positive grid value is tried before giving up.
pub fn fit_weights(preds: &[Vec<[f64; N_WEIGHTS]>], validation: &[Record], cfg: &RidgeConfig) -> Result<RidgeFit, EnsembleError> {
    if preds.is_empty() {
        return Err(EnsembleError::NoMembers);
    }
    if validation.is_empty() {
        return Err(EnsembleError::EmptyValidation);
    }
    if cfg.grid.is_empty() || cfg.grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(EnsembleError::Grid);
    }
    let n = validation.len();
    let all: Vec<usize> = (0..n).collect();
    let folds: Vec<(Vec<usize>, Vec<usize>)> = match cfg.selection {
        LambdaSelection::CrossValidated { folds, seed } if folds >= 2 && n >= folds => {
            let mut order = all.clone();
            order.shuffle(&mut stream(seed, tags::RIDGE_FOLDS));
            (0..folds)
                .map(|f| {
                    let (mut held, mut kept) = (Vec::new(), Vec::new());
                    for (i, &l) in order.iter().enumerate() {
                        if i % folds == f { held.push(l) } else { kept.push(l) }
                    }
                    held.sort_unstable();
                    kept.sort_unstable();
                    (kept, held)
                })
                .collect()
        }
        _ => vec![(all.clone(), all.clone())],
    };
    let scores: Vec<f64> = cfg
        .grid
        .iter()
        .map(|&lambda| {
            let mut sse = 0.0;
            let mut count = 0usize;
            for (fit_rows, score_rows) in &folds {
                let Some(c) = fit_at(preds, validation, fit_rows, lambda, cfg.per_entry) else {
                    return f64::NAN;
                };
                sse += sse_on(&c, preds, validation, score_rows);
                count += score_rows.len() * N_WEIGHTS;
            }
            (sse / count as f64).sqrt()
        })
        .collect();
    let best = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_nan())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| cfg.grid[i]);
    let candidates = best.into_iter().chain(cfg.grid.iter().copied().filter(|&l| l > 0.0).min_by(f64::total_cmp));
    for lambda in candidates {
        if let Some(coefficients) = fit_at(preds, validation, &all, lambda, cfg.per_entry) {
            if best != Some(lambda) {
                log::warn!("ridge system singular at every grid lambda; fell back to {lambda}");
            }
            return Ok(RidgeFit { coefficients, lambda, scores });
        }
    }
    Err(EnsembleError::Singular)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p10: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
}

/// Linear-interpolation percentile (`q` in [0, 100]) of sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn percentile_report(values: &[f64]) -> Result<Percentiles, EnsembleError> {
    if values.is_empty() {
        return Err(EnsembleError::EmptyGroup);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let p = |q| percentile_sorted(&v, q);
    Ok(Percentiles { p10: p(10.0), p25: p(25.0), p50: p(50.0), p75: p(75.0), p90: p(90.0) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub train_size: usize,
    pub k_max: usize,
    pub runs: usize,
    pub ridge: RidgeConfig,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self { train_size: 1000, k_max: 20, runs: 50, ridge: RidgeConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub combiner: Combiner,
    pub k: usize,
    pub run: usize,
    pub test_rmse_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub combiner: Combiner,
    pub k: usize,
    pub runs: usize,
    pub percentiles: Percentiles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub summary: Vec<SummaryRow>,
    /// Members that failed to train, as (run, member, message).
    pub failures: Vec<(usize, usize, String)>,
}

impl StudyReport {
    pub fn median(&self, combiner: Combiner, k: usize) -> Option<f64> {
        self.summary.iter().find(|s| s.combiner == combiner && s.k == k).map(|s| s.percentiles.p50)
    }

    pub fn write_rows_csv(&self, path: &Path) -> Result<(), EnsembleError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "combiner,k,run,test_rmse_db")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{:.4}", r.combiner, r.k, r.run, r.test_rmse_db)?;
        }
        Ok(f.flush()?)
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<(), EnsembleError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "combiner,k,runs,p10,p25,p50,p75,p90")?;
        for s in &self.summary {
            let p = s.percentiles;
            writeln!(f, "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4}", s.combiner, s.k, s.runs, p.p10, p.p25, p.p50, p.p75, p.p90)?;
        }
        Ok(f.flush()?)
    }
}

/// Repeated ensemble experiment.
///
/// `pool` supplies the train, validation and test splits. Each run draws its
/// own training subset of `train_size` records (sweep always kept) and trains
/// `k_max` members on it through `train_member(subset, member_seed)`. The
/// first K successful members form the size-K ensembles.
pub fn run_ensemble_study<F>(pool: &Dataset, cfg: &StudyConfig, train_member: F) -> Result<StudyReport, EnsembleError>
where
    F: Fn(&Dataset, u64) -> Result<SurrogateNet, String> + Sync,
{
    if cfg.k_max == 0 {
        return Err(EnsembleError::NoMembers);
    }
    let validation = pool.select(Split::Validation);
    let test = pool.select(Split::Test);
    if validation.is_empty() {
        return Err(EnsembleError::EmptyValidation);
    }
    let val_v: Vec<VoltageVector> = validation.iter().map(|r| r.v).collect();
    let test_v: Vec<VoltageVector> = test.iter().map(|r| r.v).collect();
    let base = pool.filter(Split::Train).concat(pool.filter(Split::Validation))?;

    type Member = Result<(Vec<[f64; N_WEIGHTS]>, Vec<[f64; N_WEIGHTS]>), String>;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for run in 0..cfg.runs {
        let run_seed = derive_seed(cfg.seed, &[run as u64]);
        let subset = subsample_train(&base, cfg.train_size, &mut stream(run_seed, tags::SUBSET))?;
        let members: Vec<Member> = (0..cfg.k_max)
            .into_par_iter()
            .map(|k| {
                let net = train_member(&subset, derive_seed(run_seed, &[k as u64 + 1]))?;
                Ok((net.predict_batch(&val_v), net.predict_batch(&test_v)))
            })
            .collect();
        let (mut val_preds, mut test_preds) = (Vec::new(), Vec::new());
        for (k, m) in members.into_iter().enumerate() {
            match m {
                Ok((v, t)) => {
                    val_preds.push(v);
                    test_preds.push(t);
                }
                Err(msg) => {
                    log::warn!("run {run} member {k} failed: {msg}");
                    failures.push((run, k, msg));
                }
            }
        }
        if val_preds.is_empty() {
            return Err(EnsembleError::RunFailed { run });
        }
        for k in 1..=val_preds.len() {
            let simple = Coefficients::uniform(k).combine(&test_preds[..k]);
            rows.push(StudyRow { combiner: Combiner::Simple, k, run, test_rmse_db: rmse_of_predictions(&simple, &test).rmse_db });
            let fit = fit_weights(&val_preds[..k], &validation, &cfg.ridge)?;
            let weighted = fit.coefficients.combine(&test_preds[..k]);
            rows.push(StudyRow { combiner: Combiner::Weighted, k, run, test_rmse_db: rmse_of_predictions(&weighted, &test).rmse_db });
        }
        log::info!("ensemble run {} of {} done", run + 1, cfg.runs);
    }

    let mut summary = Vec::new();
    for combiner in [Combiner::Simple, Combiner::Weighted] {
        for k in 1..=cfg.k_max {
            let values: Vec<f64> =
                rows.iter().filter(|r| r.combiner == combiner && r.k == k).map(|r| r.test_rmse_db).collect();
            if !values.is_empty() {
                summary.push(SummaryRow { combiner, k, runs: values.len(), percentiles: percentile_report(&values)? });
            }
        }
    }
    Ok(StudyReport { rows, summary, failures })
}
