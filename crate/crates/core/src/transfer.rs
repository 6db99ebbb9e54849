//! Transfer learning from the analytical model: fit it, sample synthetic
//! measurements from it, pre-train a network on those, freeze the input side
//! and re-train on the real measurements.

use crate::dataset::{Dataset, Provenance, Record, Split};
use crate::mesh::{eval_am, MeshError, MeshTopology, VoltageVector, N_MZI};
use crate::neural::{init_params, train, FreezeSpec, Hyperparams, NetError, SurrogateNet, TrainError, TrainOutcome, TrainSettings};
use crate::optim::{fit_am_multistart, AmFit, AmFitConfig, FitError};
use crate::predict::{evaluate, AnalyticalModel};
use crate::rng::{stream, tags, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Above this drop fraction the fitted model is considered broken.
pub const MAX_DROP_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TlConfig {
    pub synth_count: usize,
    /// Synthetic records with any weight below this are discarded.
    pub synth_filter_floor_db: f64,
    pub freeze: FreezeSpec,
    pub am: AmFitConfig,
    pub pretrain: TrainSettings,
    pub retrain: TrainSettings,
    /// Multiplier on the fan-in scaled initialization.
    pub init_gain: f64,
    /// Write every synthetic record to `synth.csv`, not just the digest.
    pub dump_synthetic: bool,
    pub seed: u64,
}

impl Default for TlConfig {
    fn default() -> Self {
        Self {
            synth_count: 50_000,
            synth_filter_floor_db: -60.0,
            freeze: FreezeSpec::default(),
            am: AmFitConfig::default(),
            pretrain: TrainSettings::default(),
            retrain: TrainSettings::default(),
            init_gain: 1.0,
            dump_synthetic: false,
            seed: 0,
        }
    }
}

impl TlConfig {
    pub fn validate(&self) -> Result<(), TlError> {
        let bad = |msg: String| TlError::Config(msg);
        if self.synth_count == 0 {
            return Err(bad("synth_count must be at least 1".into()));
        }
        if self.synth_filter_floor_db.is_nan() || self.synth_filter_floor_db >= 0.0 {
            return Err(bad(format!("synth_filter_floor_db {} must be below 0 dB", self.synth_filter_floor_db)));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return Err(bad(format!("init_gain {} must be positive", self.init_gain)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FitAm,
    Synthesize,
    Pretrain,
    Retrain,
    Artifacts,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::FitAm => "fit_am",
            Stage::Synthesize => "synthesize",
            Stage::Pretrain => "pretrain",
            Stage::Retrain => "retrain",
            Stage::Artifacts => "artifacts",
        })
    }
}

#[derive(Debug, Error)]
pub enum TlError {
    #[error("invalid transfer config: {0}")]
    Config(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("synthetic filter dropped {dropped} of {requested} records ({:.1}%); the fitted model looks pathological", 100.0 * *dropped as f64 / *requested as f64)]
    Pathological { dropped: usize, requested: usize },
}

fn at<E: std::error::Error + Send + Sync + 'static>(stage: Stage) -> impl FnOnce(E) -> TlError {
    move |e| TlError::Stage { stage, source: Box::new(e) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub requested: usize,
    pub kept: usize,
    pub dropped: usize,
    pub drop_fraction: f64,
}

/// Sample `count` voltage vectors uniformly over the drive range, evaluate the
/// model and keep only records whose weights all reach `floor_db`.
pub fn generate_synthetic(
    am: &AnalyticalModel,
    count: usize,
    v_max: f64,
    floor_db: f64,
    rng: &mut Rng,
) -> Result<(Dataset, FilterReport), TlError> {
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let v: [f64; N_MZI] = std::array::from_fn(|_| rng.random_range(0.0..=v_max));
        let v = VoltageVector::with_max(v, v_max).map_err(at(Stage::Synthesize))?;
        let w = eval_am(&am.params, &am.topology, &v).map_err(at::<MeshError>(Stage::Synthesize))?;
        if w.min() >= floor_db {
            records.push(Record { v, w, split: Split::Train });
        }
    }
    let dropped = count - records.len();
    let report = FilterReport { requested: count, kept: records.len(), dropped, drop_fraction: dropped as f64 / count as f64 };
    if report.drop_fraction > MAX_DROP_FRACTION {
        return Err(TlError::Pathological { dropped, requested: count });
    }
    log::info!("synthetic filter kept {} of {count} records", report.kept);
    Ok((Dataset::new(Provenance::Synthetic, records), report))
}

/// SHA-256 of the dataset's CSV serialization.
pub fn dataset_digest(ds: &Dataset) -> Result<String, crate::dataset::DatasetError> {
    let mut buf = Vec::new();
    ds.write_csv(&mut buf)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

#[derive(Debug, Clone)]
pub struct TlOutcome {
    pub am: AmFit,
    pub synthetic: Dataset,
    pub filter: FilterReport,
    pub synth_digest: String,
    pub pretrained: TrainOutcome,
    pub final_: TrainOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlMetrics {
    pub am_train_rmse_db: f64,
    pub am_validation_rmse_db: Option<f64>,
    pub am_test_rmse_db: Option<f64>,
    pub synth_filter: FilterReport,
    pub synth_sha256: String,
    pub pretrain_iterations: usize,
    pub pretrain_validation_rmse_db: Option<f64>,
    pub retrain_iterations: usize,
    pub train_rmse_db: f64,
    pub validation_rmse_db: Option<f64>,
    pub test_rmse_db: Option<f64>,
}

impl TlOutcome {
    pub fn net(&self) -> &SurrogateNet {
        &self.final_.net
    }

    pub fn metrics(&self, test: &[Record]) -> TlMetrics {
        let test = (!test.is_empty()).then_some(test);
        TlMetrics {
            am_train_rmse_db: self.am.train_rmse_db,
            am_validation_rmse_db: self.am.validation_rmse_db,
            am_test_rmse_db: test.map(|t| evaluate(&self.am.model, t).rmse_db),
            synth_filter: self.filter,
            synth_sha256: self.synth_digest.clone(),
            pretrain_iterations: self.pretrained.iterations,
            pretrain_validation_rmse_db: self.pretrained.validation_rmse_db,
            retrain_iterations: self.final_.iterations,
            train_rmse_db: self.final_.train_rmse_db,
            validation_rmse_db: self.final_.validation_rmse_db,
            test_rmse_db: test.map(|t| evaluate(self.net(), t).rmse_db),
        }
    }

    /// Write am.json, synth.sha256 (and synth.csv when asked), pretrained.json,
    /// final.json and metrics.json into `dir`.
    pub fn save_artifacts(&self, dir: &Path, test: &[Record], dump_synthetic: bool) -> Result<TlMetrics, TlError> {
        let io = at::<std::io::Error>(Stage::Artifacts);
        std::fs::create_dir_all(dir).map_err(at(Stage::Artifacts))?;
        let am = serde_json::to_string_pretty(&self.am.model).map_err(at(Stage::Artifacts))?;
        std::fs::write(dir.join("am.json"), am).map_err(at(Stage::Artifacts))?;
        std::fs::write(dir.join("synth.sha256"), format!("{}  synth.csv\n", self.synth_digest)).map_err(io)?;
        if dump_synthetic {
            self.synthetic.save(&dir.join("synth.csv")).map_err(at(Stage::Artifacts))?;
        }
        self.pretrained.net.save(&dir.join("pretrained.json")).map_err(at::<NetError>(Stage::Artifacts))?;
        self.final_.net.save(&dir.join("final.json")).map_err(at::<NetError>(Stage::Artifacts))?;
        let metrics = self.metrics(test);
        let json = serde_json::to_string_pretty(&metrics).map_err(at(Stage::Artifacts))?;
        std::fs::write(dir.join("metrics.json"), json).map_err(at(Stage::Artifacts))?;
        Ok(metrics)
    }
}

/// Run the four stages in order on the train and validation splits of `exp`.
pub fn train_tl_nn(exp: &Dataset, topology: &MeshTopology, hyper: &Hyperparams, cfg: &TlConfig) -> Result<TlOutcome, TlError> {
    cfg.validate()?;
    let train_set = exp.select(Split::Train);
    let validation = exp.select(Split::Validation);
    let am = fit_am_multistart(&train_set, &validation, topology, &cfg.am, cfg.seed).map_err(at::<FitError>(Stage::FitAm))?;
    train_tl_nn_from_am(exp, am, hyper, cfg)
}

/// Stages two to four, starting from an analytical model already fitted to `exp`.
pub fn train_tl_nn_from_am(exp: &Dataset, am: AmFit, hyper: &Hyperparams, cfg: &TlConfig) -> Result<TlOutcome, TlError> {
    cfg.validate()?;
    hyper.validate().map_err(at(Stage::Pretrain))?;
    let train_set = exp.select(Split::Train);
    let validation = exp.select(Split::Validation);

    let v_max = cfg.am.init.v_max;
    let mut rng = stream(cfg.seed, tags::SYNTHETIC);
    let (synthetic, filter) = generate_synthetic(&am.model, cfg.synth_count, v_max, cfg.synth_filter_floor_db, &mut rng)?;
    let synth_digest = dataset_digest(&synthetic).map_err(at(Stage::Synthesize))?;

    let mut net = init_params(hyper, cfg.seed, cfg.init_gain).map_err(at(Stage::Pretrain))?;
    net.freeze(&FreezeSpec::none());
    let pretrained = train(&net, synthetic.records(), &validation, hyper, &cfg.pretrain).map_err(at::<TrainError>(Stage::Pretrain))?;

    let mut start = pretrained.net.clone();
    start.freeze(&cfg.freeze);
    let final_ = train(&start, &train_set, &validation, hyper, &cfg.retrain).map_err(at::<TrainError>(Stage::Retrain))?;
    let frozen_kept = final_
        .net
        .params()
        .iter()
        .zip(start.params())
        .zip(start.freeze_mask())
        .all(|((a, b), &m)| !m || a.to_bits() == b.to_bits());
    assert!(frozen_kept, "re-training modified a frozen parameter");

    Ok(TlOutcome { am, synthetic, filter, synth_digest, pretrained, final_ })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AmInit;

    fn model(alpha: f64) -> AnalyticalModel {
        let mut phi0 = [0.0; N_MZI];
        phi0.iter_mut().enumerate().for_each(|(m, p)| *p = 0.7 * m as f64);
        let params = AmInit { alpha, ..AmInit::default() }.params(phi0);
        AnalyticalModel::new(MeshTopology::crossbar(), params).unwrap()
    }

    #[test]
    fn unbounded_floor_keeps_everything() {
        let (ds, report) = generate_synthetic(&model(0.25), 500, 2.0, f64::NEG_INFINITY, &mut stream(1, 0)).unwrap();
        assert_eq!(ds.len(), 500);
        assert_eq!(report.dropped, 0);
        assert_eq!(ds.provenance(), Provenance::Synthetic);
    }

    #[test]
    fn retained_records_respect_floor() {
        let (ds, report) = generate_synthetic(&model(0.25), 2000, 2.0, -30.0, &mut stream(2, 0)).unwrap();
        assert!(report.dropped > 0, "floor should bind for this check to mean anything");
        assert_eq!(report.kept + report.dropped, 2000);
        assert!(ds.records().iter().all(|r| r.w.min() >= -30.0));
        assert!(ds.records().iter().all(|r| r.v.as_array().iter().all(|&v| (0.0..=2.0).contains(&v))));
    }

    #[test]
    fn pathological_model_aborts() {
        // Every weight sits near -20 dB, far below a -3 dB floor.
        let err = generate_synthetic(&model(0.01), 100, 2.0, -3.0, &mut stream(3, 0)).unwrap_err();
        assert!(matches!(err, TlError::Pathological { requested: 100, .. }), "{err}");
    }

    #[test]
    fn synthetic_draws_are_seeded() {
        let a = generate_synthetic(&model(0.25), 50, 2.0, -60.0, &mut stream(4, tags::SYNTHETIC)).unwrap().0;
        let b = generate_synthetic(&model(0.25), 50, 2.0, -60.0, &mut stream(4, tags::SYNTHETIC)).unwrap().0;
        assert_eq!(dataset_digest(&a).unwrap(), dataset_digest(&b).unwrap());
    }

    #[test]
    fn config_checks() {
        assert!(TlConfig::default().validate().is_ok());
        assert!(TlConfig { synth_count: 0, ..TlConfig::default() }.validate().is_err());
        assert!(TlConfig { synth_filter_floor_db: 1.0, ..TlConfig::default() }.validate().is_err());
    }
}
