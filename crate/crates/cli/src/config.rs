//! Run configuration, read from a TOML document with one section per stage.
//!
//! Every key has a default, so an empty file is a valid configuration.

use crate::error::CliError;
use mzimesh::chip::{ChipConfig, DatasetSpec};
use mzimesh::ensemble::RidgeConfig;
use mzimesh::neural::{FreezeSpec, Hyperparams, OutputScaling, TrainSettings};
use mzimesh::optim::{AmFitConfig, LbfgsConfig};
use mzimesh::transfer::TlConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Root of every artifact written by the commands.
    pub out: PathBuf,
    /// Training records used by fit-am, train-nn and train-tl, sweep included.
    pub train_size: usize,
    pub paths: Paths,
    pub chip: ChipConfig,
    pub dataset: DatasetSpec,
    pub am: AmFitConfig,
    pub nn: NnSection,
    pub tl: TlSection,
    pub scarcity: ScarcitySection,
    pub ensemble: EnsembleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            train_size: 4400,
            paths: Paths::default(),
            chip: ChipConfig::default(),
            dataset: DatasetSpec::default(),
            am: AmFitConfig::default(),
            nn: NnSection::default(),
            tl: TlSection::default(),
            scarcity: ScarcitySection::default(),
            ensemble: EnsembleSection::default(),
        }
    }
}

/// Input locations; unset paths default to files under `out`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub chip: Option<PathBuf>,
    /// Training pool: train and validation records.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NnSection {
    /// Used below `full_from` training records.
    pub hyper_scarce: Hyperparams,
    pub hyper_full: Hyperparams,
    pub full_from: usize,
    pub train: TrainSettings,
    pub init_gain: f64,
    pub output: OutputScaling,
}

impl Default for NnSection {
    fn default() -> Self {
        Self {
            hyper_scarce: Hyperparams::NN_SCARCE,
            hyper_full: Hyperparams::NN_FULL,
            full_from: 4400,
            train: TrainSettings::default(),
            init_gain: 1.0,
            output: OutputScaling::RAW,
        }
    }
}

impl NnSection {
    pub fn hyper_for(&self, train_size: usize) -> Hyperparams {
        if train_size >= self.full_from {
            self.hyper_full
        } else {
            self.hyper_scarce
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TlSection {
    pub hyper: Hyperparams,
    pub synth_count: usize,
    pub synth_filter_floor_db: f64,
    pub freeze: FreezeSpec,
    pub pretrain: TrainSettings,
    pub retrain: TrainSettings,
    pub init_gain: f64,
    pub dump_synthetic: bool,
}

impl Default for TlSection {
    fn default() -> Self {
        let tl = TlConfig::default();
        Self {
            hyper: Hyperparams::TL,
            synth_count: tl.synth_count,
            synth_filter_floor_db: tl.synth_filter_floor_db,
            freeze: tl.freeze,
            pretrain: tl.pretrain,
            retrain: tl.retrain,
            init_gain: tl.init_gain,
            dump_synthetic: tl.dump_synthetic,
        }
    }
}

impl TlSection {
    pub fn pipeline(&self, am: &AmFitConfig, seed: u64) -> TlConfig {
        TlConfig {
            synth_count: self.synth_count,
            synth_filter_floor_db: self.synth_filter_floor_db,
            freeze: self.freeze.clone(),
            am: am.clone(),
            pretrain: self.pretrain.clone(),
            retrain: self.retrain.clone(),
            init_gain: self.init_gain,
            dump_synthetic: self.dump_synthetic,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Am,
    Nn,
    TlNn,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Am => "am",
            Family::Nn => "nn",
            Family::TlNn => "tl_nn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScarcitySection {
    pub sizes: Vec<usize>,
    pub seeds: usize,
    pub families: Vec<Family>,
}

impl Default for ScarcitySection {
    fn default() -> Self {
        Self { sizes: vec![400, 1000, 4400], seeds: 20, families: vec![Family::Am, Family::Nn, Family::TlNn] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    /// `nn` or `tl_nn`.
    pub family: Family,
    pub train_size: usize,
    pub k_max: usize,
    pub runs: usize,
    pub ridge: RidgeConfig,
    /// Member architecture; unset means the family default for `train_size`.
    pub hyper: Option<Hyperparams>,
    /// Member training settings; unset means the `[nn]` (or `[tl]` re-training) settings.
    pub train: Option<TrainSettings>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            family: Family::Nn,
            train_size: 1000,
            k_max: 20,
            runs: 50,
            ridge: RidgeConfig::default(),
            hyper: None,
            train: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: &str| Err(CliError::Config(msg.to_string()));
        if self.scarcity.sizes.is_empty() || self.scarcity.seeds == 0 || self.scarcity.families.is_empty() {
            return bad("scarcity grid must have sizes, seeds and families");
        }
        if self.ensemble.k_max == 0 || self.ensemble.runs == 0 {
            return bad("ensemble needs k_max and runs of at least 1");
        }
        if self.ensemble.family == Family::Am {
            return bad("ensemble family must be nn or tl_nn");
        }
        if self.train_size == 0 || self.scarcity.sizes.contains(&0) || self.ensemble.train_size == 0 {
            return bad("training sizes must be positive");
        }
        for h in [&self.nn.hyper_scarce, &self.nn.hyper_full, &self.tl.hyper].into_iter().chain(&self.ensemble.hyper) {
            h.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        self.tl.pipeline(&self.am, self.seed).validate().map_err(|e| CliError::Config(e.to_string()))?;
        for l in [&self.nn.train.lbfgs, &self.tl.pretrain.lbfgs, &self.tl.retrain.lbfgs, &self.am.lbfgs] {
            check_lbfgs(l)?;
        }
        Ok(())
    }

    pub fn chip_path(&self) -> PathBuf {
        self.paths.chip.clone().unwrap_or_else(|| self.out.join("chip.json"))
    }

    pub fn train_path(&self) -> PathBuf {
        self.paths.train.clone().unwrap_or_else(|| self.out.join("train.csv"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.paths.test.clone().unwrap_or_else(|| self.out.join("test.csv"))
    }
}

fn check_lbfgs(l: &LbfgsConfig) -> Result<(), CliError> {
    if l.memory == 0 || !(0.0 < l.c1 && l.c1 < l.c2 && l.c2 < 1.0) {
        return Err(CliError::Config(format!("invalid L-BFGS settings: memory {}, c1 {}, c2 {}", l.memory, l.c1, l.c2)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn shipped_configs_parse() {
        for text in [include_str!("../../../configs/default.toml"), include_str!("../../../configs/desk.toml")] {
            RunConfig::from_toml(text).unwrap();
        }
    }

    #[test]
    fn default_file_matches_built_in_defaults() {
        let from_file = RunConfig::from_toml(include_str!("../../../configs/default.toml")).unwrap();
        assert_eq!(from_file, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_toml("[nn]\nwidth = 3"), Err(CliError::Config(_))));
    }

    #[test]
    fn bad_grids_are_rejected() {
        assert!(RunConfig::from_toml("[scarcity]\nsizes = []").is_err());
        assert!(RunConfig::from_toml("[ensemble]\nfamily = \"am\"").is_err());
        assert!(RunConfig::from_toml("[tl]\nsynth_count = 0").is_err());
    }

    #[test]
    fn hyperparameters_follow_training_size() {
        let nn = NnSection::default();
        assert_eq!(nn.hyper_for(400), Hyperparams::NN_SCARCE);
        assert_eq!(nn.hyper_for(1000), Hyperparams::NN_SCARCE);
        assert_eq!(nn.hyper_for(4400), Hyperparams::NN_FULL);
    }
}
