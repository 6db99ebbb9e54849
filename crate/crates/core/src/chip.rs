//! A simulated stand-in for the fabricated photonic chip and the measurement protocols.
//!
//! The chip's hidden physics is the analytical model plus an excess crosstalk
//! phase that saturates with heater power,
//! `Δφ_m = Σ_n c_mn · s · tanh(V_n² / s)`, which the analytical model cannot
//! represent exactly. Measurements add Gaussian noise in the dB domain.

use crate::dataset::{split, Dataset, DatasetError, Provenance, Record, Split};
use crate::mesh::{
    db_from_linear, linear_weights, AnalyticalModelParams, MeshError, MeshTopology, VoltageVector, WeightMatrixDb,
    DB_FLOOR, N_MZI, N_WEIGHTS, V_MAX,
};
use crate::predict::Predictor;
use crate::rng::{stream, tags, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

pub const CHIP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ChipError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("sweep step {step} does not divide [{v_min}, {v_max}]")]
    SweepStep { v_min: f64, v_max: f64, step: f64 },
    #[error("invalid chip: {0}")]
    Invalid(String),
    #[error("chip file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DatasetError),
}

/// Knobs for drawing a realistic chip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChipConfig {
    /// Path loss drawn uniformly from this dB range.
    pub alpha_db: (f64, f64),
    /// Extinction ratio in dB, jittered by ± `er_jitter_db`.
    pub er_db: f64,
    pub er_jitter_db: f64,
    /// Relative spread of the self-heating coefficient around π/V_max².
    pub self_heating_spread: f64,
    /// Crosstalk of adjacent heaters relative to self-heating (AM-representable part).
    pub crosstalk_adjacent: f64,
    /// Decay length of crosstalk over the heater grid, in heater pitches.
    pub crosstalk_decay: f64,
    /// Saturating self-heating coefficient relative to the self-heating coefficient.
    pub excess_self: f64,
    /// Saturating crosstalk of adjacent heaters relative to the self-heating coefficient.
    pub excess_adjacent: f64,
    /// Saturation scale `s` in V².
    pub saturation_scale_v2: f64,
    pub noise_sigma_db: f64,
    pub v_max: f64,
}

impl Default for ChipConfig {
    fn default() -> Self {
        Self {
            alpha_db: (-12.0, -8.0),
            er_db: 25.0,
            er_jitter_db: 0.0,
            self_heating_spread: 0.1,
            crosstalk_adjacent: 0.1,
            crosstalk_decay: 1.0,
            excess_self: 0.3,
            excess_adjacent: 0.2,
            saturation_scale_v2: 2.0,
            noise_sigma_db: 0.05,
            v_max: V_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VirtualChip {
    pub schema_version: u32,
    pub seed: u64,
    pub v_max: f64,
    pub noise_sigma_db: f64,
    pub saturation_scale_v2: f64,
    pub topology: MeshTopology,
    pub base: AnalyticalModelParams,
    /// `c_mn`, rad/V².
    pub excess_crosstalk: [[f64; N_MZI]; N_MZI],
}

/// Heater positions on a 3×3 grid, in heater pitches.
fn heater_distance(m: usize, n: usize) -> f64 {
    let (rm, cm) = ((m / 3) as f64, (m % 3) as f64);
    let (rn, cn) = ((n / 3) as f64, (n % 3) as f64);
    ((rm - rn).powi(2) + (cm - cn).powi(2)).sqrt()
}

impl VirtualChip {
    /// A chip whose hidden physics is exactly the given analytical model.
    pub fn from_am(topology: MeshTopology, base: AnalyticalModelParams, noise_sigma_db: f64, seed: u64) -> Result<Self, ChipError> {
        let chip = Self {
            schema_version: CHIP_SCHEMA_VERSION,
            seed,
            v_max: V_MAX,
            noise_sigma_db,
            saturation_scale_v2: 2.0,
            topology,
            base,
            excess_crosstalk: [[0.0; N_MZI]; N_MZI],
        };
        chip.validate()?;
        Ok(chip)
    }

    /// Draw a chip with thermal crosstalk that partly lies outside the analytical model.
    pub fn generate(config: &ChipConfig, seed: u64) -> Result<Self, ChipError> {
        let mut rng = stream(seed, tags::CHIP_PARAMS);
        let self_heating = PI / (config.v_max * config.v_max);
        let mut alpha = [0.0; N_WEIGHTS];
        for a in &mut alpha {
            *a = 10f64.powf(rng.random_range(config.alpha_db.0..=config.alpha_db.1) / 10.0);
        }
        let er_db = config.er_db + config.er_jitter_db * rng.random_range(-1.0..=1.0);
        let mut phi0 = [0.0; N_MZI];
        for p in &mut phi0 {
            *p = rng.random_range(0.0..2.0 * PI);
        }
        let mut phi2 = [[0.0; N_MZI]; N_MZI];
        let mut excess = [[0.0; N_MZI]; N_MZI];
        for m in 0..N_MZI {
            for n in 0..N_MZI {
                if m == n {
                    phi2[m][n] = self_heating * (1.0 + config.self_heating_spread * rng.random_range(-1.0..=1.0));
                    excess[m][n] = self_heating * config.excess_self * rng.random_range(0.5..=1.5);
                } else {
                    let decay = (-(heater_distance(m, n) - 1.0) / config.crosstalk_decay).exp();
                    phi2[m][n] = self_heating * config.crosstalk_adjacent * decay * rng.random_range(0.5..=1.5);
                    excess[m][n] = self_heating * config.excess_adjacent * decay * rng.random_range(0.5..=1.5);
                }
            }
        }
        let chip = Self {
            schema_version: CHIP_SCHEMA_VERSION,
            seed,
            v_max: config.v_max,
            noise_sigma_db: config.noise_sigma_db,
            saturation_scale_v2: config.saturation_scale_v2,
            topology: MeshTopology::crossbar(),
            base: AnalyticalModelParams { alpha, er: 10f64.powf(er_db / 10.0), phi0, phi2 },
            excess_crosstalk: excess,
        };
        chip.validate()?;
        Ok(chip)
    }

    pub fn validate(&self) -> Result<(), ChipError> {
        self.base.validate()?;
        if self.schema_version != CHIP_SCHEMA_VERSION {
            return Err(ChipError::Invalid(format!("unsupported schema_version {}", self.schema_version)));
        }
        if !(self.noise_sigma_db >= 0.0 && self.noise_sigma_db.is_finite()) {
            return Err(ChipError::Invalid(format!("noise_sigma_db = {}", self.noise_sigma_db)));
        }
        if !(self.saturation_scale_v2 > 0.0 && self.saturation_scale_v2.is_finite()) {
            return Err(ChipError::Invalid(format!("saturation_scale_v2 = {}", self.saturation_scale_v2)));
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(ChipError::Invalid(format!("v_max = {}", self.v_max)));
        }
        if self.excess_crosstalk.iter().flatten().any(|c| !c.is_finite()) {
            return Err(ChipError::Invalid("non-finite excess crosstalk".into()));
        }
        Ok(())
    }

    /// Noise stream derived from the chip's own seed.
    pub fn noise_stream(&self, tag: u64) -> Rng {
        stream(self.seed, tag)
    }

    /// Noise-free dB weights of the hidden physics.
    pub fn true_weights(&self, v: &VoltageVector) -> [f64; N_WEIGHTS] {
        let mut phases = self.base.phases(v);
        let s = self.saturation_scale_v2;
        let v2 = v.squared();
        for (m, phase) in phases.iter_mut().enumerate() {
            *phase += (0..N_MZI).map(|n| self.excess_crosstalk[m][n] * s * (v2[n] / s).tanh()).sum::<f64>();
        }
        linear_weights(&self.base.alpha, self.base.imbalance(), &self.topology, &phases).map(db_from_linear)
    }

    pub fn measure(&self, v: &VoltageVector, rng: &mut Rng) -> Result<WeightMatrixDb, ChipError> {
        VoltageVector::with_max(*v.as_array(), self.v_max)?;
        let mut w = self.true_weights(v);
        if self.noise_sigma_db > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma_db).expect("validated sigma");
            for x in &mut w {
                *x += normal.sample(rng);
            }
        }
        for x in &mut w {
            *x = x.max(DB_FLOOR);
        }
        Ok(WeightMatrixDb::new(w)?)
    }

    /// The noise-free hidden physics as a predictor.
    pub fn oracle(&self) -> ChipOracle<'_> {
        ChipOracle(self)
    }

    pub fn save(&self, path: &Path) -> Result<(), ChipError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ChipError> {
        let chip: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        chip.validate()?;
        Ok(chip)
    }
}

pub struct ChipOracle<'a>(&'a VirtualChip);

impl Predictor for ChipOracle<'_> {
    fn predict_batch(&self, v: &[VoltageVector]) -> Vec<[f64; N_WEIGHTS]> {
        v.iter().map(|v| self.0.true_weights(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub v_min: f64,
    pub v_max: f64,
    pub step: f64,
    /// Voltage of the heaters not being swept.
    pub rest_level: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { v_min: 0.0, v_max: V_MAX, step: 0.1, rest_level: 0.0 }
    }
}

impl SweepSpec {
    pub fn points(&self) -> Result<Vec<f64>, ChipError> {
        let err = || ChipError::SweepStep { v_min: self.v_min, v_max: self.v_max, step: self.step };
        let span = self.v_max - self.v_min;
        if !(self.step > 0.0) || !(span >= 0.0) {
            return Err(err());
        }
        let intervals = (span / self.step).round();
        if (intervals * self.step - span).abs() > 1e-9 * span.max(1.0) {
            return Err(err());
        }
        // Round to the nearest nanovolt so that 0.1·3 is written as 0.3.
        Ok((0..=intervals as usize)
            .map(|k| ((self.v_min + k as f64 * self.step) * 1e9).round() / 1e9)
            .collect())
    }

    pub fn len(&self) -> Result<usize, ChipError> {
        Ok(N_MZI * self.points()?.len())
    }
}

/// Sweep each heater in turn over the grid while the others sit at the rest level.
pub fn sweep_protocol(chip: &VirtualChip, spec: &SweepSpec, rng: &mut Rng) -> Result<Dataset, ChipError> {
    let points = spec.points()?;
    let mut records = Vec::with_capacity(N_MZI * points.len());
    for m in 0..N_MZI {
        for &x in &points {
            let mut v = [spec.rest_level; N_MZI];
            v[m] = x;
            let v = VoltageVector::with_max(v, chip.v_max)?;
            records.push(Record { v, w: chip.measure(&v, rng)?, split: Split::Train });
        }
    }
    let n = records.len();
    Ok(Dataset::with_sweep(Provenance::ExperimentalSim, records, n))
}

/// I.i.d. uniform heater drives on `[0, v_max]⁹`.
pub fn random_protocol(chip: &VirtualChip, count: usize, rng: &mut Rng) -> Result<Dataset, ChipError> {
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = [0.0; N_MZI];
        for x in &mut v {
            *x = rng.random_range(0.0..=chip.v_max);
        }
        let v = VoltageVector::with_max(v, chip.v_max)?;
        records.push(Record { v, w: chip.measure(&v, rng)?, split: Split::Train });
    }
    Ok(Dataset::new(Provenance::ExperimentalSim, records))
}

/// Sizes of a generated measurement campaign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub sweep: SweepSpec,
    /// Training records, sweep included.
    pub train: usize,
    /// Held out from the same random pool as training, before any subsetting.
    pub validation: usize,
    pub test: usize,
    /// Emit the sweep alone.
    pub sweep_only: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { sweep: SweepSpec::default(), train: 4400, validation: 100, test: 700, sweep_only: false }
    }
}

/// Sweep followed by random training and validation records, then the test records.
pub fn generate_dataset(chip: &VirtualChip, spec: &DatasetSpec, seed: u64) -> Result<Dataset, ChipError> {
    let sweep = sweep_protocol(chip, &spec.sweep, &mut stream(seed, tags::SWEEP_NOISE))?;
    if spec.sweep_only {
        return Ok(sweep);
    }
    if spec.train < sweep.len() {
        return Err(DatasetError::SweepDoesNotFit { train_n: spec.train, sweep: sweep.len() }.into());
    }
    let random = spec.train - sweep.len() + spec.validation;
    let pool = sweep.concat(random_protocol(chip, random, &mut stream(seed, tags::TRAIN_POOL))?)?;
    let tagged = split(&pool, spec.train, spec.validation, true, &mut stream(seed, tags::SPLIT))?;
    let test = random_protocol(chip, spec.test, &mut stream(seed, tags::TEST_SET))?.tagged(Split::Test);
    Ok(tagged.concat(test)?)
}
