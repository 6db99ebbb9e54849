//! Domain types of a 3×3 thermo-optic MZI mesh and the analytical transmission model.
//!
//! Every matrix weight is the product of the transmissions of the MZIs on its
//! optical path, scaled by a path loss:
//!
//! ```text
//! W_ij = α_ij · Π_{m ∈ M_ij} ¼ |r ± exp(i·φ_m)|²,   r = (√ER − 1)/(√ER + 1)
//! φ_m  = φ⁰_m + Σ_n φ²_mn · V_n²
//! ```
//!
//! Weights are reported in dB. Linear weights below [`LINEAR_FLOOR`] clip to
//! [`DB_FLOOR`].

use serde::{Deserialize, Serialize};
use std::f64::consts::LN_10;
use thiserror::Error;

/// Number of tunable MZIs (heaters) in the mesh.
pub const N_MZI: usize = 9;
pub const N_INPUTS: usize = 3;
pub const N_OUTPUTS: usize = 3;
/// Number of matrix weights, `N_OUTPUTS * N_INPUTS`.
pub const N_WEIGHTS: usize = N_INPUTS * N_OUTPUTS;
/// Default upper end of the heater drive range, volts.
pub const V_MAX: f64 = 2.0;
/// Lowest reportable weight, dB.
pub const DB_FLOOR: f64 = -90.0;
/// Linear weights below this value are clipped to [`DB_FLOOR`].
pub const LINEAR_FLOOR: f64 = 1e-9;
/// Measured passive transmission may exceed 0 dB by at most this much.
pub const DB_CEILING_MARGIN: f64 = 0.5;

/// Number of natural analytical-model parameters: α (9), ER (1), φ⁰ (9), φ² (81).
pub const N_AM_PARAMS: usize = N_WEIGHTS + 1 + N_MZI + N_MZI * N_MZI;

pub(crate) const DB_PER_LN: f64 = 10.0 / LN_10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("voltage vector must have {N_MZI} entries, got {0}")]
    VoltageLength(usize),
    #[error("voltage V{index} = {value} outside [0, {v_max}] V")]
    VoltageRange { index: usize, value: f64, v_max: f64 },
    #[error("weight matrix entry {index} = {value} dB is invalid")]
    Weight { index: usize, value: f64 },
    #[error("extinction ratio must exceed 1 (linear), got {0}")]
    ExtinctionRatio(f64),
    #[error("alpha[{index}] = {value} must be in (0, 1]")]
    Alpha { index: usize, value: f64 },
    #[error("non-finite phase parameter {0}")]
    Phase(&'static str),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("non-finite value while evaluating weight ({i}, {j})")]
    NonFinite { i: usize, j: usize },
    #[error("weight ({i}, {j}) is clipped at the dB floor; gradient undefined")]
    Clipped { i: usize, j: usize },
}

/// The nine heater voltages applied to the mesh, volts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageVector([f64; N_MZI]);

impl VoltageVector {
    pub fn new(v: [f64; N_MZI]) -> Result<Self, MeshError> {
        Self::with_max(v, V_MAX)
    }

    pub fn with_max(v: [f64; N_MZI], v_max: f64) -> Result<Self, MeshError> {
        for (index, &value) in v.iter().enumerate() {
            if !value.is_finite() || !(0.0..=v_max).contains(&value) {
                return Err(MeshError::VoltageRange { index: index + 1, value, v_max });
            }
        }
        Ok(Self(v))
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, MeshError> {
        let arr: [f64; N_MZI] = v.try_into().map_err(|_| MeshError::VoltageLength(v.len()))?;
        Self::new(arr)
    }

    /// Bypasses the range check. Only for probing model symmetries (e.g. negative drive).
    pub fn unchecked(v: [f64; N_MZI]) -> Self {
        Self(v)
    }

    pub fn splat(value: f64) -> Result<Self, MeshError> {
        Self::new([value; N_MZI])
    }

    pub fn as_array(&self) -> &[f64; N_MZI] {
        &self.0
    }

    pub fn squared(&self) -> [f64; N_MZI] {
        self.0.map(|v| v * v)
    }
}

/// 3×3 implemented weights in dB, row-major `(output i, input j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrixDb([f64; N_WEIGHTS]);

impl WeightMatrixDb {
    /// Validated constructor for measured or physics-generated weights.
    pub fn new(w: [f64; N_WEIGHTS]) -> Result<Self, MeshError> {
        for (index, &value) in w.iter().enumerate() {
            if !value.is_finite() || value > DB_CEILING_MARGIN {
                return Err(MeshError::Weight { index, value });
            }
        }
        Ok(Self(w))
    }

    /// Model predictions only need to be finite; a surrogate may overshoot 0 dB.
    pub fn prediction(w: [f64; N_WEIGHTS]) -> Result<Self, MeshError> {
        for (index, &value) in w.iter().enumerate() {
            if !value.is_finite() {
                return Err(MeshError::Weight { index, value });
            }
        }
        Ok(Self(w))
    }

    pub fn from_slice(w: &[f64]) -> Result<Self, MeshError> {
        let arr: [f64; N_WEIGHTS] = w.try_into().map_err(|_| MeshError::Weight {
            index: w.len(),
            value: f64::NAN,
        })?;
        Self::new(arr)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[i * N_INPUTS + j]
    }

    pub fn as_array(&self) -> &[f64; N_WEIGHTS] {
        &self.0
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Power ratio to dB with clipping at [`DB_FLOOR`]; the flag reports clipping.
pub fn db_from_linear_flagged(x: f64) -> (f64, bool) {
    if x.is_nan() || x < LINEAR_FLOOR {
        (DB_FLOOR, true)
    } else {
        (10.0 * x.log10(), false)
    }
}

pub fn db_from_linear(x: f64) -> f64 {
    db_from_linear_flagged(x).0
}

pub fn linear_from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Which MZIs each weight's light passes through and which output port of each it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyRepr", into = "TopologyRepr")]
pub struct MeshTopology {
    paths: Vec<Vec<usize>>,
    signs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyRepr {
    /// 1-based MZI indices per weight, row-major.
    paths: Vec<Vec<usize>>,
    port_sign: Vec<Vec<i8>>,
}

impl TryFrom<TopologyRepr> for MeshTopology {
    type Error = MeshError;

    fn try_from(r: TopologyRepr) -> Result<Self, MeshError> {
        let paths = r
            .paths
            .iter()
            .map(|p| p.iter().map(|&m| m.wrapping_sub(1)).collect())
            .collect();
        let signs = r
            .port_sign
            .iter()
            .map(|s| s.iter().map(|&x| f64::from(x)).collect())
            .collect();
        MeshTopology::new(paths, signs)
    }
}

impl From<MeshTopology> for TopologyRepr {
    fn from(t: MeshTopology) -> Self {
        TopologyRepr {
            paths: t.paths.iter().map(|p| p.iter().map(|m| m + 1).collect()).collect(),
            port_sign: t.signs.iter().map(|s| s.iter().map(|&x| x as i8).collect()).collect(),
        }
    }
}

impl MeshTopology {
    /// `paths[k]` lists 0-based MZI indices for weight `k = i * 3 + j`;
    /// `signs[k][t]` is `+1.0` or `-1.0` for the MZI `paths[k][t]`.
    pub fn new(paths: Vec<Vec<usize>>, signs: Vec<Vec<f64>>) -> Result<Self, MeshError> {
        if paths.len() != N_WEIGHTS || signs.len() != N_WEIGHTS {
            return Err(MeshError::Topology(format!(
                "expected {N_WEIGHTS} paths and sign lists, got {} and {}",
                paths.len(),
                signs.len()
            )));
        }
        for (k, (path, sign)) in paths.iter().zip(&signs).enumerate() {
            if path.is_empty() {
                return Err(MeshError::Topology(format!("path {k} is empty")));
            }
            if path.len() != sign.len() {
                return Err(MeshError::Topology(format!("path {k} and its port signs differ in length")));
            }
            let mut seen = [false; N_MZI];
            for &m in path {
                if m >= N_MZI {
                    return Err(MeshError::Topology(format!("path {k} references MZI {}", m.wrapping_add(1))));
                }
                if seen[m] {
                    return Err(MeshError::Topology(format!("path {k} repeats MZI {}", m + 1)));
                }
                seen[m] = true;
            }
            if sign.iter().any(|&s| s != 1.0 && s != -1.0) {
                return Err(MeshError::Topology(format!("path {k} has a port sign other than ±1")));
            }
        }
        Ok(Self { paths, signs })
    }

    /// One MZI per weight, `M_ij = {3i + j}` (0-based), every weight on the cross port.
    pub fn crossbar() -> Self {
        let paths = (0..N_WEIGHTS).map(|k| vec![k]).collect();
        let signs = (0..N_WEIGHTS).map(|_| vec![-1.0]).collect();
        Self { paths, signs }
    }

    pub fn path(&self, i: usize, j: usize) -> &[usize] {
        &self.paths[i * N_INPUTS + j]
    }

    pub fn port_signs(&self, i: usize, j: usize) -> &[f64] {
        &self.signs[i * N_INPUTS + j]
    }

    pub(crate) fn weight_path(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.paths[k].iter().copied().zip(self.signs[k].iter().copied())
    }
}

impl Default for MeshTopology {
    fn default() -> Self {
        Self::crossbar()
    }
}

/// Trainable parameters of the analytical model, in natural units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticalModelParams {
    /// Linear path loss per weight, row-major.
    pub alpha: [f64; N_WEIGHTS],
    /// Linear MZI extinction ratio.
    pub er: f64,
    /// Static phase per MZI, rad.
    pub phi0: [f64; N_MZI],
    /// `phi2[m][n]`: phase of MZI m per V² on heater n, rad/V².
    pub phi2: [[f64; N_MZI]; N_MZI],
}

impl AnalyticalModelParams {
    pub fn validate(&self) -> Result<(), MeshError> {
        for (index, &value) in self.alpha.iter().enumerate() {
            if !(value > 0.0 && value <= 1.0) {
                return Err(MeshError::Alpha { index, value });
            }
        }
        if !(self.er > 1.0) || !self.er.is_finite() {
            return Err(MeshError::ExtinctionRatio(self.er));
        }
        if self.phi0.iter().any(|p| !p.is_finite()) {
            return Err(MeshError::Phase("phi0"));
        }
        if self.phi2.iter().flatten().any(|p| !p.is_finite()) {
            return Err(MeshError::Phase("phi2"));
        }
        Ok(())
    }

    /// Field reflection-like term `(√ER − 1)/(√ER + 1)`.
    pub fn imbalance(&self) -> f64 {
        let q = self.er.sqrt();
        (q - 1.0) / (q + 1.0)
    }

    /// Total phase of every MZI at the given drive.
    pub fn phases(&self, v: &VoltageVector) -> [f64; N_MZI] {
        let v2 = v.squared();
        let mut out = self.phi0;
        for (m, phase) in out.iter_mut().enumerate() {
            *phase += self.phi2[m].iter().zip(&v2).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }

    /// Flatten in the canonical order α, ER, φ⁰, φ² (row-major).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(N_AM_PARAMS);
        out.extend_from_slice(&self.alpha);
        out.push(self.er);
        out.extend_from_slice(&self.phi0);
        for row in &self.phi2 {
            out.extend_from_slice(row);
        }
        out
    }

    pub fn from_slice(x: &[f64]) -> Self {
        assert_eq!(x.len(), N_AM_PARAMS, "analytical model parameter vector length");
        let mut p = Self {
            alpha: [0.0; N_WEIGHTS],
            er: x[N_WEIGHTS],
            phi0: [0.0; N_MZI],
            phi2: [[0.0; N_MZI]; N_MZI],
        };
        p.alpha.copy_from_slice(&x[..N_WEIGHTS]);
        p.phi0.copy_from_slice(&x[N_WEIGHTS + 1..N_WEIGHTS + 1 + N_MZI]);
        for (m, row) in p.phi2.iter_mut().enumerate() {
            let start = N_WEIGHTS + 1 + N_MZI + m * N_MZI;
            row.copy_from_slice(&x[start..start + N_MZI]);
        }
        p
    }
}

/// Offsets of each parameter group inside the flat layout of [`AnalyticalModelParams::to_vec`].
pub mod layout {
    use super::{N_MZI, N_WEIGHTS};

    pub const fn alpha(k: usize) -> usize {
        k
    }
    pub const ER: usize = N_WEIGHTS;
    pub const fn phi0(m: usize) -> usize {
        N_WEIGHTS + 1 + m
    }
    pub const fn phi2(m: usize, n: usize) -> usize {
        N_WEIGHTS + 1 + N_MZI + m * N_MZI + n
    }
}

/// `¼ |r + s·e^{iφ}|²` for a single MZI.
#[inline]
pub(crate) fn mzi_factor(r: f64, sign: f64, phase: f64) -> f64 {
    0.25 * (r * r + 1.0 + 2.0 * r * sign * phase.cos())
}

/// Linear weights of every matrix entry for the given per-MZI phases.
pub(crate) fn linear_weights(
    alpha: &[f64; N_WEIGHTS],
    r: f64,
    topo: &MeshTopology,
    phases: &[f64; N_MZI],
) -> [f64; N_WEIGHTS] {
    let mut out = [0.0; N_WEIGHTS];
    for (k, w) in out.iter_mut().enumerate() {
        *w = alpha[k] * topo.weight_path(k).map(|(m, s)| mzi_factor(r, s, phases[m])).product::<f64>();
    }
    out
}

fn to_db_checked(lin: [f64; N_WEIGHTS]) -> Result<([f64; N_WEIGHTS], [bool; N_WEIGHTS]), MeshError> {
    let mut db = [0.0; N_WEIGHTS];
    let mut clipped = [false; N_WEIGHTS];
    for k in 0..N_WEIGHTS {
        if !lin[k].is_finite() {
            return Err(MeshError::NonFinite { i: k / N_INPUTS, j: k % N_INPUTS });
        }
        (db[k], clipped[k]) = db_from_linear_flagged(lin[k]);
    }
    Ok((db, clipped))
}

/// Evaluate the analytical model at drive `v`.
pub fn eval_am(
    params: &AnalyticalModelParams,
    topo: &MeshTopology,
    v: &VoltageVector,
) -> Result<WeightMatrixDb, MeshError> {
    params.validate()?;
    let lin = linear_weights(&params.alpha, params.imbalance(), topo, &params.phases(v));
    let (db, _) = to_db_checked(lin)?;
    WeightMatrixDb::prediction(db)
}

/// Jacobian of the nine dB weights with respect to the natural parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AmJacobian {
    data: Vec<f64>,
}

impl AmJacobian {
    /// `∂W_k / ∂θ_p` with `k = i * 3 + j` and `p` from [`layout`].
    pub fn get(&self, k: usize, p: usize) -> f64 {
        self.data[k * N_AM_PARAMS + p]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * N_AM_PARAMS..(k + 1) * N_AM_PARAMS]
    }
}

/// Per-weight sensitivities used by both the full Jacobian and the fitting objective.
#[derive(Debug, Clone, Copy)]
pub(crate) struct WeightSensitivity {
    /// dB weight.
    pub db: f64,
    /// `∂W_dB / ∂ln α_k`.
    pub d_ln_alpha: f64,
    /// `∂W_dB / ∂r`.
    pub d_imbalance: f64,
    /// The weight sits at the dB floor; all derivatives are zero there.
    pub clipped: bool,
}

/// dB weights plus the per-MZI phase sensitivities `∂W_k/∂φ_m` (accumulated into `d_phase[k][m]`).
pub(crate) fn weight_sensitivities(
    alpha: &[f64; N_WEIGHTS],
    r: f64,
    topo: &MeshTopology,
    phases: &[f64; N_MZI],
    d_phase: &mut [[f64; N_MZI]; N_WEIGHTS],
) -> Result<[WeightSensitivity; N_WEIGHTS], MeshError> {
    let mut out = [WeightSensitivity { db: 0.0, d_ln_alpha: 0.0, d_imbalance: 0.0, clipped: false }; N_WEIGHTS];
    for k in 0..N_WEIGHTS {
        let (i, j) = (k / N_INPUTS, k % N_INPUTS);
        let mut lin = alpha[k];
        let mut d_r = 0.0;
        d_phase[k] = [0.0; N_MZI];
        for (m, s) in topo.weight_path(k) {
            let (sin, cos) = phases[m].sin_cos();
            let f = 0.25 * (r * r + 1.0 + 2.0 * r * s * cos);
            lin *= f;
            d_r += DB_PER_LN * 0.5 * (r + s * cos) / f;
            d_phase[k][m] += DB_PER_LN * (-0.5 * r * s * sin) / f;
        }
        if !lin.is_finite() || d_r.is_nan() {
            return Err(MeshError::NonFinite { i, j });
        }
        let (db, clipped) = db_from_linear_flagged(lin);
        out[k] = if clipped {
            d_phase[k] = [0.0; N_MZI];
            WeightSensitivity { db, d_ln_alpha: 0.0, d_imbalance: 0.0, clipped }
        } else {
            WeightSensitivity { db, d_ln_alpha: DB_PER_LN, d_imbalance: d_r, clipped }
        };
    }
    Ok(out)
}

/// `dr/dER` for `r = (√ER − 1)/(√ER + 1)`.
pub(crate) fn imbalance_derivative(er: f64) -> f64 {
    let q = er.sqrt();
    1.0 / (q * (q + 1.0) * (q + 1.0))
}

/// Exact partial derivatives of every dB weight with respect to α, ER, φ⁰ and φ².
pub fn grad_am(
    params: &AnalyticalModelParams,
    topo: &MeshTopology,
    v: &VoltageVector,
) -> Result<(WeightMatrixDb, AmJacobian), MeshError> {
    params.validate()?;
    let v2 = v.squared();
    let mut d_phase = [[0.0; N_MZI]; N_WEIGHTS];
    let sens = weight_sensitivities(&params.alpha, params.imbalance(), topo, &params.phases(v), &mut d_phase)?;
    let dr_der = imbalance_derivative(params.er);
    let mut data = vec![0.0; N_WEIGHTS * N_AM_PARAMS];
    let mut db = [0.0; N_WEIGHTS];
    for k in 0..N_WEIGHTS {
        if sens[k].clipped {
            return Err(MeshError::Clipped { i: k / N_INPUTS, j: k % N_INPUTS });
        }
        db[k] = sens[k].db;
        let row = &mut data[k * N_AM_PARAMS..(k + 1) * N_AM_PARAMS];
        row[layout::alpha(k)] = sens[k].d_ln_alpha / params.alpha[k];
        row[layout::ER] = sens[k].d_imbalance * dr_der;
        for m in 0..N_MZI {
            let g = d_phase[k][m];
            if g == 0.0 {
                continue;
            }
            row[layout::phi0(m)] = g;
            for n in 0..N_MZI {
                row[layout::phi2(m, n)] = g * v2[n];
            }
        }
    }
    Ok((WeightMatrixDb::prediction(db)?, AmJacobian { data }))
}
