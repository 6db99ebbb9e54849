use crate::mesh::{VoltageVector, N_MZI, N_WEIGHTS, V_MAX};
use crate::predict::Predictor;
use crate::rng::{stream, tags};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const NET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model file field `{field}`: {msg}")]
    Schema { field: &'static str, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub n1: usize,
    pub n2: usize,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
}

impl Hyperparams {
    /// NN trained on 400 or 1000 measurements.
    pub const NN_SCARCE: Hyperparams = Hyperparams { n1: 83, n2: 131, lambda_l1: 1e-2, lambda_l2: 1e-4 };
    /// NN trained on the full 4400 measurements.
    pub const NN_FULL: Hyperparams = Hyperparams { n1: 83, n2: 131, lambda_l1: 2e-4, lambda_l2: 1e-7 };
    /// Transfer-learned NN.
    pub const TL: Hyperparams = Hyperparams { n1: 400, n2: 400, lambda_l1: 5e-4, lambda_l2: 9e-9 };

    pub fn validate(&self) -> Result<(), NetError> {
        if self.n1 == 0 || self.n2 == 0 {
            return Err(NetError::Hyperparams(format!("hidden sizes must be positive, got {}×{}", self.n1, self.n2)));
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l2 >= 0.0) {
            return Err(NetError::Hyperparams("regularization weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self.n1, self.n2).total
    }
}

/// Offsets of each block inside the flat parameter vector:
/// `W1 (n1×9), b1, W2 (n2×n1), b2, W3 (9×n2), b3`, weights row-major by output unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n1: usize,
    pub n2: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(n1: usize, n2: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + n1 * N_MZI;
        let w2 = b1 + n1;
        let b2 = w2 + n2 * n1;
        let w3 = b2 + n2;
        let b3 = w3 + N_WEIGHTS * n2;
        let total = b3 + N_WEIGHTS;
        Self { n1, n2, w1, b1, w2, b2, w3, b3, total }
    }

    /// `(rows, fan_in, weight offset, bias offset)` of layer 1, 2 or 3.
    pub fn layer(&self, layer: usize) -> (usize, usize, usize, usize) {
        match layer {
            1 => (self.n1, N_MZI, self.w1, self.b1),
            2 => (self.n2, self.n1, self.w2, self.b2),
            3 => (N_WEIGHTS, self.n2, self.w3, self.b3),
            _ => panic!("layer index {layer} out of range 1..=3"),
        }
    }
}

/// Which parameters stay fixed during re-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezeSpec {
    /// Layers 1..=3 (1 is the input-side hidden layer).
    pub layers: Vec<usize>,
    /// Fraction of units (weight rows plus biases) frozen in each listed layer, leading units first.
    pub fraction: f64,
}

impl Default for FreezeSpec {
    fn default() -> Self {
        Self { layers: vec![1], fraction: 1.0 }
    }
}

impl FreezeSpec {
    pub fn none() -> Self {
        Self { layers: Vec::new(), fraction: 0.0 }
    }

    pub fn mask(&self, layout: &Layout) -> Vec<bool> {
        let mut mask = vec![false; layout.total];
        for &layer in &self.layers {
            let (rows, fan_in, w, b) = layout.layer(layer);
            let frozen = ((self.fraction.clamp(0.0, 1.0) * rows as f64).ceil() as usize).min(rows);
            for unit in 0..frozen {
                mask[w + unit * fan_in..w + (unit + 1) * fan_in].iter_mut().for_each(|m| *m = true);
                mask[b + unit] = true;
            }
        }
        mask
    }
}

/// How raw network outputs map to dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputScaling {
    pub offset_db: f64,
    pub scale_db: f64,
}

impl OutputScaling {
    pub const RAW: OutputScaling = OutputScaling { offset_db: 0.0, scale_db: 1.0 };
}

/// Feedforward surrogate `9 → n1 → n2 → 9` with tanh hidden units and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateNet {
    layout: Layout,
    params: Vec<f64>,
    freeze_mask: Vec<bool>,
    /// Inputs are mapped affinely from `[0, v_max]` to `[−1, 1]`.
    v_max: f64,
    output: OutputScaling,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetFile {
    schema_version: u32,
    kind: String,
    layer_sizes: Vec<usize>,
    activation: String,
    input_v_max: f64,
    output_offset_db: f64,
    output_scale_db: f64,
    params: Vec<f64>,
    freeze_mask: Vec<bool>,
}

pub const NET_KIND: &str = "surrogate_net";

/// Uniform initialization with standard deviation `gain / √fan_in`; biases start at zero.
pub fn init_params(hyper: &Hyperparams, seed: u64, gain: f64) -> Result<SurrogateNet, NetError> {
    hyper.validate()?;
    let layout = Layout::new(hyper.n1, hyper.n2);
    let mut params = vec![0.0; layout.total];
    let mut rng = stream(seed, tags::NET_INIT);
    for layer in 1..=3 {
        let (rows, fan_in, w, _) = layout.layer(layer);
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        for p in &mut params[w..w + rows * fan_in] {
            *p = rng.random_range(-bound..bound);
        }
    }
    Ok(SurrogateNet { layout, params, freeze_mask: vec![false; layout.total], v_max: V_MAX, output: OutputScaling::RAW })
}

impl SurrogateNet {
    pub fn from_parts(n1: usize, n2: usize, params: Vec<f64>, freeze_mask: Vec<bool>) -> Result<Self, NetError> {
        let layout = Layout::new(n1, n2);
        if params.len() != layout.total {
            return Err(NetError::Schema { field: "params", msg: format!("expected {} values, got {}", layout.total, params.len()) });
        }
        if freeze_mask.len() != layout.total {
            return Err(NetError::Schema {
                field: "freeze_mask",
                msg: format!("expected {} entries, got {}", layout.total, freeze_mask.len()),
            });
        }
        Ok(Self { layout, params, freeze_mask, v_max: V_MAX, output: OutputScaling::RAW })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn freeze_mask(&self) -> &[bool] {
        &self.freeze_mask
    }

    pub fn set_freeze_mask(&mut self, mask: Vec<bool>) {
        assert_eq!(mask.len(), self.layout.total);
        self.freeze_mask = mask;
    }

    pub fn freeze(&mut self, spec: &FreezeSpec) {
        self.freeze_mask = spec.mask(&self.layout);
    }

    pub fn output_scaling(&self) -> OutputScaling {
        self.output
    }

    pub fn set_output_scaling(&mut self, output: OutputScaling) {
        self.output = output;
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// True when every parameter of the first hidden layer is frozen.
    pub fn first_layer_frozen(&self) -> bool {
        self.freeze_mask[self.layout.w1..self.layout.w2].iter().all(|&m| m)
    }

    /// Normalized input matrix `L × 9`.
    pub fn inputs(&self, v: &[VoltageVector]) -> Array2<f64> {
        let mut x = Array2::zeros((v.len(), N_MZI));
        for (mut row, v) in x.rows_mut().into_iter().zip(v) {
            for (r, &val) in row.iter_mut().zip(v.as_array()) {
                *r = 2.0 * val / self.v_max - 1.0;
            }
        }
        x
    }

    /// Affine layer followed by an optional tanh, using the given parameter vector.
    pub(crate) fn layer_forward(&self, params: &[f64], layer: usize, input: ArrayView2<f64>, activate: bool) -> Array2<f64> {
        let (rows, fan_in, w, b) = self.layout.layer(layer);
        let wv = ArrayView2::from_shape((rows, fan_in), &params[w..w + rows * fan_in]).expect("layout shape");
        let bias = ArrayView1::from(&params[b..b + rows]);
        let mut z = input.dot(&wv.t());
        z += &bias.insert_axis(Axis(0));
        if activate {
            z.mapv_inplace(f64::tanh);
        }
        z
    }

    /// Raw dB outputs for a normalized input batch.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let h1 = self.layer_forward(&self.params, 1, x, true);
        let h2 = self.layer_forward(&self.params, 2, h1.view(), true);
        let mut y = self.layer_forward(&self.params, 3, h2.view(), false);
        let OutputScaling { offset_db, scale_db } = self.output;
        if (offset_db, scale_db) != (0.0, 1.0) {
            y.mapv_inplace(|o| offset_db + scale_db * o);
        }
        y
    }

    pub fn to_json(&self) -> Result<String, NetError> {
        let file = NetFile {
            schema_version: NET_SCHEMA_VERSION,
            kind: NET_KIND.into(),
            layer_sizes: vec![N_MZI, self.layout.n1, self.layout.n2, N_WEIGHTS],
            activation: "tanh".into(),
            input_v_max: self.v_max,
            output_offset_db: self.output.offset_db,
            output_scale_db: self.output.scale_db,
            params: self.params.clone(),
            freeze_mask: self.freeze_mask.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let f: NetFile = serde_json::from_str(text)?;
        let schema = |field, msg: String| Err(NetError::Schema { field, msg });
        if f.schema_version != NET_SCHEMA_VERSION {
            return schema("schema_version", format!("unsupported version {}", f.schema_version));
        }
        if f.kind != NET_KIND {
            return schema("kind", format!("expected {NET_KIND:?}, got {:?}", f.kind));
        }
        if f.activation != "tanh" {
            return schema("activation", format!("unsupported activation {:?}", f.activation));
        }
        if f.layer_sizes.len() != 4 || f.layer_sizes[0] != N_MZI || f.layer_sizes[3] != N_WEIGHTS {
            return schema("layer_sizes", format!("expected [9, n1, n2, 9], got {:?}", f.layer_sizes));
        }
        if f.layer_sizes[1] == 0 || f.layer_sizes[2] == 0 {
            return schema("layer_sizes", "hidden sizes must be positive".into());
        }
        if !(f.input_v_max > 0.0 && f.input_v_max.is_finite()) {
            return schema("input_v_max", format!("must be positive, got {}", f.input_v_max));
        }
        if !(f.output_scale_db.is_finite() && f.output_scale_db != 0.0 && f.output_offset_db.is_finite()) {
            return schema("output_scale_db", "output scaling must be finite and non-zero".into());
        }
        if let Some(i) = f.params.iter().position(|p| !p.is_finite()) {
            return schema("params", format!("entry {i} is not finite"));
        }
        let mut net = Self::from_parts(f.layer_sizes[1], f.layer_sizes[2], f.params, f.freeze_mask)?;
        net.v_max = f.input_v_max;
        net.output = OutputScaling { offset_db: f.output_offset_db, scale_db: f.output_scale_db };
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Predictor for SurrogateNet {
    fn predict_batch(&self, v: &[VoltageVector]) -> Vec<[f64; N_WEIGHTS]> {
        let y = self.forward_batch(self.inputs(v).view());
        y.rows()
            .into_iter()
            .map(|row| {
                let mut out = [0.0; N_WEIGHTS];
                out.iter_mut().zip(row.iter()).for_each(|(o, &r)| *o = r);
                out
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SurrogateNet {
        init_params(&Hyperparams { n1: 5, n2: 4, lambda_l1: 0.0, lambda_l2: 0.0 }, 7, 1.0).unwrap()
    }

    #[test]
    fn parameter_count_formula() {
        let h = Hyperparams::NN_FULL;
        assert_eq!(h.param_count(), 9 * 83 + 83 + 83 * 131 + 131 + 131 * 9 + 9);
        assert_eq!(Hyperparams::TL.param_count(), 9 * 400 + 400 + 400 * 400 + 400 + 400 * 9 + 9);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = small();
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let v = VoltageVector::new([0.3, 1.0, 2.0, 0.0, 0.5, 1.5, 0.2, 0.9, 1.1]).unwrap();
        assert_eq!(net.predict(&v), [0.0; 9]);
    }

    #[test]
    fn constant_network_outputs_bias() {
        let mut net = small();
        let l = *net.layout();
        net.params_mut()[l.w3..l.b3].iter_mut().for_each(|p| *p = 0.0);
        for k in 0..9 {
            net.params_mut()[l.b3 + k] = -(k as f64) - 0.5;
        }
        for x in [0.0, 1.0, 2.0] {
            let out = net.predict(&VoltageVector::splat(x).unwrap());
            for (k, o) in out.iter().enumerate() {
                assert_eq!(*o, -(k as f64) - 0.5);
            }
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let h = Hyperparams { n1: 8, n2: 6, lambda_l1: 0.0, lambda_l2: 0.0 };
        let a = init_params(&h, 1, 1.0).unwrap();
        assert_eq!(a, init_params(&h, 1, 1.0).unwrap());
        assert_ne!(a.params(), init_params(&h, 2, 1.0).unwrap().params());
        let l = a.layout();
        assert!(a.params()[l.b1..l.w2].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn first_layer_spread_matches_scale() {
        // 10⁴ first-layer weights; configured std is gain/√9.
        let h = Hyperparams { n1: 1112, n2: 1, lambda_l1: 0.0, lambda_l2: 0.0 };
        let net = init_params(&h, 3, 1.0).unwrap();
        let w = &net.params()[..1112 * 9];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(w.len() >= 10_000);
        assert!((std - 1.0 / 3.0).abs() < 0.05 / 3.0, "std {std}");
    }

    #[test]
    fn freeze_spec_masks() {
        let l = Layout::new(4, 3);
        let mask = FreezeSpec::default().mask(&l);
        assert!(mask[..l.w2].iter().all(|&m| m));
        assert!(mask[l.w2..].iter().all(|&m| !m));
        let half = FreezeSpec { layers: vec![2], fraction: 0.5 }.mask(&l);
        assert_eq!(half.iter().filter(|&&m| m).count(), 2 * 4 + 2);
        assert!(half[l.w2..l.w2 + 8].iter().all(|&m| m) && half[l.b2] && half[l.b2 + 1] && !half[l.b2 + 2]);
        assert!(FreezeSpec::none().mask(&l).iter().all(|&m| !m));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut net = small();
        net.freeze(&FreezeSpec::default());
        net.set_output_scaling(OutputScaling { offset_db: -12.5, scale_db: 3.25 });
        let back = SurrogateNet::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn json_rejects_tampering() {
        let net = small();
        let text = net.to_json().unwrap();
        let tampered = text.replace("\"layer_sizes\":[9,5,4,9]", "\"layer_sizes\":[9,6,4,9]");
        assert!(matches!(SurrogateNet::from_json(&tampered), Err(NetError::Schema { field: "params", .. })));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut obj = v.as_object().unwrap().clone();
        obj.remove("freeze_mask");
        let err = SurrogateNet::from_json(&serde_json::Value::Object(obj).to_string()).unwrap_err();
        assert!(err.to_string().contains("missing field `freeze_mask`"), "{err}");
        let extra = text.replacen('{', "{\"dropout\":0.1,", 1);
        assert!(SurrogateNet::from_json(&extra).is_err());
    }

    #[test]
    fn hand_computed_toy_forward() {
        // Only input 1 and output 1 are wired: a 1-2-2-1 network inside the 9-wide shell.
        let mut net = init_params(&Hyperparams { n1: 2, n2: 2, lambda_l1: 0.0, lambda_l2: 0.0 }, 1, 1.0).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let l = *net.layout();
        let p = net.params_mut();
        p[l.w1] = 0.5; // unit 1 <- input 1
        p[l.w1 + 9] = -1.0; // unit 2 <- input 1
        p[l.b1] = 0.1;
        p[l.b1 + 1] = 0.2;
        p[l.w2] = 1.0;
        p[l.w2 + 1] = 2.0;
        p[l.w2 + 2] = -0.5;
        p[l.w2 + 3] = 0.25;
        p[l.b2 + 1] = -0.3;
        p[l.w3] = 3.0;
        p[l.w3 + 1] = -2.0;
        p[l.b3] = -10.0;
        let mut v = [0.0; 9];
        v[0] = 1.5; // normalized input 0.5
        let y = net.predict(&VoltageVector::new(v).unwrap());
        // Layer 1, input x = [0.5, -1, ..., -1]; only x1 feeds the hidden units.
        // h1 = tanh(0.35), tanh(-0.3) = 0.336376, -0.291313
        // h2 = tanh(0.336376 - 0.582625), tanh(-0.168188 - 0.072828 - 0.3)
        // y1 = -10 + 3 tanh(-0.246250) - 2 tanh(-0.541016)
        assert!((y[0] - (-9.736_657)).abs() < 1e-6, "{}", y[0]);
        assert!(y[1..].iter().all(|&o| o == 0.0));
    }
}
