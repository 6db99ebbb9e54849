//! Modeling toolkit for thermo-optically tuned Mach-Zehnder interferometer meshes.
//!
//! The crate covers the full calibration workflow for a 3×3 optical matrix
//! multiplier:
//!
//! - [`mesh`]: domain types and the analytical transmission model with exact gradients.
//! - [`chip`] and [`dataset`]: a simulated ground-truth chip, measurement protocols and CSV datasets.
//! - [`optim`]: limited-memory BFGS with a strong-Wolfe line search, gradient checks and model fitting.
//! - [`neural`]: the tanh surrogate network, its regularized RMSE cost and training.
//! - [`transfer`]: pre-training on model-generated data followed by partially frozen re-training.
//! - [`ensemble`]: simple and ridge-weighted ensembles plus percentile statistics.

pub mod chip;
pub mod dataset;
pub mod ensemble;
pub mod mesh;
pub mod neural;
pub mod optim;
pub mod predict;
pub mod rng;
pub mod transfer;

pub use mesh::{AnalyticalModelParams, MeshTopology, VoltageVector, WeightMatrixDb};
pub use predict::Predictor;
