//! Fully connected `9 → n₁ → n₂ → 9` surrogate with tanh hidden layers.

mod cost;
mod net;
mod train;

pub use cost::{cost, Batch, CostError, CostValue, NetObjective};
pub use net::{
    init_params, FreezeSpec, Hyperparams, Layout, NetError, OutputScaling, SurrogateNet, NET_KIND, NET_SCHEMA_VERSION,
};
pub use train::{train, write_history_csv, HistoryRow, TrainError, TrainOutcome, TrainSettings};
