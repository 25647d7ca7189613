//! Client/server round orchestration: non-IID shards, local updates under
//! the combined objective, and size-weighted aggregation.

mod aggregate;
mod local;
mod model;
mod partition;
mod round;

pub use aggregate::{aggregate, weighted_mean};
pub use local::{
    gather_pixels, local_update, train_centralized, FrozenBackbone, LocalConfig, LocalOutcome, PcaScope,
};
pub use model::{ModelArch, ModelForward, ModelParams};
pub use partition::{
    dirichlet_indices, extreme_indices, largest_remainder, long_tail_counts, long_tail_indices, make_long_tail,
    partition_dirichlet, partition_extreme, ClientDataset, PartitionSpec, Scheme, EXTREME_CLIENTS,
};
pub use round::{embed, evaluate, probe_accuracy, run_training, Federation, RoundReport, TrainingConfig, TrainingOutcome};
