//! Quantitative read-outs of learned representations (clustering purity,
//! linear-probe separability) and the convergence-bound calculator.

mod bound;
mod kmeans;
mod probe;

pub use bound::{convergence_bound, BoundInputs, BoundResult};
pub use kmeans::{cluster_purity, kmeans, write_assignments_csv, ClusterResult};
pub use probe::{holdout_split, linear_probe, ProbeConfig};
