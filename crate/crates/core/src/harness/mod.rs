//! Experiment orchestration: configuration, datasets, outputs.

mod config;
mod experiment;
mod idx;
mod synthetic;

pub use config::{BaselineMethod, DatasetSource, ExperimentConfig, KEYS};
pub use experiment::{
    emit_plot_data, fit_server_basis, load_dataset, local_config, obtain_backbone, prepare, pretrain_backbone,
    pretrain_config, run_ablation_matrix, run_experiment, run_prepared, split_dataset, write_metrics, DataSplits,
    ExperimentResult, Prepared, Summary, METRICS_HEADER,
};
pub use idx::{encode_idx, load_idx, parse_idx_images, parse_idx_labels, resize_nearest, IMAGES_MAGIC, LABELS_MAGIC};
pub use synthetic::{generate_synthetic_dataset, generate_with_jitter, render, Jitter, FAMILIES};
