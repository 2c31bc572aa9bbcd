//! Experiment plumbing: configuration, training loops, checkpoints,
//! evaluation and artifact files.
//!
//! Training order is prior, then encoder against the frozen prior, then
//! corrector against both. The two baselines train independently.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod emit;
pub mod eval;
pub mod optim;
pub mod pipeline;
pub mod train;

pub use checkpoint::Checkpoint;
pub use commands::{MethodKind, Workspace};
pub use config::{Component, ExperimentConfig};
pub use eval::{evaluate, l2_per_sample, metrics_csv, metrics_table, Method, MetricRow};
pub use pipeline::{evaluate_methods, Suite};
pub use train::{
    train_corrector, train_diffdecoder, train_encoder, train_prior, train_vae, DiffDecoder,
    LossRow, Trained, Vae,
};
