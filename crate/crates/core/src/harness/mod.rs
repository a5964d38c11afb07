//! Training, evaluation, configuration and persistence.

pub mod checkpoint;
pub mod config;
mod eval;
pub mod metrics;
mod plot;
mod trace;
pub mod train;

pub use checkpoint::{Archive, DiffusionCheckpoint, TdnCheckpoint};
pub use config::{DataSource, DiffusionModels, Stage, TrainConfig};
pub use eval::evaluate_paths;
pub use metrics::{loe, metrics, psnr, ssim, EvalPair, Metric, MetricReport};
pub use plot::plot_trace;
pub use trace::LossTrace;
pub use train::{decompose_all, load_data, train_diffusion, train_tdn, TrainOutcome};
