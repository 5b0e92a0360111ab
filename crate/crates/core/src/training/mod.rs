//! Losses, Adam, the training loop, evaluation and checkpoints.

mod checkpoint;
mod config;
mod fit;
mod metrics;
mod optim;
mod pipeline;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest, ParamEntry, FORMAT_VERSION};
pub use config::{config_hash, TrainConfig};
pub use fit::{evaluate, fit, stack_batch, EarlyStopping, EpochRecord, ForecastReport, StopDecision};
pub use metrics::{mae, mse, Metrics};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use pipeline::{prepare_windows, train_and_evaluate, WindowSets};
