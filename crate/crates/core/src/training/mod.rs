//! Alternating least-squares adversarial training.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod fit;
pub mod step;

pub use batch::{sample_batch, Batch, BatchIndices};
pub use checkpoint::{load_checkpoint, load_generator, read_checkpoint_info, save_checkpoint, CheckpointInfo};
pub use config::{TrainFile, TrainingConfig};
pub use fit::{batch_for_step, fit, numbered_checkpoint, read_metrics, FitReport, MetricRow, Start, FINAL_CHECKPOINT, METRICS_FILE};
pub use step::{generator_objective, generator_update, train_step, StepMetrics, TrainState};
