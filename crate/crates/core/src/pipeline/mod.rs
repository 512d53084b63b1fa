//! Configuration, record files, synthetic data, checkpoints and the
//! pre-training loop.

mod checkpoint;
mod config;
mod data;
mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{FinetuneConfig, Rates, TrainConfig, DEFAULT_FINETUNE_TEMPERATURE};
pub use data::{generate_synthetic, Dataset, Labels, SyntheticSpec, VideoTextRecord};
pub use trainer::{
    batch_losses, epoch_batch, generation_pair, prepare_examples, run_pretraining, Example, LossContext, Pretrainer, RunSummary, StepEvent, StepReport,
    METRICS_HEADER,
};
