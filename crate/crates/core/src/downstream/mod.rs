//! Downstream harnesses on top of a pre-trained query network: cross-modal
//! retrieval, classification, caption generation and embedding export.
//!
//! Fine-tuning updates the whole query network plus any `ft.` heads with a
//! fresh Adam optimizer; the momentum key network and queues are not used.

mod caption;
mod classify;
mod export;
mod metrics;
mod retrieval;

pub use caption::{beam_search, caption_loss, evaluate_caption, finetune_caption, greedy_decode, CaptionReport, Hypothesis};
pub use classify::{evaluate_classifier, finetune_classifier, ClassifyTask};
pub use export::{export_embeddings, write_embeddings};
pub use metrics::{
    content_tokens, corpus_bleu, rank_of, recall_at_k, rouge_l, score_pair, text_gen_metrics, TextGenMetrics, ROUGE_BETA,
};
pub use retrieval::{evaluate_retrieval, finetune_retrieval, retrieval_loss, RetrievalMode, RetrievalReport, RECALL_KS};

use crate::augment::derive_seed;
use crate::model::ModelConfig;
use crate::numerics::{Adam, ParamStore, Tape, Var};
use crate::pipeline::{epoch_batch, Dataset, FinetuneConfig};
use crate::{Error, Result};

/// Stream tag separating fine-tuning batch orders from pre-training ones.
const FINETUNE_STREAM: u64 = 0x46_494e_4554;

/// Run `ft.steps` Adam steps over seeded batches of `data`, minimizing
/// `loss` (built on a fresh tape for the given record indices). Returns the
/// loss of every step.
pub(crate) fn run_finetune<F>(
    params: &mut ParamStore,
    data: &Dataset,
    ft: &FinetuneConfig,
    seed: u64,
    task: &'static str,
    mut loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, &ParamStore, &[usize]) -> Result<Var>,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = Adam::new(ft.learning_rate);
    let mut values = Vec::with_capacity(ft.steps as usize);
    for step in 0..ft.steps {
        let idx = epoch_batch(data.len(), ft.batch_size, derive_seed(seed, 0, FINETUNE_STREAM), step);
        params.zero_grads();
        let mut tape = Tape::new();
        let l = loss(&mut tape, params, &idx)?;
        let v = tape.value(l).item();
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { task });
        }
        if tape.requires_grad(l) {
            tape.backward(l, params)?;
            opt.step(params)?;
        }
        values.push(v);
    }
    Ok(values)
}

/// Reject data whose frame dimension differs from the model's.
pub(crate) fn check_data(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.frame_dim != cfg.frame_dim {
        return Err(Error::ConfigMismatch {
            field: "frame_dim",
            expected: cfg.frame_dim.to_string(),
            found: data.frame_dim.to_string(),
        });
    }
    Ok(())
}
