use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::Dataset;
use crate::augment::{augment_batch, derive_seed, AugmentedBatch};
use crate::model::{init_params, FrameInput, Network, TextInput};
use crate::momentum::{init_key, key_forward, momentum_update, KeyOutputs, Queues};
use crate::numerics::{Adam, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::objectives::{
    info_nce_groups, intra_mfm_loss, legacy_vsa_loss, mfom_loss, mlm_loss, msg_loss, msom_loss, ContrastGroup, LossBundle, Task,
};
use crate::{Error, Result};

/// Stream tags for sub-seeds that are not per-example augmentation.
const EPOCH_STREAM: u64 = 0x45_504f_4348;
const INTER_STREAM: u64 = 0x49_4e54_4552;

/// Indices of batch `step` over `n` items: each epoch visits every item
/// once in a seeded shuffled order; the last batch of an epoch may be short.
pub fn epoch_batch(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let spe = n.div_ceil(batch_size) as u64;
    let epoch = step / spe;
    let pos = (step % spe) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch, EPOCH_STREAM)));
    order[pos * batch_size..((pos + 1) * batch_size).min(n)].to_vec()
}

/// Model inputs prepared once per record.
#[derive(Clone, Debug)]
pub struct Example {
    /// Dataset index; tags queue entries with their source video.
    pub owner: u64,
    pub text: TextInput,
    pub frames: FrameInput,
}

/// Teacher-forcing input `[CLS] w_1 .. w_k` and target `w_1 .. w_k [SEP]`
/// of a `[CLS] .. [SEP]` sentence.
pub fn generation_pair(text: &TextInput) -> (Vec<usize>, Vec<usize>) {
    let real: Vec<usize> = text.ids.iter().zip(&text.mask).filter(|(_, r)| **r).map(|(t, _)| *t).collect();
    (real[..real.len() - 1].to_vec(), real[1..].to_vec())
}

/// Build examples from a dataset, checking them against the model.
pub fn prepare_examples(config: &TrainConfig, data: &Dataset) -> Result<Vec<Example>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = &config.model;
    if data.frame_dim != cfg.frame_dim {
        return Err(Error::ConfigMismatch {
            field: "frame_dim",
            expected: cfg.frame_dim.to_string(),
            found: data.frame_dim.to_string(),
        });
    }
    data.records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if let Some(&bad) = r.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::Input(format!("record `{}`: token {bad} outside vocabulary of {}", r.id, cfg.vocab_size)));
            }
            let (text, frames) = r.inputs(cfg)?;
            Ok(Example {
                owner: i as u64,
                text,
                frames,
            })
        })
        .collect()
}

/// Milestones within one training step, in the order they happen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepEvent {
    Augment,
    KeyForward,
    Losses,
    Backward,
    OptimizerStep,
    MomentumUpdate,
    QueuePush,
}

/// Loss values of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Zero-based index of the step.
    pub step: u64,
    pub losses: BTreeMap<Task, f64>,
    pub total: f64,
    /// Whether queue-based losses were active.
    pub queues_warm: bool,
}

pub const METRICS_HEADER: &str = "step\tmlm\tmsom\tmfom\tmsg\tintra_mfm\tinter_mfm\tvsa_v2t\tvsa_t2v\tlegacy_vsa\ttotal";

impl StepReport {
    /// One tab-separated metrics line (see [`METRICS_HEADER`]).
    pub fn tsv_line(&self) -> String {
        let mut s = (self.step + 1).to_string();
        for t in Task::ALL {
            s.push('\t');
            s.push_str(&self.losses[&t].to_string());
        }
        s.push('\t');
        s.push_str(&self.total.to_string());
        s
    }
}

/// Inputs shared by the loss computation of one step.
pub struct LossContext<'a> {
    pub config: &'a TrainConfig,
    pub queues: &'a Queues,
    pub step: u64,
}

impl LossContext<'_> {
    pub fn queues_warm(&self) -> bool {
        self.config.tasks.any_queue_task() && self.queues.min_len() >= self.config.min_negatives
    }
}

fn stack(tape: &mut Tape, parts: &[Var]) -> Result<Option<Var>> {
    if parts.is_empty() {
        Ok(None)
    } else {
        Ok(Some(tape.concat_rows(parts)?))
    }
}

/// Report a non-finite value produced inside a task-specific computation as
/// that task's failure.
fn attribute<T>(task: Task, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numerics(NumericsError::NonFinite { .. }) => Error::NonFiniteLoss { task: task.name() },
        e => e,
    })
}

fn real_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, r)| **r).map(|(i, _)| i).collect()
}

/// Every enabled task's loss for one augmented batch, recorded on `tape`
/// against `params`. `keys` holds the key-network outputs of the
/// unaugmented examples and is required when a queue-based task is enabled.
pub fn batch_losses(
    tape: &mut Tape,
    params: &ParamStore,
    ctx: &LossContext,
    owners: &[u64],
    batch: &AugmentedBatch,
    keys: Option<&[KeyOutputs]>,
) -> Result<LossBundle> {
    let cfg = &ctx.config.model;
    let flags = &ctx.config.tasks;
    let tau = ctx.config.temperature;
    let net = Network::new(cfg, params);
    let warm = ctx.queues_warm();

    let mut mlm_rows = Vec::new();
    let mut mlm_targets = Vec::new();
    let mut msom_rows = Vec::new();
    let mut msom_labels = Vec::new();
    let mut mfom_rows = Vec::new();
    let mut mfom_labels = Vec::new();
    let mut msg_logits = Vec::new();
    let mut msg_targets = Vec::new();
    let mut intra_rows = Vec::new();
    let mut intra_targets = Vec::new();
    let mut pool_rows: Vec<f64> = Vec::new();
    let mut pool_count = 0;
    let mut inter_groups = Vec::new();
    let mut v2t_groups = Vec::new();
    let mut t2v_groups = Vec::new();
    let mut vsa_rows = Vec::new();
    let mut vsa_labels = Vec::new();

    let n = batch.examples.len();
    for (i, ex) in batch.examples.iter().enumerate() {
        let enc = net.forward(tape, &ex.text, &ex.frames)?;

        if flags.mlm && !ex.mlm_labels.is_empty() {
            let pos: Vec<usize> = ex.mlm_labels.iter().map(|(p, _)| *p).collect();
            mlm_rows.push(tape.gather_rows(enc.w_e, &pos)?);
            mlm_targets.extend(ex.mlm_labels.iter().map(|(_, t)| *t));
        }
        if flags.msom {
            if let Some((label, _)) = ex.msom {
                msom_rows.push(enc.cls);
                msom_labels.push(label);
            }
        }
        if flags.mfom && !ex.shuffled_positions.is_empty() {
            mfom_rows.push(tape.gather_rows(enc.f_e, &ex.shuffled_positions)?);
            mfom_labels.extend_from_slice(&ex.original_indices);
        }
        if flags.msg {
            let (input, target) = generation_pair(&ex.original_text);
            let logits = attribute(Task::Msg, (|| {
                let (context, mask) = net.decoder_context(tape, &enc, &ex.text, &ex.frames.mask)?;
                Ok(net.decode(tape, &input, context, &mask)?)
            })())?;
            msg_logits.push(logits);
            msg_targets.extend(target);
        }
        if flags.intra_mfm {
            // Original feature of the frame now at slot p (after shuffling).
            let source = |p: usize| {
                ex.shuffled_positions
                    .iter()
                    .position(|&s| s == p)
                    .map_or(p, |k| ex.original_indices[k])
            };
            let real = real_rows(&ex.original_frames.mask);
            if !ex.masked_frame_positions.is_empty() {
                intra_rows.push(tape.gather_rows(enc.f_e, &ex.masked_frame_positions)?);
                for &p in &ex.masked_frame_positions {
                    let src = source(p);
                    let offset = real.iter().position(|&r| r == src).expect("masked frames are real");
                    intra_targets.push(pool_count + offset);
                }
            }
            for &r in &real {
                pool_rows.extend_from_slice(ex.original_frames.row(r));
            }
            pool_count += real.len();
        }
        if warm {
            let keys = keys.ok_or_else(|| Error::Input("queue-based losses need key-network outputs".into()))?;
            let key = &keys[i];
            let owner = owners[i];
            if flags.inter_mfm {
                let real = real_rows(&ex.original_frames.mask);
                if !real.is_empty() {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.config.seed ^ INTER_STREAM, ctx.step, i as u64));
                    let mut pos = Vec::with_capacity(real.len() * cfg.hidden);
                    for _ in &real {
                        let j = real[rng.random_range(0..real.len())];
                        pos.extend_from_slice(key.f_e.row_slice(j));
                    }
                    inter_groups.push(ContrastGroup {
                        queries: tape.gather_rows(enc.f_e, &real)?,
                        positives: Tensor::new(vec![real.len(), cfg.hidden], pos)?,
                        negatives: ctx.queues.frames.negatives_excluding(owner)?,
                    });
                }
            }
            if flags.dual_vsa {
                if let (Some(r_v), Some(key_r_v)) = (enc.r_v, &key.r_v) {
                    v2t_groups.push(ContrastGroup {
                        queries: r_v,
                        positives: key.r_t.clone(),
                        negatives: ctx.queues.text.negatives_excluding(owner)?,
                    });
                    t2v_groups.push(ContrastGroup {
                        queries: enc.r_t,
                        positives: key_r_v.clone(),
                        negatives: ctx.queues.visual.negatives_excluding(owner)?,
                    });
                }
            }
        }
        if flags.legacy_vsa && n > 1 {
            // The matched pair, and this text against the next example's
            // frames as the mismatched pair.
            let other = &batch.examples[(i + 1) % n];
            let mismatched = net.forward(tape, &ex.text, &other.frames)?;
            vsa_rows.push(enc.cls);
            vsa_labels.push(1);
            vsa_rows.push(mismatched.cls);
            vsa_labels.push(0);
        }
    }

    let mut bundle = LossBundle::default();
    if flags.mlm {
        let loss = attribute(Task::Mlm, (|| {
            let rows = stack(tape, &mlm_rows)?;
            let logits = rows.map(|r| net.mlm_logits(tape, r)).transpose()?;
            mlm_loss(tape, logits, &mlm_targets)
        })())?;
        bundle.insert(Task::Mlm, loss);
    }
    if flags.msom {
        let loss = attribute(Task::Msom, (|| {
            let rows = stack(tape, &msom_rows)?;
            let logits = rows.map(|r| net.msom_logits(tape, r)).transpose()?;
            msom_loss(tape, logits, &msom_labels)
        })())?;
        bundle.insert(Task::Msom, loss);
    }
    if flags.mfom {
        let loss = attribute(Task::Mfom, (|| {
            let rows = stack(tape, &mfom_rows)?;
            let logits = rows.map(|r| net.mfom_logits(tape, r)).transpose()?;
            mfom_loss(tape, logits, &mfom_labels)
        })())?;
        bundle.insert(Task::Mfom, loss);
    }
    if flags.msg {
        let loss = attribute(Task::Msg, (|| {
            let logits = stack(tape, &msg_logits)?;
            msg_loss(tape, logits, &msg_targets)
        })())?;
        bundle.insert(Task::Msg, loss);
    }
    if flags.intra_mfm {
        let loss = attribute(Task::IntraMfm, (|| {
            let rows = stack(tape, &intra_rows)?;
            let projected = rows.map(|r| net.intra_mfm_projection(tape, r)).transpose()?;
            let pool = Tensor::new(vec![pool_count, cfg.frame_dim], pool_rows)?;
            Ok(if projected.is_some() {
                intra_mfm_loss(tape, projected, &pool, &intra_targets, tau)?
            } else {
                tape.constant(Tensor::scalar(0.0))
            })
        })())?;
        bundle.insert(Task::IntraMfm, loss);
    }
    if flags.inter_mfm {
        let loss = attribute(Task::InterMfm, info_nce_groups(tape, &inter_groups, tau))?;
        bundle.insert(Task::InterMfm, loss);
    }
    if flags.dual_vsa {
        let v2t = attribute(Task::VsaV2t, info_nce_groups(tape, &v2t_groups, tau))?;
        bundle.insert(Task::VsaV2t, v2t);
        let t2v = attribute(Task::VsaT2v, info_nce_groups(tape, &t2v_groups, tau))?;
        bundle.insert(Task::VsaT2v, t2v);
    }
    if flags.legacy_vsa {
        let loss = attribute(Task::LegacyVsa, (|| {
            let rows = stack(tape, &vsa_rows)?;
            let logits = rows.map(|r| net.vsa_logits(tape, r)).transpose()?;
            legacy_vsa_loss(tape, logits, &vsa_labels)
        })())?;
        bundle.insert(Task::LegacyVsa, loss);
    }
    Ok(bundle)
}

/// Query network, key network, optimizer and queues of a pre-training run.
pub struct Pretrainer {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub key: ParamStore,
    pub optimizer: Adam,
    pub queues: Queues,
    /// Steps completed.
    pub step: u64,
    pub examples: Vec<Example>,
    /// Step milestones, recorded when `trace` is set.
    pub events: Vec<StepEvent>,
    pub trace: bool,
}

impl Pretrainer {
    pub fn new(config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let examples = prepare_examples(&config, data)?;
        let params = init_params(&config.model)?;
        let key = init_key(&params);
        let mut trainer = Self {
            optimizer: Adam::new(config.learning_rate),
            queues: Queues::new(config.queue_capacity, config.model.hidden)?,
            config,
            params,
            key,
            step: 0,
            examples,
            events: Vec::new(),
            trace: false,
        };
        if trainer.config.prefill_queues && trainer.config.tasks.any_queue_task() {
            trainer.prefill()?;
        }
        Ok(trainer)
    }

    /// Push key-network encodings of every example, in dataset order.
    pub fn prefill(&mut self) -> Result<()> {
        for ex in &self.examples {
            let key = key_forward(&self.config.model, &self.key, &ex.text, &ex.frames)?;
            self.queues.push_example(ex.owner, &key, &ex.frames.mask)?;
        }
        Ok(())
    }

    /// Continue from a checkpoint. Missing optimizer, key network or
    /// queues are re-initialized.
    pub fn resume(config: TrainConfig, data: &Dataset, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        config.model.ensure_matches(&ckpt.model)?;
        let examples = prepare_examples(&config, data)?;
        let key = ckpt.key.unwrap_or_else(|| init_key(&ckpt.params));
        let mut optimizer = ckpt.optimizer.unwrap_or_else(|| Adam::new(config.learning_rate));
        optimizer.lr = config.learning_rate;
        let queues = match ckpt.queues {
            Some(q) => q,
            None => Queues::new(config.queue_capacity, config.model.hidden)?,
        };
        Ok(Self {
            config,
            params: ckpt.params,
            key,
            optimizer,
            queues,
            step: ckpt.step,
            examples,
            events: Vec::new(),
            trace: false,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.examples.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        if self.config.steps > 0 {
            self.config.steps
        } else {
            self.config.epochs * self.steps_per_epoch()
        }
    }

    /// Example indices of step `step`: epochs visit the data in a seeded
    /// shuffled order; the last batch of an epoch may be short.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        epoch_batch(self.examples.len(), self.config.batch_size, self.config.seed, step)
    }

    fn mark(&mut self, e: StepEvent) {
        if self.trace {
            self.events.push(e);
        }
    }

    /// Everything needed to evaluate the losses of step `step` outside the
    /// trainer (used for gradient checks).
    pub fn step_inputs(&self, step: u64) -> Result<(Vec<u64>, AugmentedBatch, Option<Vec<KeyOutputs>>)> {
        let idx = self.batch_indices(step);
        let texts: Vec<TextInput> = idx.iter().map(|&i| self.examples[i].text.clone()).collect();
        let frames: Vec<FrameInput> = idx.iter().map(|&i| self.examples[i].frames.clone()).collect();
        let owners = idx.iter().map(|&i| self.examples[i].owner).collect();
        let batch = augment_batch(&texts, &frames, &self.config.augment_config(), self.config.seed, step)?;
        let keys = if self.config.tasks.any_queue_task() {
            Some(
                texts
                    .iter()
                    .zip(&frames)
                    .map(|(t, f)| key_forward(&self.config.model, &self.key, t, f))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok((owners, batch, keys))
    }

    /// One optimizer step: augment, key forward on originals, losses,
    /// backward, query update, momentum update, queue push.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let (owners, batch, keys) = self.step_inputs(step)?;
        self.mark(StepEvent::Augment);
        self.mark(StepEvent::KeyForward);

        self.params.zero_grads();
        let mut tape = Tape::new();
        let ctx = LossContext {
            config: &self.config,
            queues: &self.queues,
            step,
        };
        let queues_warm = ctx.queues_warm();
        let bundle = batch_losses(&mut tape, &self.params, &ctx, &owners, &batch, keys.as_deref())?;
        let total = bundle.total(&mut tape, &self.config.tasks)?;
        let losses = bundle.values(&tape, &self.config.tasks);
        let total_value = tape.value(total).item();
        if !total_value.is_finite() {
            let task = losses.iter().find(|(_, v)| !v.is_finite()).map_or("total", |(t, _)| t.name());
            return Err(Error::NonFiniteLoss { task });
        }
        self.mark(StepEvent::Losses);

        if tape.requires_grad(total) {
            tape.backward(total, &mut self.params)?;
        }
        self.mark(StepEvent::Backward);
        self.optimizer.step(&mut self.params)?;
        self.mark(StepEvent::OptimizerStep);
        momentum_update(&mut self.key, &self.params, self.config.momentum)?;
        self.mark(StepEvent::MomentumUpdate);
        if let Some(keys) = &keys {
            for ((owner, key), ex) in owners.iter().zip(keys).zip(&batch.examples) {
                self.queues.push_example(*owner, key, &ex.original_frames.mask)?;
            }
            self.mark(StepEvent::QueuePush);
        }
        self.step += 1;
        Ok(StepReport {
            step,
            losses,
            total: total_value,
            queues_warm,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.config.model.clone(),
            step: self.step,
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            key: Some(self.key.clone()),
            queues: self.config.include_queues.then(|| self.queues.clone()),
        }
    }

    /// Train until [`Self::total_steps`], appending to `out/metrics.tsv`
    /// (truncated on a fresh run; a header starts every new log), writing
    /// periodic `out/step-N.ckpt` files and `out/final.ckpt`.
    pub fn run(&mut self, out: &Path) -> Result<RunSummary> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let log_path = out.join("metrics.tsv");
        let file = if self.step == 0 {
            File::create(&log_path)
        } else {
            OpenOptions::new().append(true).create(true).open(&log_path)
        }
        .map_err(|e| Error::io(&log_path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(&log_path, e))?.len() == 0;
        let mut log = BufWriter::new(file);
        if empty {
            writeln!(log, "{METRICS_HEADER}").map_err(|e| Error::io(&log_path, e))?;
        }
        let mut reports = Vec::new();
        while self.step < self.total_steps() {
            let r = self.train_step()?;
            writeln!(log, "{}", r.tsv_line()).map_err(|e| Error::io(&log_path, e))?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.step % every == 0 && self.step < self.total_steps() {
                self.checkpoint().save(&out.join(format!("step-{}.ckpt", self.step)))?;
            }
            reports.push(r);
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let final_ckpt = out.join("final.ckpt");
        self.checkpoint().save(&final_ckpt)?;
        Ok(RunSummary {
            reports,
            metrics: log_path,
            checkpoint: final_ckpt,
        })
    }
}

pub struct RunSummary {
    pub reports: Vec<StepReport>,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

/// Load the data named by the config and train from scratch.
pub fn run_pretraining(config: &TrainConfig, out: &Path) -> Result<RunSummary> {
    let data_path = config
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("`data` must name a record file".into()))?;
    let data = Dataset::load(data_path)?;
    Pretrainer::new(config.clone(), &data)?.run(out)
}
