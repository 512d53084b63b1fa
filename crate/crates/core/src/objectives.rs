//! Proxy-task losses and their combination.
//!
//! All contrastive terms share one InfoNCE kernel over dot-product logits
//! scaled by a temperature. Positives and negatives enter as tape
//! constants, so gradients reach the query side only.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numerics::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Default contrastive temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

/// The loss components. `VsaV2t`/`VsaT2v` are the two directions of the
/// dual alignment task; `LegacyVsa` is the binary matched/mismatched
/// classifier kept for ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Mlm,
    Msom,
    Mfom,
    Msg,
    IntraMfm,
    InterMfm,
    VsaV2t,
    VsaT2v,
    LegacyVsa,
}

impl Task {
    pub const ALL: [Task; 9] = [
        Task::Mlm,
        Task::Msom,
        Task::Mfom,
        Task::Msg,
        Task::IntraMfm,
        Task::InterMfm,
        Task::VsaV2t,
        Task::VsaT2v,
        Task::LegacyVsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Mlm => "mlm",
            Task::Msom => "msom",
            Task::Mfom => "mfom",
            Task::Msg => "msg",
            Task::IntraMfm => "intra_mfm",
            Task::InterMfm => "inter_mfm",
            Task::VsaV2t => "vsa_v2t",
            Task::VsaT2v => "vsa_t2v",
            Task::LegacyVsa => "legacy_vsa",
        }
    }

    /// Whether the task draws negatives from a memory queue.
    pub fn uses_queue(self) -> bool {
        matches!(self, Task::InterMfm | Task::VsaV2t | Task::VsaT2v)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-task enable switches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskFlags {
    pub mlm: bool,
    pub msom: bool,
    pub mfom: bool,
    pub msg: bool,
    pub intra_mfm: bool,
    pub inter_mfm: bool,
    pub dual_vsa: bool,
    pub legacy_vsa: bool,
}

impl Default for TaskFlags {
    fn default() -> Self {
        Self::preset("M6").expect("known preset")
    }
}

impl TaskFlags {
    pub fn none() -> Self {
        Self {
            mlm: false,
            msom: false,
            mfom: false,
            msg: false,
            intra_mfm: false,
            inter_mfm: false,
            dual_vsa: false,
            legacy_vsa: false,
        }
    }

    /// Ablation presets:
    /// - `M1`: MLM + MSG
    /// - `M2`: M1 + MSOM + MFOM
    /// - `M3`: M2 + intra-MFM + inter-MFM
    /// - `M4`: M3 + binary VSA
    /// - `M5`, `M6`: M3 + dual-VSA (the two rows differ only in
    ///   pre-training data size)
    pub fn preset(name: &str) -> Result<Self> {
        let mut f = Self::none();
        let level = match name {
            "M1" => 1,
            "M2" => 2,
            "M3" => 3,
            "M4" => 4,
            "M5" | "M6" => 5,
            other => return Err(Error::Config(format!("unknown task preset `{other}` (expected M1..M6)"))),
        };
        f.mlm = true;
        f.msg = true;
        if level >= 2 {
            f.msom = true;
            f.mfom = true;
        }
        if level >= 3 {
            f.intra_mfm = true;
            f.inter_mfm = true;
        }
        if level == 4 {
            f.legacy_vsa = true;
        }
        if level == 5 {
            f.dual_vsa = true;
        }
        Ok(f)
    }

    pub fn enabled(&self, task: Task) -> bool {
        match task {
            Task::Mlm => self.mlm,
            Task::Msom => self.msom,
            Task::Mfom => self.mfom,
            Task::Msg => self.msg,
            Task::IntraMfm => self.intra_mfm,
            Task::InterMfm => self.inter_mfm,
            Task::VsaV2t | Task::VsaT2v => self.dual_vsa,
            Task::LegacyVsa => self.legacy_vsa,
        }
    }

    pub fn any(&self) -> bool {
        Task::ALL.iter().any(|t| self.enabled(*t))
    }

    pub fn any_queue_task(&self) -> bool {
        self.inter_mfm || self.dual_vsa
    }
}

/// One InfoNCE group: query rows sharing a negative set.
pub struct ContrastGroup {
    /// `[r,d]` query rows (on the tape).
    pub queries: Var,
    /// `[r,d]` positive keys, one per query row (detached).
    pub positives: Tensor,
    /// `[K,d]` negative keys (detached).
    pub negatives: Tensor,
}

/// Mean InfoNCE over the rows of `q` against a shared negative set:
/// `-log(exp(q.k+/t) / (exp(q.k+/t) + sum_i exp(q.k-_i/t)))`.
pub fn info_nce(tape: &mut Tape, q: Var, positives: &Tensor, negatives: &Tensor, tau: f64) -> Result<Var> {
    let rows = tape.shape(q)[0];
    let sum = info_nce_sum(tape, q, positives, negatives, tau)?;
    Ok(tape.scale(sum, 1.0 / rows as f64)?)
}

/// Sum (not mean) of the per-row InfoNCE terms.
pub fn info_nce_sum(tape: &mut Tape, q: Var, positives: &Tensor, negatives: &Tensor, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if negatives.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Queue("contrastive loss needs at least one negative".into()));
    }
    let rows = tape.shape(q)[0];
    let pos = tape.constant(positives.detached());
    let neg = tape.constant(negatives.detached());
    let prod = tape.mul(q, pos)?;
    let pos_logit = tape.sum_cols(prod)?;
    let neg_t = tape.transpose(neg)?;
    let neg_logits = tape.matmul(q, neg_t)?;
    let logits = tape.concat_cols(&[pos_logit, neg_logits])?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let ce = tape.cross_entropy(logits, &vec![0; rows])?;
    Ok(tape.scale(ce, rows as f64)?)
}

/// Mean InfoNCE over all rows of all groups; zero when there are no rows.
pub fn info_nce_groups(tape: &mut Tape, groups: &[ContrastGroup], tau: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(groups.len());
    let mut rows = 0;
    for g in groups {
        rows += tape.shape(g.queries)[0];
        terms.push(info_nce_sum(tape, g.queries, &g.positives, &g.negatives, tau)?);
    }
    if rows == 0 {
        return Ok(zero(tape));
    }
    let total = tape.add_all(&terms)?;
    Ok(tape.scale(total, 1.0 / rows as f64)?)
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn check_labels(task: &str, labels: &[usize], classes: usize) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label(format!("{task} label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Mean cross-entropy over rows; zero for an empty set.
pub fn classification_loss(tape: &mut Tape, task: &str, logits: Option<Var>, labels: &[usize]) -> Result<Var> {
    let Some(logits) = logits else {
        return Ok(zero(tape));
    };
    let shape = tape.shape(logits).to_vec();
    if shape[0] != labels.len() {
        return Err(Error::Input(format!("{task}: {} logit rows for {} labels", shape[0], labels.len())));
    }
    check_labels(task, labels, shape[1])?;
    Ok(tape.cross_entropy(logits, labels)?)
}

/// Token prediction at masked positions (`[P,V]` logits).
pub fn mlm_loss(tape: &mut Tape, logits: Option<Var>, targets: &[usize]) -> Result<Var> {
    classification_loss(tape, "mlm", logits, targets)
}

/// Sentence-order classification (`[B',6]` logits).
pub fn msom_loss(tape: &mut Tape, logits: Option<Var>, labels: &[usize]) -> Result<Var> {
    classification_loss(tape, "msom", logits, labels)
}

/// Original-index prediction for shuffled frames (`[S,m]` logits).
pub fn mfom_loss(tape: &mut Tape, logits: Option<Var>, indices: &[usize]) -> Result<Var> {
    classification_loss(tape, "mfom", logits, indices)
}

/// Teacher-forced generation: decoder logits of all examples stacked row-wise
/// with one target per row (pad targets already removed).
pub fn msg_loss(tape: &mut Tape, logits: Option<Var>, targets: &[usize]) -> Result<Var> {
    classification_loss(tape, "msg", logits, targets)
}

/// Binary matched/mismatched classification from `[CLS]`.
pub fn legacy_vsa_loss(tape: &mut Tape, logits: Option<Var>, labels: &[usize]) -> Result<Var> {
    classification_loss(tape, "legacy_vsa", logits, labels)
}

/// Masked-frame feature contrast: each projected row must pick its own
/// original feature (`pool` row `targets[i]`) out of every real original
/// frame in the batch.
pub fn intra_mfm_loss(tape: &mut Tape, projected: Option<Var>, pool: &Tensor, targets: &[usize], tau: f64) -> Result<Var> {
    let Some(projected) = projected else {
        return Ok(zero(tape));
    };
    if pool.rows() < 2 {
        return Err(Error::Input("intra-frame contrast needs at least two real frames in the batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    check_labels("intra_mfm", targets, pool.rows())?;
    let p = tape.constant(pool.detached());
    let pt = tape.transpose(p)?;
    let logits = tape.matmul(projected, pt)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    Ok(tape.cross_entropy(logits, targets)?)
}

/// Computed loss components on the tape.
#[derive(Default)]
pub struct LossBundle {
    pub terms: BTreeMap<Task, Var>,
}

impl LossBundle {
    pub fn insert(&mut self, task: Task, v: Var) {
        self.terms.insert(task, v);
    }

    /// Unweighted sum of the components whose task is enabled. Errors when
    /// every task is disabled or a component is not finite.
    pub fn total(&self, tape: &mut Tape, flags: &TaskFlags) -> Result<Var> {
        if !flags.any() {
            return Err(Error::Config("every pre-training task is disabled".into()));
        }
        let mut parts = Vec::new();
        for (&task, &v) in &self.terms {
            if !tape.value(v).is_finite() {
                return Err(Error::NonFiniteLoss { task: task.name() });
            }
            if flags.enabled(task) {
                parts.push(v);
            }
        }
        if parts.is_empty() {
            return Ok(zero(tape));
        }
        Ok(tape.add_all(&parts)?)
    }

    /// Scalar value of every task (0 for absent or disabled ones).
    pub fn values(&self, tape: &Tape, flags: &TaskFlags) -> BTreeMap<Task, f64> {
        Task::ALL
            .iter()
            .map(|&t| {
                let v = match self.terms.get(&t) {
                    Some(&v) if flags.enabled(t) => tape.value(v).item(),
                    _ => 0.0,
                };
                (t, v)
            })
            .collect()
    }
}
