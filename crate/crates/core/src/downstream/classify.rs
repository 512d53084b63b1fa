use std::fmt;
use std::str::FromStr;

use super::{check_data, run_finetune};
use crate::model::{add_linear_head, ModelConfig, Network};
use crate::numerics::{ParamStore, Tape, Var};
use crate::pipeline::{Dataset, FinetuneConfig, Labels};
use crate::{Error, Result};

/// Classification heads on the [CLS] output of the full encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifyTask {
    /// One head over plot categories.
    Plot,
    /// Two heads: top-level and leaf product categories.
    ProductDual,
}

impl ClassifyTask {
    pub fn name(self) -> &'static str {
        match self {
            ClassifyTask::Plot => "plot",
            ClassifyTask::ProductDual => "product-dual",
        }
    }

    /// `(head prefix, class count, label accessor)` of every head.
    #[allow(clippy::type_complexity)]
    fn heads(self, ft: &FinetuneConfig) -> Vec<(&'static str, usize, fn(&Labels) -> Option<usize>)> {
        match self {
            ClassifyTask::Plot => vec![("ft.plot", ft.plot_classes, |l| l.plot)],
            ClassifyTask::ProductDual => vec![
                ("ft.top", ft.top_cate_classes, |l| l.top_cate),
                ("ft.leaf", ft.leaf_cate_classes, |l| l.leaf_cate),
            ],
        }
    }
}

impl fmt::Display for ClassifyTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassifyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plot" => Ok(ClassifyTask::Plot),
            "product-dual" => Ok(ClassifyTask::ProductDual),
            other => Err(Error::Config(format!("unknown classification task `{other}` (expected plot or product-dual)"))),
        }
    }
}

/// Every record's label for each head, checked against the class counts.
fn labels(data: &Dataset, task: ClassifyTask, ft: &FinetuneConfig) -> Result<Vec<Vec<usize>>> {
    task.heads(ft)
        .into_iter()
        .map(|(head, classes, get)| {
            if classes == 0 {
                return Err(Error::Config(format!("head `{head}` needs at least one class")));
            }
            data.records
                .iter()
                .map(|r| {
                    let label = get(&r.labels).ok_or_else(|| Error::Label(format!("record `{}` has no label for `{head}`", r.id)))?;
                    if label >= classes {
                        return Err(Error::Label(format!(
                            "record `{}`: label {label} for `{head}` is outside {classes} classes",
                            r.id
                        )));
                    }
                    Ok(label)
                })
                .collect()
        })
        .collect()
}

fn cls_rows(tape: &mut Tape, net: &Network, data: &Dataset, idx: &[usize]) -> Result<Var> {
    let mut rows = Vec::with_capacity(idx.len());
    for &i in idx {
        let (text, frames) = data.records[i].inputs(net.config)?;
        rows.push(net.forward(tape, &text, &frames)?.cls);
    }
    Ok(tape.concat_rows(&rows)?)
}

/// Add any missing heads, then fine-tune with the summed per-head
/// cross-entropy. Returns the per-step loss.
pub fn finetune_classifier(
    cfg: &ModelConfig,
    params: &mut ParamStore,
    data: &Dataset,
    task: ClassifyTask,
    ft: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    check_data(cfg, data)?;
    let labels = labels(data, task, ft)?;
    let heads = task.heads(ft);
    for (k, (head, classes, _)) in heads.iter().enumerate() {
        if !params.contains(&format!("{head}.w")) {
            add_linear_head(params, head, cfg.hidden, *classes, seed.wrapping_add(k as u64));
        }
    }
    run_finetune(params, data, ft, seed, "classification", |tape, p, idx| {
        let net = Network::new(cfg, p);
        let cls = cls_rows(tape, &net, data, idx)?;
        let mut terms = Vec::with_capacity(heads.len());
        for ((head, _, _), lab) in heads.iter().zip(&labels) {
            let logits = net.linear(tape, head, cls)?;
            let targets: Vec<usize> = idx.iter().map(|&i| lab[i]).collect();
            terms.push(tape.cross_entropy(logits, &targets)?);
        }
        Ok(tape.add_all(&terms)?)
    })
}

/// Accuracy of each head (named by its prefix) on `data`.
pub fn evaluate_classifier(
    cfg: &ModelConfig,
    params: &ParamStore,
    data: &Dataset,
    task: ClassifyTask,
    ft: &FinetuneConfig,
) -> Result<Vec<(&'static str, f64)>> {
    check_data(cfg, data)?;
    let labels = labels(data, task, ft)?;
    let net = Network::new(cfg, params);
    let heads = task.heads(ft);
    let mut correct = vec![0usize; heads.len()];
    let mut tape = Tape::no_grad();
    for i in 0..data.len() {
        let cls = cls_rows(&mut tape, &net, data, &[i])?;
        for (k, (head, classes, _)) in heads.iter().enumerate() {
            let logits = net.linear(&mut tape, head, cls)?;
            let row = tape.value(logits).data();
            if row.len() != *classes {
                return Err(Error::ConfigMismatch {
                    field: "classes",
                    expected: classes.to_string(),
                    found: row.len().to_string(),
                });
            }
            // First maximum wins ties.
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            correct[k] += usize::from(pred == labels[k][i]);
        }
        tape.clear();
    }
    Ok(heads
        .iter()
        .zip(correct)
        .map(|((head, _, _), c)| (*head, c as f64 / data.len() as f64))
        .collect())
}
