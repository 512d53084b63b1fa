use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{rank_of, recall_at_k, score_pair};
use super::{check_data, run_finetune};
use crate::augment::derive_seed;
use crate::model::{FrameInput, ModelConfig, Network, TextInput, CLS, SEP};
use crate::numerics::{ParamStore, Tape, Var};
use crate::pipeline::{Dataset, FinetuneConfig, VideoTextRecord};
use crate::{Error, Result};

/// Cut-offs reported by [`evaluate_retrieval`].
pub const RECALL_KS: [usize; 4] = [1, 5, 10, 20];

const NEGATIVE_STREAM: u64 = 0x4e_4547;

/// What the query is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrievalMode {
    /// A title against videos: the text-only `R_t` of the query is compared
    /// with the frames-only `R_v` of each candidate.
    Text,
    /// A cover image against videos: the image replaces frame 0 of the
    /// candidate, and the candidate's `R_v` with and without the
    /// replacement are compared.
    Image,
}

impl RetrievalMode {
    pub fn name(self) -> &'static str {
        match self {
            RetrievalMode::Text => "text",
            RetrievalMode::Image => "image",
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(RetrievalMode::Text),
            "image" => Ok(RetrievalMode::Image),
            other => Err(Error::Config(format!("unknown retrieval mode `{other}` (expected text or image)"))),
        }
    }
}

/// Ranks of the positives and recall at [`RECALL_KS`].
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub mode: RetrievalMode,
    /// Candidates per query (positive included).
    pub candidates: usize,
    pub ranks: Vec<usize>,
    pub recall: Vec<(usize, f64)>,
}

impl RetrievalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

fn text_query(net: &Network, tape: &mut Tape, text: &TextInput) -> Result<Var> {
    let cfg = net.config;
    Ok(net.forward(tape, text, &FrameInput::empty(cfg.max_frames, cfg.frame_dim))?.r_t)
}

fn video_key(net: &Network, tape: &mut Tape, frames: &FrameInput) -> Result<Var> {
    let bare = TextInput::padded(&[CLS, SEP], net.config.max_text)?;
    let enc = net.forward(tape, &bare, frames)?;
    enc.r_v.ok_or_else(|| Error::Input("a retrieval candidate has no frames".into()))
}

fn full_r_v(net: &Network, tape: &mut Tape, text: &TextInput, frames: &FrameInput) -> Result<Var> {
    let enc = net.forward(tape, text, frames)?;
    enc.r_v.ok_or_else(|| Error::Input("a retrieval candidate has no frames".into()))
}

fn with_image(record: &VideoTextRecord, image: &[f64], cfg: &ModelConfig) -> Result<FrameInput> {
    let mut frames = record.frames.clone();
    frames[0] = image.to_vec();
    FrameInput::padded(&frames, cfg.max_frames, cfg.frame_dim)
}

fn image_of(record: &VideoTextRecord) -> Result<&[f64]> {
    record
        .image
        .as_deref()
        .ok_or_else(|| Error::Input(format!("record `{}` has no image for image retrieval", record.id)))
}

/// Symmetric in-batch InfoNCE over cosine scores: row `i` of the `[B,B]`
/// score matrix should peak at column `i`, and so should column `i`.
pub fn retrieval_loss(
    tape: &mut Tape,
    net: &Network,
    data: &Dataset,
    idx: &[usize],
    mode: RetrievalMode,
    temperature: f64,
) -> Result<Var> {
    let cfg = net.config;
    let b = idx.len();
    let logits = match mode {
        RetrievalMode::Text => {
            let mut qs = Vec::with_capacity(b);
            let mut ks = Vec::with_capacity(b);
            for &i in idx {
                let (text, frames) = data.records[i].inputs(cfg)?;
                qs.push(text_query(net, tape, &text)?);
                ks.push(video_key(net, tape, &frames)?);
            }
            let q = tape.concat_rows(&qs)?;
            let q = tape.l2_normalize_rows(q)?;
            let k = tape.concat_rows(&ks)?;
            let k = tape.l2_normalize_rows(k)?;
            let kt = tape.transpose(k)?;
            tape.matmul(q, kt)?
        }
        RetrievalMode::Image => {
            let mut originals = Vec::with_capacity(b);
            for &c in idx {
                let (text, frames) = data.records[c].inputs(cfg)?;
                let v = full_r_v(net, tape, &text, &frames)?;
                originals.push(tape.l2_normalize_rows(v)?);
            }
            let v = tape.concat_rows(&originals)?;
            let mut rows = Vec::with_capacity(b);
            for &i in idx {
                let image = image_of(&data.records[i])?;
                let mut qs = Vec::with_capacity(b);
                for &c in idx {
                    let rec = &data.records[c];
                    let q = full_r_v(net, tape, &rec.text_input(cfg)?, &with_image(rec, image, cfg)?)?;
                    qs.push(tape.l2_normalize_rows(q)?);
                }
                let q = tape.concat_rows(&qs)?;
                let prod = tape.mul(q, v)?;
                let col = tape.sum_cols(prod)?;
                rows.push(tape.transpose(col)?);
            }
            tape.concat_rows(&rows)?
        }
    };
    let logits = tape.scale(logits, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..b).collect();
    let forward = tape.cross_entropy(logits, &targets)?;
    let lt = tape.transpose(logits)?;
    let backward = tape.cross_entropy(lt, &targets)?;
    let sum = tape.add(forward, backward)?;
    Ok(tape.scale(sum, 0.5)?)
}

/// Fine-tune `params` for retrieval on `data`. Returns the per-step loss.
pub fn finetune_retrieval(
    cfg: &ModelConfig,
    params: &mut ParamStore,
    data: &Dataset,
    mode: RetrievalMode,
    ft: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    check_data(cfg, data)?;
    if mode == RetrievalMode::Image {
        for r in &data.records {
            image_of(r)?;
        }
    }
    run_finetune(params, data, ft, seed, "retrieval", |tape, p, idx| {
        let net = Network::new(cfg, p);
        retrieval_loss(tape, &net, data, idx, mode, ft.temperature)
    })
}

fn rep(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).data().to_vec()
}

/// Rank every record's positive among itself and `negatives` other records
/// (all others when fewer exist), sampled per query from `seed`. Candidates
/// are scored by cosine similarity and listed in dataset order, so ties go
/// to the lower record index.
pub fn evaluate_retrieval(
    cfg: &ModelConfig,
    params: &ParamStore,
    data: &Dataset,
    mode: RetrievalMode,
    negatives: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    check_data(cfg, data)?;
    let net = Network::new(cfg, params);
    let n = data.len();
    let mut tape = Tape::no_grad();

    // Per-record representations that do not depend on the query.
    let mut queries = Vec::new();
    let mut keys = Vec::with_capacity(n);
    for r in &data.records {
        let (text, frames) = r.inputs(cfg)?;
        match mode {
            RetrievalMode::Text => {
                let q = text_query(&net, &mut tape, &text)?;
                queries.push(rep(&tape, q));
                let k = video_key(&net, &mut tape, &frames)?;
                keys.push(rep(&tape, k));
            }
            RetrievalMode::Image => {
                image_of(r)?;
                let k = full_r_v(&net, &mut tape, &text, &frames)?;
                keys.push(rep(&tape, k));
            }
        }
        tape.clear();
    }

    let count = negatives.min(n - 1);
    let mut ranks = Vec::with_capacity(n);
    for q in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, q as u64, NEGATIVE_STREAM));
        let mut cands: Vec<usize> = sample(&mut rng, n - 1, count)
            .into_iter()
            .map(|j| if j >= q { j + 1 } else { j })
            .collect();
        cands.push(q);
        cands.sort_unstable();
        let mut scores = Vec::with_capacity(cands.len());
        for &c in &cands {
            let s = match mode {
                RetrievalMode::Text => score_pair(&queries[q], &keys[c])?,
                RetrievalMode::Image => {
                    let rec = &data.records[c];
                    let frames = with_image(rec, image_of(&data.records[q])?, cfg)?;
                    let v = full_r_v(&net, &mut tape, &rec.text_input(cfg)?, &frames)?;
                    let s = score_pair(&rep(&tape, v), &keys[c])?;
                    tape.clear();
                    s
                }
            };
            scores.push(s);
        }
        let pos = cands.iter().position(|&c| c == q).expect("positive is a candidate");
        ranks.push(rank_of(&scores, pos)?);
    }
    let recall = RECALL_KS
        .iter()
        .map(|&k| Ok((k, recall_at_k(&ranks, k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalReport {
        mode,
        candidates: count + 1,
        ranks,
        recall,
    })
}
