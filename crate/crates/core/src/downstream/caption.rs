use super::metrics::{content_tokens, text_gen_metrics, TextGenMetrics};
use super::{check_data, run_finetune};
use crate::model::{ModelConfig, Network, TextInput, CLS, MASK, PAD, SEP};
use crate::numerics::{ParamStore, Tape, Var};
use crate::pipeline::{generation_pair, Dataset, FinetuneConfig, VideoTextRecord};
use crate::{Error, Result};

/// A generated token sequence (without the leading [CLS]; ends with [SEP]
/// when finished) and its total log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Length-normalized log-probability.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }
}

/// Tokens the decoder may emit.
fn allowed(token: usize) -> bool {
    !matches!(token, PAD | CLS | MASK)
}

fn next_log_probs(net: &Network, tape: &mut Tape, tokens: &[usize], context: Var, mask: &[bool]) -> Result<Vec<f64>> {
    let mut prev = Vec::with_capacity(tokens.len() + 1);
    prev.push(CLS);
    prev.extend_from_slice(tokens);
    let logits = net.decode(tape, &prev, context, mask)?;
    let row = tape.value(logits).row_slice(prev.len() - 1);
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(row.iter().map(|v| v - lse).collect())
}

fn length_limit(net: &Network, max_len: usize) -> usize {
    max_len.min(net.config.max_text)
}

/// Pick the most probable allowed token at every step until [SEP] or
/// `max_len` tokens.
pub fn greedy_decode(net: &Network, tape: &mut Tape, context: Var, mask: &[bool], max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..length_limit(net, max_len) {
        let lp = next_log_probs(net, tape, &h.tokens, context, mask)?;
        // First maximum wins ties.
        let (tok, best) = lp
            .iter()
            .enumerate()
            .filter(|(t, _)| allowed(*t))
            .fold((SEP, f64::NEG_INFINITY), |acc, (t, &v)| if v > acc.1 { (t, v) } else { acc });
        h.tokens.push(tok);
        h.log_prob += best;
        if tok == SEP {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Beam search of constant width `beam`, ranked by length-normalized
/// log-probability. Candidates are kept in order of total log-probability;
/// a candidate ending in [SEP] leaves the beam as a finished hypothesis.
/// The greedy hypothesis is always among the candidates, so the result
/// never scores below it; with `beam == 1` the search is greedy.
pub fn beam_search(net: &Network, tape: &mut Tape, context: Var, mask: &[bool], beam: usize, max_len: usize) -> Result<Hypothesis> {
    if beam < 1 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done = Vec::new();
    for _ in 0..length_limit(net, max_len) {
        let mut cands = Vec::new();
        for (h_idx, h) in live.iter().enumerate() {
            let lp = next_log_probs(net, tape, &h.tokens, context, mask)?;
            for (tok, &v) in lp.iter().enumerate().filter(|(t, _)| allowed(*t)) {
                cands.push((h.log_prob + v, h_idx, tok));
            }
        }
        // Stable: ties keep (hypothesis, token) order.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::with_capacity(beam);
        for &(log_prob, h_idx, tok) in cands.iter().take(beam) {
            let mut tokens = live[h_idx].tokens.clone();
            tokens.push(tok);
            let h = Hypothesis {
                tokens,
                log_prob,
                finished: tok == SEP,
            };
            if h.finished {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    let mut best: Option<Hypothesis> = None;
    for h in done.into_iter().chain(live) {
        if best.as_ref().is_none_or(|b| h.score() > b.score()) {
            best = Some(h);
        }
    }
    let best = best.expect("the search yields at least one hypothesis");
    let greedy = greedy_decode(net, tape, context, mask, max_len)?;
    Ok(if greedy.score() > best.score() { greedy } else { best })
}

fn abstract_input(record: &VideoTextRecord, cfg: &ModelConfig) -> Result<TextInput> {
    let tokens = record
        .abstract_tokens
        .as_ref()
        .ok_or_else(|| Error::Input(format!("record `{}` has no abstract to caption", record.id)))?;
    TextInput::padded(tokens, cfg.max_text).map_err(|e| Error::Input(format!("record `{}` abstract: {e}", record.id)))
}

/// Teacher-forced token-level cross-entropy of the abstracts of `idx`,
/// conditioned on title and frames.
pub fn caption_loss(tape: &mut Tape, net: &Network, data: &Dataset, idx: &[usize]) -> Result<Var> {
    let cfg = net.config;
    let mut logits = Vec::with_capacity(idx.len());
    let mut targets = Vec::new();
    for &i in idx {
        let rec = &data.records[i];
        let (input, target) = generation_pair(&abstract_input(rec, cfg)?);
        let (text, frames) = rec.inputs(cfg)?;
        let enc = net.forward(tape, &text, &frames)?;
        let (context, mask) = net.decoder_context(tape, &enc, &text, &frames.mask)?;
        logits.push(net.decode(tape, &input, context, &mask)?);
        targets.extend(target);
    }
    let logits = tape.concat_rows(&logits)?;
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// Fine-tune the encoder-decoder to generate abstracts. Returns the
/// per-step loss.
pub fn finetune_caption(cfg: &ModelConfig, params: &mut ParamStore, data: &Dataset, ft: &FinetuneConfig, seed: u64) -> Result<Vec<f64>> {
    check_data(cfg, data)?;
    for r in &data.records {
        abstract_input(r, cfg)?;
    }
    run_finetune(params, data, ft, seed, "caption", |tape, p, idx| {
        caption_loss(tape, &Network::new(cfg, p), data, idx)
    })
}

/// Generated abstracts and corpus metrics against the references.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionReport {
    /// `(record id, generated tokens)`.
    pub hypotheses: Vec<(String, Vec<usize>)>,
    pub metrics: TextGenMetrics,
}

/// Beam-search an abstract for every record and score the content tokens
/// against the reference abstracts.
pub fn evaluate_caption(
    cfg: &ModelConfig,
    params: &ParamStore,
    data: &Dataset,
    beam: usize,
    max_len: usize,
) -> Result<CaptionReport> {
    check_data(cfg, data)?;
    let net = Network::new(cfg, params);
    let mut hypotheses = Vec::with_capacity(data.len());
    let mut hyps = Vec::with_capacity(data.len());
    let mut refs = Vec::with_capacity(data.len());
    for rec in &data.records {
        let reference = abstract_input(rec, cfg)?;
        let (text, frames) = rec.inputs(cfg)?;
        let mut tape = Tape::no_grad();
        let enc = net.forward(&mut tape, &text, &frames)?;
        let (context, mask) = net.decoder_context(&mut tape, &enc, &text, &frames.mask)?;
        let h = beam_search(&net, &mut tape, context, &mask, beam, max_len)?;
        hyps.push(content_tokens(&h.tokens));
        refs.push(content_tokens(&reference.ids));
        hypotheses.push((rec.id.clone(), h.tokens));
    }
    let metrics = text_gen_metrics(&hyps, &refs)?;
    Ok(CaptionReport { hypotheses, metrics })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::{init_params, FrameInput};
    use crate::pipeline::{generate_synthetic, SyntheticSpec};

    fn cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            hidden: 8,
            enc_blocks: 1,
            heads: 2,
            max_text: 8,
            max_frames: 4,
            vocab_size: 12,
            frame_dim: 4,
            ff_mult: 2,
            init_seed: seed,
            ..ModelConfig::default()
        }
    }

    fn search(seed: u64, beam: usize, max_len: usize) -> (Hypothesis, Hypothesis) {
        let cfg = cfg(seed);
        let mut params = init_params(&cfg).unwrap();
        // Sharpen the output distribution so search choices matter.
        for v in params.get_mut("emb.token").unwrap().data_mut() {
            *v *= 40.0;
        }
        let net = Network::new(&cfg, &params);
        let mut tape = Tape::no_grad();
        let text = TextInput::padded(&[CLS, 5, 6, SEP], cfg.max_text).unwrap();
        let frames = FrameInput::padded(&[vec![0.5, -1.0, 0.2, 0.0]], cfg.max_frames, cfg.frame_dim).unwrap();
        let enc = net.forward(&mut tape, &text, &frames).unwrap();
        let (ctx, mask) = net.decoder_context(&mut tape, &enc, &text, &frames.mask).unwrap();
        let g = greedy_decode(&net, &mut tape, ctx, &mask, max_len).unwrap();
        let b = beam_search(&net, &mut tape, ctx, &mask, beam, max_len).unwrap();
        (g, b)
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..5 {
            let (g, b) = search(seed, 1, 6);
            assert_eq!(g, b);
        }
    }

    #[test]
    fn zero_beam_errors() {
        let cfg = cfg(0);
        let params = init_params(&cfg).unwrap();
        let net = Network::new(&cfg, &params);
        let mut tape = Tape::no_grad();
        let ctx = tape.constant(crate::numerics::Tensor::zeros(&[1, 8]));
        assert!(beam_search(&net, &mut tape, ctx, &[true], 0, 4).is_err());
    }

    #[test]
    fn generation_respects_limits() {
        let (g, b) = search(3, 3, 5);
        for h in [g, b] {
            assert!(!h.tokens.is_empty() && h.tokens.len() <= 5);
            assert!(h.tokens.iter().all(|&t| allowed(t)));
            assert_eq!(h.finished, h.tokens.last() == Some(&SEP));
            assert!(h.tokens[..h.tokens.len() - 1].iter().all(|&t| t != SEP));
            assert!(h.log_prob <= 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn beam_never_scores_below_greedy(seed in 0u64..1000, beam in 1usize..5) {
            let (g, b) = search(seed, beam, 6);
            prop_assert!(b.score() >= g.score() - 1e-12);
        }
    }

    #[test]
    fn finetuning_fits_abstracts() {
        let spec = SyntheticSpec {
            records: 4,
            topics: 2,
            vocab_size: 12,
            frame_dim: 4,
            max_frames: 3,
            min_tokens: 2,
            max_tokens: 4,
            with_abstract: true,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let cfg = cfg(0);
        let mut params = init_params(&cfg).unwrap();
        let before = evaluate_caption(&cfg, &params, &data, 2, 8).unwrap();
        let ft = FinetuneConfig {
            steps: 150,
            batch_size: 4,
            learning_rate: 1e-2,
            ..FinetuneConfig::default()
        };
        let losses = finetune_caption(&cfg, &mut params, &data, &ft, 0).unwrap();
        assert!(losses[149] < 0.5 * losses[0], "{} -> {}", losses[0], losses[149]);
        let after = evaluate_caption(&cfg, &params, &data, 2, 8).unwrap();
        assert_eq!(after.hypotheses.len(), 4);
        assert!(after.metrics.rouge_l > before.metrics.rouge_l, "{before:?} {after:?}");
    }

    #[test]
    fn missing_abstract_errors() {
        let data = generate_synthetic(&SyntheticSpec {
            records: 2,
            vocab_size: 12,
            frame_dim: 4,
            max_frames: 3,
            max_tokens: 4,
            with_abstract: false,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cfg = cfg(0);
        let params = init_params(&cfg).unwrap();
        assert!(evaluate_caption(&cfg, &params, &data, 2, 8).is_err());
    }
}
