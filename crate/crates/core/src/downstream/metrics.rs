use std::collections::HashMap;

use crate::model::{is_structural, MASK};
use crate::{Error, Result};

/// ROUGE-L recall weight: `F = (1 + b^2) P R / (R + b^2 P)`.
pub const ROUGE_BETA: f64 = 1.2;

/// Cosine similarity. Errors on a zero-norm input.
pub fn score_pair(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("cannot compare vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Input("cosine similarity of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// 1-based rank of candidate `positive` when candidates are sorted by
/// descending score; equal scores are ordered by candidate index.
pub fn rank_of(scores: &[f64], positive: usize) -> Result<usize> {
    let p = *scores
        .get(positive)
        .ok_or_else(|| Error::Input(format!("positive index {positive} outside {} candidates", scores.len())))?;
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > p || (s == p && i < positive))
        .count();
    Ok(ahead + 1)
}

/// Fraction of queries whose positive ranks within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Input("recall@k needs k >= 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::Input("recall@k of an empty query set".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Corpus-level generation metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextGenMetrics {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
}

/// Drop structural and mask tokens before scoring.
pub fn content_tokens(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&t| !is_structural(t) && t != MASK).collect()
}

fn ngrams(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with uniform weights over 1..=`max_n`-grams, clipped counts
/// and the brevity penalty `exp(1 - r/c)` when `c < r`.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>], max_n: usize) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Input("empty reference set".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let rc = ngrams(rf, n);
            for (g, cnt) in ngrams(h, n) {
                matched[n - 1] += cnt.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += cnt;
            }
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / max_n as f64).exp())
}

fn lcs(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    for &x in a {
        let mut cur = vec![0; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F-measure.
pub fn rouge_l(hyp: &[usize], reference: &[usize]) -> f64 {
    let l = lcs(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// BLEU-1, BLEU-4 and mean sentence ROUGE-L over a corpus.
pub fn text_gen_metrics(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<TextGenMetrics> {
    let bleu1 = corpus_bleu(hyps, refs, 1)?;
    let bleu4 = corpus_bleu(hyps, refs, 4)?;
    let rouge_l = hyps.iter().zip(refs).map(|(h, r)| rouge_l(h, r)).sum::<f64>() / refs.len() as f64;
    Ok(TextGenMetrics { bleu1, bleu4, rouge_l })
}
