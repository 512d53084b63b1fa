//! Multimodal transformer: text and frame embedders, a bidirectional encoder
//! over the concatenated `[text; frames]` sequence, and a causal decoder that
//! cross-attends over the encoded frames.
//!
//! Parameter names are grouped by prefix: `emb.` and `enc.` form the encoder
//! path (mirrored by the momentum key network), `dec.` is the decoder and
//! `head.` holds pre-training task heads. Fine-tuning heads use `ft.`.

mod config;
mod inputs;

#[cfg(test)]
mod tests;

pub use config::*;
pub use inputs::{FrameInput, TextInput};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Parameter prefixes shared by the query and key networks.
pub const ENCODER_PATH: [&str; 2] = ["emb.", "enc."];

const INIT_STD: f64 = 0.02;

/// Outputs of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncodedPair {
    /// `[n,d]` text outputs; pad rows are zero.
    pub w_e: Var,
    /// `[m,d]` frame outputs; pad rows are zero.
    pub f_e: Var,
    /// `[1,d]` max over content text positions (never [CLS]/[SEP]/[PAD]).
    /// Falls back to the [CLS] row when the text has no content tokens.
    pub r_t: Var,
    /// `[1,d]` max over real frames; `None` when every frame is padding.
    pub r_v: Option<Var>,
    /// `[1,d]` output at position 0.
    pub cls: Var,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn fill(shape: &[usize], v: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![v; n]).expect("shape matches")
}

fn insert_ln(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gamma"), fill(&[d], 1.0));
    store.insert(format!("{prefix}.beta"), fill(&[d], 0.0));
}

fn insert_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), normal(rng, &[fan_in, fan_out]));
    store.insert(format!("{prefix}.b"), fill(&[fan_out], 0.0));
}

fn insert_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for part in ["q", "k", "v", "o"] {
        insert_linear(store, rng, &format!("{prefix}.{part}"), d, d);
    }
}

fn insert_ffn(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, mult: usize) {
    insert_linear(store, rng, &format!("{prefix}.fc1"), d, d * mult);
    insert_linear(store, rng, &format!("{prefix}.fc2"), d * mult, d);
}

/// Freshly initialized parameters for the full query network: embedders,
/// encoder, decoder and every pre-training head.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let d = cfg.hidden;
    let mut s = ParamStore::new();

    s.insert("emb.token", normal(&mut rng, &[cfg.vocab_size, d]));
    s.insert("emb.text_pos", normal(&mut rng, &[cfg.max_text, d]));
    insert_ln(&mut s, "emb.text_ln", d);
    insert_linear(&mut s, &mut rng, "emb.frame_proj", cfg.frame_dim, d);
    s.insert("emb.frame_pos", normal(&mut rng, &[cfg.max_frames, d]));
    insert_ln(&mut s, "emb.frame_ln", d);

    for i in 0..cfg.enc_blocks {
        let p = format!("enc.{i}");
        insert_ln(&mut s, &format!("{p}.ln1"), d);
        insert_attention(&mut s, &mut rng, &format!("{p}.attn"), d);
        insert_ln(&mut s, &format!("{p}.ln2"), d);
        insert_ffn(&mut s, &mut rng, &format!("{p}.ffn"), d, cfg.ff_mult);
    }
    insert_ln(&mut s, "enc.ln_f", d);

    for i in 0..cfg.dec_blocks {
        let p = format!("dec.{i}");
        insert_ln(&mut s, &format!("{p}.ln1"), d);
        insert_attention(&mut s, &mut rng, &format!("{p}.self_attn"), d);
        insert_ln(&mut s, &format!("{p}.ln2"), d);
        insert_attention(&mut s, &mut rng, &format!("{p}.cross_attn"), d);
        insert_ln(&mut s, &format!("{p}.ln3"), d);
        insert_ffn(&mut s, &mut rng, &format!("{p}.ffn"), d, cfg.ff_mult);
    }
    insert_ln(&mut s, "dec.ln_f", d);
    if cfg.tie_output {
        s.insert("dec.out.b", fill(&[cfg.vocab_size], 0.0));
    } else {
        insert_linear(&mut s, &mut rng, "dec.out", d, cfg.vocab_size);
    }

    insert_linear(&mut s, &mut rng, "head.mlm", d, cfg.vocab_size);
    insert_linear(&mut s, &mut rng, "head.msom", d, SEGMENT_PERMUTATIONS);
    insert_linear(&mut s, &mut rng, "head.mfom", d, cfg.max_frames);
    insert_linear(&mut s, &mut rng, "head.intra_mfm", d, cfg.frame_dim);
    insert_linear(&mut s, &mut rng, "head.vsa", d, 2);
    Ok(s)
}

/// Add a fresh `d -> classes` linear head named `{prefix}.w` / `{prefix}.b`.
pub fn add_linear_head(store: &mut ParamStore, prefix: &str, d: usize, classes: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    insert_linear(store, &mut rng, prefix, d, classes);
}

/// A read-only view binding a [`ModelConfig`] to a parameter set for one
/// forward pass. Works for both the query network (full store) and the key
/// network (encoder-path subset).
#[derive(Clone, Copy)]
pub struct Network<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a ParamStore,
}

impl<'a> Network<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a ParamStore) -> Self {
        Self { config, params }
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.param(self.params, name)?)
    }

    pub fn linear(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(tape, &format!("{prefix}.w"))?;
        let b = self.p(tape, &format!("{prefix}.b"))?;
        let h = tape.matmul(x, w)?;
        Ok(tape.add_row(h, b)?)
    }

    fn ln(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let g = self.p(tape, &format!("{prefix}.gamma"))?;
        let b = self.p(tape, &format!("{prefix}.beta"))?;
        Ok(tape.layer_norm(x, g, b)?)
    }

    /// `LN(token_emb + text_pos_emb)` for each position of `ids`.
    fn embed_ids(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.config.max_text {
            return Err(Error::Input(format!(
                "text of length {} exceeds max_text {}",
                ids.len(),
                self.config.max_text
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let table = self.p(tape, "emb.token")?;
        let tok = tape.embedding(table, ids)?;
        let pos_table = self.p(tape, "emb.text_pos")?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.embedding(pos_table, &positions)?;
        let sum = tape.add(tok, pos)?;
        self.ln(tape, "emb.text_ln", sum)
    }

    /// `[n,d]` text embeddings. Pad positions are produced; the encoder masks
    /// them out.
    pub fn embed_text(&self, tape: &mut Tape, text: &TextInput) -> Result<Var> {
        self.embed_ids(tape, &text.ids)
    }

    /// `[m,d]` frame embeddings: `LN(FC(feature) + frame_pos_emb)`.
    pub fn embed_frames(&self, tape: &mut Tape, frames: &FrameInput) -> Result<Var> {
        let shape = frames.features.shape();
        if shape.len() != 2 || shape[1] != self.config.frame_dim {
            return Err(Error::Input(format!(
                "frame features have shape {shape:?}, expected [_, {}]",
                self.config.frame_dim
            )));
        }
        if shape[0] > self.config.max_frames {
            return Err(Error::Input(format!(
                "{} frames exceed max_frames {}",
                shape[0], self.config.max_frames
            )));
        }
        let x = tape.constant(frames.features.clone());
        let proj = self.linear(tape, "emb.frame_proj", x)?;
        let pos_table = self.p(tape, "emb.frame_pos")?;
        let positions: Vec<usize> = (0..shape[0]).collect();
        let pos = tape.embedding(pos_table, &positions)?;
        let sum = tape.add(proj, pos)?;
        self.ln(tape, "emb.frame_ln", sum)
    }

    /// Multi-head attention. `mask` is `[rows(x_q), rows(x_kv)]`, `true` =
    /// may attend.
    fn attention(&self, tape: &mut Tape, prefix: &str, x_q: Var, x_kv: Var, mask: &[bool]) -> Result<Var> {
        let cfg = self.config;
        let dh = cfg.head_dim();
        let q = self.linear(tape, &format!("{prefix}.q"), x_q)?;
        let k = self.linear(tape, &format!("{prefix}.k"), x_kv)?;
        let v = self.linear(tape, &format!("{prefix}.v"), x_kv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.softmax(scores, Some(mask))?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let joined = tape.concat_cols(&heads)?;
        self.linear(tape, &format!("{prefix}.o"), joined)
    }

    fn ffn(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, &format!("{prefix}.fc1"), x)?;
        let h = tape.gelu(h)?;
        self.linear(tape, &format!("{prefix}.fc2"), h)
    }

    /// Bidirectional encoder over `[text; frames]`. `text_mask` and
    /// `frame_mask` mark real (non-pad) positions.
    pub fn encode(
        &self,
        tape: &mut Tape,
        text_emb: Var,
        frame_emb: Var,
        text: &TextInput,
        frame_mask: &[bool],
    ) -> Result<EncodedPair> {
        let n = tape.shape(text_emb)[0];
        let m = tape.shape(frame_emb)[0];
        if text.mask.len() != n || frame_mask.len() != m {
            return Err(Error::Input(format!(
                "mask lengths ({}, {}) do not match sequence lengths ({n}, {m})",
                text.mask.len(),
                frame_mask.len()
            )));
        }
        let joint: Vec<bool> = text.mask.iter().chain(frame_mask).copied().collect();
        let total = n + m;
        let attn_mask: Vec<bool> = (0..total).flat_map(|_| joint.iter().copied()).collect();

        let mut x = tape.concat_rows(&[text_emb, frame_emb])?;
        for i in 0..self.config.enc_blocks {
            let p = format!("enc.{i}");
            let h = self.ln(tape, &format!("{p}.ln1"), x)?;
            let a = self.attention(tape, &format!("{p}.attn"), h, h, &attn_mask)?;
            x = tape.add(x, a)?;
            let h = self.ln(tape, &format!("{p}.ln2"), x)?;
            let f = self.ffn(tape, &format!("{p}.ffn"), h)?;
            x = tape.add(x, f)?;
        }
        let x = self.ln(tape, "enc.ln_f", x)?;
        let x = tape.mask_rows(x, &joint)?;
        let w_e = tape.slice_rows(x, 0, n)?;
        let f_e = tape.slice_rows(x, n, m)?;

        let content: Vec<bool> = text
            .ids
            .iter()
            .zip(&text.mask)
            .map(|(&id, &real)| real && !is_structural(id))
            .collect();
        let r_t = if content.iter().any(|c| *c) {
            tape.masked_max_rows(w_e, &content)?
        } else {
            tape.slice_rows(w_e, 0, 1)?
        };
        let r_v = if frame_mask.iter().any(|f| *f) {
            Some(tape.masked_max_rows(f_e, frame_mask)?)
        } else {
            None
        };
        let cls = tape.slice_rows(w_e, 0, 1)?;
        Ok(EncodedPair { w_e, f_e, r_t, r_v, cls })
    }

    /// Embed and encode in one call.
    pub fn forward(&self, tape: &mut Tape, text: &TextInput, frames: &FrameInput) -> Result<EncodedPair> {
        let t = self.embed_text(tape, text)?;
        let f = self.embed_frames(tape, frames)?;
        self.encode(tape, t, f, text, &frames.mask)
    }

    /// The decoder's cross-attention context for an encoded pair, and its
    /// key mask.
    pub fn decoder_context(&self, tape: &mut Tape, enc: &EncodedPair, text: &TextInput, frame_mask: &[bool]) -> Result<(Var, Vec<bool>)> {
        if self.config.decoder_attends_text {
            let ctx = tape.concat_rows(&[enc.w_e, enc.f_e])?;
            let mask = text.mask.iter().chain(frame_mask).copied().collect();
            Ok((ctx, mask))
        } else {
            Ok((enc.f_e, frame_mask.to_vec()))
        }
    }

    /// Causal decoder. Returns `[t,V]` next-token logits for the `t` previous
    /// tokens `prev_ids` (starting with [CLS]).
    pub fn decode(&self, tape: &mut Tape, prev_ids: &[usize], context: Var, context_mask: &[bool]) -> Result<Var> {
        let t = prev_ids.len();
        if t == 0 {
            return Err(Error::Input("decoder needs at least one input token".into()));
        }
        if t > self.config.max_text {
            return Err(Error::Input(format!(
                "decoder input length {t} exceeds max_text {}",
                self.config.max_text
            )));
        }
        let c = tape.shape(context)[0];
        if context_mask.len() != c {
            return Err(Error::Input(format!(
                "context mask length {} does not match context rows {c}",
                context_mask.len()
            )));
        }
        if !context_mask.iter().any(|v| *v) {
            return Err(Error::Input("decoder context has no real positions".into()));
        }
        let causal: Vec<bool> = (0..t).flat_map(|i| (0..t).map(move |j| j <= i)).collect();
        let cross: Vec<bool> = (0..t).flat_map(|_| context_mask.iter().copied()).collect();

        let mut x = self.embed_ids(tape, prev_ids)?;
        for i in 0..self.config.dec_blocks {
            let p = format!("dec.{i}");
            let h = self.ln(tape, &format!("{p}.ln1"), x)?;
            let a = self.attention(tape, &format!("{p}.self_attn"), h, h, &causal)?;
            x = tape.add(x, a)?;
            let h = self.ln(tape, &format!("{p}.ln2"), x)?;
            let a = self.attention(tape, &format!("{p}.cross_attn"), h, context, &cross)?;
            x = tape.add(x, a)?;
            let h = self.ln(tape, &format!("{p}.ln3"), x)?;
            let f = self.ffn(tape, &format!("{p}.ffn"), h)?;
            x = tape.add(x, f)?;
        }
        let x = self.ln(tape, "dec.ln_f", x)?;
        if self.config.tie_output {
            let table = self.p(tape, "emb.token")?;
            let tt = tape.transpose(table)?;
            let logits = tape.matmul(x, tt)?;
            let b = self.p(tape, "dec.out.b")?;
            Ok(tape.add_row(logits, b)?)
        } else {
            self.linear(tape, "dec.out", x)
        }
    }

    pub fn mlm_logits(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        self.linear(tape, "head.mlm", rows)
    }

    pub fn msom_logits(&self, tape: &mut Tape, cls: Var) -> Result<Var> {
        self.linear(tape, "head.msom", cls)
    }

    pub fn mfom_logits(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        self.linear(tape, "head.mfom", rows)
    }

    /// Projection of encoded frames back to the input feature space.
    pub fn intra_mfm_projection(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        self.linear(tape, "head.intra_mfm", rows)
    }

    pub fn vsa_logits(&self, tape: &mut Tape, cls: Var) -> Result<Var> {
        self.linear(tape, "head.vsa", cls)
    }
}
