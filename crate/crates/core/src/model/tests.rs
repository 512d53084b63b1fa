use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{grad_check_params, Tape, DEFAULT_REL_FLOOR};

fn tiny() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        enc_blocks: 1,
        dec_blocks: 1,
        heads: 2,
        max_text: 8,
        max_frames: 4,
        vocab_size: 16,
        frame_dim: 5,
        ff_mult: 2,
        ..ModelConfig::default()
    }
}

fn random_frames(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Re-randomize every parameter at O(1) scale so that tests see
/// non-degenerate attention patterns.
fn scramble(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

fn encode_values(cfg: &ModelConfig, params: &ParamStore, text: &TextInput, frames: &FrameInput) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut tape = Tape::no_grad();
    let net = Network::new(cfg, params);
    let enc = net.forward(&mut tape, text, frames).unwrap();
    (
        tape.value(enc.w_e).data().to_vec(),
        tape.value(enc.f_e).data().to_vec(),
        tape.value(enc.r_t).data().to_vec(),
        tape.value(enc.r_v.unwrap()).data().to_vec(),
        tape.value(enc.cls).data().to_vec(),
    )
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn positions_distinguish_identical_tokens() {
    let cfg = tiny();
    let params = init_params(&cfg).unwrap();
    let text = TextInput::padded(&[CLS, 7, 7, SEP], cfg.max_text).unwrap();
    let mut tape = Tape::no_grad();
    let e = Network::new(&cfg, &params).embed_text(&mut tape, &text).unwrap();
    let out = tape.value(e);
    assert_eq!(out.shape(), &[cfg.max_text, cfg.hidden]);
    assert_ne!(out.row_slice(1), out.row_slice(2));
}

#[test]
fn out_of_vocab_token_is_rejected() {
    let cfg = tiny();
    let params = init_params(&cfg).unwrap();
    let text = TextInput::padded(&[CLS, 99, SEP], cfg.max_text).unwrap();
    let mut tape = Tape::no_grad();
    let err = Network::new(&cfg, &params).embed_text(&mut tape, &text).unwrap_err();
    assert!(err.to_string().contains("99"));
}

#[test]
fn wrong_frame_dim_is_rejected() {
    let cfg = tiny();
    let params = init_params(&cfg).unwrap();
    let frames = FrameInput::padded(&[vec![0.0; 3]], cfg.max_frames, 3).unwrap();
    let mut tape = Tape::no_grad();
    assert!(Network::new(&cfg, &params).embed_frames(&mut tape, &frames).is_err());
}

#[test]
fn zero_frame_keeps_position_identity() {
    let cfg = tiny();
    let mut params = init_params(&cfg).unwrap();
    scramble(&mut params, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rows = random_frames(&mut rng, 3, cfg.frame_dim);
    rows[1] = vec![0.0; cfg.frame_dim];
    let frames = FrameInput::padded(&rows, cfg.max_frames, cfg.frame_dim).unwrap();
    let mut tape = Tape::no_grad();
    let net = Network::new(&cfg, &params);
    let e = net.embed_frames(&mut tape, &frames).unwrap();
    let got = tape.value(e).row_slice(1).to_vec();

    // LN(bias + pos_1) evaluated directly.
    let bias = params.get("emb.frame_proj.b").unwrap().data();
    let pos = params.get("emb.frame_pos").unwrap().row_slice(1);
    let gamma = params.get("emb.frame_ln.gamma").unwrap().data();
    let beta = params.get("emb.frame_ln.beta").unwrap().data();
    let s: Vec<f64> = bias.iter().zip(pos).map(|(a, b)| a + b).collect();
    let expect = oracle::layer_norm(&[s], gamma, beta).remove(0);
    assert!(max_abs_diff(&got, &expect) < 1e-12);
}

#[test]
fn identical_frames_differ_by_position() {
    let cfg = tiny();
    let params = init_params(&cfg).unwrap();
    let row = vec![0.5; cfg.frame_dim];
    let frames = FrameInput::padded(&[row.clone(), row], cfg.max_frames, cfg.frame_dim).unwrap();
    let mut tape = Tape::no_grad();
    let e = Network::new(&cfg, &params).embed_frames(&mut tape, &frames).unwrap();
    assert_ne!(tape.value(e).row_slice(0), tape.value(e).row_slice(1));
}

/// Plain-loop reference implementation of the encoder, independent of the
/// tape.
mod oracle {
    pub type Rows = Vec<Vec<f64>>;

    pub fn layer_norm(x: &[Vec<f64>], gamma: &[f64], beta: &[f64]) -> Rows {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-5).sqrt();
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                    .collect()
            })
            .collect()
    }

    pub fn linear(x: &[Vec<f64>], w: &[f64], b: &[f64]) -> Rows {
        let out = b.len();
        x.iter()
            .map(|row| {
                (0..out)
                    .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Rows {
        a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
    }

    /// Single-head attention with key mask.
    pub fn attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], keep: &[bool]) -> Rows {
        let d = q[0].len() as f64;
        q.iter()
            .map(|qi| {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect();
                let max = scores
                    .iter()
                    .zip(keep)
                    .filter(|(_, k)| **k)
                    .map(|(s, _)| *s)
                    .fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores
                    .iter()
                    .zip(keep)
                    .map(|(s, k)| if *k { (s - max).exp() } else { 0.0 })
                    .collect();
                let z: f64 = w.iter().sum();
                (0..v[0].len())
                    .map(|c| w.iter().zip(v).map(|(wi, vj)| wi / z * vj[c]).sum())
                    .collect()
            })
            .collect()
    }
}

#[test]
fn single_block_single_head_matches_loop_oracle() {
    use oracle::*;
    let cfg = ModelConfig {
        hidden: 4,
        enc_blocks: 1,
        heads: 1,
        max_text: 4,
        max_frames: 3,
        vocab_size: 8,
        frame_dim: 3,
        ff_mult: 2,
        ..ModelConfig::default()
    };
    let mut params = init_params(&cfg).unwrap();
    // Hand-set, deterministic weights.
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for (k, name) in names.iter().enumerate() {
        let t = params.get_mut(name).unwrap();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((k * 31 + i * 7) as f64 * 0.37).sin() * 0.9;
        }
    }
    let tokens = [CLS, 5, 6, SEP];
    let frame_rows = vec![vec![0.2, -0.4, 1.0], vec![-0.3, 0.8, 0.1]];
    let text = TextInput::padded(&tokens, 4).unwrap();
    let frames = FrameInput::padded(&frame_rows, 3, 3).unwrap();
    let (w_e, f_e, r_t, _, cls) = encode_values(&cfg, &params, &text, &frames);

    let p = |n: &str| params.get(n).unwrap().data().to_vec();
    let row_of = |n: &str, i: usize| params.get(n).unwrap().row_slice(i).to_vec();
    // Embeddings.
    let text_in: Rows = tokens
        .iter()
        .enumerate()
        .map(|(i, &id)| row_of("emb.token", id).iter().zip(row_of("emb.text_pos", i)).map(|(a, b)| a + b).collect())
        .collect();
    let text_emb = layer_norm(&text_in, &p("emb.text_ln.gamma"), &p("emb.text_ln.beta"));
    let mut frame_full = frame_rows.clone();
    frame_full.push(vec![0.0; 3]);
    let proj = linear(&frame_full, &p("emb.frame_proj.w"), &p("emb.frame_proj.b"));
    let frame_in: Rows = proj
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().zip(row_of("emb.frame_pos", i)).map(|(a, b)| a + b).collect())
        .collect();
    let frame_emb = layer_norm(&frame_in, &p("emb.frame_ln.gamma"), &p("emb.frame_ln.beta"));
    let x: Rows = text_emb.into_iter().chain(frame_emb).collect();
    let keep = [true, true, true, true, true, true, false];

    // Pre-norm block.
    let h = layer_norm(&x, &p("enc.0.ln1.gamma"), &p("enc.0.ln1.beta"));
    let q = linear(&h, &p("enc.0.attn.q.w"), &p("enc.0.attn.q.b"));
    let k = linear(&h, &p("enc.0.attn.k.w"), &p("enc.0.attn.k.b"));
    let v = linear(&h, &p("enc.0.attn.v.w"), &p("enc.0.attn.v.b"));
    let a = attention(&q, &k, &v, &keep);
    let a = linear(&a, &p("enc.0.attn.o.w"), &p("enc.0.attn.o.b"));
    let x = add(&x, &a);
    let h = layer_norm(&x, &p("enc.0.ln2.gamma"), &p("enc.0.ln2.beta"));
    let f = linear(&h, &p("enc.0.ffn.fc1.w"), &p("enc.0.ffn.fc1.b"));
    let f: Rows = f.iter().map(|r| r.iter().map(|v| gelu(*v)).collect()).collect();
    let f = linear(&f, &p("enc.0.ffn.fc2.w"), &p("enc.0.ffn.fc2.b"));
    let x = add(&x, &f);
    let mut out = layer_norm(&x, &p("enc.ln_f.gamma"), &p("enc.ln_f.beta"));
    out[6] = vec![0.0; 4];

    let flat = |rows: &[Vec<f64>]| rows.iter().flatten().copied().collect::<Vec<f64>>();
    assert!(max_abs_diff(&w_e, &flat(&out[..4])) < 1e-12);
    assert!(max_abs_diff(&f_e, &flat(&out[4..])) < 1e-12);
    assert!(max_abs_diff(&cls, &out[0]) < 1e-12);
    let expect_rt: Vec<f64> = (0..4).map(|c| out[1][c].max(out[2][c])).collect();
    assert!(max_abs_diff(&r_t, &expect_rt) < 1e-12);
}

#[test]
fn encoder_is_invariant_to_pad_content() {
    let cfg = tiny();
    let mut params = init_params(&cfg).unwrap();
    scramble(&mut params, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frames_rows = random_frames(&mut rng, 2, cfg.frame_dim);
    let text = TextInput::padded(&[CLS, 5, 9, 11, SEP], cfg.max_text).unwrap();
    let frames = FrameInput::padded(&frames_rows, cfg.max_frames, cfg.frame_dim).unwrap();
    let base = encode_values(&cfg, &params, &text, &frames);

    let mut text2 = text.clone();
    for i in 5..cfg.max_text {
        text2.ids[i] = rng.random_range(4..cfg.vocab_size);
    }
    let mut frames2 = frames.clone();
    for i in 2..cfg.max_frames {
        for j in 0..cfg.frame_dim {
            frames2.features.data_mut()[i * cfg.frame_dim + j] = rng.random_range(-5.0..5.0);
        }
    }
    let other = encode_values(&cfg, &params, &text2, &frames2);
    assert!(max_abs_diff(&base.0, &other.0) < 1e-9);
    assert!(max_abs_diff(&base.1, &other.1) < 1e-9);
    assert!(max_abs_diff(&base.2, &other.2) < 1e-9);
    assert!(max_abs_diff(&base.3, &other.3) < 1e-9);
    assert!(max_abs_diff(&base.4, &other.4) < 1e-9);
}

#[test]
fn text_attends_to_frames() {
    let cfg = tiny();
    let mut params = init_params(&cfg).unwrap();
    scramble(&mut params, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows = random_frames(&mut rng, 3, cfg.frame_dim);
    let text = TextInput::padded(&[CLS, 5, 6, SEP], cfg.max_text).unwrap();
    let frames = FrameInput::padded(&rows, cfg.max_frames, cfg.frame_dim).unwrap();
    let zeroed = FrameInput::padded(&vec![vec![0.0; cfg.frame_dim]; 3], cfg.max_frames, cfg.frame_dim).unwrap();
    let a = encode_values(&cfg, &params, &text, &frames);
    let b = encode_values(&cfg, &params, &text, &zeroed);
    assert!(max_abs_diff(&a.0, &b.0) > 1e-6);
}

#[test]
fn pooled_reps_dominate_contributing_positions() {
    let cfg = tiny();
    let mut params = init_params(&cfg).unwrap();
    scramble(&mut params, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows = random_frames(&mut rng, 3, cfg.frame_dim);
    let tokens = [CLS, 5, 6, 12, SEP];
    let text = TextInput::padded(&tokens, cfg.max_text).unwrap();
    let frames = FrameInput::padded(&rows, cfg.max_frames, cfg.frame_dim).unwrap();
    let (w_e, f_e, r_t, r_v, _) = encode_values(&cfg, &params, &text, &frames);
    let d = cfg.hidden;
    for c in 0..d {
        let content: Vec<f64> = (1..4).map(|i| w_e[i * d + c]).collect();
        assert!(content.iter().all(|v| r_t[c] >= *v));
        assert!(content.contains(&r_t[c]));
        let real: Vec<f64> = (0..3).map(|i| f_e[i * d + c]).collect();
        assert!(real.iter().all(|v| r_v[c] >= *v));
        assert!(real.contains(&r_v[c]));
    }
}

#[test]
fn r_t_excludes_structural_tokens() {
    // With [CLS] or [SEP] rows made dominant, R_t must still ignore them.
    let cfg = tiny();
    let mut params = init_params(&cfg).unwrap();
    scramble(&mut params, 9);
    let text = TextInput::padded(&[CLS, 5, SEP], cfg.max_text).unwrap();
    let frames = FrameInput::padded(&[vec![0.1; cfg.frame_dim]], cfg.max_frames, cfg.frame_dim).unwrap();
    let (w_e, _, r_t, _, _) = encode_values(&cfg, &params, &text, &frames);
    let d = cfg.hidden;
    assert_eq!(&r_t[..], &w_e[d..2 * d]);
}

fn decode_values(cfg: &ModelConfig, params: &ParamStore, prev: &[usize], frames: &FrameInput, text: &TextInput) -> Vec<f64> {
    let mut tape = Tape::no_grad();
    let net = Network::new(cfg, params);
    let enc = net.forward(&mut tape, text, frames).unwrap();
    let (ctx, mask) = net.decoder_context(&mut tape, &enc, text, &frames.mask).unwrap();
    let logits = net.decode(&mut tape, prev, ctx, &mask).unwrap();
    tape.value(logits).data().to_vec()
}

#[test]
fn decoder_is_causal_exhaustive() {
    let cfg = tiny();
    let mut params = init_params(&cfg).unwrap();
    scramble(&mut params, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let frames = FrameInput::padded(&random_frames(&mut rng, 3, cfg.frame_dim), cfg.max_frames, cfg.frame_dim).unwrap();
    let text = TextInput::padded(&[CLS, 5, 6, SEP], cfg.max_text).unwrap();
    let prev: Vec<usize> = std::iter::once(CLS).chain((0..7).map(|_| rng.random_range(4..16))).collect();
    let v = cfg.vocab_size;
    let base = decode_values(&cfg, &params, &prev, &frames, &text);
    for i in 1..8 {
        for replacement in 0..v {
            if replacement == prev[i] {
                continue;
            }
            let mut alt = prev.clone();
            alt[i] = replacement;
            let out = decode_values(&cfg, &params, &alt, &frames, &text);
            for pos in 0..i {
                let a = &base[pos * v..(pos + 1) * v];
                let b = &out[pos * v..(pos + 1) * v];
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "pos {pos} changed by token {i}");
            }
            assert!(max_abs_diff(&base[i * v..(i + 1) * v], &out[i * v..(i + 1) * v]) > 0.0);
        }
    }
}

#[test]
fn decoder_ignores_padded_frames_and_depends_on_context() {
    let cfg = tiny();
    let mut params = init_params(&cfg).unwrap();
    scramble(&mut params, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let rows = random_frames(&mut rng, 2, cfg.frame_dim);
    let text = TextInput::padded(&[CLS, 5, SEP], cfg.max_text).unwrap();
    let frames = FrameInput::padded(&rows, cfg.max_frames, cfg.frame_dim).unwrap();
    let base = decode_values(&cfg, &params, &[CLS], &frames, &text);
    let mut padded = frames.clone();
    for j in 0..cfg.frame_dim {
        padded.features.data_mut()[3 * cfg.frame_dim + j] = 7.0;
    }
    assert!(max_abs_diff(&base, &decode_values(&cfg, &params, &[CLS], &padded, &text)) < 1e-9);

    let other = FrameInput::padded(&random_frames(&mut rng, 2, cfg.frame_dim), cfg.max_frames, cfg.frame_dim).unwrap();
    assert!(max_abs_diff(&base, &decode_values(&cfg, &params, &[CLS], &other, &text)) > 1e-9);
}

#[test]
fn decoder_with_cls_only_depends_on_context_alone() {
    let cfg = tiny();
    let mut params = init_params(&cfg).unwrap();
    scramble(&mut params, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let ctx_t = {
        let rows = random_frames(&mut rng, cfg.max_frames, cfg.hidden);
        Tensor::from_rows(&rows).unwrap()
    };
    let mask = vec![true, true, false, false];
    let run = |ctx: &Tensor| {
        let mut tape = Tape::no_grad();
        let c = tape.constant(ctx.clone());
        let l = Network::new(&cfg, &params).decode(&mut tape, &[CLS], c, &mask).unwrap();
        tape.value(l).data().to_vec()
    };
    let a = run(&ctx_t);
    assert_eq!(a.len(), cfg.vocab_size);
    assert_eq!(a, run(&ctx_t));
}

#[test]
fn decoder_logits_softmax_to_one() {
    let cfg = tiny();
    let params = init_params(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let frames = FrameInput::padded(&random_frames(&mut rng, 2, cfg.frame_dim), cfg.max_frames, cfg.frame_dim).unwrap();
    let text = TextInput::padded(&[CLS, 5, SEP], cfg.max_text).unwrap();
    let mut tape = Tape::no_grad();
    let net = Network::new(&cfg, &params);
    let enc = net.forward(&mut tape, &text, &frames).unwrap();
    let logits = net.decode(&mut tape, &[CLS, 5, 6], enc.f_e, &frames.mask).unwrap();
    let probs = tape.softmax(logits, None).unwrap();
    for i in 0..3 {
        assert!((tape.value(probs).row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn decoder_rejects_overlong_input() {
    let cfg = tiny();
    let params = init_params(&cfg).unwrap();
    let mut tape = Tape::no_grad();
    let ctx = tape.constant(Tensor::zeros(&[cfg.max_frames, cfg.hidden]));
    let prev = vec![CLS; cfg.max_text + 1];
    assert!(Network::new(&cfg, &params).decode(&mut tape, &prev, ctx, &[true; 4]).is_err());
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        hidden: 8,
        enc_blocks: 1,
        heads: 2,
        max_text: 4,
        max_frames: 3,
        vocab_size: 8,
        frame_dim: 4,
        ff_mult: 2,
        ..ModelConfig::default()
    };
    let mut params = init_params(&cfg).unwrap();
    scramble(&mut params, 17);
    let encoder_only = params.subset(&ENCODER_PATH);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let frames = FrameInput::padded(&random_frames(&mut rng, 2, cfg.frame_dim), cfg.max_frames, cfg.frame_dim).unwrap();
    let text = TextInput::padded(&[CLS, 5, SEP], cfg.max_text).unwrap();
    let probe_w = Tensor::from_rows(&random_frames(&mut rng, 4, cfg.hidden)).unwrap();
    let probe_f = Tensor::from_rows(&random_frames(&mut rng, 3, cfg.hidden)).unwrap();
    let report = grad_check_params(
        &encoder_only,
        |tape, p| {
            let net = Network::new(&cfg, p);
            let enc = net.forward(tape, &text, &frames).map_err(|e| match e {
                crate::Error::Numerics(n) => n,
                other => panic!("{other}"),
            })?;
            let pw = tape.constant(probe_w.clone());
            let pf = tape.constant(probe_f.clone());
            let a = tape.mul(enc.w_e, pw)?;
            let b = tape.mul(enc.f_e, pf)?;
            let a = tape.sum(a)?;
            let b = tape.sum(b)?;
            let r = tape.sum(enc.r_v.unwrap())?;
            let s = tape.add(a, b)?;
            tape.add(s, r)
        },
        1e-5,
        1e-4,
        DEFAULT_REL_FLOOR,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.checked > 500);
}

#[test]
fn init_is_deterministic_and_finite() {
    let cfg = ModelConfig::default();
    let a = init_params(&cfg).unwrap();
    let b = init_params(&cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.all_finite());
    let key = a.subset(&ENCODER_PATH);
    assert!(key.names().all(|n| n.starts_with("emb.") || n.starts_with("enc.")));
    assert!(!key.names().any(|n| n.starts_with("dec.")));
}
