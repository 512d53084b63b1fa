use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::data::{put_f64s, put_u32, put_u64, write_atomic, Reader};
use crate::model::ModelConfig;
use crate::momentum::{MemoryQueue, Queues};
use crate::numerics::{Adam, ParamStore, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"VLPCKPT\x00";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Model parameters plus optional training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
    pub key: Option<ParamStore>,
    pub queues: Option<Queues>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_params(out: &mut Vec<u8>, params: &ParamStore) {
    put_u32(out, params.len() as u32);
    for (name, t) in params.iter() {
        put_str(out, name);
        put_u32(out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(out, d as u64);
        }
        put_f64s(out, t.data());
    }
}

fn put_queue(out: &mut Vec<u8>, q: &MemoryQueue) {
    put_u64(out, q.capacity() as u64);
    put_u64(out, q.dim() as u64);
    put_u64(out, q.len() as u64);
    for (owner, v) in q.iter() {
        put_u64(out, owner);
        put_f64s(out, v);
    }
}

struct Decoder<'a> {
    rd: Reader<'a>,
}

impl<'a> Decoder<'a> {
    fn err(&self) -> String {
        "truncated checkpoint".into()
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        self.rd.u32().map_err(|_| self.err())
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        self.rd.u64().map_err(|_| self.err())
    }

    fn usize(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "size out of range".to_string())
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(self.rd.f64s(1).map_err(|_| self.err())?[0])
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        self.rd.f64s(n).map_err(|_| self.err())
    }

    fn flag(&mut self) -> std::result::Result<bool, String> {
        match self.rd.take(1).map_err(|_| self.err())?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(format!("bad section flag {b}")),
        }
    }

    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        let raw = self.rd.take(n).map_err(|_| self.err())?;
        String::from_utf8(raw.to_vec()).map_err(|_| "name is not UTF-8".to_string())
    }

    fn params(&mut self, requires_grad: bool) -> std::result::Result<ParamStore, String> {
        let n = self.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = self.str()?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.usize()).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflow")?;
            let data = self.f64s(numel)?;
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            store.insert(name.clone(), t);
            if !requires_grad {
                store.get_mut(&name).map_err(|e| e.to_string())?.set_requires_grad(false);
            }
        }
        Ok(store)
    }

    fn queue(&mut self) -> std::result::Result<MemoryQueue, String> {
        let cap = self.usize()?;
        let dim = self.usize()?;
        let len = self.usize()?;
        let mut entries = Vec::with_capacity(len.min(1 << 16));
        for _ in 0..len {
            let owner = self.u64()?;
            entries.push((owner, self.f64s(dim)?));
        }
        MemoryQueue::from_entries(cap, dim, entries).map_err(|e| e.to_string())
    }
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: ParamStore) -> Self {
        Self {
            model,
            step: 0,
            params,
            optimizer: None,
            key: None,
            queues: None,
        }
    }

    /// Little-endian container: magic, version, JSON model config, step,
    /// parameter entries `(name, shape, f64 data)`, optional optimizer / key
    /// network / queue sections, and a SHA-256 trailer over all preceding
    /// bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let cfg = serde_json::to_vec(&self.model).expect("config serializes");
        put_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(&cfg);
        put_u64(&mut out, self.step);
        put_params(&mut out, &self.params);

        out.push(self.optimizer.is_some() as u8);
        if let Some(opt) = &self.optimizer {
            put_u64(&mut out, opt.step_count());
            put_f64s(&mut out, &[opt.lr, opt.beta1, opt.beta2, opt.eps]);
            let names: Vec<&str> = opt.moment_names().collect();
            put_u32(&mut out, names.len() as u32);
            for name in names {
                let (m, v) = opt.moments(name).expect("listed moment exists");
                put_str(&mut out, name);
                put_u64(&mut out, m.len() as u64);
                put_f64s(&mut out, m);
                put_f64s(&mut out, v);
            }
        }
        out.push(self.key.is_some() as u8);
        if let Some(key) = &self.key {
            put_params(&mut out, key);
        }
        out.push(self.queues.is_some() as u8);
        if let Some(q) = &self.queues {
            put_queue(&mut out, &q.frames);
            put_queue(&mut out, &q.visual);
            put_queue(&mut out, &q.text);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::format(path, msg);
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fail("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail("checksum mismatch (file truncated or corrupted)".into()));
        }
        let mut d = Decoder {
            rd: Reader::new(&body[MAGIC.len()..]),
        };
        let run = |d: &mut Decoder| -> std::result::Result<Checkpoint, String> {
            let version = d.u32()?;
            if version != CHECKPOINT_VERSION {
                return Err(format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"));
            }
            let n = d.u32()? as usize;
            let raw = d.rd.take(n).map_err(|_| d.err())?;
            let model: ModelConfig = serde_json::from_slice(raw).map_err(|e| format!("bad model config: {e}"))?;
            let step = d.u64()?;
            let params = d.params(true)?;
            let optimizer = if d.flag()? {
                let opt_step = d.u64()?;
                let mut opt = Adam::new(d.f64()?);
                opt.beta1 = d.f64()?;
                opt.beta2 = d.f64()?;
                opt.eps = d.f64()?;
                let count = d.u32()?;
                let mut moments = BTreeMap::new();
                for _ in 0..count {
                    let name = d.str()?;
                    let len = d.usize()?;
                    let m = d.f64s(len)?;
                    let v = d.f64s(len)?;
                    moments.insert(name, (m, v));
                }
                opt.restore(opt_step, moments);
                Some(opt)
            } else {
                None
            };
            let key = if d.flag()? { Some(d.params(false)?) } else { None };
            let queues = if d.flag()? {
                Some(Queues {
                    frames: d.queue()?,
                    visual: d.queue()?,
                    text: d.queue()?,
                })
            } else {
                None
            };
            if !d.rd.is_done() {
                return Err("trailing bytes".into());
            }
            Ok(Checkpoint {
                model,
                step,
                params,
                optimizer,
                key,
                queues,
            })
        };
        run(&mut d).map_err(fail)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Load and require the stored architecture to equal `expected`.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        expected.ensure_matches(&ckpt.model)?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, FrameInput, Network, TextInput, CLS, SEP};
    use crate::momentum::init_key;
    use crate::numerics::Tape;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            heads: 2,
            enc_blocks: 1,
            vocab_size: 12,
            frame_dim: 3,
            max_text: 6,
            max_frames: 3,
            ..ModelConfig::default()
        }
    }

    fn full_checkpoint() -> Checkpoint {
        let cfg = tiny();
        let mut params = init_params(&cfg).unwrap();
        let key = init_key(&params);
        let mut opt = Adam::new(1e-3);
        params.zero_grads();
        for (_, t) in params.iter_mut() {
            t.grad_mut().unwrap().iter_mut().enumerate().for_each(|(i, g)| *g = (i as f64).sin());
        }
        opt.step(&mut params).unwrap();
        // Gradient buffers are not part of a checkpoint.
        params.iter_mut().for_each(|(_, t)| t.clear_grad());
        let mut queues = Queues::new(5, 8).unwrap();
        for i in 0..7 {
            queues.frames.push(i, &[i as f64 * 0.5; 8]).unwrap();
        }
        queues.text.push(3, &[1.0; 8]).unwrap();
        Checkpoint {
            model: cfg,
            step: 1,
            params,
            optimizer: Some(opt),
            key: Some(key),
            queues: Some(queues),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = full_checkpoint();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params, ckpt.params);
        assert_eq!(back.key, ckpt.key);
        assert_eq!(back.queues, ckpt.queues);
        assert_eq!(back.optimizer.as_ref().unwrap().step_count(), 1);
        let path2 = dir.path().join("b.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn forward_is_identical_after_reload() {
        let ckpt = full_checkpoint();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("m")).unwrap();
        let cfg = tiny();
        let text = TextInput::padded(&[CLS, 5, 6, SEP], cfg.max_text).unwrap();
        let frames = FrameInput::padded(&[vec![0.1, 0.2, 0.3]], cfg.max_frames, cfg.frame_dim).unwrap();
        let run = |p: &ParamStore| {
            let mut tape = Tape::no_grad();
            let enc = Network::new(&cfg, p).forward(&mut tape, &text, &frames).unwrap();
            tape.value(enc.w_e).data().to_vec()
        };
        assert_eq!(run(&ckpt.params), run(&back.params));
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let bytes = full_checkpoint().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("t.ckpt")).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped, Path::new("t.ckpt")).is_err());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = full_checkpoint().to_bytes();
        bytes[8] = 9;
        let body_len = bytes.len() - DIGEST_LEN;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        let err = Checkpoint::from_bytes(&bytes, Path::new("v.ckpt")).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn config_mismatch_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        full_checkpoint().save(&path).unwrap();
        let other = ModelConfig {
            max_frames: 4,
            ..tiny()
        };
        let err = Checkpoint::load_for(&path, &other).unwrap_err();
        assert!(err.to_string().contains("max_frames"), "{err}");
        Checkpoint::load_for(&path, &tiny()).unwrap();
    }
}
