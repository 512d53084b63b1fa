//! Key-network tracking and memory queues.
//!
//! The key network mirrors the encoder path of the query network (`emb.`
//! and `enc.` parameters) and follows it by an exponential moving average.
//! Its outputs on unaugmented inputs fill three FIFO queues of detached
//! negatives: per-frame encodings, pooled visual and pooled textual
//! representations.

use std::collections::VecDeque;

use crate::model::{FrameInput, ModelConfig, Network, TextInput, ENCODER_PATH};
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.999;
/// Queue capacity used at desk scale.
pub const DEFAULT_QUEUE_CAPACITY: usize = 65_536;
/// The published full-scale queue size, kept verbatim.
pub const FULL_SCALE_QUEUE_CAPACITY: usize = 65_586;

/// A frozen copy of the encoder path of `query`.
pub fn init_key(query: &ParamStore) -> ParamStore {
    let mut key = query.subset(&ENCODER_PATH);
    for (_, t) in key.iter_mut() {
        t.set_requires_grad(false);
        t.clear_grad();
    }
    key
}

/// `key <- alpha * key + (1 - alpha) * query` for every key tensor.
pub fn momentum_update(key: &mut ParamStore, query: &ParamStore, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("momentum must lie in [0, 1], got {alpha}")));
    }
    for (name, k) in key.iter_mut() {
        let q = query.get(name)?;
        if q.shape() != k.shape() {
            return Err(Error::Input(format!(
                "key parameter `{name}` has shape {:?} but query has {:?}",
                k.shape(),
                q.shape()
            )));
        }
        for (kv, qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = alpha * *kv + (1.0 - alpha) * qv;
        }
    }
    Ok(())
}

/// Detached key-network encodings of one unaugmented example.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyOutputs {
    /// `[m,d]`, pad rows zero.
    pub f_e: Tensor,
    /// `[1,d]`; `None` when the example has no real frames.
    pub r_v: Option<Tensor>,
    /// `[1,d]`.
    pub r_t: Tensor,
}

/// Encode an example with the key network without recording gradients.
pub fn key_forward(cfg: &ModelConfig, key: &ParamStore, text: &TextInput, frames: &FrameInput) -> Result<KeyOutputs> {
    let mut tape = Tape::no_grad();
    let enc = Network::new(cfg, key).forward(&mut tape, text, frames)?;
    Ok(KeyOutputs {
        f_e: tape.value(enc.f_e).detached(),
        r_v: enc.r_v.map(|v| tape.value(v).detached()),
        r_t: tape.value(enc.r_t).detached(),
    })
}

/// Fixed-capacity FIFO of `dim`-vectors, each tagged with the id of the
/// video it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<(u64, Vec<f64>)>,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!("queue capacity ({capacity}) and width ({dim}) must be positive")));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.entries.iter().map(|(o, v)| (*o, v.as_slice()))
    }

    /// Append one vector, evicting the oldest entry when full.
    pub fn push(&mut self, owner: u64, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Queue(format!(
                "queue of width {} cannot hold a vector of length {}",
                self.dim,
                vector.len()
            )));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((owner, vector.to_vec()));
        Ok(())
    }

    /// Append every row of `rows` selected by `keep` (all rows when `None`).
    pub fn push_rows(&mut self, owner: u64, rows: &Tensor, keep: Option<&[bool]>) -> Result<()> {
        for r in 0..rows.rows() {
            if keep.is_none_or(|k| k[r]) {
                self.push(owner, rows.row_slice(r))?;
            }
        }
        Ok(())
    }

    fn collect<'a>(&self, it: impl Iterator<Item = &'a Vec<f64>>) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut n = 0;
        for v in it {
            data.extend_from_slice(v);
            n += 1;
        }
        if n == 0 {
            return Err(Error::Queue("memory queue has no usable negatives".into()));
        }
        Ok(Tensor::new(vec![n, self.dim], data)?)
    }

    /// Every stored vector as a `[len, dim]` matrix.
    pub fn negatives(&self) -> Result<Tensor> {
        self.collect(self.entries.iter().map(|(_, v)| v))
    }

    /// Stored vectors that were not computed from video `owner`.
    pub fn negatives_excluding(&self, owner: u64) -> Result<Tensor> {
        self.collect(self.entries.iter().filter(|(o, _)| *o != owner).map(|(_, v)| v))
    }

    /// Rebuild from saved entries (oldest first).
    pub fn from_entries(capacity: usize, dim: usize, entries: Vec<(u64, Vec<f64>)>) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        for (o, v) in entries {
            q.push(o, &v)?;
        }
        Ok(q)
    }
}

/// The three negative banks.
#[derive(Clone, Debug, PartialEq)]
pub struct Queues {
    pub frames: MemoryQueue,
    pub visual: MemoryQueue,
    pub text: MemoryQueue,
}

impl Queues {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            frames: MemoryQueue::new(capacity, dim)?,
            visual: MemoryQueue::new(capacity, dim)?,
            text: MemoryQueue::new(capacity, dim)?,
        })
    }

    /// Smallest fill among the three queues.
    pub fn min_len(&self) -> usize {
        self.frames.len().min(self.visual.len()).min(self.text.len())
    }

    /// Push one example's key outputs.
    pub fn push_example(&mut self, owner: u64, key: &KeyOutputs, frame_mask: &[bool]) -> Result<()> {
        self.frames.push_rows(owner, &key.f_e, Some(frame_mask))?;
        if let Some(r_v) = &key.r_v {
            self.visual.push(owner, r_v.data())?;
        }
        self.text.push(owner, key.r_t.data())?;
        Ok(())
    }
}
