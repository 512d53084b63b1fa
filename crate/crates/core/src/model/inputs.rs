use crate::numerics::Tensor;
use crate::{Error, Result};

use super::PAD;

/// A padded token sequence and its real-position mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TextInput {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TextInput {
    /// Pad `tokens` with [PAD] up to `len`.
    pub fn padded(tokens: &[usize], len: usize) -> Result<Self> {
        if tokens.len() > len {
            return Err(Error::Input(format!("{} tokens exceed max_text {len}", tokens.len())));
        }
        let mut ids = tokens.to_vec();
        ids.resize(len, PAD);
        let mask = (0..len).map(|i| i < tokens.len()).collect();
        Ok(Self { ids, mask })
    }

    /// Number of non-pad positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// `[m, D_f]` frame features with zero rows past the real frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput {
    pub features: Tensor,
    pub mask: Vec<bool>,
}

impl FrameInput {
    /// Stack `rows` (each `dim` long) and zero-pad to `len` frames.
    pub fn padded(rows: &[Vec<f64>], len: usize, dim: usize) -> Result<Self> {
        if rows.len() > len {
            return Err(Error::Input(format!("{} frames exceed max_frames {len}", rows.len())));
        }
        let mut data = Vec::with_capacity(len * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::Input(format!("frame feature of length {} (expected {dim})", row.len())));
            }
            data.extend_from_slice(row);
        }
        data.resize(len * dim, 0.0);
        let features = Tensor::new(vec![len, dim], data)?;
        let mask = (0..len).map(|i| i < rows.len()).collect();
        Ok(Self { features, mask })
    }

    /// All-padding input (text-only encoding).
    pub fn empty(len: usize, dim: usize) -> Self {
        Self {
            features: Tensor::zeros(&[len, dim]),
            mask: vec![false; len],
        }
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row_slice(i)
    }
}
