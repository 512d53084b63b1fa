use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Reserved token ids. Content tokens start at [`FIRST_CONTENT_TOKEN`].
pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const FIRST_CONTENT_TOKEN: usize = 4;

/// Number of segment orderings classified by the sentence-order head (3!).
pub const SEGMENT_PERMUTATIONS: usize = 6;

pub fn is_structural(id: usize) -> bool {
    matches!(id, PAD | CLS | SEP)
}

/// Architecture dimensions.
///
/// `Default` is the desk-scale model; [`ModelConfig::full_scale`] gives the
/// published sizes (768 hidden, 12/2 blocks, 12 heads, 128 tokens,
/// 32 frames, 1536-d frame features).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub heads: usize,
    pub max_text: usize,
    pub max_frames: usize,
    pub vocab_size: usize,
    pub frame_dim: usize,
    pub ff_mult: usize,
    /// Share the token embedding table with the decoder output projection.
    pub tie_output: bool,
    /// Let the decoder cross-attend over text outputs as well as frames.
    pub decoder_attends_text: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            enc_blocks: 2,
            dec_blocks: 1,
            heads: 4,
            max_text: 16,
            max_frames: 8,
            vocab_size: 64,
            frame_dim: 32,
            ff_mult: 4,
            tie_output: true,
            decoder_attends_text: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        Self {
            hidden: 768,
            enc_blocks: 12,
            dec_blocks: 2,
            heads: 12,
            max_text: 128,
            max_frames: 32,
            vocab_size: 30_000,
            frame_dim: 1536,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.max_text < 2 {
            return fail(format!("max_text must be >= 2 to hold [CLS] and [SEP], got {}", self.max_text));
        }
        if self.max_frames < 1 {
            return fail("max_frames must be >= 1".into());
        }
        if self.vocab_size < FIRST_CONTENT_TOKEN {
            return fail(format!("vocab_size must be >= {FIRST_CONTENT_TOKEN}, got {}", self.vocab_size));
        }
        if self.frame_dim == 0 || self.ff_mult == 0 {
            return fail("frame_dim and ff_mult must be positive".into());
        }
        Ok(())
    }

    /// Field-by-field comparison; names the first differing field.
    pub fn ensure_matches(&self, other: &ModelConfig) -> Result<()> {
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    return Err(Error::ConfigMismatch {
                        field: stringify!($f),
                        expected: format!("{:?}", self.$f),
                        found: format!("{:?}", other.$f),
                    });
                }
            )*};
        }
        cmp!(
            hidden,
            enc_blocks,
            dec_blocks,
            heads,
            max_text,
            max_frames,
            vocab_size,
            frame_dim,
            ff_mult,
            tie_output,
            decoder_attends_text
        );
        Ok(())
    }
}
