//! Seeded corruption of query-network inputs and the matching supervision
//! labels: token masking, 3-segment sentence shuffling, frame shuffling,
//! frame zero-masking and full-sentence masking.
//!
//! Every count is exact: a rate `r` applied to `k` eligible items selects
//! `ceil(r * k)` of them. Randomness is drawn from a per-example stream
//! derived from `(seed, step, example index)`, so results do not depend on
//! processing order.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{is_structural, FrameInput, TextInput, MASK, SEGMENT_PERMUTATIONS};
use crate::{Error, Result};

pub const DEFAULT_RATE: f64 = 0.15;

/// The orderings of three segments, in lexicographic order. The index of a
/// permutation here is its sentence-order class label.
pub const PERMUTATIONS: [[usize; 3]; SEGMENT_PERMUTATIONS] =
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Selection rates for each corruption. A rate of zero disables it.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub token_mask_rate: f64,
    pub sentence_shuffle_rate: f64,
    pub frame_shuffle_rate: f64,
    pub frame_mask_rate: f64,
    pub full_mask_rate: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            token_mask_rate: DEFAULT_RATE,
            sentence_shuffle_rate: DEFAULT_RATE,
            frame_shuffle_rate: DEFAULT_RATE,
            frame_mask_rate: DEFAULT_RATE,
            full_mask_rate: DEFAULT_RATE,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("token_mask_rate", self.token_mask_rate),
            ("sentence_shuffle_rate", self.sentence_shuffle_rate),
            ("frame_shuffle_rate", self.frame_shuffle_rate),
            ("frame_mask_rate", self.frame_mask_rate),
            ("full_mask_rate", self.full_mask_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

/// `ceil(rate * n)`, tolerant of representation error in `rate * n`
/// (so `0.15 * 100` selects 15, not 16).
pub fn exact_count(rate: f64, n: usize) -> usize {
    if n == 0 || rate <= 0.0 {
        return 0;
    }
    let c = (rate * n as f64 - 1e-9).ceil().max(0.0) as usize;
    c.min(n)
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for `(seed, step, slot)`.
pub fn derive_seed(seed: u64, step: u64, slot: u64) -> u64 {
    mix(mix(mix(seed) ^ step) ^ slot)
}

fn content_positions(ids: &[usize], mask: &[bool]) -> Vec<usize> {
    ids.iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (&id, &real))| real && !is_structural(id))
        .map(|(i, _)| i)
        .collect()
}

/// Number of content tokens (excluding [CLS], [SEP] and [PAD]).
pub fn content_len(text: &TextInput) -> usize {
    content_positions(&text.ids, &text.mask).len()
}

/// Replace `ceil(rate * n_real)` content tokens by [MASK]. Returns the
/// masked ids and `(position, original id)` labels sorted by position.
pub fn mask_tokens(text: &TextInput, rate: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<(usize, usize)>) {
    let content = content_positions(&text.ids, &text.mask);
    let count = exact_count(rate, content.len());
    let mut picked: Vec<usize> = index::sample(rng, content.len(), count).into_iter().map(|i| content[i]).collect();
    picked.sort_unstable();
    let mut ids = text.ids.clone();
    let labels = picked
        .into_iter()
        .map(|p| {
            let orig = ids[p];
            ids[p] = MASK;
            (p, orig)
        })
        .collect();
    (ids, labels)
}

/// A 3-segment reordering of the content tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentShuffle {
    pub ids: Vec<usize>,
    /// Index into [`PERMUTATIONS`].
    pub label: usize,
    /// Lengths of the original segments A, B, C.
    pub lengths: [usize; 3],
}

fn reorder(segments: &[&[usize]; 3], perm: [usize; 3]) -> Vec<usize> {
    perm.iter().flat_map(|&s| segments[s].iter().copied()).collect()
}

/// Split the content tokens into three non-empty segments at uniformly
/// drawn boundaries and reorder them by a uniformly drawn permutation.
/// Structural tokens keep their positions. `None` when fewer than three
/// content tokens exist.
pub fn shuffle_sentence_segments(text: &TextInput, rng: &mut impl Rng) -> Option<SegmentShuffle> {
    let content = content_positions(&text.ids, &text.mask);
    let len = content.len();
    if len < 3 {
        return None;
    }
    // Two distinct interior boundaries out of len - 1.
    let mut cuts: Vec<usize> = index::sample(rng, len - 1, 2).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let label = rng.random_range(0..SEGMENT_PERMUTATIONS);
    let tokens: Vec<usize> = content.iter().map(|&p| text.ids[p]).collect();
    let segments = [&tokens[..cuts[0]], &tokens[cuts[0]..cuts[1]], &tokens[cuts[1]..]];
    let shuffled = reorder(&segments, PERMUTATIONS[label]);
    let mut ids = text.ids.clone();
    for (&p, t) in content.iter().zip(shuffled) {
        ids[p] = t;
    }
    Some(SegmentShuffle {
        ids,
        label,
        lengths: [cuts[0], cuts[1] - cuts[0], len - cuts[1]],
    })
}

/// Invert [`shuffle_sentence_segments`].
pub fn unshuffle_segments(ids: &[usize], mask: &[bool], label: usize, lengths: [usize; 3]) -> Result<Vec<usize>> {
    let perm = *PERMUTATIONS
        .get(label)
        .ok_or_else(|| Error::Label(format!("segment permutation {label} outside [0, {SEGMENT_PERMUTATIONS})")))?;
    let content = content_positions(ids, mask);
    if content.len() != lengths.iter().sum::<usize>() {
        return Err(Error::Input("segment lengths do not cover the content tokens".into()));
    }
    let tokens: Vec<usize> = content.iter().map(|&p| ids[p]).collect();
    let mut pieces: [Vec<usize>; 3] = Default::default();
    let mut at = 0;
    for &s in &perm {
        pieces[s] = tokens[at..at + lengths[s]].to_vec();
        at += lengths[s];
    }
    let mut out = ids.to_vec();
    for (&p, t) in content.iter().zip(pieces.concat()) {
        out[p] = t;
    }
    Ok(out)
}

/// Result of permuting a subset of frames among themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameShuffle {
    pub frames: FrameInput,
    /// Sorted slots whose content was permuted.
    pub positions: Vec<usize>,
    /// For each entry of `positions`, the original index of the frame now
    /// in that slot (the order-prediction label).
    pub original_indices: Vec<usize>,
}

fn real_positions(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, r)| **r).map(|(i, _)| i).collect()
}

/// Select `ceil(rate * m_real)` real frames and permute them uniformly among
/// the selected slots. Fewer than two real frames: no shuffle.
pub fn shuffle_frames(frames: &FrameInput, rate: f64, rng: &mut impl Rng) -> FrameShuffle {
    let real = real_positions(&frames.mask);
    if real.len() < 2 {
        return FrameShuffle {
            frames: frames.clone(),
            positions: Vec::new(),
            original_indices: Vec::new(),
        };
    }
    let count = exact_count(rate, real.len());
    let mut positions: Vec<usize> = index::sample(rng, real.len(), count).into_iter().map(|i| real[i]).collect();
    positions.sort_unstable();
    let mut sources = positions.clone();
    sources.shuffle(rng);
    let mut out = frames.clone();
    let dim = frames.features.cols();
    for (&slot, &src) in positions.iter().zip(&sources) {
        out.features.data_mut()[slot * dim..(slot + 1) * dim].copy_from_slice(frames.row(src));
    }
    FrameShuffle {
        frames: out,
        positions,
        original_indices: sources,
    }
}

/// Put each shuffled frame back at its original index.
pub fn unshuffle_frames(shuffle: &FrameShuffle) -> FrameInput {
    let mut out = shuffle.frames.clone();
    let dim = out.features.cols();
    for (&slot, &src) in shuffle.positions.iter().zip(&shuffle.original_indices) {
        let row = shuffle.frames.row(slot).to_vec();
        out.features.data_mut()[src * dim..(src + 1) * dim].copy_from_slice(&row);
    }
    out
}

/// Zero `ceil(rate * m_real)` real frame rows. Returns the sorted positions.
pub fn mask_frames(frames: &FrameInput, rate: f64, rng: &mut impl Rng) -> (FrameInput, Vec<usize>) {
    let real = real_positions(&frames.mask);
    let count = exact_count(rate, real.len());
    let mut positions: Vec<usize> = index::sample(rng, real.len(), count).into_iter().map(|i| real[i]).collect();
    positions.sort_unstable();
    let mut out = frames.clone();
    let dim = frames.features.cols();
    for &p in &positions {
        out.features.data_mut()[p * dim..(p + 1) * dim].fill(0.0);
    }
    (out, positions)
}

/// Flag exactly `ceil(rate * batch)` examples.
pub fn select_examples(batch: usize, rate: f64, rng: &mut impl Rng) -> Vec<bool> {
    let mut flags = vec![false; batch];
    for i in index::sample(rng, batch, exact_count(rate, batch)) {
        flags[i] = true;
    }
    flags
}

/// Flag examples whose whole sentence is masked for generation.
pub fn select_full_mask(batch: usize, rate: f64, rng: &mut impl Rng) -> Vec<bool> {
    select_examples(batch, rate, rng)
}

/// Replace every content token by [MASK].
pub fn full_mask(text: &TextInput) -> Vec<usize> {
    text.ids
        .iter()
        .zip(&text.mask)
        .map(|(&id, &real)| if real && !is_structural(id) { MASK } else { id })
        .collect()
}

/// Query-network inputs and labels for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedExample {
    /// Encoder text input after shuffling and masking.
    pub text: TextInput,
    /// Token-prediction labels `(position, original id)`; empty when the
    /// example is fully masked.
    pub mlm_labels: Vec<(usize, usize)>,
    /// Sentence-order label and original segment lengths, when applied.
    pub msom: Option<(usize, [usize; 3])>,
    /// Encoder frame input after shuffling and zero-masking.
    pub frames: FrameInput,
    pub shuffled_positions: Vec<usize>,
    pub original_indices: Vec<usize>,
    pub masked_frame_positions: Vec<usize>,
    pub msg_full_mask: bool,
    /// Untouched inputs for the key network and generation targets.
    pub original_text: TextInput,
    pub original_frames: FrameInput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub examples: Vec<AugmentedExample>,
}

/// Augment one example given its batch-level selections.
pub fn augment_example(
    text: &TextInput,
    frames: &FrameInput,
    cfg: &AugmentConfig,
    shuffle_sentence: bool,
    full: bool,
    rng: &mut impl Rng,
) -> AugmentedExample {
    let mut working = text.clone();
    let mut msom = None;
    // A fully masked sentence carries no order information, so the
    // full-mask flag overrides sentence shuffling as well as token masking.
    if shuffle_sentence && !full {
        if let Some(s) = shuffle_sentence_segments(text, rng) {
            working.ids = s.ids;
            msom = Some((s.label, s.lengths));
        }
    }
    let (masked, mut mlm_labels) = mask_tokens(&working, cfg.token_mask_rate, rng);
    working.ids = masked;
    if full {
        working.ids = full_mask(text);
        mlm_labels.clear();
    }
    let shuffled = shuffle_frames(frames, cfg.frame_shuffle_rate, rng);
    let (zeroed, masked_frame_positions) = mask_frames(&shuffled.frames, cfg.frame_mask_rate, rng);
    AugmentedExample {
        text: working,
        mlm_labels,
        msom,
        frames: zeroed,
        shuffled_positions: shuffled.positions,
        original_indices: shuffled.original_indices,
        masked_frame_positions,
        msg_full_mask: full,
        original_text: text.clone(),
        original_frames: frames.clone(),
    }
}

/// Augment a batch. Batch-level selections (sentence shuffle, full mask)
/// use one stream; each example uses its own stream.
pub fn augment_batch(
    texts: &[TextInput],
    frames: &[FrameInput],
    cfg: &AugmentConfig,
    seed: u64,
    step: u64,
) -> Result<AugmentedBatch> {
    cfg.validate()?;
    if texts.len() != frames.len() {
        return Err(Error::Input(format!("{} texts but {} frame sets", texts.len(), frames.len())));
    }
    let b = texts.len();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step, u64::MAX));
    let shuffle_flags = select_examples(b, cfg.sentence_shuffle_rate, &mut batch_rng);
    let full_flags = select_full_mask(b, cfg.full_mask_rate, &mut batch_rng);
    let examples = (0..b)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step, i as u64));
            augment_example(&texts[i], &frames[i], cfg, shuffle_flags[i], full_flags[i], &mut rng)
        })
        .collect();
    Ok(AugmentedBatch { examples })
}
