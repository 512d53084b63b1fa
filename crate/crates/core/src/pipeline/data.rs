use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{FrameInput, ModelConfig, TextInput, CLS, FIRST_CONTENT_TOKEN, SEP};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"VLPREC\x00\x01";
const FORMAT_VERSION: u32 = 1;

/// Optional downstream labels.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub plot: Option<usize>,
    pub top_cate: Option<usize>,
    pub leaf_cate: Option<usize>,
}

/// One video-text pair at the feature level.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTextRecord {
    pub id: String,
    /// `[CLS] ... [SEP]`.
    pub tokens: Vec<usize>,
    /// One row of `frame_dim` features per sampled frame.
    pub frames: Vec<Vec<f64>>,
    pub labels: Labels,
    /// Feature vector of an associated product image.
    pub image: Option<Vec<f64>>,
    /// Caption target, `[CLS] ... [SEP]`.
    pub abstract_tokens: Option<Vec<usize>>,
}

impl VideoTextRecord {
    pub fn validate(&self, frame_dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(format!("record `{}`: {msg}", self.id)));
        for (what, toks) in std::iter::once(("title", &self.tokens)).chain(self.abstract_tokens.as_ref().map(|a| ("abstract", a))) {
            if toks.len() < 2 || toks[0] != CLS || toks[toks.len() - 1] != SEP {
                return bad(format!("{what} tokens must start with [CLS] and end with [SEP]"));
            }
        }
        if self.frames.is_empty() {
            return bad("at least one frame is required".into());
        }
        for f in self.frames.iter().chain(self.image.iter()) {
            if f.len() != frame_dim {
                return bad(format!("feature of length {} in a file of dimension {frame_dim}", f.len()));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return bad("non-finite feature".into());
            }
        }
        Ok(())
    }

    /// Padded model inputs for this record.
    pub fn inputs(&self, cfg: &ModelConfig) -> Result<(TextInput, FrameInput)> {
        Ok((self.text_input(cfg)?, self.frame_input(cfg)?))
    }

    pub fn text_input(&self, cfg: &ModelConfig) -> Result<TextInput> {
        TextInput::padded(&self.tokens, cfg.max_text).map_err(|e| Error::Input(format!("record `{}`: {e}", self.id)))
    }

    pub fn frame_input(&self, cfg: &ModelConfig) -> Result<FrameInput> {
        FrameInput::padded(&self.frames, cfg.max_frames, cfg.frame_dim)
            .map_err(|e| Error::Input(format!("record `{}`: {e}", self.id)))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    version: u32,
    frame_dim: usize,
    records: usize,
}

/// A loaded record file.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frame_dim: usize,
    pub records: Vec<VideoTextRecord>,
}

impl Dataset {
    pub fn new(frame_dim: usize, records: Vec<VideoTextRecord>) -> Result<Self> {
        for r in &records {
            r.validate(frame_dim)?;
        }
        Ok(Self { frame_dim, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Serialize: magic, `u32` header length, JSON header, then one
    /// length-prefixed little-endian binary payload per record.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&FileHeader {
            version: FORMAT_VERSION,
            frame_dim: self.frame_dim,
            records: self.records.len(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        for r in &self.records {
            let payload = encode_record(r);
            put_u32(&mut out, payload.len() as u32);
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: &str| Error::format(path, msg);
        let mut rd = Reader::new(bytes);
        if rd.take(8).map_err(|_| fail("truncated file"))? != MAGIC {
            return Err(fail("not a record file (bad magic)"));
        }
        let hlen = rd.u32().map_err(|_| fail("truncated header"))? as usize;
        let header: FileHeader =
            serde_json::from_slice(rd.take(hlen).map_err(|_| fail("truncated header"))?).map_err(|e| fail(&format!("bad header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(fail(&format!("unsupported record format version {}", header.version)));
        }
        let mut records = Vec::with_capacity(header.records);
        for i in 0..header.records {
            let len = rd.u32().map_err(|_| fail(&format!("truncated at record {i}")))? as usize;
            let payload = rd.take(len).map_err(|_| fail(&format!("truncated at record {i}")))?;
            let rec = decode_record(payload, header.frame_dim).map_err(|m| fail(&format!("record {i}: {m}")))?;
            rec.validate(header.frame_dim).map_err(|e| fail(&e.to_string()))?;
            records.push(rec);
        }
        if !rd.is_done() {
            return Err(fail("trailing bytes after the last record"));
        }
        Ok(Self {
            frame_dim: header.frame_dim,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Write through a temporary sibling file and rename into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_ids(out: &mut Vec<u8>, ids: &[usize]) {
    put_u32(out, ids.len() as u32);
    for &t in ids {
        put_u32(out, t as u32);
    }
}

const HAS_PLOT: u8 = 1;
const HAS_TOP: u8 = 2;
const HAS_LEAF: u8 = 4;
const HAS_IMAGE: u8 = 8;
const HAS_ABSTRACT: u8 = 16;

fn encode_record(r: &VideoTextRecord) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, r.id.len() as u32);
    out.extend_from_slice(r.id.as_bytes());
    put_ids(&mut out, &r.tokens);
    put_u32(&mut out, r.frames.len() as u32);
    for f in &r.frames {
        put_f64s(&mut out, f);
    }
    let mut flags = 0;
    for (bit, on) in [
        (HAS_PLOT, r.labels.plot.is_some()),
        (HAS_TOP, r.labels.top_cate.is_some()),
        (HAS_LEAF, r.labels.leaf_cate.is_some()),
        (HAS_IMAGE, r.image.is_some()),
        (HAS_ABSTRACT, r.abstract_tokens.is_some()),
    ] {
        if on {
            flags |= bit;
        }
    }
    out.push(flags);
    for l in [r.labels.plot, r.labels.top_cate, r.labels.leaf_cate].into_iter().flatten() {
        put_u32(&mut out, l as u32);
    }
    if let Some(img) = &r.image {
        put_f64s(&mut out, img);
    }
    if let Some(a) = &r.abstract_tokens {
        put_ids(&mut out, a);
    }
    out
}

fn decode_record(bytes: &[u8], dim: usize) -> std::result::Result<VideoTextRecord, String> {
    let mut rd = Reader::new(bytes);
    let trunc = |_| "truncated payload".to_string();
    let id_len = rd.u32().map_err(trunc)? as usize;
    let id = String::from_utf8(rd.take(id_len).map_err(trunc)?.to_vec()).map_err(|_| "id is not UTF-8".to_string())?;
    let tokens = rd.ids().map_err(trunc)?;
    let nf = rd.u32().map_err(trunc)? as usize;
    let mut frames = Vec::with_capacity(nf);
    for _ in 0..nf {
        frames.push(rd.f64s(dim).map_err(trunc)?);
    }
    let flags = rd.take(1).map_err(trunc)?[0];
    let mut label = |bit: u8| -> std::result::Result<Option<usize>, String> {
        if flags & bit != 0 {
            Ok(Some(rd.u32().map_err(trunc)? as usize))
        } else {
            Ok(None)
        }
    };
    let labels = Labels {
        plot: label(HAS_PLOT)?,
        top_cate: label(HAS_TOP)?,
        leaf_cate: label(HAS_LEAF)?,
    };
    let image = if flags & HAS_IMAGE != 0 { Some(rd.f64s(dim).map_err(trunc)?) } else { None };
    let abstract_tokens = if flags & HAS_ABSTRACT != 0 { Some(rd.ids().map_err(trunc)?) } else { None };
    if !rd.is_done() {
        return Err("trailing bytes in record payload".into());
    }
    Ok(VideoTextRecord {
        id,
        tokens,
        frames,
        labels,
        image,
        abstract_tokens,
    })
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

#[derive(Debug)]
pub(crate) struct Truncated;

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], Truncated> {
        let end = self.at.checked_add(n).ok_or(Truncated)?;
        let s = self.bytes.get(self.at..end).ok_or(Truncated)?;
        self.at = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, Truncated> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, Truncated> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, Truncated> {
        let raw = self.take(n.checked_mul(8).ok_or(Truncated)?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn ids(&mut self) -> std::result::Result<Vec<usize>, Truncated> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }

    pub(crate) fn is_done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

/// Parameters of the synthetic topic-structured corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub records: usize,
    pub topics: usize,
    pub vocab_size: usize,
    pub frame_dim: usize,
    /// Scale of the per-record deviation of frame features from the topic
    /// centroid.
    pub noise: f64,
    /// Per-frame deviation, as a fraction of `noise`.
    pub frame_jitter: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Content tokens per title (excluding [CLS]/[SEP]).
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability that a content token is drawn from the whole vocabulary
    /// rather than the topic's own band.
    pub token_noise: f64,
    pub with_abstract: bool,
    pub with_image: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            records: 32,
            topics: 4,
            vocab_size: 64,
            frame_dim: 32,
            noise: 0.5,
            frame_jitter: 0.2,
            min_frames: 3,
            max_frames: 6,
            min_tokens: 4,
            max_tokens: 10,
            token_noise: 0.1,
            with_abstract: true,
            with_image: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn from_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let content = self.vocab_size.saturating_sub(FIRST_CONTENT_TOKEN);
        if self.topics == 0 || content < self.topics {
            return Err(Error::Config(format!(
                "need at least one content token per topic ({} topics, {content} content tokens)",
                self.topics
            )));
        }
        if self.frame_dim == 0 || self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config("frame counts must satisfy 1 <= min_frames <= max_frames".into()));
        }
        if self.min_tokens > self.max_tokens {
            return Err(Error::Config("min_tokens must not exceed max_tokens".into()));
        }
        if !(self.noise >= 0.0) || !(self.frame_jitter >= 0.0) || !(0.0..=1.0).contains(&self.token_noise) {
            return Err(Error::Config("noise levels must be non-negative and token_noise in [0, 1]".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Content tokens are split into `topics` contiguous bands.
fn topic_band(spec: &SyntheticSpec, topic: usize) -> (usize, usize) {
    let content = spec.vocab_size - FIRST_CONTENT_TOKEN;
    let width = content / spec.topics;
    let lo = FIRST_CONTENT_TOKEN + topic * width;
    (lo, lo + width)
}

fn draw_sentence(spec: &SyntheticSpec, topic: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (lo, hi) = topic_band(spec, topic);
    let len = rng.random_range(spec.min_tokens..=spec.max_tokens);
    let mut t = vec![CLS];
    for _ in 0..len {
        let tok = if rng.random::<f64>() < spec.token_noise {
            rng.random_range(FIRST_CONTENT_TOKEN..spec.vocab_size)
        } else {
            rng.random_range(lo..hi)
        };
        t.push(tok);
    }
    t.push(SEP);
    t
}

/// Records whose frames are `centroid(topic) + noise * (u_r + jitter * e_f)`
/// and whose tokens come mostly from the topic's vocabulary band. Labels:
/// plot = top category = topic; leaf category = 2 * topic + parity of the
/// first content token (0 for an empty title).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centroids: Vec<Vec<f64>> = (0..spec.topics).map(|_| gaussian(&mut rng, spec.frame_dim)).collect();
    let mut records = Vec::with_capacity(spec.records);
    for r in 0..spec.records {
        let topic = r % spec.topics;
        let c = &centroids[topic];
        let offset = gaussian(&mut rng, spec.frame_dim);
        let nf = rng.random_range(spec.min_frames..=spec.max_frames);
        let frames = (0..nf)
            .map(|_| {
                let jitter = gaussian(&mut rng, spec.frame_dim);
                (0..spec.frame_dim)
                    .map(|j| c[j] + spec.noise * (offset[j] + spec.frame_jitter * jitter[j]))
                    .collect()
            })
            .collect();
        let tokens = draw_sentence(spec, topic, &mut rng);
        let parity = if tokens.len() > 2 { tokens[1] % 2 } else { 0 };
        let image = spec.with_image.then(|| {
            let e = gaussian(&mut rng, spec.frame_dim);
            (0..spec.frame_dim).map(|j| c[j] + spec.noise * (offset[j] + spec.frame_jitter * e[j])).collect()
        });
        let abstract_tokens = spec.with_abstract.then(|| draw_sentence(spec, topic, &mut rng));
        records.push(VideoTextRecord {
            id: format!("syn-{r:05}"),
            tokens,
            frames,
            labels: Labels {
                plot: Some(topic),
                top_cate: Some(topic),
                leaf_cate: Some(2 * topic + parity),
            },
            image,
            abstract_tokens,
        });
    }
    Dataset::new(spec.frame_dim, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn mean_frame(r: &VideoTextRecord) -> Vec<f64> {
        let n = r.frames.len() as f64;
        (0..r.frames[0].len()).map(|j| r.frames.iter().map(|f| f[j]).sum::<f64>() / n).collect()
    }

    #[test]
    fn round_trip_is_lossless() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_bad_magic_are_reported() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let bytes = ds.to_bytes();
        let err = Dataset::from_bytes(&bytes[..bytes.len() - 3], Path::new("x.rec")).unwrap_err();
        assert!(err.to_string().contains("x.rec"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(Dataset::from_bytes(&bad, Path::new("x.rec")).is_err());
    }

    #[test]
    fn zero_noise_frames_equal_the_centroid() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        for r in &ds.records {
            assert!(r.frames.iter().all(|f| *f == r.frames[0]));
        }
        // Records of the same topic share the centroid.
        assert_eq!(ds.records[0].frames[0], ds.records[spec.topics].frames[0]);
    }

    #[test]
    fn same_topic_is_more_similar_than_cross_topic() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let t = 4;
        let mut within = Vec::new();
        let mut across = Vec::new();
        for i in 0..ds.len() {
            for j in i + 1..ds.len() {
                let c = cosine(&mean_frame(&ds.records[i]), &mean_frame(&ds.records[j]));
                if i % t == j % t {
                    within.push(c);
                } else {
                    across.push(c);
                }
            }
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(avg(&within) > avg(&across));
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let a = generate_synthetic(&SyntheticSpec::default()).unwrap().to_bytes();
        let b = generate_synthetic(&SyntheticSpec::default()).unwrap().to_bytes();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec {
            seed: 1,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .to_bytes();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_records_are_rejected() {
        let mut r = generate_synthetic(&SyntheticSpec::default()).unwrap().records.remove(0);
        r.tokens[0] = 9;
        assert!(r.validate(32).is_err());
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert!(ds.records[0].validate(31).is_err());
    }

    #[test]
    fn spec_rejects_unknown_keys() {
        assert!(SyntheticSpec::from_str("records = 4\nnoize = 0.1").is_err());
        assert_eq!(SyntheticSpec::from_str("records = 4").unwrap().records, 4);
    }
}
