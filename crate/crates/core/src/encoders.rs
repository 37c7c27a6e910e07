//! Vision and text embedding sources: stores of precomputed vectors and
//! deterministic hash-based stubs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::brain::TargetEmbedding;
use crate::error::{Error, Result};
use crate::metrics::tokenize;
use crate::tensor::{DType, Tensor};

pub trait VisionEncoder {
    fn output_dim(&self) -> usize;
    fn encode(&self, stimulus_id: &str) -> Result<TargetEmbedding>;
}

pub trait TextEncoder {
    fn output_dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Fails unless an encoder width `actual` equals the `expected` one.
pub fn check_output_dim(name: &str, actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::Validation(format!(
            "{name} encoder produces {actual}-d vectors, consumer expects {expected}"
        )));
    }
    Ok(())
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in (0, 1] from the top 53 bits.
fn unit(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 / (1u64 << 53) as f64
}

/// Unit-norm pseudo-random vector determined by (input, seed, dim): an FNV-1a
/// key expanded by a counter-based generator into Box-Muller normals.
pub fn stub_encode(input: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(input.as_bytes());
    let key = fnv1a64(&bytes);
    let mut out = Vec::with_capacity(dim);
    let mut counter = 0u64;
    while out.len() < dim {
        let u1 = unit(splitmix64(key ^ splitmix64(counter)));
        let u2 = unit(splitmix64(key ^ splitmix64(counter + 1)));
        counter += 2;
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos());
        if out.len() < dim {
            out.push(r * theta.sin());
        }
    }
    normalize(&mut out);
    out
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubVisionEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl VisionEncoder for StubVisionEncoder {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, stimulus_id: &str) -> Result<TargetEmbedding> {
        Ok(TargetEmbedding(stub_encode(stimulus_id, self.dim, self.seed)))
    }
}

/// Bag-of-words stub: the normalized sum of per-word stub vectors, so texts
/// sharing words have positive similarity. Texts with no words hash whole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl TextEncoder for StubTextEncoder {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let words = tokenize(text);
        if words.is_empty() {
            return Ok(stub_encode(text, self.dim, self.seed));
        }
        let mut sum = vec![0.0; self.dim];
        for w in &words {
            for (s, x) in sum.iter_mut().zip(stub_encode(w, self.dim, self.seed)) {
                *s += x;
            }
        }
        normalize(&mut sum);
        Ok(sum)
    }
}

/// Vectors read from `<root>/embeddings/<stimulus_id>.vct`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedVision {
    dim: usize,
    store: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedVision {
    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }
}

impl VisionEncoder for PrecomputedVision {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, stimulus_id: &str) -> Result<TargetEmbedding> {
        self.store
            .get(stimulus_id)
            .map(|v| TargetEmbedding(v.clone()))
            .ok_or_else(|| Error::MissingKey(format!("no embedding for stimulus {stimulus_id:?}")))
    }
}

/// Exact-string lookup of vectors listed in `<root>/text_index.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedText {
    dim: usize,
    store: BTreeMap<String, Vec<f64>>,
}

impl TextEncoder for PrecomputedText {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        self.store
            .get(text)
            .cloned()
            .ok_or_else(|| Error::MissingKey(format!("no text embedding for {text:?}")))
    }
}

fn check_vector(path: &Path, t: &Tensor, dim: &mut Option<usize>) -> Result<()> {
    if t.rank() != 1 {
        return Err(Error::Validation(format!("{} is not a vector: {:?}", path.display(), t.shape())));
    }
    match *dim {
        Some(d) if d != t.len() => Err(Error::Validation(format!(
            "{} has dimension {}, other entries have {d}",
            path.display(),
            t.len()
        ))),
        _ => {
            *dim = Some(t.len());
            Ok(())
        }
    }
}

pub fn load_precomputed_vision(root: &Path) -> Result<PrecomputedVision> {
    let dir = root.join("embeddings");
    let mut entries: Vec<_> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(&dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    let mut dim = None;
    let mut store = BTreeMap::new();
    for e in entries {
        let path = e.path();
        if path.extension().and_then(|x| x.to_str()) != Some("vct") {
            continue;
        }
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let t = Tensor::load(&path)?;
        check_vector(&path, &t, &mut dim)?;
        store.insert(id, t.into_data());
    }
    let dim = dim.ok_or_else(|| Error::Validation(format!("{} holds no .vct embeddings", dir.display())))?;
    Ok(PrecomputedVision { dim, store })
}

pub fn write_vision_store(root: &Path, items: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    for (id, v) in items {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::Validation(format!("stimulus id {id:?} is not usable as a file name")));
        }
        Tensor::vector(v.clone()).save(&root.join("embeddings").join(format!("{id}.vct")), DType::F64)?;
    }
    Ok(())
}

pub fn load_precomputed_text(root: &Path) -> Result<PrecomputedText> {
    let index_path = root.join("text_index.json");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| Error::json(&index_path, e))?;
    let mut dim = None;
    let mut store = BTreeMap::new();
    for (key, file) in index {
        let path = root.join(&file);
        let t = Tensor::load(&path)?;
        check_vector(&path, &t, &mut dim)?;
        store.insert(key, t.into_data());
    }
    let dim = dim.ok_or_else(|| Error::Validation(format!("{} lists no entries", index_path.display())))?;
    Ok(PrecomputedText { dim, store })
}

/// Writes one tensor per string (named by position) plus `text_index.json`.
pub fn write_text_store(root: &Path, items: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let mut index = BTreeMap::new();
    for (i, (key, v)) in items.iter().enumerate() {
        let rel = format!("text/{i:06}.vct");
        Tensor::vector(v.clone()).save(&root.join(&rel), DType::F64)?;
        index.insert(key.clone(), rel);
    }
    let path = root.join("text_index.json");
    let body = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

/// Where one metric's text encoder comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TextEncoderSpec {
    Stub { dim: usize, seed: u64 },
    /// Directory relative to the encoder configuration.
    Precomputed { path: String },
}

/// Text encoders behind the Sentence, CLIP-B and CLIP-L rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSetSpec {
    pub sentence: TextEncoderSpec,
    pub clip_b: TextEncoderSpec,
    pub clip_l: TextEncoderSpec,
}

impl Default for EncoderSetSpec {
    fn default() -> Self {
        EncoderSetSpec {
            sentence: TextEncoderSpec::Stub { dim: 384, seed: 1 },
            clip_b: TextEncoderSpec::Stub { dim: 512, seed: 2 },
            clip_l: TextEncoderSpec::Stub { dim: 768, seed: 3 },
        }
    }
}

pub struct EncoderSet {
    pub sentence: Box<dyn TextEncoder>,
    pub clip_b: Box<dyn TextEncoder>,
    pub clip_l: Box<dyn TextEncoder>,
}

impl EncoderSet {
    pub fn from_spec(spec: &EncoderSetSpec, base: &Path) -> Result<Self> {
        let build = |s: &TextEncoderSpec| -> Result<Box<dyn TextEncoder>> {
            Ok(match s {
                TextEncoderSpec::Stub { dim, seed } => {
                    if *dim == 0 {
                        return Err(Error::Config("stub encoder dimension must be positive".into()));
                    }
                    Box::new(StubTextEncoder { dim: *dim, seed: *seed })
                }
                TextEncoderSpec::Precomputed { path } => Box::new(load_precomputed_text(&base.join(path))?),
            })
        };
        Ok(EncoderSet {
            sentence: build(&spec.sentence)?,
            clip_b: build(&spec.clip_b)?,
            clip_l: build(&spec.clip_l)?,
        })
    }

    pub fn stubs() -> Self {
        Self::from_spec(&EncoderSetSpec::default(), Path::new(".")).expect("stub specs are valid")
    }

    /// Reads `<dir>/encoders.json`; precomputed paths resolve against `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("encoders.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let spec: EncoderSetSpec = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        Self::from_spec(&spec, dir)
    }
}
