//! Encoders, the content-addressed embedding cache, eligibility pooling,
//! projection and token-cap truncation.
//!
//! Cache file layout (all little-endian):
//!
//! ```text
//! magic "CTOPEMB1" | u32 dim | u64 count | count x (16-byte key, dim x f32)
//! ```
//!
//! A key is the first 16 bytes of SHA-256(modality || 0x00 || text).
//! Eligibility sentences are stored individually under the `criteria` modality.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eligibility::split_eligibility;
use crate::text::{sentence_pieces, take_tokens, token_count};

pub const CACHE_MAGIC: &[u8; 8] = b"CTOPEMB1";
pub const DEFAULT_DIM: usize = 768;

/// Modality name under which eligibility sentences are keyed.
pub const CRITERIA_MODALITY: &str = "criteria";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("no cached vector for {modality} text {text:?}")]
    MissingKey { modality: String, text: String },
    #[error("cache file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("non-finite value in vector")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Key = [u8; 16];

pub fn content_hash(modality: &str, text: &str) -> Key {
    let mut h = Sha256::new();
    h.update(modality.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 16];
    key.copy_from_slice(&digest[..16]);
    key
}

pub fn key_hex(key: &Key) -> String {
    key.iter().map(|b| format!("{b:02x}")).collect()
}

pub trait Encoder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, modality: &str, text: &str) -> Result<Vec<f32>, EmbeddingError>;
}

/// Deterministic surrogate encoder: unit-norm Gaussian vectors seeded by the
/// content hash.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    dim: usize,
}

impl StubEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "encoder dim must be positive");
        StubEncoder { dim }
    }
}

impl Default for StubEncoder {
    fn default() -> Self {
        StubEncoder::new(DEFAULT_DIM)
    }
}

pub fn stub_encode(modality: &str, text: &str, dim: usize) -> Vec<f32> {
    let key = content_hash(modality, text);
    let seed = u64::from_le_bytes(key[..8].try_into().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    raw.iter().map(|x| (x / norm) as f32).collect()
}

impl Encoder for StubEncoder {
    fn name(&self) -> &str {
        "stub"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, modality: &str, text: &str) -> Result<Vec<f32>, EmbeddingError> {
        Ok(stub_encode(modality, text, self.dim))
    }
}

/// In-memory view of a cache file. Insertion order is preserved on flush.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    dim: usize,
    keys: Vec<Key>,
    data: Vec<f32>,
    index: HashMap<Key, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheSummary {
    pub dim: usize,
    pub count: usize,
}

fn format_err(path: &Path, reason: impl Into<String>) -> EmbeddingError {
    EmbeddingError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(usize, Vec<Key>, Vec<f32>), EmbeddingError> {
    if bytes.len() < 20 || &bytes[..8] != CACHE_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(format_err(path, "zero dimension"));
    }
    let record = 16 + 4 * dim;
    let expected = count.checked_mul(record).and_then(|n| n.checked_add(20));
    if expected != Some(bytes.len()) {
        return Err(format_err(
            path,
            format!(
                "length {} does not match {count} records of dim {dim}",
                bytes.len()
            ),
        ));
    }
    let mut keys = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for chunk in bytes[20..].chunks_exact(record) {
        keys.push(chunk[..16].try_into().unwrap());
        data.extend(
            chunk[16..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
        );
    }
    Ok((dim, keys, data))
}

/// Verifies a cache file: header, exact length, finite values, unique keys.
/// With `expected_dim`, also checks the vector width.
pub fn check_cache_file(
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<CacheSummary, EmbeddingError> {
    let bytes = fs::read(path)?;
    let (dim, keys, data) = decode(path, &bytes)?;
    if let Some(want) = expected_dim {
        if want != dim {
            return Err(EmbeddingError::DimMismatch {
                expected: want,
                actual: dim,
            });
        }
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(format_err(path, "non-finite value"));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = keys.iter().find(|k| !seen.insert(**k)) {
        return Err(format_err(path, format!("duplicate key {}", key_hex(dup))));
    }
    Ok(CacheSummary {
        dim,
        count: keys.len(),
    })
}

impl EmbeddingCache {
    pub fn in_memory(dim: usize) -> Self {
        EmbeddingCache {
            path: None,
            dim,
            keys: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Opens `path` if it exists (its dimension must equal `dim`), otherwise
    /// starts empty; [`flush`](Self::flush) writes it back.
    pub fn open(path: &Path, dim: usize) -> Result<Self, EmbeddingError> {
        let mut cache = Self::in_memory(dim);
        cache.path = Some(path.to_path_buf());
        if path.exists() {
            let bytes = fs::read(path)?;
            let (file_dim, keys, data) = decode(path, &bytes)?;
            if file_dim != dim {
                return Err(EmbeddingError::DimMismatch {
                    expected: dim,
                    actual: file_dim,
                });
            }
            for (i, k) in keys.iter().enumerate() {
                cache.insert_raw(*k, &data[i * dim..(i + 1) * dim]);
            }
        }
        Ok(cache)
    }

    /// Opens an existing file, taking its dimension from the header.
    pub fn open_existing(path: &Path) -> Result<Self, EmbeddingError> {
        let bytes = fs::read(path)?;
        let (dim, _, _) = decode(path, &bytes)?;
        Self::open(path, dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn insert_raw(&mut self, key: Key, v: &[f32]) {
        match self.index.get(&key) {
            Some(&i) => self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(v),
            None => {
                self.index.insert(key, self.keys.len());
                self.keys.push(key);
                self.data.extend_from_slice(v);
            }
        }
    }

    pub fn get_key(&self, key: &Key) -> Option<&[f32]> {
        self.index
            .get(key)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn get(&self, modality: &str, text: &str) -> Option<&[f32]> {
        self.get_key(&content_hash(modality, text))
    }

    pub fn put_key(&mut self, key: Key, v: &[f32]) -> Result<(), EmbeddingError> {
        if v.len() != self.dim {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        self.insert_raw(key, v);
        Ok(())
    }

    pub fn put(&mut self, modality: &str, text: &str, v: &[f32]) -> Result<(), EmbeddingError> {
        self.put_key(content_hash(modality, text), v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.keys.len() * (16 + 4 * self.dim));
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u64).to_le_bytes());
        for (i, k) in self.keys.iter().enumerate() {
            out.extend_from_slice(k);
            for x in &self.data[i * self.dim..(i + 1) * self.dim] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Writes the whole file atomically (temp file + rename).
    pub fn flush(&self) -> Result<(), EmbeddingError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Encoder that only answers from a cache, e.g. one written by an external exporter.
pub struct CacheEncoder {
    cache: EmbeddingCache,
}

impl CacheEncoder {
    pub fn new(cache: EmbeddingCache) -> Self {
        CacheEncoder { cache }
    }
}

impl Encoder for CacheEncoder {
    fn name(&self) -> &str {
        "cache"
    }

    fn dim(&self) -> usize {
        self.cache.dim()
    }

    fn encode(&self, modality: &str, text: &str) -> Result<Vec<f32>, EmbeddingError> {
        self.cache
            .get(modality, text)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| EmbeddingError::MissingKey {
                modality: modality.to_string(),
                text: text.to_string(),
            })
    }
}

/// Matrix-vector product `P e`.
pub fn project(e: ArrayView1<'_, f64>, p: &Array2<f64>) -> Result<Array1<f64>, EmbeddingError> {
    if p.ncols() != e.len() {
        return Err(EmbeddingError::DimMismatch {
            expected: p.ncols(),
            actual: e.len(),
        });
    }
    Ok(p.dot(&e))
}

fn mean_pool(vectors: &[Vec<f32>], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; dim];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += *x as f64;
        }
    }
    if !vectors.is_empty() {
        let n = vectors.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    acc
}

/// `[mean(inclusion) ‖ mean(exclusion)]`, each half zero when its group is empty.
pub fn pool_eligibility(criteria: &str, encoder: &dyn Encoder) -> Result<Vec<f64>, EmbeddingError> {
    let (inclusion, exclusion) = split_eligibility(criteria);
    let dim = encoder.dim();
    let encode_all = |group: &[String]| -> Result<Vec<Vec<f32>>, EmbeddingError> {
        group
            .iter()
            .map(|s| encoder.encode(CRITERIA_MODALITY, s))
            .collect()
    };
    let mut pooled = mean_pool(&encode_all(&inclusion)?, dim);
    pooled.extend(mean_pool(&encode_all(&exclusion)?, dim));
    Ok(pooled)
}

/// Pooled eligibility vector projected by `P_elig` (rows x 2·dim).
pub fn embed_eligibility(
    criteria: &str,
    encoder: &dyn Encoder,
    p_elig: &Array2<f64>,
) -> Result<Array1<f64>, EmbeddingError> {
    let pooled = Array1::from(pool_eligibility(criteria, encoder)?);
    project(pooled.view(), p_elig)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Molecular,
    Protocol,
    Ontology,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenCaps {
    pub molecular: usize,
    pub protocol: usize,
    pub ontology: usize,
    pub global: usize,
    /// Protocol sentences containing one of these are kept first.
    pub priority_keywords: Vec<String>,
}

impl Default for TokenCaps {
    fn default() -> Self {
        TokenCaps {
            molecular: 128,
            protocol: 512,
            ontology: 128,
            global: 1024,
            priority_keywords: ["primary endpoint", "endpoint", "inclusion", "exclusion"]
                .map(str::to_string)
                .to_vec(),
        }
    }
}

impl TokenCaps {
    pub fn cap(&self, segment: Segment) -> usize {
        match segment {
            Segment::Molecular => self.molecular,
            Segment::Protocol => self.protocol,
            Segment::Ontology => self.ontology,
        }
    }
}

/// Keeps whole sentences within `cap` tokens: keyword sentences first, then
/// the rest, each group in text order; output preserves the original order.
fn truncate_protocol(text: &str, cap: usize, keywords: &[String]) -> String {
    let pieces = sentence_pieces(text);
    let lower: Vec<String> = pieces.iter().map(|p| p.to_lowercase()).collect();
    let priority = |i: usize| {
        keywords
            .iter()
            .any(|k| lower[i].contains(&k.to_lowercase()))
    };
    let mut order: Vec<usize> = (0..pieces.len()).filter(|&i| priority(i)).collect();
    order.extend((0..pieces.len()).filter(|&i| !priority(i)));
    let mut keep = vec![false; pieces.len()];
    let mut used = 0;
    for i in order {
        let n = token_count(pieces[i]);
        if n > 0 && used + n <= cap {
            keep[i] = true;
            used += n;
        }
    }
    if used == 0 {
        // no single sentence fits; fall back to a plain token cut
        return take_tokens(text, cap);
    }
    let kept: String = pieces
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(p, _)| *p)
        .collect();
    kept.trim_end().to_string()
}

/// Truncates `text` to `cap` whitespace tokens under the segment's rule.
pub fn truncate_to(segment: Segment, text: &str, cap: usize, caps: &TokenCaps) -> String {
    if token_count(text) <= cap {
        return text.to_string();
    }
    match segment {
        Segment::Protocol => truncate_protocol(text, cap, &caps.priority_keywords),
        _ => take_tokens(text, cap),
    }
}

pub fn truncate_tokens(segment: Segment, text: &str, caps: &TokenCaps) -> String {
    truncate_to(segment, text, caps.cap(segment), caps)
}

/// Applies per-segment caps, then the global cap across a record's segments.
/// The global budget is spent molecular, then protocol, then ontology, so
/// ontology text is the first to be cut.
pub fn truncate_record(segments: &[(Segment, String)], caps: &TokenCaps) -> Vec<String> {
    let capped: Vec<String> = segments
        .iter()
        .map(|(s, t)| truncate_tokens(*s, t, caps))
        .collect();
    let mut out = capped.clone();
    let mut remaining = caps.global;
    for kind in [Segment::Molecular, Segment::Protocol, Segment::Ontology] {
        for (i, (s, _)) in segments.iter().enumerate() {
            if *s != kind {
                continue;
            }
            out[i] = truncate_to(kind, &capped[i], remaining, caps);
            remaining -= token_count(&out[i]).min(remaining);
        }
    }
    out
}
