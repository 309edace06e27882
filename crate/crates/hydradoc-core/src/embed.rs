//! Block embedding: the pluggable backend interface, the built-in hashing
//! embedder, and the caching layer around both.
//!
//! Backends must be deterministic and defined on the empty string. The empty
//! string maps to a dense nonzero vector on purpose: the sentence encoders
//! this interface fronts do the same, which is exactly why downstream masking
//! exists and has to be load-bearing.

use alloc::string::String;
use alloc::vec::Vec;

use crate::blocking::BlockedDocument;

/// `n_b x n_d` block-embedding matrix (`f32` storage; training math upgrades
/// to `f64` when rows enter a tape).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols);
        FeatureMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbedError {
    /// Backend failed on specific block indices.
    Backend {
        failed_blocks: Vec<usize>,
        message: String,
    },
    DimensionMismatch { expected: usize, got: usize },
}

impl core::fmt::Display for EmbedError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EmbedError::Backend {
                failed_blocks,
                message,
            } => write!(f, "embedding failed for blocks {failed_blocks:?}: {message}"),
            EmbedError::DimensionMismatch { expected, got } => {
                write!(f, "backend returned dimension {got}, expected {expected}")
            }
        }
    }
}

impl core::error::Error for EmbedError {}

/// A deterministic text-to-vector model. Same block text must always produce
/// the same vector, position never matters, and the empty string must map to
/// a dense nonzero vector.
pub trait EmbeddingBackend {
    /// Stable identifier recorded in model files and cache headers.
    fn backend_id(&self) -> String;

    /// Output dimension n_d.
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError>;

    /// Order-preserving batch embedding. The default maps `embed`; remote
    /// backends override to amortize round trips.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Vector store keyed by (backend id, block text). A hit must equal
/// recomputation bit-exactly; concurrent use is reader-parallel with
/// serialized writers.
pub trait EmbeddingCache {
    fn get(&self, backend_id: &str, text: &str) -> Option<Vec<f32>>;
    fn put(&mut self, backend_id: &str, text: &str, vector: &[f32]);
}

/// Reborrow an optional cache handle for a nested call inside a loop.
pub fn reborrow_cache<'a>(
    cache: &'a mut Option<&mut dyn EmbeddingCache>,
) -> Option<&'a mut dyn EmbeddingCache> {
    match cache {
        Some(c) => Some(&mut **c),
        None => None,
    }
}

/// Simple in-memory cache, mainly for tests and single-run reuse.
#[derive(Default)]
pub struct MemoryCache {
    entries: alloc::collections::BTreeMap<(String, String), Vec<f32>>,
}

impl MemoryCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl EmbeddingCache for MemoryCache {
    fn get(&self, backend_id: &str, text: &str) -> Option<Vec<f32>> {
        self.entries
            .get(&(String::from(backend_id), String::from(text)))
            .cloned()
    }

    fn put(&mut self, backend_id: &str, text: &str, vector: &[f32]) {
        self.entries
            .insert((String::from(backend_id), String::from(text)), vector.to_vec());
    }
}

/// Embed every block of a document, row `i` = backend(blocks[i]). Padded
/// blocks get the backend's empty-string vector; masking is applied
/// downstream. Cache misses are computed and written back.
pub fn embed_blocks<B: EmbeddingBackend + ?Sized>(
    doc: &BlockedDocument,
    backend: &B,
    mut cache: Option<&mut dyn EmbeddingCache>,
) -> Result<FeatureMatrix, EmbedError> {
    let n_d = backend.dim();
    let backend_id = backend.backend_id();
    let n_b = doc.capacity();
    let mut rows: Vec<Option<Vec<f32>>> = alloc::vec![None; n_b];

    // Resolve cache hits and batch the distinct misses.
    let mut missing: Vec<&str> = Vec::new();
    for (i, block) in doc.blocks().iter().enumerate() {
        if let Some(c) = cache.as_deref_mut() {
            if let Some(v) = c.get(&backend_id, block) {
                if v.len() != n_d {
                    return Err(EmbedError::DimensionMismatch {
                        expected: n_d,
                        got: v.len(),
                    });
                }
                rows[i] = Some(v);
                continue;
            }
        }
        if !missing.iter().any(|m| *m == block.as_str()) {
            missing.push(block.as_str());
        }
    }

    if !missing.is_empty() {
        let vectors = backend.embed_batch(&missing)?;
        if vectors.len() != missing.len() {
            return Err(EmbedError::Backend {
                failed_blocks: Vec::new(),
                message: alloc::format!(
                    "backend returned {} vectors for {} texts",
                    vectors.len(),
                    missing.len()
                ),
            });
        }
        for (text, vector) in missing.iter().zip(&vectors) {
            if vector.len() != n_d {
                return Err(EmbedError::DimensionMismatch {
                    expected: n_d,
                    got: vector.len(),
                });
            }
            if let Some(c) = cache.as_deref_mut() {
                c.put(&backend_id, text, vector);
            }
        }
        for (i, block) in doc.blocks().iter().enumerate() {
            if rows[i].is_none() {
                let pos = missing
                    .iter()
                    .position(|m| *m == block.as_str())
                    .expect("every miss was batched");
                rows[i] = Some(vectors[pos].clone());
            }
        }
    }

    let mut data = Vec::with_capacity(n_b * n_d);
    for row in rows {
        data.extend_from_slice(&row.expect("all rows resolved"));
    }
    Ok(FeatureMatrix::from_vec(n_b, n_d, data))
}

/// Sentinel hashed in place of empty block text.
const EMPTY_SENTINEL: &str = "<empty>";

/// Signed feature hashing of character trigrams, L2-normalized.
///
/// Text is lowercased and runs of whitespace collapse to single spaces before
/// hashing, so formatting noise does not move features. Deterministic across
/// platforms: hashing is FNV-1a with the seed mixed into the offset basis.
#[derive(Debug, Clone)]
pub struct HashingBackend {
    dim: usize,
    seed: u64,
}

impl HashingBackend {
    /// `dim` must be at least 2.
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 2, "hashing backend needs dim >= 2, got {dim}");
        HashingBackend { dim, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Parse an id of the form `hash:v1:d<dim>:s<seed>` back into a backend.
    pub fn from_backend_id(id: &str) -> Option<Self> {
        let mut parts = id.split(':');
        if parts.next()? != "hash" || parts.next()? != "v1" {
            return None;
        }
        let dim: usize = parts.next()?.strip_prefix('d')?.parse().ok()?;
        let seed: u64 = parts.next()?.strip_prefix('s')?.parse().ok()?;
        if parts.next().is_some() || dim < 2 {
            return None;
        }
        Some(HashingBackend { dim, seed })
    }
}

impl EmbeddingBackend for HashingBackend {
    fn backend_id(&self) -> String {
        alloc::format!("hash:v1:d{}:s{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        Ok(hash_embed(text, self.dim, self.seed))
    }
}

/// The hashing embedder as a plain function: signed trigram counts folded
/// into `n_d` buckets, then L2-normalized to a unit vector.
pub fn hash_embed(text: &str, n_d: usize, seed: u64) -> Vec<f32> {
    assert!(n_d >= 2, "hash_embed needs n_d >= 2");
    let normalized = normalize_text(text);
    let source: &str = if normalized.is_empty() {
        EMPTY_SENTINEL
    } else {
        &normalized
    };
    let chars: Vec<char> = source.chars().collect();

    let mut acc = alloc::vec![0.0f64; n_d];
    let mut add_gram = |gram: &[char]| {
        let h = fnv1a_chars(gram, seed);
        let bucket = (h % n_d as u64) as usize;
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        acc[bucket] += sign;
    };
    if chars.len() < 3 {
        add_gram(&chars);
    } else {
        for window in chars.windows(3) {
            add_gram(window);
        }
    }

    let norm = libm::sqrt(acc.iter().map(|v| v * v).sum::<f64>());
    if norm == 0.0 {
        // Signs cancelled every bucket; fall back to a deterministic one-hot.
        let h = fnv1a_chars(&chars, seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut out = alloc::vec![0.0f32; n_d];
        out[(h % n_d as u64) as usize] = 1.0;
        return out;
    }
    acc.iter().map(|v| (v / norm) as f32).collect()
}

/// Lowercase and collapse whitespace runs to single spaces, trimming ends.
fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            for lc in ch.to_lowercase() {
                out.push(lc);
            }
        }
    }
    out
}

/// FNV-1a over the UTF-8 bytes of a char sequence, seed-mixed offset basis.
fn fnv1a_chars(chars: &[char], seed: u64) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut buf = [0u8; 4];
    for &ch in chars {
        for &b in ch.encode_utf8(&mut buf).as_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(PRIME);
        }
    }
    hash
}
