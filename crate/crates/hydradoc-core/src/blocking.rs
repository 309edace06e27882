//! Fixed-length character blocking of raw document text.
//!
//! A document becomes a sequence of `capacity` blocks: the text (truncated to
//! `max_doc_chars`) split every `block_size_chars` unicode scalar values, then
//! padded with empty strings. A binary validity mask marks the real blocks so
//! padding can be zeroed after embedding.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::embed::FeatureMatrix;

#[derive(Debug, Clone, PartialEq)]
pub enum BlockingError {
    InvalidConfig(String),
    MaskShapeMismatch {
        matrix: (usize, usize),
        mask: (usize, usize),
    },
}

impl core::fmt::Display for BlockingError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            BlockingError::InvalidConfig(msg) => write!(f, "invalid blocking config: {msg}"),
            BlockingError::MaskShapeMismatch { matrix, mask } => write!(
                f,
                "mask shape {}x{} does not match matrix {}x{}",
                mask.0, mask.1, matrix.0, matrix.1
            ),
        }
    }
}

impl core::error::Error for BlockingError {}

/// Block size, maximum document length, and the derived block capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockingConfig {
    pub block_size_chars: usize,
    pub max_doc_chars: usize,
}

impl BlockingConfig {
    pub fn new(block_size_chars: usize, max_doc_chars: usize) -> Result<Self, BlockingError> {
        if block_size_chars == 0 {
            return Err(BlockingError::InvalidConfig(String::from(
                "block size must be at least 1 character",
            )));
        }
        if max_doc_chars < block_size_chars {
            return Err(BlockingError::InvalidConfig(alloc::format!(
                "max document length {max_doc_chars} is smaller than block size {block_size_chars}"
            )));
        }
        Ok(BlockingConfig {
            block_size_chars,
            max_doc_chars,
        })
    }

    /// Number of block slots: ceil(max_doc_chars / block_size_chars).
    pub fn capacity(&self) -> usize {
        self.max_doc_chars.div_ceil(self.block_size_chars)
    }
}

impl Default for BlockingConfig {
    /// 100-character blocks, 5000-character documents (50 slots).
    fn default() -> Self {
        BlockingConfig {
            block_size_chars: 100,
            max_doc_chars: 5000,
        }
    }
}

/// A document as `capacity` text blocks plus the validity mask.
///
/// Non-empty blocks always form a prefix; every non-empty block except
/// possibly the last holds exactly `block_size_chars` characters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedDocument {
    blocks: Vec<String>,
    mask: Vec<bool>,
}

impl BlockedDocument {
    pub fn blocks(&self) -> &[String] {
        &self.blocks
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn capacity(&self) -> usize {
        self.blocks.len()
    }

    /// Count of non-empty blocks (the prefix length).
    pub fn real_blocks(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The document truncated to its first `keep` non-empty blocks, the rest
    /// padded back to empty strings. Capacity is unchanged.
    pub fn truncate_blocks(&self, keep: usize) -> BlockedDocument {
        let keep = keep.min(self.real_blocks());
        BlockedDocument {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| if i < keep { b.clone() } else { String::new() })
                .collect(),
            mask: (0..self.capacity()).map(|i| i < keep).collect(),
        }
    }
}

/// Split text into blocks at exact character offsets, truncating at the
/// configured maximum length and padding with empty strings to capacity.
/// Total: empty text yields an all-padding document.
pub fn segment(text: &str, cfg: &BlockingConfig) -> BlockedDocument {
    let capacity = cfg.capacity();
    let mut blocks: Vec<String> = Vec::with_capacity(capacity);
    let mut current = String::with_capacity(cfg.block_size_chars.min(256) * 4);
    let mut count = 0usize;
    for ch in text.chars().take(cfg.max_doc_chars) {
        current.push(ch);
        count += 1;
        if count == cfg.block_size_chars {
            blocks.push(core::mem::take(&mut current));
            count = 0;
        }
    }
    if count > 0 {
        blocks.push(current);
    }
    let mask: Vec<bool> = (0..capacity).map(|i| i < blocks.len()).collect();
    blocks.resize(capacity, String::new());
    BlockedDocument { blocks, mask }
}

/// Broadcast the validity mask to a binary `capacity x n_d` matrix: row `i`
/// is all ones when block `i` is real, all zeros otherwise.
pub fn mask_matrix(doc: &BlockedDocument, n_d: usize) -> FeatureMatrix {
    let n_b = doc.capacity();
    let mut data = vec![0.0f32; n_b * n_d];
    for (i, &m) in doc.mask().iter().enumerate() {
        if m {
            data[i * n_d..(i + 1) * n_d].fill(1.0);
        }
    }
    FeatureMatrix::from_vec(n_b, n_d, data)
}

/// Element-wise product zeroing the padded rows of an embedded document.
pub fn apply_mask(x: &FeatureMatrix, mask: &FeatureMatrix) -> Result<FeatureMatrix, BlockingError> {
    if x.shape() != mask.shape() {
        return Err(BlockingError::MaskShapeMismatch {
            matrix: x.shape(),
            mask: mask.shape(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(mask.data())
        .map(|(a, b)| a * b)
        .collect();
    Ok(FeatureMatrix::from_vec(x.rows(), x.cols(), data))
}
