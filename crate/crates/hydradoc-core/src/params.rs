//! Parameter bookkeeping shared by both head architectures.

use alloc::string::String;
use alloc::vec::Vec;

use crate::tape::TapeError;
use crate::tensor::Tensor;

/// Anything holding an ordered, stable set of parameter tensors. The order of
/// `tensors()` is the canonical one: registration on a tape, gradient
/// collection, optimizer state, and serialization all follow it.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadError {
    /// Document mask has no unmasked blocks: nothing to attend to.
    AllMasked,
    /// Mask said blocks were valid beyond the first padded slot.
    NonPrefixMask,
    DimensionMismatch { expected: usize, got: usize },
    Tape(TapeError),
}

impl From<TapeError> for HeadError {
    fn from(e: TapeError) -> Self {
        HeadError::Tape(e)
    }
}

impl core::fmt::Display for HeadError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            HeadError::AllMasked => write!(f, "input document is fully masked"),
            HeadError::NonPrefixMask => write!(f, "validity mask is not a prefix mask"),
            HeadError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            HeadError::Tape(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for HeadError {}

/// Seed-derivation helpers. Dropout sites, per-head streams, and per-epoch
/// shuffles all mix structured counters into one u64 so that reordering the
/// work never reorders the randomness.
pub mod seeding {
    /// SplitMix64 finalizer over `state ^ rot(value)`.
    pub fn mix(state: u64, value: u64) -> u64 {
        let mut z = state
            .rotate_left(23)
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(value.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// FNV-1a over UTF-8 bytes, for label-keyed streams.
    pub fn hash_str(s: &str) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for b in s.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash
    }
}

/// Count of leading `true`s and rejection of non-prefix masks.
pub fn prefix_len(mask: &[bool]) -> Result<usize, HeadError> {
    let n_t = mask.iter().take_while(|&&m| m).count();
    if mask[n_t..].iter().any(|&m| m) {
        return Err(HeadError::NonPrefixMask);
    }
    Ok(n_t)
}

/// Validate a prefix mask against a feature matrix and return the unmasked
/// rows as an `n_t x n_d` f64 tensor. Errors when everything is masked.
pub fn masked_prefix(
    x: &crate::embed::FeatureMatrix,
    mask: &[bool],
) -> Result<Tensor, HeadError> {
    if mask.len() != x.rows() {
        return Err(HeadError::DimensionMismatch {
            expected: x.rows(),
            got: mask.len(),
        });
    }
    let n_t = prefix_len(mask)?;
    if n_t == 0 {
        return Err(HeadError::AllMasked);
    }
    let mut data = Vec::with_capacity(n_t * x.cols());
    for r in 0..n_t {
        data.extend(x.row(r).iter().map(|&v| v as f64));
    }
    Ok(Tensor::from_vec(n_t, x.cols(), data))
}

/// Architecture tag carried in model files and surgery commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadArchitecture {
    Bilstm,
    Transformer,
}

impl core::fmt::Display for HeadArchitecture {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            HeadArchitecture::Bilstm => write!(f, "bilstm"),
            HeadArchitecture::Transformer => write!(f, "transformer"),
        }
    }
}

impl core::str::FromStr for HeadArchitecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bilstm" => Ok(HeadArchitecture::Bilstm),
            "transformer" => Ok(HeadArchitecture::Transformer),
            other => Err(alloc::format!("unknown head architecture: {other}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_len_accepts_prefixes_and_rejects_gaps() {
        assert_eq!(prefix_len(&[true, true, false, false]).unwrap(), 2);
        assert_eq!(prefix_len(&[false, false]).unwrap(), 0);
        assert_eq!(prefix_len(&[true, true]).unwrap(), 2);
        assert!(matches!(
            prefix_len(&[true, false, true]),
            Err(HeadError::NonPrefixMask)
        ));
    }

    #[test]
    fn seed_mixing_is_stable_and_spreads() {
        let a = seeding::mix(1, 2);
        assert_eq!(a, seeding::mix(1, 2));
        assert_ne!(a, seeding::mix(2, 1));
        assert_ne!(a, seeding::mix(1, 3));
        assert_ne!(seeding::hash_str("politics"), seeding::hash_str("sports"));
    }
}
