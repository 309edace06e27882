//! Self-describing binary model format.
//!
//! Layout: `HYDR` magic, u32 LE format version, u32 LE manifest length, a
//! UTF-8 JSON manifest (backbone id, blocking config, neck mode, head list
//! with architecture tags and tensor shapes), then every tensor as raw
//! little-endian `f32` in manifest order. Detached single heads use the same
//! scheme under a `HYDH` magic so they can be exported and re-attached.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionWindow, TransformerHeadParams};
use crate::bilstm::BiLstmHeadParams;
use crate::blocking::BlockingConfig;
use crate::model::{Head, HeadKind, HydranetModel, Neck, NeckMode};
use crate::params::{HeadArchitecture, ParamSet};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"HYDR";
pub const HEAD_MAGIC: &[u8; 4] = b"HYDH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CodecError {
    BadMagic,
    VersionMismatch { found: u32 },
    Manifest(String),
    ShapeMismatch(String),
    CorruptedTensor(String),
}

impl core::fmt::Display for CodecError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CodecError::BadMagic => write!(f, "not a model file (bad magic)"),
            CodecError::VersionMismatch { found } => {
                write!(f, "unsupported format version {found}, expected {FORMAT_VERSION}")
            }
            CodecError::Manifest(msg) => write!(f, "invalid manifest: {msg}"),
            CodecError::ShapeMismatch(msg) => write!(f, "tensor shape mismatch: {msg}"),
            CodecError::CorruptedTensor(msg) => write!(f, "corrupted tensor data: {msg}"),
        }
    }
}

impl core::error::Error for CodecError {}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    backbone_id: String,
    blocking: BlockingConfig,
    embed_dim: usize,
    neck: NeckManifest,
    heads: Vec<HeadManifest>,
}

#[derive(Serialize, Deserialize)]
struct NeckManifest {
    mode: String,
    trainable: bool,
    tensors: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct HeadManifest {
    labels: Vec<String>,
    architecture: HeadArchitecture,
    trainable: bool,
    outputs: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    window: Option<AttentionWindow>,
    dims: HeadDims,
    tensors: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum HeadDims {
    Bilstm { input_dim: usize, units: usize },
    Transformer { input_dim: usize, heads: usize, key_dim: usize },
}

fn shapes_of(params: &dyn ParamSet) -> Vec<(usize, usize)> {
    params.tensors().iter().map(|t| t.shape()).collect()
}

fn head_manifest(head: &Head) -> HeadManifest {
    let (dims, window) = match &head.kind {
        HeadKind::BiLstm(p) => (
            HeadDims::Bilstm {
                input_dim: p.input_dim(),
                units: p.units(),
            },
            None,
        ),
        HeadKind::Transformer { params, window } => (
            HeadDims::Transformer {
                input_dim: params.input_dim(),
                heads: params.attention.heads(),
                key_dim: params.attention.key_dim(),
            },
            Some(*window),
        ),
    };
    HeadManifest {
        labels: head.labels.clone(),
        architecture: head.kind.architecture(),
        trainable: head.trainable,
        outputs: head.kind.outputs(),
        window,
        dims,
        tensors: shapes_of(head.params()),
    }
}

fn push_tensors(out: &mut Vec<u8>, params: &dyn ParamSet) {
    for tensor in params.tensors() {
        for v in tensor.to_f32() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize a model to bytes (f32 tensor precision).
pub fn encode_model(model: &HydranetModel) -> Vec<u8> {
    let manifest = ModelManifest {
        backbone_id: String::from(model.backbone_id()),
        blocking: *model.blocking(),
        embed_dim: model.embed_dim(),
        neck: NeckManifest {
            mode: String::from(if model.neck().is_identity() { "identity" } else { "dense" }),
            trainable: model.neck().trainable,
            tensors: shapes_of(model.neck()),
        },
        heads: model.heads().iter().map(head_manifest).collect(),
    };
    let manifest_json =
        serde_json::to_vec(&manifest).expect("manifest serialization cannot fail");

    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    push_tensors(&mut out, model.neck());
    for head in model.heads() {
        push_tensors(&mut out, head.params());
    }
    out
}

/// Serialize one head (for export during detach surgery).
pub fn encode_head(head: &Head) -> Vec<u8> {
    let manifest = head_manifest(head);
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serialization cannot fail");
    let mut out = Vec::new();
    out.extend_from_slice(HEAD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    push_tensors(&mut out, head.params());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.bytes.len() {
            return Err(CodecError::CorruptedTensor(alloc::format!(
                "file truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn read_header<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(Reader<'a>, Vec<u8>), CodecError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != magic {
        return Err(CodecError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CodecError::VersionMismatch { found: version });
    }
    let manifest_len = r.u32()? as usize;
    let manifest = r.take(manifest_len)?.to_vec();
    Ok((r, manifest))
}

/// Fill a parameter set's tensors from the byte stream, validating declared
/// shapes against the structurally expected ones.
fn fill_params(
    r: &mut Reader<'_>,
    params: &mut dyn ParamSet,
    declared: &[(usize, usize)],
    what: &str,
) -> Result<(), CodecError> {
    let expected = shapes_of(params);
    if declared != expected.as_slice() {
        return Err(CodecError::ShapeMismatch(alloc::format!(
            "{what}: manifest declares {declared:?}, architecture requires {expected:?}"
        )));
    }
    for tensor in params.tensors_mut() {
        let n = tensor.len();
        let bytes = r.take(n * 4)?;
        let mut values = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(CodecError::CorruptedTensor(alloc::format!(
                    "{what}: non-finite value {v}"
                )));
            }
            values.push(v);
        }
        let (rows, cols) = tensor.shape();
        *tensor = Tensor::from_f32(rows, cols, &values);
    }
    Ok(())
}

fn head_from_manifest(r: &mut Reader<'_>, hm: &HeadManifest) -> Result<Head, CodecError> {
    if hm.labels.is_empty() {
        return Err(CodecError::Manifest(String::from("head with no labels")));
    }
    if hm.labels.len() != hm.outputs {
        return Err(CodecError::Manifest(alloc::format!(
            "head `{}` declares {} outputs for {} labels",
            hm.labels[0],
            hm.outputs,
            hm.labels.len()
        )));
    }
    let mut kind = match (&hm.dims, hm.architecture) {
        (HeadDims::Bilstm { input_dim, units }, HeadArchitecture::Bilstm) => {
            let mut p = BiLstmHeadParams::new(*input_dim, *units, hm.outputs, 0);
            // Zero out before filling so no init noise can survive a bug.
            zero_bilstm(&mut p);
            HeadKind::BiLstm(p)
        }
        (HeadDims::Transformer { input_dim, heads, key_dim }, HeadArchitecture::Transformer) => {
            let mut p = TransformerHeadParams::new(*input_dim, *heads, *key_dim, hm.outputs, 0);
            for t in p.tensors_mut() {
                let (rows, cols) = t.shape();
                *t = Tensor::zeros(rows, cols);
            }
            HeadKind::Transformer {
                params: p,
                window: hm.window.unwrap_or(AttentionWindow::Global),
            }
        }
        _ => {
            return Err(CodecError::Manifest(alloc::format!(
                "architecture tag `{}` does not match its dims block",
                hm.architecture
            )))
        }
    };
    let what = alloc::format!("head `{}`", hm.labels.join(","));
    match &mut kind {
        HeadKind::BiLstm(p) => fill_params(r, p, &hm.tensors, &what)?,
        HeadKind::Transformer { params, .. } => fill_params(r, params, &hm.tensors, &what)?,
    }
    Ok(Head {
        labels: hm.labels.clone(),
        kind,
        trainable: hm.trainable,
    })
}

fn zero_bilstm(p: &mut BiLstmHeadParams) {
    for t in p.tensors_mut() {
        let (rows, cols) = t.shape();
        *t = Tensor::zeros(rows, cols);
    }
}

/// Deserialize a model, validating magic, version, shapes, and tensor data.
pub fn decode_model(bytes: &[u8]) -> Result<HydranetModel, CodecError> {
    let (mut r, manifest_bytes) = read_header(bytes, MODEL_MAGIC)?;
    let manifest: ModelManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| CodecError::Manifest(alloc::format!("{e}")))?;

    let mut neck = match manifest.neck.mode.as_str() {
        "identity" => Neck {
            mode: NeckMode::Identity,
            trainable: manifest.neck.trainable,
        },
        "dense" => {
            if manifest.neck.tensors.len() != 2 {
                return Err(CodecError::ShapeMismatch(alloc::format!(
                    "dense neck declares {} tensors, expected 2",
                    manifest.neck.tensors.len()
                )));
            }
            let (wr, wc) = manifest.neck.tensors[0];
            Neck {
                mode: NeckMode::Dense {
                    w: Tensor::zeros(wr, wc),
                    b: Tensor::zeros(1, wc),
                },
                trainable: manifest.neck.trainable,
            }
        }
        other => {
            return Err(CodecError::Manifest(alloc::format!(
                "unknown neck mode `{other}`"
            )))
        }
    };
    fill_params(&mut r, &mut neck, &manifest.neck.tensors, "neck")?;

    let blocking = BlockingConfig::new(
        manifest.blocking.block_size_chars,
        manifest.blocking.max_doc_chars,
    )
    .map_err(|e| CodecError::Manifest(alloc::format!("{e}")))?;
    let mut model = HydranetModel::new(
        manifest.backbone_id.clone(),
        blocking,
        manifest.embed_dim,
        neck,
    );
    for hm in &manifest.heads {
        let head = head_from_manifest(&mut r, hm)?;
        model
            .attach_existing_head(head)
            .map_err(|e| CodecError::Manifest(alloc::format!("{e}")))?;
    }
    if r.remaining() != 0 {
        return Err(CodecError::CorruptedTensor(alloc::format!(
            "{} trailing bytes after the last tensor",
            r.remaining()
        )));
    }
    Ok(model)
}

/// Deserialize a single exported head.
pub fn decode_head(bytes: &[u8]) -> Result<Head, CodecError> {
    let (mut r, manifest_bytes) = read_header(bytes, HEAD_MAGIC)?;
    let manifest: HeadManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| CodecError::Manifest(alloc::format!("{e}")))?;
    let head = head_from_manifest(&mut r, &manifest)?;
    if r.remaining() != 0 {
        return Err(CodecError::CorruptedTensor(alloc::format!(
            "{} trailing bytes after the last tensor",
            r.remaining()
        )));
    }
    Ok(head)
}
