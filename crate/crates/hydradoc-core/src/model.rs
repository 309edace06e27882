//! Model assembly: backbone id + optional neck + ordered, detachable,
//! label-keyed heads.
//!
//! There is no gating network; every head always executes, which is what
//! makes heads independent, individually trainable, and freely attachable or
//! detachable without touching the others. Iteration order of heads is
//! insertion order, so the prediction vector layout is stable.

use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{AttentionWindow, TransformerHeadParams};
use crate::bilstm::BiLstmHeadParams;
use crate::blocking::{apply_mask, mask_matrix, segment, BlockingConfig};
use crate::embed::{embed_blocks, EmbedError, EmbeddingBackend, EmbeddingCache, FeatureMatrix};
use crate::params::{masked_prefix, HeadArchitecture, HeadError, ParamSet};
use crate::tape::{Id, Tape, TapeError};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    NoHeads,
    UnknownLabel(String),
    DuplicateLabel(String),
    UnknownComponent(String),
    BackendMismatch { expected: String, got: String },
    WidthMismatch { expected: usize, got: usize },
    Embed(EmbedError),
    Head(HeadError),
    Tape(TapeError),
}

impl From<EmbedError> for ModelError {
    fn from(e: EmbedError) -> Self {
        ModelError::Embed(e)
    }
}

impl From<HeadError> for ModelError {
    fn from(e: HeadError) -> Self {
        ModelError::Head(e)
    }
}

impl From<TapeError> for ModelError {
    fn from(e: TapeError) -> Self {
        ModelError::Tape(e)
    }
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::NoHeads => write!(f, "model has no heads"),
            ModelError::UnknownLabel(l) => write!(f, "no head owns label `{l}`"),
            ModelError::DuplicateLabel(l) => write!(f, "label `{l}` already has a head"),
            ModelError::UnknownComponent(c) => write!(f, "unknown component `{c}`"),
            ModelError::BackendMismatch { expected, got } => {
                write!(f, "model was built for backend `{expected}`, got `{got}`")
            }
            ModelError::WidthMismatch { expected, got } => {
                write!(f, "head input width {got} does not match neck output width {expected}")
            }
            ModelError::Embed(e) => write!(f, "{e}"),
            ModelError::Head(e) => write!(f, "{e}"),
            ModelError::Tape(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ModelError {}

/// Optional shared layer between backbone and heads.
#[derive(Debug, Clone, PartialEq)]
pub enum NeckMode {
    Identity,
    /// Dense n_d -> n_d with ReLU.
    Dense { w: Tensor, b: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neck {
    pub mode: NeckMode,
    pub trainable: bool,
}

impl Neck {
    pub fn identity() -> Self {
        Neck {
            mode: NeckMode::Identity,
            trainable: false,
        }
    }

    pub fn dense(n_d: usize, seed: u64, trainable: bool) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Neck {
            mode: NeckMode::Dense {
                w: Tensor::glorot_uniform(n_d, n_d, &mut rng),
                b: Tensor::zeros(1, n_d),
            },
            trainable,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.mode, NeckMode::Identity)
    }

    /// Output width for an input of width `n_d` (identical for both modes).
    pub fn output_dim(&self, n_d: usize) -> usize {
        match &self.mode {
            NeckMode::Identity => n_d,
            NeckMode::Dense { w, .. } => w.cols(),
        }
    }

    /// Eval-mode application to prefix rows.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match &self.mode {
            NeckMode::Identity => x.clone(),
            NeckMode::Dense { w, b } => {
                let mut out = matmul(x, w);
                for r in 0..out.rows() {
                    for c in 0..out.cols() {
                        let v = out.get(r, c) + b.get(0, c);
                        out.set(r, c, if v > 0.0 { v } else { 0.0 });
                    }
                }
                out
            }
        }
    }

    /// Record the neck on a tape. `ids` are the registered dense tensors (in
    /// `tensors()` order) when the mode is dense; identity necks ignore them.
    pub(crate) fn graph(&self, tape: &mut Tape, x: Id, ids: &[Id]) -> Result<Id, TapeError> {
        match &self.mode {
            NeckMode::Identity => Ok(x),
            NeckMode::Dense { .. } => {
                let lin = tape.matmul(x, ids[0])?;
                let biased = tape.add_row(lin, ids[1])?;
                Ok(tape.relu(biased))
            }
        }
    }
}

impl ParamSet for Neck {
    fn tensors(&self) -> Vec<&Tensor> {
        match &self.mode {
            NeckMode::Identity => Vec::new(),
            NeckMode::Dense { w, b } => alloc::vec![w, b],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.mode {
            NeckMode::Identity => Vec::new(),
            NeckMode::Dense { w, b } => alloc::vec![w, b],
        }
    }
}

/// Head parameters tagged by architecture. Transformer heads carry their
/// attention window; it is a structural hyperparameter of the head.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadKind {
    BiLstm(BiLstmHeadParams),
    Transformer {
        params: TransformerHeadParams,
        window: AttentionWindow,
    },
}

impl HeadKind {
    pub fn architecture(&self) -> HeadArchitecture {
        match self {
            HeadKind::BiLstm(_) => HeadArchitecture::Bilstm,
            HeadKind::Transformer { .. } => HeadArchitecture::Transformer,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            HeadKind::BiLstm(p) => p.input_dim(),
            HeadKind::Transformer { params, .. } => params.input_dim(),
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            HeadKind::BiLstm(p) => p.outputs(),
            HeadKind::Transformer { params, .. } => params.outputs(),
        }
    }
}

/// One detachable classifier: the labels it scores, its parameters, and
/// whether training may touch it.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub labels: Vec<String>,
    pub kind: HeadKind,
    pub trainable: bool,
}

impl Head {
    /// Eval-mode probabilities for this head over prefix rows (post-neck).
    pub fn forward(&self, features: &Tensor) -> Result<Tensor, HeadError> {
        let mut tape = Tape::new();
        let x = tape.leaf(features.clone(), false);
        let out = self.graph(&mut tape, x, false, 0)?;
        Ok(tape.value(out).clone())
    }

    /// Record this head's forward pass on an existing tape.
    pub(crate) fn graph(
        &self,
        tape: &mut Tape,
        x: Id,
        training: bool,
        dropout_seed: u64,
    ) -> Result<Id, TapeError> {
        match &self.kind {
            HeadKind::BiLstm(p) => {
                let (ids, _) = p.register(tape, false);
                crate::bilstm::bilstm_head_graph(tape, x, p, &ids)
            }
            HeadKind::Transformer { params, window } => {
                let (ids, _) = params.register(tape, false);
                crate::attention::transformer_head_graph(
                    tape,
                    x,
                    params,
                    &ids,
                    *window,
                    training,
                    dropout_seed,
                )
            }
        }
    }

    pub fn params(&self) -> &dyn ParamSet {
        match &self.kind {
            HeadKind::BiLstm(p) => p,
            HeadKind::Transformer { params, .. } => params,
        }
    }

    pub fn params_mut(&mut self) -> &mut dyn ParamSet {
        match &mut self.kind {
            HeadKind::BiLstm(p) => p,
            HeadKind::Transformer { params, .. } => params,
        }
    }
}

/// A component addressable by freeze/unfreeze surgery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Component {
    Neck,
    Head(String),
}

/// Backbone id + blocking config + neck + ordered label-keyed heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HydranetModel {
    backbone_id: String,
    blocking: BlockingConfig,
    embed_dim: usize,
    neck: Neck,
    heads: Vec<Head>,
}

impl HydranetModel {
    pub fn new(
        backbone_id: impl Into<String>,
        blocking: BlockingConfig,
        embed_dim: usize,
        neck: Neck,
    ) -> Self {
        HydranetModel {
            backbone_id: backbone_id.into(),
            blocking,
            embed_dim,
            neck,
            heads: Vec::new(),
        }
    }

    pub fn backbone_id(&self) -> &str {
        &self.backbone_id
    }

    pub fn blocking(&self) -> &BlockingConfig {
        &self.blocking
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn neck(&self) -> &Neck {
        &self.neck
    }

    pub fn neck_mut(&mut self) -> &mut Neck {
        &mut self.neck
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Head] {
        &mut self.heads
    }

    /// All labels in stable prediction order.
    pub fn labels(&self) -> Vec<&str> {
        self.heads
            .iter()
            .flat_map(|h| h.labels.iter().map(String::as_str))
            .collect()
    }

    /// Total output width K.
    pub fn label_count(&self) -> usize {
        self.heads.iter().map(|h| h.labels.len()).sum()
    }

    pub fn head_index_for(&self, label: &str) -> Option<usize> {
        self.heads
            .iter()
            .position(|h| h.labels.iter().any(|l| l == label))
    }

    fn check_new_labels(&self, labels: &[String]) -> Result<(), ModelError> {
        for l in labels {
            if self.head_index_for(l).is_some() {
                return Err(ModelError::DuplicateLabel(l.clone()));
            }
        }
        Ok(())
    }

    /// Attach a freshly initialized single-label head. Existing heads are
    /// untouched.
    pub fn attach_head(
        &mut self,
        label: impl Into<String>,
        architecture: HeadArchitecture,
        window: AttentionWindow,
        init_seed: u64,
    ) -> Result<(), ModelError> {
        let label = label.into();
        self.attach_group_head(alloc::vec![label], architecture, window, init_seed)
    }

    /// Attach a fresh head scoring a whole label group with one softmax.
    pub fn attach_group_head(
        &mut self,
        labels: Vec<String>,
        architecture: HeadArchitecture,
        window: AttentionWindow,
        init_seed: u64,
    ) -> Result<(), ModelError> {
        self.check_new_labels(&labels)?;
        let n_in = self.neck.output_dim(self.embed_dim);
        let outputs = labels.len();
        let kind = match architecture {
            HeadArchitecture::Bilstm => HeadKind::BiLstm(BiLstmHeadParams::new(
                n_in,
                crate::bilstm::DEFAULT_UNITS,
                outputs,
                init_seed,
            )),
            HeadArchitecture::Transformer => HeadKind::Transformer {
                params: TransformerHeadParams::new(
                    n_in,
                    crate::attention::DEFAULT_HEADS,
                    crate::attention::DEFAULT_KEY_DIM,
                    outputs,
                    init_seed,
                ),
                window,
            },
        };
        self.heads.push(Head {
            labels,
            kind,
            trainable: true,
        });
        Ok(())
    }

    /// Re-attach a previously detached (or deserialized) head verbatim.
    pub fn attach_existing_head(&mut self, head: Head) -> Result<(), ModelError> {
        self.check_new_labels(&head.labels)?;
        let expected = self.neck.output_dim(self.embed_dim);
        if head.kind.input_dim() != expected {
            return Err(ModelError::WidthMismatch {
                expected,
                got: head.kind.input_dim(),
            });
        }
        self.heads.push(head);
        Ok(())
    }

    /// Remove and return the head owning `label`. Remaining heads keep their
    /// exact parameters and relative order.
    pub fn detach_head(&mut self, label: &str) -> Result<Head, ModelError> {
        match self.head_index_for(label) {
            Some(idx) => Ok(self.heads.remove(idx)),
            None => Err(ModelError::UnknownLabel(String::from(label))),
        }
    }

    /// Mark a component trainable or frozen. Frozen components receive zero
    /// gradient and are bit-unchanged by training.
    pub fn set_trainable(&mut self, component: &Component, flag: bool) -> Result<(), ModelError> {
        match component {
            Component::Neck => {
                self.neck.trainable = flag;
                Ok(())
            }
            Component::Head(label) => match self.head_index_for(label) {
                Some(idx) => {
                    self.heads[idx].trainable = flag;
                    Ok(())
                }
                None => Err(ModelError::UnknownComponent(alloc::format!("head:{label}"))),
            },
        }
    }

    fn check_backend<B: EmbeddingBackend + ?Sized>(&self, backend: &B) -> Result<(), ModelError> {
        if backend.backend_id() != self.backbone_id {
            return Err(ModelError::BackendMismatch {
                expected: self.backbone_id.clone(),
                got: backend.backend_id(),
            });
        }
        if backend.dim() != self.embed_dim {
            return Err(ModelError::WidthMismatch {
                expected: self.embed_dim,
                got: backend.dim(),
            });
        }
        Ok(())
    }

    /// Segment, embed, and mask a document into the feature matrix plus its
    /// validity mask.
    pub fn featurize<B: EmbeddingBackend + ?Sized>(
        &self,
        text: &str,
        backend: &B,
        cache: Option<&mut dyn EmbeddingCache>,
    ) -> Result<(FeatureMatrix, Vec<bool>), ModelError> {
        self.check_backend(backend)?;
        let doc = segment(text, &self.blocking);
        let x = embed_blocks(&doc, backend, cache)?;
        let xm = mask_matrix(&doc, self.embed_dim);
        let masked = apply_mask(&x, &xm).expect("matrix and mask share a shape");
        Ok((masked, doc.mask().to_vec()))
    }

    /// Probabilities over all labels, insertion-ordered. The multi-label
    /// decision threshold downstream is 0.5.
    pub fn predict<B: EmbeddingBackend + ?Sized>(
        &self,
        text: &str,
        backend: &B,
        cache: Option<&mut dyn EmbeddingCache>,
    ) -> Result<Vec<f64>, ModelError> {
        let (features, mask) = self.featurize(text, backend, cache)?;
        self.predict_features(&features, &mask)
    }

    /// Prediction from an already-embedded masked feature matrix.
    pub fn predict_features(
        &self,
        features: &FeatureMatrix,
        mask: &[bool],
    ) -> Result<Vec<f64>, ModelError> {
        if self.heads.is_empty() {
            return Err(ModelError::NoHeads);
        }
        let prefix = masked_prefix(features, mask)?;
        let necked = self.neck.apply(&prefix);
        let mut out = Vec::with_capacity(self.label_count());
        for head in &self.heads {
            let probs = head.forward(&necked)?;
            out.extend_from_slice(probs.data());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashingBackend;

    fn tiny_model(seed: u64) -> (HydranetModel, HashingBackend) {
        let backend = HashingBackend::new(16, 0);
        let blocking = BlockingConfig::new(8, 64).unwrap();
        let mut model = HydranetModel::new(backend.backend_id(), blocking, 16, Neck::identity());
        model
            .attach_head("alpha", HeadArchitecture::Bilstm, AttentionWindow::Global, seed)
            .unwrap();
        model
            .attach_head(
                "beta",
                HeadArchitecture::Transformer,
                AttentionWindow::Banded(2),
                seed + 1,
            )
            .unwrap();
        (model, backend)
    }

    #[test]
    fn predict_returns_ordered_probabilities() {
        let (mut model, backend) = tiny_model(1);
        model
            .attach_head("gamma", HeadArchitecture::Bilstm, AttentionWindow::Global, 9)
            .unwrap();
        assert_eq!(model.labels(), ["alpha", "beta", "gamma"]);
        let probs = model
            .predict("some document text to classify", &backend, None)
            .unwrap();
        assert_eq!(probs.len(), 3);
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn predict_is_deterministic() {
        let (model, backend) = tiny_model(2);
        let a = model.predict("same text, two calls", &backend, None).unwrap();
        let b = model.predict("same text, two calls", &backend, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn detach_leaves_other_heads_bit_identical() {
        let (mut model, backend) = tiny_model(3);
        let before = model.predict("shared probe document", &backend, None).unwrap();
        let detached = model.detach_head("alpha").unwrap();
        assert_eq!(detached.labels, ["alpha"]);
        let after = model.predict("shared probe document", &backend, None).unwrap();
        assert_eq!(after.len(), 1);
        assert_eq!(after[0], before[1], "surviving head moved");
    }

    #[test]
    fn detach_then_reattach_restores_exact_outputs() {
        let (mut model, backend) = tiny_model(4);
        let before = model.predict("round trip probe", &backend, None).unwrap();
        let head = model.detach_head("alpha").unwrap();
        model.attach_existing_head(head).unwrap();
        // Head order changed (alpha now last) but per-label values are exact.
        let after = model.predict("round trip probe", &backend, None).unwrap();
        assert_eq!(model.labels(), ["beta", "alpha"]);
        assert_eq!(after[1], before[0]);
        assert_eq!(after[0], before[1]);
    }

    #[test]
    fn detaching_last_head_leaves_an_unusable_model() {
        let (mut model, backend) = tiny_model(5);
        model.detach_head("alpha").unwrap();
        model.detach_head("beta").unwrap();
        assert_eq!(model.label_count(), 0);
        assert!(matches!(
            model.predict("anything", &backend, None),
            Err(ModelError::NoHeads)
        ));
    }

    #[test]
    fn unknown_and_duplicate_labels_error() {
        let (mut model, _) = tiny_model(6);
        assert!(matches!(
            model.detach_head("missing"),
            Err(ModelError::UnknownLabel(_))
        ));
        assert!(matches!(
            model.attach_head("alpha", HeadArchitecture::Bilstm, AttentionWindow::Global, 0),
            Err(ModelError::DuplicateLabel(_))
        ));
    }

    #[test]
    fn attach_does_not_move_existing_heads() {
        let (mut model, backend) = tiny_model(7);
        let before = model.predict("existing heads stay put", &backend, None).unwrap();
        model
            .attach_head("gamma", HeadArchitecture::Transformer, AttentionWindow::Global, 123)
            .unwrap();
        let after = model.predict("existing heads stay put", &backend, None).unwrap();
        assert_eq!(&after[..2], &before[..]);
    }

    #[test]
    fn set_trainable_targets_components() {
        let (mut model, _) = tiny_model(8);
        model.set_trainable(&Component::Head(String::from("alpha")), false).unwrap();
        assert!(!model.heads()[0].trainable);
        assert!(model.heads()[1].trainable);
        model.set_trainable(&Component::Neck, true).unwrap();
        assert!(model.neck().trainable);
        assert!(matches!(
            model.set_trainable(&Component::Head(String::from("nope")), false),
            Err(ModelError::UnknownComponent(_))
        ));
    }

    #[test]
    fn backend_mismatch_is_caught() {
        let (model, _) = tiny_model(9);
        let wrong = HashingBackend::new(16, 999);
        assert!(matches!(
            model.predict("text", &wrong, None),
            Err(ModelError::BackendMismatch { .. })
        ));
    }

    #[test]
    fn empty_document_errors_as_fully_masked() {
        let (model, backend) = tiny_model(10);
        assert!(matches!(
            model.predict("", &backend, None),
            Err(ModelError::Head(HeadError::AllMasked))
        ));
    }

    #[test]
    fn dense_neck_keeps_head_width_checks() {
        let backend = HashingBackend::new(12, 0);
        let blocking = BlockingConfig::new(8, 32).unwrap();
        let mut model =
            HydranetModel::new(backend.backend_id(), blocking, 12, Neck::dense(12, 5, true));
        model
            .attach_head("a", HeadArchitecture::Bilstm, AttentionWindow::Global, 3)
            .unwrap();
        let probs = model.predict("dense neck probe text", &backend, None).unwrap();
        assert_eq!(probs.len(), 1);

        // A head built for a different width cannot be attached.
        let foreign = Head {
            labels: alloc::vec![String::from("b")],
            kind: HeadKind::BiLstm(BiLstmHeadParams::new(7, 2, 1, 0)),
            trainable: true,
        };
        assert!(matches!(
            model.attach_existing_head(foreign),
            Err(ModelError::WidthMismatch { expected: 12, got: 7 })
        ));
    }

    #[test]
    fn group_head_flattens_into_prediction_vector() {
        let backend = HashingBackend::new(16, 0);
        let blocking = BlockingConfig::new(8, 32).unwrap();
        let mut model = HydranetModel::new(backend.backend_id(), blocking, 16, Neck::identity());
        model
            .attach_group_head(
                alloc::vec![String::from("x"), String::from("y"), String::from("z")],
                HeadArchitecture::Bilstm,
                AttentionWindow::Global,
                11,
            )
            .unwrap();
        model
            .attach_head("w", HeadArchitecture::Bilstm, AttentionWindow::Global, 12)
            .unwrap();
        assert_eq!(model.labels(), ["x", "y", "z", "w"]);
        let probs = model.predict("grouped labels probe", &backend, None).unwrap();
        assert_eq!(probs.len(), 4);
        let group_sum: f64 = probs[..3].iter().sum();
        assert!((group_sum - 1.0).abs() < 1e-9, "group softmax sums to {group_sum}");
    }
}
