//! Weighted-BCE training with per-head optimization.
//!
//! Every head trains against its own loss over its own target columns, with
//! per-head Adam state, so frozen components stay bit-identical and heads
//! never leak gradients into each other. With an identity or frozen neck each
//! head's training is a pure function of (shared inputs, its targets, the
//! seed), which is what makes parallel head training bit-equal to sequential.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::embed::{EmbeddingBackend, EmbeddingCache, FeatureMatrix};
use crate::model::{Head, HeadKind, HydranetModel, ModelError};
use crate::params::{masked_prefix, seeding, HeadError, ParamSet};
use crate::tape::{Id, Tape, TapeError};
use crate::tensor::Tensor;

/// Predictions are clamped into `[CLIP, 1 - CLIP]` before any logarithm.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    EmptyDataset,
    /// A label with no positive or no negative examples cannot be weighted.
    DegenerateClass {
        label: String,
        positives: usize,
        present: usize,
    },
    UnknownLabel(String),
    ShapeMismatch { expected: usize, got: usize },
    Model(ModelError),
    Head(HeadError),
    Tape(TapeError),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<HeadError> for TrainError {
    fn from(e: HeadError) -> Self {
        TrainError::Head(e)
    }
}

impl From<TapeError> for TrainError {
    fn from(e: TapeError) -> Self {
        TrainError::Tape(e)
    }
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "dataset is empty"),
            TrainError::DegenerateClass {
                label,
                positives,
                present,
            } => write!(
                f,
                "label `{label}` is degenerate: {positives} positives out of {present} present examples"
            ),
            TrainError::UnknownLabel(l) => write!(f, "label `{l}` is not part of the model"),
            TrainError::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Head(e) => write!(f, "{e}"),
            TrainError::Tape(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TrainError {}

/// Per-class loss weights: `negative` multiplies the (1-y) term, `positive`
/// the y term. Derived as N/((N-N_k)K) and N/(N_k K).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub negative: f64,
    pub positive: f64,
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights {
            negative: 1.0,
            positive: 1.0,
        }
    }
}

/// Class-frequency weights for label k: `total` samples, `positives` of them
/// positive, `classes` labels overall. Errors when the class is degenerate
/// (all positive or all negative), where a weight would divide by zero.
pub fn class_weights(
    total: usize,
    positives: usize,
    classes: usize,
) -> Result<ClassWeights, TrainError> {
    assert!(classes >= 1, "class count must be positive");
    if positives == 0 || positives >= total {
        return Err(TrainError::DegenerateClass {
            label: String::new(),
            positives,
            present: total,
        });
    }
    let n = total as f64;
    let k = classes as f64;
    Ok(ClassWeights {
        negative: n / ((n - positives as f64) * k),
        positive: n / (positives as f64 * k),
    })
}

/// Weighted binary cross-entropy averaged over the batch:
/// `-(1/N) sum w1 y log(p) + w0 (1-y) log(1-p)` with predictions clipped.
pub fn weighted_bce(y: &[f64], y_hat: &[f64], w: &ClassWeights) -> Result<f64, TrainError> {
    if y.len() != y_hat.len() {
        return Err(TrainError::ShapeMismatch {
            expected: y.len(),
            got: y_hat.len(),
        });
    }
    if y.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut sum = 0.0;
    for (&yi, &pi) in y.iter().zip(y_hat) {
        let p = pi.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        sum += w.positive * yi * libm::log(p) + w.negative * (1.0 - yi) * libm::log(1.0 - p);
    }
    Ok(-sum / y.len() as f64)
}

/// Loss used by single-output heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinaryLoss {
    WeightedBce,
    PlainBce,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: BinaryLoss,
}

impl Default for TrainConfig {
    /// Batch 16, 5 epochs, Adam at 1e-3, weighted BCE.
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 5,
            learning_rate: 1e-3,
            seed: 0,
            loss: BinaryLoss::WeightedBce,
        }
    }
}

/// One embedded training example: masked features plus aligned target and
/// label-presence vectors (presence 0 excludes the example from that label's
/// loss and metrics).
#[derive(Debug, Clone)]
pub struct TrainDocument {
    pub features: FeatureMatrix,
    pub mask: Vec<bool>,
    pub targets: Vec<bool>,
    pub presence: Vec<bool>,
}

/// An embedded dataset aligned with a model's label order.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub docs: Vec<TrainDocument>,
    pub labels: Vec<String>,
}

impl TrainSet {
    /// Embed a corpus once (through the model's blocking and backend) and
    /// align targets with the model's label order. All labels are treated as
    /// present; partial-label sets are built by editing `presence` afterwards.
    pub fn prepare<B: EmbeddingBackend + ?Sized>(
        model: &HydranetModel,
        corpus: &Corpus,
        backend: &B,
        mut cache: Option<&mut dyn EmbeddingCache>,
    ) -> Result<TrainSet, TrainError> {
        let labels: Vec<String> = model.labels().iter().map(|&s| String::from(s)).collect();
        for l in corpus.labels() {
            if !labels.iter().any(|ml| ml == l) {
                return Err(TrainError::UnknownLabel(l.clone()));
            }
        }
        let mut docs = Vec::with_capacity(corpus.len());
        for doc in corpus.documents() {
            let (features, mask) =
                model.featurize(&doc.text, backend, crate::embed::reborrow_cache(&mut cache))?;
            let targets: Vec<bool> = labels.iter().map(|l| doc.labels.contains(l)).collect();
            docs.push(TrainDocument {
                features,
                mask,
                targets,
                presence: alloc::vec![true; labels.len()],
            });
        }
        Ok(TrainSet { docs, labels })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// One `{epoch, head, loss, accuracy}` training-history record.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub head: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Adam with bias correction (beta1 0.9, beta2 0.99, eps 1e-8).
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &dyn ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| {
                let (r, c) = t.shape();
                Tensor::zeros(r, c)
            })
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = param.data_mut();
            for i in 0..pd.len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] -= self.lr * (mi / bc1) / (libm::sqrt(vi / bc2) + self.eps);
            }
        }
    }
}

/// Register a head's parameters as trainable leaves and record its forward
/// pass. Returns the output node and the flat parameter ids.
fn registered_head_graph(
    tape: &mut Tape,
    head: &Head,
    x: Id,
    training: bool,
    dropout_seed: u64,
) -> Result<(Id, Vec<Id>), TapeError> {
    match &head.kind {
        HeadKind::BiLstm(p) => {
            let (ids, flat) = p.register(tape, true);
            Ok((crate::bilstm::bilstm_head_graph(tape, x, p, &ids)?, flat))
        }
        HeadKind::Transformer { params, window } => {
            let (ids, flat) = params.register(tape, true);
            Ok((
                crate::attention::transformer_head_graph(
                    tape, x, params, &ids, *window, training, dropout_seed,
                )?,
                flat,
            ))
        }
    }
}

/// Record the loss for one example on the tape. For single-output heads this
/// is (weighted) BCE; for group heads, categorical cross-entropy against the
/// one-hot target.
fn loss_graph(
    tape: &mut Tape,
    out: Id,
    targets: &[bool],
    weights: &ClassWeights,
) -> Result<Id, TapeError> {
    if targets.len() == 1 {
        let y = if targets[0] { 1.0 } else { 0.0 };
        let p = tape.clip(out, PROB_CLIP, 1.0 - PROB_CLIP);
        let ln_p = tape.ln(p);
        let neg = tape.scalar_mul(out, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        let q = tape.clip(one_minus, PROB_CLIP, 1.0 - PROB_CLIP);
        let ln_q = tape.ln(q);
        let pos_term = tape.scalar_mul(ln_p, -(weights.positive * y));
        let neg_term = tape.scalar_mul(ln_q, -(weights.negative * (1.0 - y)));
        tape.add(pos_term, neg_term)
    } else {
        let one_hot = Tensor::row_vector(
            targets.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect(),
        );
        let hot = tape.leaf(one_hot, false);
        let p = tape.clip(out, PROB_CLIP, 1.0 - PROB_CLIP);
        let ln_p = tape.ln(p);
        let picked = tape.mul(ln_p, hot)?;
        let summed = tape.sum_all(picked);
        Ok(tape.scalar_mul(summed, -1.0))
    }
}

/// Whether the head's prediction counts as correct for history metrics.
fn is_correct(out: &Tensor, targets: &[bool]) -> bool {
    if targets.len() == 1 {
        (out.item() > 0.5) == targets[0]
    } else {
        let pred = out
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(i, _)| i)
            .expect("non-empty outputs");
        targets[pred]
    }
}

/// An example participates in a head's loss when every grouped label is
/// present, and (for group heads) the group target is exactly one-hot.
fn head_example_active(targets: &[bool], presence: &[bool]) -> bool {
    if !presence.iter().all(|&p| p) {
        return false;
    }
    if targets.len() > 1 {
        return targets.iter().filter(|&&t| t).count() == 1;
    }
    true
}

/// Derive the weighted-BCE class weights for a single-label head, named for
/// error reporting.
fn head_class_weights(
    label: &str,
    targets: &[(Vec<bool>, Vec<bool>)],
    classes: usize,
) -> Result<ClassWeights, TrainError> {
    let present: Vec<&(Vec<bool>, Vec<bool>)> = targets
        .iter()
        .filter(|(t, p)| head_example_active(t, p))
        .collect();
    if present.is_empty() {
        // No active examples: the head trains on nothing, weights unused.
        return Ok(ClassWeights::uniform());
    }
    let positives = present.iter().filter(|(t, _)| t[0]).count();
    class_weights(present.len(), positives, classes).map_err(|e| match e {
        TrainError::DegenerateClass { positives, present, .. } => TrainError::DegenerateClass {
            label: String::from(label),
            positives,
            present,
        },
        other => other,
    })
}

/// Train one head against shared read-only inputs. This is a pure function
/// of its arguments: the shuffle is derived from (seed, epoch), dropout from
/// (head stream, epoch, document), so running heads in any order or on any
/// thread produces bit-identical parameters.
///
/// `inputs[i]` is the post-neck prefix tensor of document i; `targets[i]`
/// holds this head's target columns and `presence[i]` its presence columns.
pub fn train_head_with_inputs(
    head: &mut Head,
    inputs: &[Tensor],
    targets: &[(Vec<bool>, Vec<bool>)],
    weights: ClassWeights,
    cfg: &TrainConfig,
    head_stream: u64,
) -> Result<Vec<HistoryRecord>, TrainError> {
    debug_assert_eq!(inputs.len(), targets.len());
    let head_name = head.labels.join("+");
    let mut adam = Adam::new(cfg.learning_rate, head.params());
    let mut history = Vec::with_capacity(cfg.epochs);

    // Only examples present for this head participate; batching over the
    // active set keeps training invariant to absent examples elsewhere in
    // the dataset.
    let active_docs: Vec<usize> = (0..inputs.len())
        .filter(|&i| head_example_active(&targets[i].0, &targets[i].1))
        .collect();

    for epoch in 0..cfg.epochs {
        let mut order = active_docs.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(seeding::mix(cfg.seed, 0x5u64 ^ epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for active in order.chunks(cfg.batch_size.max(1)) {
            let inv_m = 1.0 / active.len() as f64;
            let mut accum: Vec<Tensor> = head
                .params()
                .tensors()
                .iter()
                .map(|t| {
                    let (r, c) = t.shape();
                    Tensor::zeros(r, c)
                })
                .collect();

            for &doc in active {
                let mut tape = Tape::new();
                let x = tape.leaf(inputs[doc].clone(), false);
                let dropout_seed =
                    seeding::mix(head_stream, seeding::mix(epoch as u64, doc as u64));
                let (out, flat) = registered_head_graph(&mut tape, head, x, true, dropout_seed)?;
                let loss = loss_graph(&mut tape, out, &targets[doc].0, &weights)?;
                loss_sum += tape.value(loss).item();
                if is_correct(tape.value(out), &targets[doc].0) {
                    correct += 1;
                }
                seen += 1;
                let grads = tape.backward(loss)?;
                for (acc, id) in accum.iter_mut().zip(&flat) {
                    let g = grads.get(*id).expect("trainable leaf has gradient");
                    for (a, &gv) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += gv * inv_m;
                    }
                }
            }
            adam.step(head.params_mut().tensors_mut(), &accum);
        }
        history.push(HistoryRecord {
            epoch,
            head: head_name.clone(),
            loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
            accuracy: if seen > 0 {
                correct as f64 / seen as f64
            } else {
                0.0
            },
        });
    }
    Ok(history)
}

/// Everything `train` precomputes per head before updating it.
pub struct HeadPlan {
    pub head_idx: usize,
    pub targets: Vec<(Vec<bool>, Vec<bool>)>,
    pub weights: ClassWeights,
    pub stream: u64,
}

/// Precompute post-neck inputs (eval mode) for every document.
pub fn necked_inputs(model: &HydranetModel, data: &TrainSet) -> Result<Vec<Tensor>, TrainError> {
    let mut out = Vec::with_capacity(data.docs.len());
    for doc in &data.docs {
        let prefix = masked_prefix(&doc.features, &doc.mask)?;
        out.push(model.neck().apply(&prefix));
    }
    Ok(out)
}

/// Build the per-head training plans (target columns, class weights, RNG
/// stream). Fails fast on degenerate classes.
pub fn plan_heads(
    model: &HydranetModel,
    data: &TrainSet,
    cfg: &TrainConfig,
) -> Result<Vec<HeadPlan>, TrainError> {
    if data.docs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = model.label_count();
    let mut plans = Vec::new();
    let mut offset = 0usize;
    for (head_idx, head) in model.heads().iter().enumerate() {
        let g = head.labels.len();
        let cols = offset..offset + g;
        offset += g;
        if !head.trainable {
            continue;
        }
        let targets: Vec<(Vec<bool>, Vec<bool>)> = data
            .docs
            .iter()
            .map(|d| {
                (
                    d.targets[cols.clone()].to_vec(),
                    d.presence[cols.clone()].to_vec(),
                )
            })
            .collect();
        let weights = if g == 1 {
            match cfg.loss {
                BinaryLoss::WeightedBce => {
                    head_class_weights(&head.labels[0], &targets, classes)?
                }
                BinaryLoss::PlainBce => ClassWeights::uniform(),
            }
        } else {
            ClassWeights::uniform()
        };
        plans.push(HeadPlan {
            head_idx,
            targets,
            weights,
            stream: seeding::mix(cfg.seed, seeding::hash_str(&head.labels.join("+"))),
        });
    }
    Ok(plans)
}

/// Mini-batch training of every trainable component. With an identity or
/// frozen neck, heads train independently (sequentially here; the std crate
/// offers a bit-identical parallel driver). A trainable dense neck couples
/// the heads: per batch, every head contributes its neck gradient and the
/// neck steps once after all heads.
pub fn train(
    model: &mut HydranetModel,
    data: &TrainSet,
    cfg: &TrainConfig,
) -> Result<Vec<HistoryRecord>, TrainError> {
    if model.neck().trainable && !model.neck().is_identity() {
        return train_coupled(model, data, cfg);
    }
    let inputs = necked_inputs(model, data)?;
    let plans = plan_heads(model, data, cfg)?;
    let mut history = Vec::new();
    for plan in plans {
        let head = &mut model.heads_mut()[plan.head_idx];
        let records =
            train_head_with_inputs(head, &inputs, &plan.targets, plan.weights, cfg, plan.stream)?;
        history.extend(records);
    }
    history.sort_by(|a, b| (a.epoch, &a.head).cmp(&(b.epoch, &b.head)));
    Ok(history)
}

/// Coupled path for a trainable dense neck: head losses share the neck, the
/// neck gradient accumulates across heads within a batch, and the neck steps
/// after the heads (one synchronization point per batch).
fn train_coupled(
    model: &mut HydranetModel,
    data: &TrainSet,
    cfg: &TrainConfig,
) -> Result<Vec<HistoryRecord>, TrainError> {
    let mut prefixes = Vec::with_capacity(data.docs.len());
    for doc in &data.docs {
        prefixes.push(masked_prefix(&doc.features, &doc.mask)?);
    }
    let plans = plan_heads(model, data, cfg)?;
    if plans.is_empty() && !model.neck().trainable {
        return Ok(Vec::new());
    }

    let mut head_adams: Vec<Adam> = plans
        .iter()
        .map(|p| Adam::new(cfg.learning_rate, model.heads()[p.head_idx].params()))
        .collect();
    let mut neck_adam = Adam::new(cfg.learning_rate, model.neck());
    let mut stats: Vec<(f64, usize, usize)> = alloc::vec![(0.0, 0, 0); plans.len()];
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs {
        for s in stats.iter_mut() {
            *s = (0.0, 0, 0);
        }
        let mut order: Vec<usize> = (0..data.docs.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(seeding::mix(cfg.seed, 0x5u64 ^ epoch as u64));
        order.shuffle(&mut shuffle_rng);

        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut neck_accum: Vec<Tensor> = model
                .neck()
                .tensors()
                .iter()
                .map(|t| {
                    let (r, c) = t.shape();
                    Tensor::zeros(r, c)
                })
                .collect();
            let mut neck_touched = false;

            for (pi, plan) in plans.iter().enumerate() {
                let active: Vec<usize> = batch
                    .iter()
                    .copied()
                    .filter(|&i| head_example_active(&plan.targets[i].0, &plan.targets[i].1))
                    .collect();
                if active.is_empty() {
                    continue;
                }
                let inv_m = 1.0 / active.len() as f64;
                let head = &model.heads()[plan.head_idx];
                let mut accum: Vec<Tensor> = head
                    .params()
                    .tensors()
                    .iter()
                    .map(|t| {
                        let (r, c) = t.shape();
                        Tensor::zeros(r, c)
                    })
                    .collect();

                for &doc in &active {
                    let mut tape = Tape::new();
                    let x = tape.leaf(prefixes[doc].clone(), false);
                    let neck_ids: Vec<Id> = model
                        .neck()
                        .tensors()
                        .into_iter()
                        .map(|t| tape.leaf(t.clone(), true))
                        .collect();
                    let necked = model.neck().graph(&mut tape, x, &neck_ids)?;
                    let dropout_seed =
                        seeding::mix(plan.stream, seeding::mix(epoch as u64, doc as u64));
                    let (out, flat) =
                        registered_head_graph(&mut tape, head, necked, true, dropout_seed)?;
                    let loss = loss_graph(&mut tape, out, &plan.targets[doc].0, &plan.weights)?;
                    stats[pi].0 += tape.value(loss).item();
                    if is_correct(tape.value(out), &plan.targets[doc].0) {
                        stats[pi].1 += 1;
                    }
                    stats[pi].2 += 1;
                    let grads = tape.backward(loss)?;
                    for (acc, id) in accum.iter_mut().zip(&flat) {
                        let g = grads.get(*id).expect("trainable head leaf");
                        for (a, &gv) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += gv * inv_m;
                        }
                    }
                    for (acc, id) in neck_accum.iter_mut().zip(&neck_ids) {
                        let g = grads.get(*id).expect("trainable neck leaf");
                        for (a, &gv) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += gv * inv_m;
                        }
                        neck_touched = true;
                    }
                }
                head_adams[pi].step(
                    model.heads_mut()[plan.head_idx].params_mut().tensors_mut(),
                    &accum,
                );
            }
            if neck_touched {
                neck_adam.step(model.neck_mut().tensors_mut(), &neck_accum);
            }
        }

        for (pi, plan) in plans.iter().enumerate() {
            let (loss_sum, correct, seen) = stats[pi];
            history.push(HistoryRecord {
                epoch,
                head: model.heads()[plan.head_idx].labels.join("+"),
                loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
                accuracy: if seen > 0 {
                    correct as f64 / seen as f64
                } else {
                    0.0
                },
            });
        }
    }
    history.sort_by(|a, b| (a.epoch, &a.head).cmp(&(b.epoch, &b.head)));
    Ok(history)
}

/// Fine-tune only the named heads: the neck and every other head freeze for
/// the duration and are restored afterwards. Everything frozen is
/// bit-unchanged; other heads' predictions stay exactly as they were.
pub fn finetune_head(
    model: &mut HydranetModel,
    labels: &[&str],
    data: &TrainSet,
    cfg: &TrainConfig,
) -> Result<Vec<HistoryRecord>, TrainError> {
    let mut target_heads: Vec<usize> = Vec::new();
    for label in labels {
        match model.head_index_for(label) {
            Some(idx) => {
                if !target_heads.contains(&idx) {
                    target_heads.push(idx);
                }
            }
            None => return Err(TrainError::UnknownLabel(String::from(*label))),
        }
    }
    let saved_neck = model.neck().trainable;
    let saved_heads: Vec<bool> = model.heads().iter().map(|h| h.trainable).collect();
    model.neck_mut().trainable = false;
    for (i, head) in model.heads_mut().iter_mut().enumerate() {
        head.trainable = target_heads.contains(&i);
    }
    let result = train(model, data, cfg);
    model.neck_mut().trainable = saved_neck;
    for (i, head) in model.heads_mut().iter_mut().enumerate() {
        head.trainable = saved_heads[i];
    }
    result
}

/// Evaluation metrics: multi-class accuracy (argmax hit rate), micro-F1 at
/// the 0.5 threshold, and per-label precision/recall.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub per_label: Vec<LabelMetrics>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
}

/// Metrics from raw prediction vectors. `targets`/`presence` rows align with
/// `predictions`; masked-out (absent) labels do not count anywhere.
pub fn compute_metrics(
    predictions: &[Vec<f64>],
    targets: &[Vec<bool>],
    presence: &[Vec<bool>],
    labels: &[String],
) -> Result<Metrics, TrainError> {
    if predictions.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let k = labels.len();
    let mut tp = alloc::vec![0usize; k];
    let mut fp = alloc::vec![0usize; k];
    let mut f_n = alloc::vec![0usize; k];
    let mut correct = 0usize;

    for ((pred, target), present) in predictions.iter().zip(targets).zip(presence) {
        if pred.len() != k || target.len() != k {
            return Err(TrainError::ShapeMismatch {
                expected: k,
                got: pred.len(),
            });
        }
        let argmax = pred
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(i, _)| i)
            .expect("non-empty prediction vector");
        if present[argmax] && target[argmax] {
            correct += 1;
        }
        for i in 0..k {
            if !present[i] {
                continue;
            }
            let predicted = pred[i] > 0.5;
            match (predicted, target[i]) {
                (true, true) => tp[i] += 1,
                (true, false) => fp[i] += 1,
                (false, true) => f_n[i] += 1,
                (false, false) => {}
            }
        }
    }

    let tp_all: usize = tp.iter().sum();
    let fp_all: usize = fp.iter().sum();
    let fn_all: usize = f_n.iter().sum();
    let precision_all = if tp_all + fp_all > 0 {
        tp_all as f64 / (tp_all + fp_all) as f64
    } else {
        0.0
    };
    let recall_all = if tp_all + fn_all > 0 {
        tp_all as f64 / (tp_all + fn_all) as f64
    } else {
        0.0
    };
    let micro_f1 = if precision_all + recall_all > 0.0 {
        2.0 * precision_all * recall_all / (precision_all + recall_all)
    } else {
        0.0
    };

    let per_label = labels
        .iter()
        .enumerate()
        .map(|(i, label)| LabelMetrics {
            label: label.clone(),
            precision: if tp[i] + fp[i] > 0 {
                tp[i] as f64 / (tp[i] + fp[i]) as f64
            } else {
                0.0
            },
            recall: if tp[i] + f_n[i] > 0 {
                tp[i] as f64 / (tp[i] + f_n[i]) as f64
            } else {
                0.0
            },
        })
        .collect();

    Ok(Metrics {
        accuracy: correct as f64 / predictions.len() as f64,
        micro_f1,
        per_label,
    })
}

/// Evaluate a model over an embedded dataset.
pub fn evaluate(model: &HydranetModel, data: &TrainSet) -> Result<Metrics, TrainError> {
    if data.docs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut predictions = Vec::with_capacity(data.docs.len());
    let mut targets = Vec::with_capacity(data.docs.len());
    let mut presence = Vec::with_capacity(data.docs.len());
    for doc in &data.docs {
        predictions.push(model.predict_features(&doc.features, &doc.mask)?);
        targets.push(doc.targets.clone());
        presence.push(doc.presence.clone());
    }
    compute_metrics(&predictions, &targets, &presence, &data.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weights_match_hand_substitution() {
        // N=100, N_k=20, K=5: w0 = 100/(80*5) = 0.25, w1 = 100/(20*5) = 1.0
        let w = class_weights(100, 20, 5).unwrap();
        assert!((w.negative - 0.25).abs() < 1e-12);
        assert!((w.positive - 1.0).abs() < 1e-12);

        // Balanced: N=4, N_k=2, K=2 gives w0 = w1 = 2/K = 1.
        let w = class_weights(4, 2, 2).unwrap();
        assert!((w.negative - 1.0).abs() < 1e-12);
        assert!((w.positive - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_classes_error() {
        assert!(matches!(
            class_weights(10, 10, 3),
            Err(TrainError::DegenerateClass { .. })
        ));
        assert!(matches!(
            class_weights(10, 0, 3),
            Err(TrainError::DegenerateClass { .. })
        ));
    }

    #[test]
    fn weighted_bce_matches_log_half() {
        let loss = weighted_bce(&[1.0], &[0.5], &ClassWeights::uniform()).unwrap();
        assert!((loss - 0.693147).abs() < 1e-5);
    }

    #[test]
    fn perfect_predictions_hit_the_clip_floor() {
        let loss = weighted_bce(&[1.0, 0.0], &[1.0, 0.0], &ClassWeights::uniform()).unwrap();
        assert!(loss >= 0.0);
        assert!(loss <= -libm::log(1.0 - PROB_CLIP) + 1e-12);
    }

    #[test]
    fn loss_is_linear_in_the_weights() {
        let y = [1.0, 0.0, 1.0, 1.0, 0.0];
        let p = [0.8, 0.3, 0.6, 0.9, 0.1];
        let w1 = ClassWeights { negative: 0.4, positive: 1.6 };
        let w2 = ClassWeights { negative: 0.8, positive: 3.2 };
        let l1 = weighted_bce(&y, &p, &w1).unwrap();
        let l2 = weighted_bce(&y, &p, &w2).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn balanced_weights_scale_plain_bce_by_two_over_k() {
        // With N_k = N/2 the weights are both 2/K, so the weighted loss is
        // exactly (2/K) times plain BCE.
        let y = [1.0, 0.0, 1.0, 0.0];
        let p = [0.7, 0.2, 0.55, 0.45];
        let k = 5usize;
        let w = class_weights(4, 2, k).unwrap();
        assert!((w.negative - 2.0 / k as f64).abs() < 1e-15);
        assert!((w.positive - 2.0 / k as f64).abs() < 1e-15);
        let weighted = weighted_bce(&y, &p, &w).unwrap();
        let plain = weighted_bce(&y, &p, &ClassWeights::uniform()).unwrap();
        assert!((weighted - (2.0 / k as f64) * plain).abs() < 1e-12);
    }

    #[test]
    fn bce_shape_mismatch_errors() {
        assert!(matches!(
            weighted_bce(&[1.0, 0.0], &[0.5], &ClassWeights::uniform()),
            Err(TrainError::ShapeMismatch { .. })
        ));
    }

    fn s(v: &str) -> String {
        String::from(v)
    }

    #[test]
    fn micro_f1_matches_hand_confusion_case() {
        // 4 docs, 2 labels. TP=3 (d1.A, d2.B, d3.B), FP=2 (d2.A, d4.B),
        // FN=1 (d3.A): P=3/5, R=3/4, F1 = 2PR/(P+R) = 0.666667.
        let predictions = alloc::vec![
            alloc::vec![0.9, 0.2],
            alloc::vec![0.7, 0.8],
            alloc::vec![0.4, 0.9],
            alloc::vec![0.1, 0.6],
        ];
        let targets = alloc::vec![
            alloc::vec![true, false],
            alloc::vec![false, true],
            alloc::vec![true, true],
            alloc::vec![false, false],
        ];
        let presence = alloc::vec![alloc::vec![true, true]; 4];
        let m = compute_metrics(&predictions, &targets, &presence, &[s("A"), s("B")]).unwrap();
        assert!((m.micro_f1 - 2.0 / 3.0).abs() < 1e-9, "micro-F1 {}", m.micro_f1);
        // argmax: d1->A ok, d2->B ok, d3->B ok, d4->B wrong.
        assert!((m.accuracy - 0.75).abs() < 1e-12);
        // Per-label: A has TP=1 FP=1 FN=1, B has TP=2 FP=1 FN=0.
        assert!((m.per_label[0].precision - 0.5).abs() < 1e-12);
        assert!((m.per_label[0].recall - 0.5).abs() < 1e-12);
        assert!((m.per_label[1].precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.per_label[1].recall - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let predictions = alloc::vec![alloc::vec![0.9, 0.1], alloc::vec![0.2, 0.8]];
        let targets = alloc::vec![alloc::vec![true, false], alloc::vec![false, true]];
        let presence = alloc::vec![alloc::vec![true, true]; 2];
        let m = compute_metrics(&predictions, &targets, &presence, &[s("A"), s("B")]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.micro_f1, 1.0);
    }

    #[test]
    fn constant_predictor_on_balanced_set_is_half_right() {
        // Always predicts label A with certainty: on a balanced 2-class set
        // the argmax accuracy is exactly 0.5.
        let predictions = alloc::vec![alloc::vec![0.9, 0.45]; 10];
        let mut targets = Vec::new();
        for i in 0..10 {
            targets.push(alloc::vec![i % 2 == 0, i % 2 == 1]);
        }
        let presence = alloc::vec![alloc::vec![true, true]; 10];
        let m = compute_metrics(&predictions, &targets, &presence, &[s("A"), s("B")]).unwrap();
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn empty_datasets_are_rejected() {
        assert!(matches!(
            compute_metrics(&[], &[], &[], &[]),
            Err(TrainError::EmptyDataset)
        ));
    }
}
