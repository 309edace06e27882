//! The attention head: multi-head self-attention under a banded visibility
//! window, masked average pooling, dropout, and a dense stack to the score.
//!
//! The window mask is forward-only: block `i` may attend to blocks `i..=i+tau`.
//! `Global` is a distinct sentinel because no finite forward band produces the
//! all-ones matrix. Values are the unprojected inputs; there is no value
//! projection and no positional encoding, so order information enters only
//! through the band.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed::FeatureMatrix;
use crate::params::{masked_prefix, prefix_len, HeadError, ParamSet};
use crate::tape::{Id, Tape, TapeError};
use crate::tensor::Tensor;

pub const DEFAULT_HEADS: usize = 3;
pub const DEFAULT_KEY_DIM: usize = 32;
pub const DENSE_UNITS: usize = 20;
pub const DROPOUT_P: f64 = 0.1;

/// Fill value for positions outside the attention window. Finite so that a
/// softmax row can never turn into NaN.
const MASK_FILL: f64 = -1e9;

/// Attention visibility: a forward band of `tau` following blocks, or global.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionWindow {
    Global,
    Banded(usize),
}

impl core::fmt::Display for AttentionWindow {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            AttentionWindow::Global => write!(f, "global"),
            AttentionWindow::Banded(tau) => write!(f, "{tau}"),
        }
    }
}

impl core::str::FromStr for AttentionWindow {
    type Err = alloc::string::String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("global") {
            return Ok(AttentionWindow::Global);
        }
        s.parse::<usize>()
            .map(AttentionWindow::Banded)
            .map_err(|_| alloc::format!("attention window must be `global` or a nonnegative integer, got `{s}`"))
    }
}

/// Binary `n x n` visibility matrix: entry (i, j) is 1 iff block i may attend
/// to block j. `Banded(0)` is the identity, `Global` all ones; the diagonal
/// is always set.
pub fn band_mask(n: usize, window: AttentionWindow) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    match window {
        AttentionWindow::Global => {
            for v in m.data_mut() {
                *v = 1.0;
            }
        }
        AttentionWindow::Banded(tau) => {
            for i in 0..n {
                for j in i..(i + tau + 1).min(n) {
                    m.set(i, j, 1.0);
                }
            }
        }
    }
    m
}

/// Per-attention-head query/key projections plus the shared output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionParams {
    /// Query projections, one `n_in x d_k` per attention head.
    pub query: Vec<Tensor>,
    /// Key projections, one `n_in x d_k` per attention head.
    pub key: Vec<Tensor>,
    /// Output projection `(heads * n_in) x (heads * d_k)`.
    pub output: Tensor,
}

impl SelfAttentionParams {
    pub fn new(n_in: usize, heads: usize, d_k: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads >= 1 && d_k >= 1);
        SelfAttentionParams {
            query: (0..heads)
                .map(|_| Tensor::glorot_uniform(n_in, d_k, rng))
                .collect(),
            key: (0..heads)
                .map(|_| Tensor::glorot_uniform(n_in, d_k, rng))
                .collect(),
            output: Tensor::glorot_uniform(heads * n_in, heads * d_k, rng),
        }
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn key_dim(&self) -> usize {
        self.query[0].cols()
    }

    pub fn input_dim(&self) -> usize {
        self.query[0].rows()
    }

    /// Width of the attended representation (heads * d_k).
    pub fn model_dim(&self) -> usize {
        self.output.cols()
    }
}

impl ParamSet for SelfAttentionParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for q in &self.query {
            out.push(q);
        }
        for k in &self.key {
            out.push(k);
        }
        out.push(&self.output);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for q in &mut self.query {
            out.push(q);
        }
        for k in &mut self.key {
            out.push(k);
        }
        out.push(&mut self.output);
        out
    }
}

/// Tape handles for [`SelfAttentionParams`].
pub struct SelfAttentionIds {
    pub query: Vec<Id>,
    pub key: Vec<Id>,
    pub output: Id,
}

impl SelfAttentionIds {
    fn take(it: &mut impl Iterator<Item = Id>, heads: usize) -> Self {
        let query: Vec<Id> = (0..heads).map(|_| it.next().expect("query ids")).collect();
        let key: Vec<Id> = (0..heads).map(|_| it.next().expect("key ids")).collect();
        SelfAttentionIds {
            query,
            key,
            output: it.next().expect("output projection id"),
        }
    }
}

/// Record banded multi-head self-attention over the prefix rows of `x`.
/// Per head: `softmax(mask(QK^T / sqrt(d_k))) @ x`; heads concatenate and the
/// shared projection mixes them down to `heads * d_k` columns.
pub(crate) fn self_attention_graph(
    tape: &mut Tape,
    x: Id,
    ids: &SelfAttentionIds,
    d_k: usize,
    window: AttentionWindow,
) -> Result<Id, TapeError> {
    let n_t = tape.value(x).rows();
    let keep = band_mask(n_t, window);
    let scale = 1.0 / libm::sqrt(d_k as f64);

    let mut contexts: Vec<Id> = Vec::with_capacity(ids.query.len());
    for (wq, wk) in ids.query.iter().zip(&ids.key) {
        let q = tape.matmul(x, *wq)?;
        let k = tape.matmul(x, *wk)?;
        let k_t = tape.transpose(k);
        let raw = tape.matmul(q, k_t)?;
        let scaled = tape.scalar_mul(raw, scale);
        let banded = tape.masked_fill(scaled, &keep, MASK_FILL)?;
        let probs = tape.softmax_rows(banded);
        contexts.push(tape.matmul(probs, x)?);
    }
    let merged = tape.concat_cols(&contexts)?;
    tape.matmul(merged, ids.output)
}

/// Full parameter set for one transformer head.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerHeadParams {
    pub attention: SelfAttentionParams,
    pub dense1_w: Tensor,
    pub dense1_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub dropout_p: f64,
}

impl TransformerHeadParams {
    pub fn new(n_in: usize, heads: usize, d_k: usize, outputs: usize, seed: u64) -> Self {
        assert!(outputs >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attention = SelfAttentionParams::new(n_in, heads, d_k, &mut rng);
        let d_model = attention.model_dim();
        TransformerHeadParams {
            attention,
            dense1_w: Tensor::glorot_uniform(d_model, DENSE_UNITS, &mut rng),
            dense1_b: Tensor::zeros(1, DENSE_UNITS),
            out_w: Tensor::glorot_uniform(DENSE_UNITS, outputs, &mut rng),
            out_b: Tensor::zeros(1, outputs),
            dropout_p: DROPOUT_P,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.attention.input_dim()
    }

    pub fn outputs(&self) -> usize {
        self.out_b.cols()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> (TransformerHeadIds, Vec<Id>) {
        let flat: Vec<Id> = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        (
            TransformerHeadIds::from_ordered(&flat, self.attention.heads()),
            flat,
        )
    }
}

impl ParamSet for TransformerHeadParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.attention.tensors();
        out.push(&self.dense1_w);
        out.push(&self.dense1_b);
        out.push(&self.out_w);
        out.push(&self.out_b);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.attention.tensors_mut();
        out.push(&mut self.dense1_w);
        out.push(&mut self.dense1_b);
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }
}

/// Tape handles mirroring [`TransformerHeadParams`].
pub struct TransformerHeadIds {
    pub attention: SelfAttentionIds,
    pub dense1_w: Id,
    pub dense1_b: Id,
    pub out_w: Id,
    pub out_b: Id,
}

impl TransformerHeadIds {
    pub fn from_ordered(ids: &[Id], heads: usize) -> Self {
        let mut it = ids.iter().copied();
        let attention = SelfAttentionIds::take(&mut it, heads);
        let mut next = || it.next().expect("enough ids for a transformer head");
        let out = TransformerHeadIds {
            attention,
            dense1_w: next(),
            dense1_b: next(),
            out_w: next(),
            out_b: next(),
        };
        assert!(it.next().is_none(), "leftover ids");
        out
    }
}

/// Record the whole head: attention, average pooling, ReLU, two dropout
/// sites around the dense layer, sigmoid/softmax output. `x` holds only the
/// unmasked prefix rows. Dropout site seeds derive from `dropout_seed`.
pub fn transformer_head_graph(
    tape: &mut Tape,
    x: Id,
    params: &TransformerHeadParams,
    ids: &TransformerHeadIds,
    window: AttentionWindow,
    training: bool,
    dropout_seed: u64,
) -> Result<Id, TapeError> {
    let attended = self_attention_graph(
        tape,
        x,
        &ids.attention,
        params.attention.key_dim(),
        window,
    )?;
    let pooled = tape.mean_pool_rows(attended, None)?;
    let activated = tape.relu(pooled);
    let dropped1 = tape.dropout(
        activated,
        params.dropout_p,
        training,
        crate::params::seeding::mix(dropout_seed, 1),
    )?;
    let d1_lin = tape.matmul(dropped1, ids.dense1_w)?;
    let d1_bias = tape.add(d1_lin, ids.dense1_b)?;
    let d1 = tape.relu(d1_bias);
    let dropped2 = tape.dropout(
        d1,
        params.dropout_p,
        training,
        crate::params::seeding::mix(dropout_seed, 2),
    )?;
    let logit_lin = tape.matmul(dropped2, ids.out_w)?;
    let logit = tape.add(logit_lin, ids.out_b)?;
    if params.outputs() == 1 {
        Ok(tape.sigmoid(logit))
    } else {
        Ok(tape.softmax_rows(logit))
    }
}

/// Evaluate the head on a masked feature matrix (dropout active only when
/// `training` is set).
pub fn transformer_head_forward(
    x: &FeatureMatrix,
    mask: &[bool],
    params: &TransformerHeadParams,
    window: AttentionWindow,
    training: bool,
    dropout_seed: u64,
) -> Result<Tensor, HeadError> {
    let prefix = masked_prefix(x, mask)?;
    let mut tape = Tape::new();
    let x_id = tape.leaf(prefix, false);
    let (ids, _) = params.register(&mut tape, false);
    let out = transformer_head_graph(&mut tape, x_id, params, &ids, window, training, dropout_seed)?;
    Ok(tape.value(out).clone())
}

/// Spec-level self-attention over a full-capacity sequence: compute on the
/// unmasked prefix, zero rows at padded positions.
pub fn masked_self_attention(
    h: &Tensor,
    pad_mask: &[bool],
    params: &SelfAttentionParams,
    window: AttentionWindow,
) -> Result<Tensor, HeadError> {
    if pad_mask.len() != h.rows() {
        return Err(HeadError::DimensionMismatch {
            expected: h.rows(),
            got: pad_mask.len(),
        });
    }
    let n_t = prefix_len(pad_mask)?;
    let mut out = Tensor::zeros(h.rows(), params.model_dim());
    if n_t == 0 {
        return Ok(out);
    }
    let mut data = Vec::with_capacity(n_t * h.cols());
    for r in 0..n_t {
        data.extend_from_slice(h.row(r));
    }
    let prefix = Tensor::from_vec(n_t, h.cols(), data);

    let mut tape = Tape::new();
    let x_id = tape.leaf(prefix, false);
    let flat: Vec<Id> = params
        .tensors()
        .into_iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect();
    let ids = SelfAttentionIds::take(&mut flat.into_iter(), params.heads());
    let attended = self_attention_graph(&mut tape, x_id, &ids, params.key_dim(), window)?;
    let value = tape.value(attended);
    for r in 0..n_t {
        for c in 0..params.model_dim() {
            out.set(r, c, value.get(r, c));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn band_mask_tau_one_is_bidiagonal() {
        let m = band_mask(5, AttentionWindow::Banded(1));
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0, 1.0,
            0.0, 0.0, 0.0, 0.0, 1.0,
        ];
        assert_eq!(m.data(), &expected);
    }

    #[test]
    fn band_mask_tau_zero_is_identity() {
        let m = band_mask(4, AttentionWindow::Banded(0));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn band_mask_global_is_all_ones() {
        let m = band_mask(3, AttentionWindow::Global);
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn widening_tau_only_adds_visibility() {
        for n in [1usize, 2, 5, 9] {
            for tau in 0..n {
                let narrow = band_mask(n, AttentionWindow::Banded(tau));
                let wide = band_mask(n, AttentionWindow::Banded(tau + 1));
                for (a, b) in narrow.data().iter().zip(wide.data()) {
                    assert!(a <= b);
                }
            }
        }
    }

    #[test]
    fn window_parses_from_strings() {
        assert_eq!("global".parse::<AttentionWindow>().unwrap(), AttentionWindow::Global);
        assert_eq!("10".parse::<AttentionWindow>().unwrap(), AttentionWindow::Banded(10));
        assert!("-1".parse::<AttentionWindow>().is_err());
        assert!("wide".parse::<AttentionWindow>().is_err());
    }

    #[test]
    fn singleton_sequence_projects_the_single_row() {
        // n = 1: the softmaxed 1x1 score is exactly 1, so each head's context
        // is the input row itself and the output is row @ output projection.
        let mut r = rng(2);
        let params = SelfAttentionParams::new(4, 2, 3, &mut r);
        let h = Tensor::from_vec(1, 4, alloc::vec![0.5, -1.0, 2.0, 0.25]);
        let out = masked_self_attention(&h, &[true], &params, AttentionWindow::Global).unwrap();

        let doubled = Tensor::from_vec(1, 8, [h.row(0), h.row(0)].concat());
        let expected = crate::tensor::matmul(&doubled, &params.output);
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_timesteps_give_identical_rows_under_global() {
        let mut r = rng(3);
        let params = SelfAttentionParams::new(5, 3, 4, &mut r);
        let row: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let h = Tensor::from_vec(4, 5, row.repeat(4));
        let out = masked_self_attention(&h, &[true; 4], &params, AttentionWindow::Global).unwrap();
        for t in 1..4 {
            assert_eq!(out.row(0), out.row(t), "row {t} differs");
        }
    }

    #[test]
    fn tau_zero_blocks_cross_row_influence() {
        let mut r = rng(5);
        let params = SelfAttentionParams::new(3, 2, 2, &mut r);
        let base: Vec<f64> = (0..18).map(|_| r.gen_range(-1.0..1.0)).collect();
        let h = Tensor::from_vec(6, 3, base.clone());
        let out = masked_self_attention(&h, &[true; 6], &params, AttentionWindow::Banded(0)).unwrap();

        // Perturb every row except row 2; row 2's output must not move.
        let mut other = base;
        for (i, v) in other.iter_mut().enumerate() {
            if !(6..9).contains(&i) {
                *v += 0.37;
            }
        }
        let h2 = Tensor::from_vec(6, 3, other);
        let out2 = masked_self_attention(&h2, &[true; 6], &params, AttentionWindow::Banded(0)).unwrap();
        assert_eq!(out.row(2), out2.row(2));
        assert_ne!(out.row(0), out2.row(0));
    }

    #[test]
    fn padded_rows_are_zero_and_do_not_leak() {
        let mut r = rng(7);
        let params = SelfAttentionParams::new(3, 2, 2, &mut r);
        let mut h = Tensor::zeros(5, 3);
        for i in 0..2 {
            for j in 0..3 {
                h.set(i, j, r.gen_range(-1.0..1.0));
            }
        }
        // Garbage beyond the prefix must not matter.
        for j in 0..3 {
            h.set(3, j, 1e6);
        }
        let mask = [true, true, false, false, false];
        let out = masked_self_attention(&h, &mask, &params, AttentionWindow::Global).unwrap();
        for t in 2..5 {
            assert!(out.row(t).iter().all(|&v| v == 0.0));
        }

        let clean = Tensor::from_vec(2, 3, h.data()[..6].to_vec());
        let clean_out = masked_self_attention(&clean, &[true, true], &params, AttentionWindow::Global).unwrap();
        for t in 0..2 {
            assert_eq!(out.row(t), clean_out.row(t));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_forbidden_positions_vanish() {
        let mut r = rng(9);
        let n_t = 6;
        let x = Tensor::from_vec(n_t, 4, (0..24).map(|_| r.gen_range(-1.0..1.0)).collect());
        let wq = Tensor::glorot_uniform(4, 3, &mut r);
        let wk = Tensor::glorot_uniform(4, 3, &mut r);

        let mut tape = Tape::new();
        let x_id = tape.leaf(x, false);
        let wq_id = tape.leaf(wq, false);
        let wk_id = tape.leaf(wk, false);
        let q = tape.matmul(x_id, wq_id).unwrap();
        let k = tape.matmul(x_id, wk_id).unwrap();
        let kt = tape.transpose(k);
        let raw = tape.matmul(q, kt).unwrap();
        let scaled = tape.scalar_mul(raw, 1.0 / libm::sqrt(3.0));
        let keep = band_mask(n_t, AttentionWindow::Banded(2));
        let banded = tape.masked_fill(scaled, &keep, MASK_FILL).unwrap();
        let probs = tape.softmax_rows(banded);
        let pv = tape.value(probs);
        for i in 0..n_t {
            let sum: f64 = pv.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {i} sums to {sum}");
            for j in 0..n_t {
                if keep.get(i, j) == 0.0 {
                    assert!(pv.get(i, j) < 1e-30, "({i},{j}) = {}", pv.get(i, j));
                }
            }
        }
    }

    fn random_features(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
        let mut r = rng(seed);
        FeatureMatrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| r.gen_range(-1.0..1.0f32)).collect(),
        )
    }

    #[test]
    fn head_output_is_probability_and_eval_deterministic() {
        let params = TransformerHeadParams::new(8, 3, 4, 1, 11);
        let x = random_features(6, 8, 12);
        let mask = [true, true, true, true, false, false];
        let a = transformer_head_forward(&x, &mask, &params, AttentionWindow::Global, false, 0).unwrap();
        let b = transformer_head_forward(&x, &mask, &params, AttentionWindow::Global, false, 99).unwrap();
        assert_eq!(a, b, "eval must ignore the dropout seed");
        let v = a.item();
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn head_is_padding_invariant_to_the_bit() {
        let params = TransformerHeadParams::new(8, 3, 4, 1, 13);
        let big = random_features(10, 8, 14);
        let small = FeatureMatrix::from_vec(4, 8, big.data()[..32].to_vec());
        let mut big_mask = [false; 10];
        big_mask[..3].fill(true);
        for window in [AttentionWindow::Global, AttentionWindow::Banded(1)] {
            let p_big =
                transformer_head_forward(&big, &big_mask, &params, window, false, 0).unwrap();
            let p_small =
                transformer_head_forward(&small, &[true, true, true, false], &params, window, false, 0)
                    .unwrap();
            assert_eq!(p_big.item(), p_small.item());
        }
    }

    #[test]
    fn all_masked_head_errors() {
        let params = TransformerHeadParams::new(4, 2, 2, 1, 15);
        let x = random_features(3, 4, 16);
        assert!(matches!(
            transformer_head_forward(&x, &[false; 3], &params, AttentionWindow::Global, false, 0),
            Err(HeadError::AllMasked)
        ));
    }

    #[test]
    fn training_dropout_is_seed_deterministic() {
        let params = TransformerHeadParams::new(6, 2, 3, 1, 17);
        let x = random_features(4, 6, 18);
        let mask = [true; 4];
        let a = transformer_head_forward(&x, &mask, &params, AttentionWindow::Global, true, 5).unwrap();
        let b = transformer_head_forward(&x, &mask, &params, AttentionWindow::Global, true, 5).unwrap();
        let c = transformer_head_forward(&x, &mask, &params, AttentionWindow::Global, true, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c, "different dropout seeds should move the output");
    }

    #[test]
    fn group_head_outputs_softmax_distribution() {
        let params = TransformerHeadParams::new(6, 2, 3, 5, 19);
        let x = random_features(4, 6, 20);
        let p = transformer_head_forward(&x, &[true; 4], &params, AttentionWindow::Global, false, 0).unwrap();
        assert_eq!(p.shape(), (1, 5));
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn registered_ids_line_up_with_tensor_order() {
        let params = TransformerHeadParams::new(5, 3, 2, 1, 21);
        let mut tape = Tape::new();
        let (_, flat) = params.register(&mut tape, true);
        for (id, tensor) in flat.iter().zip(params.tensors()) {
            assert_eq!(tape.value(*id).data(), tensor.data());
        }
    }

    #[test]
    fn gradcheck_full_head_tiny_config() {
        // n_d=8, d_k=4, 3 heads, 4 real blocks, dropout off. Seeds picked for
        // an evaluation point clear of ReLU kinks.
        let params = TransformerHeadParams::new(8, 3, 4, 1, 23);
        let mut r = rng(24);
        let x = Tensor::from_vec(4, 8, (0..32).map(|_| r.gen_range(-1.0..1.0)).collect());
        let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let err = crate::tape::grad_check(
            &tensors,
            |tape, ids| {
                let typed = TransformerHeadIds::from_ordered(ids, 3);
                let x_id = tape.leaf(x.clone(), false);
                let prob = transformer_head_graph(
                    tape,
                    x_id,
                    &params,
                    &typed,
                    AttentionWindow::Banded(1),
                    false,
                    0,
                )?;
                let clipped = tape.clip(prob, 1e-7, 1.0 - 1e-7);
                let lg = tape.ln(clipped);
                Ok(tape.scalar_mul(lg, -1.0))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "gradient relative error {err}");
    }
}
