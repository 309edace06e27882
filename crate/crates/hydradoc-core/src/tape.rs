//! Reverse-mode differentiation over a Wengert list.
//!
//! A [`Tape`] records every primitive applied to tensors registered on it and
//! replays them in exact reverse order on [`Tape::backward`], accumulating
//! gradients additively. One tape is single-threaded by construction; parallel
//! training runs one tape per task over shared read-only parameter snapshots.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Id(usize);

#[derive(Debug, Clone, PartialEq)]
pub enum TapeError {
    ShapeMismatch(String),
    NonScalarLoss { rows: usize, cols: usize },
    InvalidDropout(f64),
    EmptyInput(String),
}

impl core::fmt::Display for TapeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TapeError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            TapeError::NonScalarLoss { rows, cols } => {
                write!(f, "backward requires a 1x1 loss, got {rows}x{cols}")
            }
            TapeError::InvalidDropout(p) => write!(f, "dropout rate {p} outside [0, 1)"),
            TapeError::EmptyInput(msg) => write!(f, "empty input: {msg}"),
        }
    }
}

impl core::error::Error for TapeError {}

enum Op {
    Leaf,
    MatMul(Id, Id),
    Add(Id, Id),
    /// `(m x n) + (1 x n)`, the bias pattern.
    AddRow(Id, Id),
    Mul(Id, Id),
    ScalarMul(Id, f64),
    AddScalar(Id),
    ConcatCols(Vec<Id>),
    Transpose(Id),
    Sigmoid(Id),
    Tanh(Id),
    Relu(Id),
    SoftmaxRows(Id),
    /// Entries where `keep` is zero were replaced by the fill constant.
    MaskedFill { x: Id, keep: Tensor },
    /// Masked average over rows; `None` averages every row.
    MeanPoolRows { x: Id, mask: Option<Vec<bool>> },
    /// Mask entries are 0.0 or the 1/(1-p) keep scale.
    Dropout { x: Id, mask: Tensor },
    Ln(Id),
    Clip { x: Id, lo: f64, hi: f64 },
    Row(Id, usize),
    StackRows(Vec<Id>),
    SumAll(Id),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a node; `None` for nodes that do not require gradients.
    pub fn get(&self, id: Id) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Register an input tensor. `requires_grad` marks trainable parameters;
    /// constants (data, masks) should pass `false`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Id {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: Id) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Id {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Id(self.nodes.len() - 1)
    }

    fn needs(&self, id: Id) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape(&self, id: Id) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Result<Id, TapeError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(TapeError::ShapeMismatch(alloc::format!(
                "matmul {ar}x{ac} @ {br}x{bc}"
            )));
        }
        let v = matmul(self.value(a), self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id, TapeError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TapeError::ShapeMismatch(alloc::format!(
                "add {}x{} + {}x{}",
                sa.0,
                sa.1,
                sb.0,
                sb.1
            )));
        }
        let v = Tensor::from_vec(
            sa.0,
            sa.1,
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), needs))
    }

    /// Add a `1 x n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Id, bias: Id) -> Result<Id, TapeError> {
        let (m, n) = self.shape(a);
        let sb = self.shape(bias);
        if sb != (1, n) {
            return Err(TapeError::ShapeMismatch(alloc::format!(
                "add_row {m}x{n} + {}x{}",
                sb.0,
                sb.1
            )));
        }
        let bias_row: Vec<f64> = self.value(bias).data().to_vec();
        let mut v = self.value(a).clone();
        for r in 0..m {
            for c in 0..n {
                let cur = v.get(r, c);
                v.set(r, c, cur + bias_row[c]);
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(v, Op::AddRow(a, bias), needs))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id, TapeError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TapeError::ShapeMismatch(alloc::format!(
                "mul {}x{} * {}x{}",
                sa.0,
                sa.1,
                sb.0,
                sb.1
            )));
        }
        let v = Tensor::from_vec(
            sa.0,
            sa.1,
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), needs))
    }

    pub fn scalar_mul(&mut self, a: Id, s: f64) -> Id {
        let v = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push(v, Op::ScalarMul(a, s), needs)
    }

    pub fn add_scalar(&mut self, a: Id, s: f64) -> Id {
        let v = self.value(a).map(|x| x + s);
        let needs = self.needs(a);
        self.push(v, Op::AddScalar(a), needs)
    }

    /// Concatenate along columns; inputs must share the row count.
    pub fn concat_cols(&mut self, parts: &[Id]) -> Result<Id, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::EmptyInput(String::from("concat of no tensors")));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(TapeError::ShapeMismatch(alloc::format!(
                    "concat_cols rows {rows} vs {r}"
                )));
            }
            cols += c;
        }
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let part = self.value(p);
                let pc = part.cols();
                for c in 0..pc {
                    v.set(r, off + c, part.get(r, c));
                }
                off += pc;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn transpose(&mut self, a: Id) -> Id {
        let v = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(v, Op::Transpose(a), needs)
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| 1.0 / (1.0 + libm::exp(-x)));
        let needs = self.needs(a);
        self.push(v, Op::Sigmoid(a), needs)
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        let v = self.value(a).map(libm::tanh);
        let needs = self.needs(a);
        self.push(v, Op::Tanh(a), needs)
    }

    pub fn relu(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let needs = self.needs(a);
        self.push(v, Op::Relu(a), needs)
    }

    /// Row-wise softmax with the usual max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: Id) -> Id {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut v = Tensor::zeros(m, n);
        for r in 0..m {
            let row = x.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let mut exps = vec![0.0; n];
            for (c, &val) in row.iter().enumerate() {
                let e = libm::exp(val - mx);
                exps[c] = e;
                denom += e;
            }
            for c in 0..n {
                v.set(r, c, exps[c] / denom);
            }
        }
        let needs = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), needs)
    }

    /// Replace entries where `keep` is zero with `fill`. `keep` must be a
    /// 0/1 tensor of the same shape; it is captured as a constant.
    pub fn masked_fill(&mut self, a: Id, keep: &Tensor, fill: f64) -> Result<Id, TapeError> {
        if self.shape(a) != keep.shape() {
            return Err(TapeError::ShapeMismatch(alloc::format!(
                "masked_fill value {:?} vs mask {:?}",
                self.shape(a),
                keep.shape()
            )));
        }
        let x = self.value(a);
        let v = Tensor::from_vec(
            x.rows(),
            x.cols(),
            x.data()
                .iter()
                .zip(keep.data())
                .map(|(&xv, &k)| if k != 0.0 { xv } else { fill })
                .collect(),
        );
        let needs = self.needs(a);
        Ok(self.push(
            v,
            Op::MaskedFill {
                x: a,
                keep: keep.clone(),
            },
            needs,
        ))
    }

    /// Average over rows, optionally restricted to rows where `mask` is true.
    /// Output is `1 x cols`.
    pub fn mean_pool_rows(&mut self, a: Id, mask: Option<&[bool]>) -> Result<Id, TapeError> {
        let (m, n) = self.shape(a);
        let mask_vec = match mask {
            Some(ms) => {
                if ms.len() != m {
                    return Err(TapeError::ShapeMismatch(alloc::format!(
                        "mean_pool mask length {} vs {m} rows",
                        ms.len()
                    )));
                }
                Some(ms.to_vec())
            }
            None => None,
        };
        let count = match &mask_vec {
            Some(ms) => ms.iter().filter(|&&b| b).count(),
            None => m,
        };
        if count == 0 {
            return Err(TapeError::EmptyInput(String::from(
                "mean_pool over zero unmasked rows",
            )));
        }
        let x = self.value(a);
        let mut acc = vec![0.0; n];
        for r in 0..m {
            let include = mask_vec.as_ref().map_or(true, |ms| ms[r]);
            if include {
                for (a, &xv) in acc.iter_mut().zip(x.row(r)) {
                    *a += xv;
                }
            }
        }
        let inv = 1.0 / count as f64;
        let v = Tensor::row_vector(acc.into_iter().map(|s| s * inv).collect());
        let needs = self.needs(a);
        Ok(self.push(v, Op::MeanPoolRows { x: a, mask: mask_vec }, needs))
    }

    /// Inverted dropout: in training mode zero each entry with probability `p`
    /// and scale survivors by 1/(1-p); identity in eval mode. The mask is
    /// drawn from a generator seeded only by `seed`, so a fixed seed gives a
    /// fixed mask regardless of call order.
    pub fn dropout(&mut self, a: Id, p: f64, training: bool, seed: u64) -> Result<Id, TapeError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TapeError::InvalidDropout(p));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let (m, n) = self.shape(a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (1.0 - p);
        let mask = Tensor::from_vec(
            m,
            n,
            (0..m * n)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
                .collect(),
        );
        let x = self.value(a);
        let v = Tensor::from_vec(
            m,
            n,
            x.data()
                .iter()
                .zip(mask.data())
                .map(|(&xv, &mv)| xv * mv)
                .collect(),
        );
        let needs = self.needs(a);
        Ok(self.push(v, Op::Dropout { x: a, mask }, needs))
    }

    pub fn ln(&mut self, a: Id) -> Id {
        let v = self.value(a).map(libm::log);
        let needs = self.needs(a);
        self.push(v, Op::Ln(a), needs)
    }

    /// Clamp into `[lo, hi]`; gradient passes through strictly inside the band.
    pub fn clip(&mut self, a: Id, lo: f64, hi: f64) -> Id {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let needs = self.needs(a);
        self.push(v, Op::Clip { x: a, lo, hi }, needs)
    }

    /// Extract row `r` as a `1 x n` tensor.
    pub fn row(&mut self, a: Id, r: usize) -> Result<Id, TapeError> {
        let (m, n) = self.shape(a);
        if r >= m {
            return Err(TapeError::ShapeMismatch(alloc::format!(
                "row {r} of a {m}x{n} tensor"
            )));
        }
        let v = Tensor::row_vector(self.value(a).row(r).to_vec());
        let needs = self.needs(a);
        Ok(self.push(v, Op::Row(a, r), needs))
    }

    /// Stack `1 x n` rows into an `m x n` matrix.
    pub fn stack_rows(&mut self, rows: &[Id]) -> Result<Id, TapeError> {
        if rows.is_empty() {
            return Err(TapeError::EmptyInput(String::from("stack of no rows")));
        }
        let n = self.shape(rows[0]).1;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let (rr, rc) = self.shape(r);
            if rr != 1 || rc != n {
                return Err(TapeError::ShapeMismatch(alloc::format!(
                    "stack_rows expected 1x{n}, got {rr}x{rc}"
                )));
            }
            data.extend_from_slice(self.value(r).data());
        }
        let v = Tensor::from_vec(rows.len(), n, data);
        let needs = rows.iter().any(|&r| self.needs(r));
        Ok(self.push(v, Op::StackRows(rows.to_vec()), needs))
    }

    pub fn sum_all(&mut self, a: Id) -> Id {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let needs = self.needs(a);
        self.push(v, Op::SumAll(a), needs)
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; leaves
    /// registered with `requires_grad` that the loss never reached get zeros.
    pub fn backward(&mut self, loss: Id) -> Result<Gradients, TapeError> {
        let (lr, lc) = self.shape(loss);
        if (lr, lc) != (1, 1) {
            return Err(TapeError::NonScalarLoss { rows: lr, cols: lc });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        // Unreached trainable leaves still get a zero gradient entry.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                let (r, c) = node.value.shape();
                grads[i] = Some(Tensor::zeros(r, c));
            }
        }
        // Non-grad nodes keep None so frozen tensors have no gradient entry.
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], id: Id, inc: Tensor| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(inc.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(inc),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.nodes[a.0].needs_grad {
                    add_to(grads, *a, matmul_bt(g, bv));
                }
                if self.nodes[b.0].needs_grad {
                    add_to(grads, *b, matmul_at(av, g));
                }
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                add_to(grads, *a, g.clone());
                if self.nodes[bias.0].needs_grad {
                    let (m, n) = g.shape();
                    let mut col_sum = vec![0.0; n];
                    for r in 0..m {
                        for (s, &gv) in col_sum.iter_mut().zip(g.row(r)) {
                            *s += gv;
                        }
                    }
                    add_to(grads, *bias, Tensor::row_vector(col_sum));
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if self.nodes[a.0].needs_grad {
                    let inc = Tensor::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                    );
                    add_to(grads, *a, inc);
                }
                if self.nodes[b.0].needs_grad {
                    let inc = Tensor::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                    );
                    add_to(grads, *b, inc);
                }
            }
            Op::ScalarMul(a, s) => add_to(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => add_to(grads, *a, g.clone()),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].value.cols();
                    if self.nodes[p.0].needs_grad {
                        let mut inc = Tensor::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            for c in 0..pc {
                                inc.set(r, c, g.get(r, off + c));
                            }
                        }
                        add_to(grads, p, inc);
                    }
                    off += pc;
                }
            }
            Op::Transpose(a) => add_to(grads, *a, g.transpose()),
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let inc = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect(),
                );
                add_to(grads, *a, inc);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let inc = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect(),
                );
                add_to(grads, *a, inc);
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                let inc = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
                add_to(grads, *a, inc);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (m, n) = y.shape();
                let mut inc = Tensor::zeros(m, n);
                for r in 0..m {
                    let yrow = y.row(r);
                    let grow = g.row(r);
                    let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                    for c in 0..n {
                        inc.set(r, c, yrow[c] * (grow[c] - dot));
                    }
                }
                add_to(grads, *a, inc);
            }
            Op::MaskedFill { x, keep } => {
                let inc = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(keep.data())
                        .map(|(gv, kv)| if *kv != 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
                add_to(grads, *x, inc);
            }
            Op::MeanPoolRows { x, mask } => {
                let (m, n) = self.nodes[x.0].value.shape();
                let count = match mask {
                    Some(ms) => ms.iter().filter(|&&b| b).count(),
                    None => m,
                };
                let inv = 1.0 / count as f64;
                let mut inc = Tensor::zeros(m, n);
                for r in 0..m {
                    let include = mask.as_ref().map_or(true, |ms| ms[r]);
                    if include {
                        for c in 0..n {
                            inc.set(r, c, g.get(0, c) * inv);
                        }
                    }
                }
                add_to(grads, *x, inc);
            }
            Op::Dropout { x, mask } => {
                let inc = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(mask.data())
                        .map(|(gv, mv)| gv * mv)
                        .collect(),
                );
                add_to(grads, *x, inc);
            }
            Op::Ln(a) => {
                let x = &self.nodes[a.0].value;
                let inc = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(x.data()).map(|(gv, xv)| gv / xv).collect(),
                );
                add_to(grads, *a, inc);
            }
            Op::Clip { x, lo, hi } => {
                let xv = &self.nodes[x.0].value;
                let inc = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, v)| if *v > *lo && *v < *hi { *gv } else { 0.0 })
                        .collect(),
                );
                add_to(grads, *x, inc);
            }
            Op::Row(a, r) => {
                let (m, n) = self.nodes[a.0].value.shape();
                let mut inc = Tensor::zeros(m, n);
                for c in 0..n {
                    inc.set(*r, c, g.get(0, c));
                }
                add_to(grads, *a, inc);
            }
            Op::StackRows(rows) => {
                for (r, &id) in rows.iter().enumerate() {
                    if self.nodes[id.0].needs_grad {
                        add_to(grads, id, Tensor::row_vector(g.row(r).to_vec()));
                    }
                }
            }
            Op::SumAll(a) => {
                let (m, n) = self.nodes[a.0].value.shape();
                let gv = g.item();
                add_to(grads, *a, Tensor::from_vec(m, n, vec![gv; m * n]));
            }
        }
    }
}

/// Max relative error between reverse-mode gradients and central differences
/// `(f(x+h e_i) - f(x-h e_i)) / 2h`, with denominator `max(|a|, |b|, 1e-8)`.
///
/// `build` must construct the same scalar loss from the leaves it is given;
/// it runs once per perturbed coordinate, so keep it pure.
pub fn grad_check<F>(params: &[Tensor], build: F, h: f64) -> Result<f64, TapeError>
where
    F: Fn(&mut Tape, &[Id]) -> Result<Id, TapeError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, TapeError> {
        let mut tape = Tape::new();
        let ids: Vec<Id> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let ids: Vec<Id> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("requires_grad leaf has a gradient");
        for j in 0..params[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let denom = libm::fabs(a).max(libm::fabs(numeric)).max(1e-8);
            worst = worst.max(libm::fabs(a - numeric) / denom);
        }
    }
    Ok(worst)
}
