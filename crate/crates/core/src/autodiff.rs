//! Reverse-mode differentiation on a tape, with exactly the operations the
//! growth model trains through.
//!
//! Nodes live in an arena owned by the [`Tape`]; a [`NodeId`] is an index plus
//! an epoch so references cannot outlive [`Tape::clear`]. Parents always have
//! smaller indices than their consumers, so one reverse sweep visits each node
//! exactly once and gradient contributions from multiple consumers add up.
//!
//! A tape is confined to one thread; independent tapes may run in parallel.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::math::{dot_lanes_8, exp_nonpositive, max_lanes_8, sum_lanes_8};
use crate::matrix::{matmul_acc, matmul_tn_acc, Matrix};
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("backward already ran on this tape; clear it first")]
    BackwardAlreadyRan,
    #[error("node id from a cleared tape generation")]
    StaleNode,
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a tape node. Invalidated by [`Tape::clear`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    index: u32,
    epoch: u32,
}

enum Op<S> {
    /// Input that never receives a gradient.
    Constant,
    /// Differentiable input (parameters, or leaves under test).
    Var,
    Matmul { a: usize, b: usize },
    CosineMatrix { q: usize, k: usize, q_hat: Matrix<S>, k_hat: Matrix<S>, q_inv: Vec<S>, k_inv: Vec<S> },
    SoftmaxRows { input: usize, scale: S },
    Relu { input: usize },
    MulMask { input: usize, weights: Matrix<S> },
    ScaleRows { input: usize, factors: Vec<S> },
    ConcatCols { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddBiasRow { input: usize, bias: usize },
    Scale { input: usize, factor: S },
    MaskedSqMean { input: usize, target: Matrix<S>, weights: Matrix<S>, count: S },
    Sum { input: usize },
    LinearComb { terms: Vec<(usize, S)> },
}

struct NodeData<S> {
    value: Matrix<S>,
    grad: Option<Matrix<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Size-bucketed free list. Attention tapes cycle the same handful of buffer
/// shapes thousands of times; recycling them keeps the pages warm instead of
/// bouncing them through the allocator.
struct BufferPool<S> {
    buckets: HashMap<usize, Vec<Vec<S>>>,
}

const POOL_BUCKET_CAP: usize = 64;

impl<S: Scalar> BufferPool<S> {
    fn new() -> Self {
        BufferPool { buckets: HashMap::new() }
    }

    fn take(&mut self, len: usize) -> Option<Vec<S>> {
        self.buckets.get_mut(&len).and_then(Vec::pop)
    }

    fn put(&mut self, buffer: Vec<S>) {
        let bucket = self.buckets.entry(buffer.len()).or_default();
        if bucket.len() < POOL_BUCKET_CAP {
            bucket.push(buffer);
        }
    }
}

/// Records the forward pass; [`Tape::backward`] replays it in reverse.
pub struct Tape<S> {
    nodes: Vec<NodeData<S>>,
    rng: ChaCha8Rng,
    epoch: u32,
    backward_ran: bool,
    pool: BufferPool<S>,
}

impl<S: Scalar> Tape<S> {
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
            backward_ran: false,
            pool: BufferPool::new(),
        }
    }

    /// Drop all nodes, recycling their buffers. Ids handed out so far become
    /// stale; the dropout rng keeps its state.
    pub fn clear(&mut self) {
        let Tape { nodes, pool, .. } = self;
        for node in nodes.drain(..) {
            pool.put(node.value.into_vec());
            if let Some(g) = node.grad {
                pool.put(g.into_vec());
            }
            match node.op {
                Op::CosineMatrix { q_hat, k_hat, .. } => {
                    pool.put(q_hat.into_vec());
                    pool.put(k_hat.into_vec());
                }
                Op::MulMask { weights, .. } => pool.put(weights.into_vec()),
                Op::MaskedSqMean { target, weights, .. } => {
                    pool.put(target.into_vec());
                    pool.put(weights.into_vec());
                }
                _ => {}
            }
        }
        self.epoch = self.epoch.wrapping_add(1);
        self.backward_ran = false;
    }

    /// Recycled buffer with unspecified contents; every cell must be written.
    fn alloc_dirty(&mut self, rows: usize, cols: usize) -> Matrix<S> {
        match self.pool.take(rows * cols) {
            Some(buf) => Matrix::from_vec(rows, cols, buf),
            None => Matrix::zeros(rows, cols),
        }
    }

    fn alloc_zeros(&mut self, rows: usize, cols: usize) -> Matrix<S> {
        let mut m = self.alloc_dirty(rows, cols);
        m.data_mut().fill(S::zero());
        m
    }

    fn alloc_copy(&mut self, src: &Matrix<S>) -> Matrix<S> {
        let mut m = self.alloc_dirty(src.rows(), src.cols());
        m.data_mut().copy_from_slice(src.data());
        m
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<S>, requires_grad: bool, op: Op<S>) -> NodeId {
        let index = self.nodes.len() as u32;
        self.nodes.push(NodeData { value, grad: None, requires_grad, op });
        NodeId { index, epoch: self.epoch }
    }

    fn idx(&self, id: NodeId) -> Result<usize> {
        if id.epoch != self.epoch {
            return Err(AutodiffError::StaleNode);
        }
        Ok(id.index as usize)
    }

    fn needs_grad(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix<S>) -> NodeId {
        self.push(value, false, Op::Constant)
    }

    /// Differentiable input; receives a gradient after [`Tape::backward`].
    pub fn var(&mut self, value: Matrix<S>) -> NodeId {
        self.push(value, true, Op::Var)
    }

    pub fn value(&self, id: NodeId) -> &Matrix<S> {
        let i = self.idx(id).expect("stale node id");
        &self.nodes[i].value
    }

    /// Gradient of the loss w.r.t. this node, if backward has run and the
    /// node participates in differentiation.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix<S>> {
        let i = self.idx(id).expect("stale node id");
        self.nodes[i].grad.as_ref()
    }

    /// `a · b` with the usual product rule on the way back.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.cols() != bv.rows() {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: av.shape(), rhs: bv.shape() });
        }
        let value = crate::matrix::matmul(av, bv);
        let rg = self.needs_grad(ai) || self.needs_grad(bi);
        Ok(self.push(value, rg, Op::Matmul { a: ai, b: bi }))
    }

    /// Pairwise cosine similarities between rows of `q` and rows of `k`.
    /// Zero-norm rows produce zero similarity and zero gradient. Entries are
    /// clamped to [-1, 1] to absorb round-off from the normalization.
    pub fn cosine_matrix(&mut self, q: NodeId, k: NodeId) -> Result<NodeId> {
        let (qi, ki) = (self.idx(q)?, self.idx(k)?);
        let (qv, kv) = (&self.nodes[qi].value, &self.nodes[ki].value);
        if qv.cols() != kv.cols() || qv.cols() == 0 {
            return Err(AutodiffError::ShapeMismatch { op: "cosine_matrix", lhs: qv.shape(), rhs: kv.shape() });
        }
        let (q_hat, q_inv) = normalize_rows(qv);
        let (k_hat, k_inv) = normalize_rows(kv);
        let kt = k_hat.transpose();
        let mut value = crate::matrix::matmul(&q_hat, &kt);
        let one = S::one();
        for v in value.data_mut() {
            *v = (*v).min(one).max(-one);
        }
        let rg = self.needs_grad(qi) || self.needs_grad(ki);
        Ok(self.push(value, rg, Op::CosineMatrix { q: qi, k: ki, q_hat, k_hat, q_inv, k_inv }))
    }

    /// Row-wise softmax, numerically stabilized by max subtraction.
    pub fn softmax_rows(&mut self, s: NodeId) -> NodeId {
        self.softmax_rows_scaled(s, S::one())
    }

    /// Row-wise softmax of `scale * s`; the scale folds into the stabilized
    /// exponent so no intermediate matrix is materialized.
    pub fn softmax_rows_scaled(&mut self, s: NodeId, scale: S) -> NodeId {
        let si = self.idx(s).expect("stale node id");
        let sv = &self.nodes[si].value;
        let mut value = sv.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = max_lanes_8(row);
            for v in row.iter_mut() {
                *v = exp_nonpositive(scale * (*v - max));
            }
            let inv = S::one() / sum_lanes_8(row);
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let rg = self.needs_grad(si);
        self.push(value, rg, Op::SoftmaxRows { input: si, scale })
    }

    /// Elementwise `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xi = self.idx(x).expect("stale node id");
        let value = self.nodes[xi].value.map(|v| v.max(S::zero()));
        let rg = self.needs_grad(xi);
        self.push(value, rg, Op::Relu { input: xi })
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1-rate); evaluation
    /// mode is the identity. Draws from the tape's seeded rng.
    pub fn dropout(&mut self, x: NodeId, rate: f64, training: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let xi = self.idx(x)?;
        let (rows, cols) = self.nodes[xi].value.shape();
        let weights = draw_dropout_weights(rows, cols, rate, &mut self.rng);
        self.mul_mask(x, weights)
    }

    /// Elementwise product with a constant weight matrix (realized dropout
    /// masks, frozen masks in gradient checks).
    pub fn mul_mask(&mut self, x: NodeId, weights: Matrix<S>) -> Result<NodeId> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.shape() != weights.shape() {
            return Err(AutodiffError::ShapeMismatch { op: "mul_mask", lhs: xv.shape(), rhs: weights.shape() });
        }
        let mut value = xv.clone();
        for (v, &w) in value.data_mut().iter_mut().zip(weights.data()) {
            *v *= w;
        }
        let rg = self.needs_grad(xi);
        Ok(self.push(value, rg, Op::MulMask { input: xi, weights }))
    }

    /// Multiply each row by a constant factor (the per-step row-skip mask).
    pub fn scale_rows(&mut self, x: NodeId, factors: Vec<S>) -> Result<NodeId> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.rows() != factors.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_rows",
                lhs: xv.shape(),
                rhs: (factors.len(), 1),
            });
        }
        let mut value = xv.clone();
        for (r, &f) in factors.iter().enumerate() {
            for v in value.row_mut(r) {
                *v *= f;
            }
        }
        let rg = self.needs_grad(xi);
        Ok(self.push(value, rg, Op::ScaleRows { input: xi, factors }))
    }

    /// `[a | b]` columnwise; the gradient splits back.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.rows() != bv.rows() {
            return Err(AutodiffError::ShapeMismatch { op: "concat_cols", lhs: av.shape(), rhs: bv.shape() });
        }
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut value = Matrix::zeros(n, ca + cb);
        for r in 0..n {
            value.row_mut(r)[..ca].copy_from_slice(av.row(r));
        }
        // Second borrow of self.nodes ended; fill the b half.
        let bv = &self.nodes[bi].value;
        for r in 0..n {
            value.row_mut(r)[ca..].copy_from_slice(bv.row(r));
        }
        let rg = self.needs_grad(ai) || self.needs_grad(bi);
        Ok(self.push(value, rg, Op::ConcatCols { a: ai, b: bi }))
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(AutodiffError::ShapeMismatch { op: "add", lhs: av.shape(), rhs: bv.shape() });
        }
        let mut value = av.clone();
        for (v, &w) in value.data_mut().iter_mut().zip(bv.data()) {
            *v += w;
        }
        let rg = self.needs_grad(ai) || self.needs_grad(bi);
        Ok(self.push(value, rg, Op::Add { a: ai, b: bi }))
    }

    /// Add a 1-row bias to every row of `x`.
    pub fn add_bias_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xi, bi) = (self.idx(x)?, self.idx(bias)?);
        let (xv, bv) = (&self.nodes[xi].value, &self.nodes[bi].value);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(AutodiffError::ShapeMismatch { op: "add_bias_row", lhs: xv.shape(), rhs: bv.shape() });
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (v, &b) in value.row_mut(r).iter_mut().zip(self.nodes[bi].value.row(0)) {
                *v += b;
            }
        }
        let rg = self.needs_grad(xi) || self.needs_grad(bi);
        Ok(self.push(value, rg, Op::AddBiasRow { input: xi, bias: bi }))
    }

    /// Multiply by a constant scalar.
    pub fn scale(&mut self, x: NodeId, factor: S) -> NodeId {
        let xi = self.idx(x).expect("stale node id");
        let value = self.nodes[xi].value.map(|v| v * factor);
        let rg = self.needs_grad(xi);
        self.push(value, rg, Op::Scale { input: xi, factor })
    }

    /// Mean of `(x - target)^2` over the cells where `weights` is nonzero;
    /// zero when the mask selects nothing, so empty masks still train.
    pub fn masked_sq_mean(&mut self, x: NodeId, target: &Matrix<S>, weights: &Matrix<S>) -> Result<NodeId> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.shape() != target.shape() {
            return Err(AutodiffError::ShapeMismatch { op: "masked_sq_mean", lhs: xv.shape(), rhs: target.shape() });
        }
        if xv.shape() != weights.shape() {
            return Err(AutodiffError::ShapeMismatch { op: "masked_sq_mean", lhs: xv.shape(), rhs: weights.shape() });
        }
        let mut acc = S::zero();
        let mut count = S::zero();
        for ((&v, &t), &w) in xv.data().iter().zip(target.data()).zip(weights.data()) {
            let d = v - t;
            acc += w * d * d;
            count += w;
        }
        let mean = if count > S::zero() { acc / count } else { S::zero() };
        let rg = self.needs_grad(xi);
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![mean]),
            rg,
            Op::MaskedSqMean { input: xi, target: target.clone(), weights: weights.clone(), count },
        ))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let xi = self.idx(x).expect("stale node id");
        let total: S = self.nodes[xi].value.data().iter().copied().sum();
        let rg = self.needs_grad(xi);
        self.push(Matrix::from_vec(1, 1, vec![total]), rg, Op::Sum { input: xi })
    }

    /// Weighted sum of scalar nodes (loss combination, variant averaging).
    pub fn linear_comb(&mut self, terms: &[(NodeId, S)]) -> Result<NodeId> {
        let mut resolved = Vec::with_capacity(terms.len());
        let mut total = S::zero();
        let mut rg = false;
        for &(id, coeff) in terms {
            let i = self.idx(id)?;
            let v = &self.nodes[i].value;
            if v.shape() != (1, 1) {
                return Err(AutodiffError::NonScalarLoss(v.shape()));
            }
            total += coeff * v.get(0, 0);
            rg |= self.needs_grad(i);
            resolved.push((i, coeff));
        }
        Ok(self.push(Matrix::from_vec(1, 1, vec![total]), rg, Op::LinearComb { terms: resolved }))
    }

    /// Reverse sweep from a scalar loss. Every differentiable node reachable
    /// from the loss gets its gradient; repeat calls without `clear` are
    /// rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(self.nodes[li].value.shape()));
        }
        if self.backward_ran {
            return Err(AutodiffError::BackwardAlreadyRan);
        }
        self.backward_ran = true;
        self.nodes[li].grad = Some(Matrix::filled(1, 1, S::one()));

        for i in (0..=li).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || node.grad.is_none() {
                continue;
            }
            let g = node.grad.as_ref().unwrap();
            match &node.op {
                Op::Constant | Op::Var => {}
                Op::Matmul { a, b } => backward_matmul(before, *a, *b, g),
                Op::CosineMatrix { q, k, q_hat, k_hat, q_inv, k_inv } => {
                    backward_cosine(before, *q, *k, q_hat, k_hat, q_inv, k_inv, g)
                }
                Op::SoftmaxRows { input, scale } => {
                    backward_softmax(before, *input, *scale, &node.value, g)
                }
                Op::Relu { input } => {
                    if before[*input].requires_grad {
                        let y = &node.value;
                        let gp = grad_slot(&mut before[*input], y.shape());
                        for ((o, &yv), &gv) in gp.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                            if yv > S::zero() {
                                *o += gv;
                            }
                        }
                    }
                }
                Op::MulMask { input, weights } => {
                    if before[*input].requires_grad {
                        let gp = grad_slot(&mut before[*input], weights.shape());
                        for ((o, &w), &gv) in gp.data_mut().iter_mut().zip(weights.data()).zip(g.data()) {
                            *o += gv * w;
                        }
                    }
                }
                Op::ScaleRows { input, factors } => {
                    if before[*input].requires_grad {
                        let shape = node.value.shape();
                        let gp = grad_slot(&mut before[*input], shape);
                        for (r, &f) in factors.iter().enumerate() {
                            let grow = &g.data()[r * shape.1..(r + 1) * shape.1];
                            for (o, &gv) in gp.row_mut(r).iter_mut().zip(grow) {
                                *o += gv * f;
                            }
                        }
                    }
                }
                Op::ConcatCols { a, b } => backward_concat(before, *a, *b, g),
                Op::Add { a, b } => {
                    for &p in &[*a, *b] {
                        if before[p].requires_grad {
                            let gp = grad_slot(&mut before[p], g.shape());
                            for (o, &gv) in gp.data_mut().iter_mut().zip(g.data()) {
                                *o += gv;
                            }
                        }
                    }
                }
                Op::AddBiasRow { input, bias } => {
                    if before[*input].requires_grad {
                        let gp = grad_slot(&mut before[*input], g.shape());
                        for (o, &gv) in gp.data_mut().iter_mut().zip(g.data()) {
                            *o += gv;
                        }
                    }
                    if before[*bias].requires_grad {
                        let cols = g.cols();
                        let gp = grad_slot(&mut before[*bias], (1, cols));
                        for r in 0..g.rows() {
                            let grow = &g.data()[r * cols..(r + 1) * cols];
                            for (o, &gv) in gp.row_mut(0).iter_mut().zip(grow) {
                                *o += gv;
                            }
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    if before[*input].requires_grad {
                        let f = *factor;
                        let gp = grad_slot(&mut before[*input], g.shape());
                        for (o, &gv) in gp.data_mut().iter_mut().zip(g.data()) {
                            *o += gv * f;
                        }
                    }
                }
                Op::MaskedSqMean { input, target, weights, count } => {
                    if before[*input].requires_grad && *count > S::zero() {
                        let gv = g.get(0, 0);
                        let coeff = (S::one() + S::one()) * gv / *count;
                        let parent = &mut before[*input];
                        let shape = parent.value.shape();
                        let NodeData { value, grad, .. } = parent;
                        let gp = ensure_grad(grad, shape);
                        for (((o, &v), &t), &w) in gp
                            .data_mut()
                            .iter_mut()
                            .zip(value.data())
                            .zip(target.data())
                            .zip(weights.data())
                        {
                            *o += coeff * w * (v - t);
                        }
                    }
                }
                Op::Sum { input } => {
                    if before[*input].requires_grad {
                        let gv = g.get(0, 0);
                        let shape = before[*input].value.shape();
                        let gp = grad_slot(&mut before[*input], shape);
                        for o in gp.data_mut() {
                            *o += gv;
                        }
                    }
                }
                Op::LinearComb { terms } => {
                    let gv = g.get(0, 0);
                    for &(p, coeff) in terms {
                        if before[p].requires_grad {
                            let gp = grad_slot(&mut before[p], (1, 1));
                            gp.data_mut()[0] += coeff * gv;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn ensure_grad<S: Scalar>(slot: &mut Option<Matrix<S>>, shape: (usize, usize)) -> &mut Matrix<S> {
    slot.get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn grad_slot<S: Scalar>(node: &mut NodeData<S>, shape: (usize, usize)) -> &mut Matrix<S> {
    ensure_grad(&mut node.grad, shape)
}

fn backward_matmul<S: Scalar>(nodes: &mut [NodeData<S>], a: usize, b: usize, g: &Matrix<S>) {
    // da += g . b^T
    if nodes[a].requires_grad {
        let bt = nodes[b].value.transpose();
        let shape = nodes[a].value.shape();
        let ga = grad_slot(&mut nodes[a], shape);
        matmul_acc(ga, g, &bt);
    }
    // db += a^T . g
    if nodes[b].requires_grad {
        if a == b {
            let NodeData { value, grad, .. } = &mut nodes[a];
            let shape = (value.cols(), g.cols());
            let gb = ensure_grad(grad, shape);
            matmul_tn_acc(gb, value, g);
        } else {
            let (av, bnode) = pair(nodes, a, b);
            let gb = grad_slot(bnode, (av.cols(), g.cols()));
            matmul_tn_acc(gb, av, g);
        }
    }
}

/// Immutable view of node `i`'s value together with mutable access to node
/// `j`; the two must differ.
fn pair<S: Scalar>(nodes: &mut [NodeData<S>], i: usize, j: usize) -> (&Matrix<S>, &mut NodeData<S>) {
    assert_ne!(i, j);
    if i < j {
        let (lo, hi) = nodes.split_at_mut(j);
        (&lo[i].value, &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(i);
        (&hi[0].value, &mut lo[j])
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_cosine<S: Scalar>(
    nodes: &mut [NodeData<S>],
    q: usize,
    k: usize,
    q_hat: &Matrix<S>,
    k_hat: &Matrix<S>,
    q_inv: &[S],
    k_inv: &[S],
    g: &Matrix<S>,
) {
    let d = q_hat.cols();
    if nodes[q].requires_grad {
        // dq_hat = g . k_hat, then pull back through the row normalization.
        let mut dqh = Matrix::zeros(q_hat.rows(), d);
        matmul_acc(&mut dqh, g, k_hat);
        let gq = grad_slot(&mut nodes[q], (q_hat.rows(), d));
        normalize_backward(gq, &dqh, q_hat, q_inv);
    }
    if nodes[k].requires_grad {
        let mut dkh = Matrix::zeros(k_hat.rows(), d);
        matmul_tn_acc(&mut dkh, g, q_hat);
        let gk = grad_slot(&mut nodes[k], (k_hat.rows(), d));
        normalize_backward(gk, &dkh, k_hat, k_inv);
    }
}

/// Accumulate the gradient through `x_hat = x / norm`:
/// `dx_i = inv_i * (dxh_i - (dxh_i . xh_i) xh_i)`, zero for zero-norm rows.
fn normalize_backward<S: Scalar>(out: &mut Matrix<S>, dxh: &Matrix<S>, x_hat: &Matrix<S>, inv: &[S]) {
    for r in 0..x_hat.rows() {
        let iv = inv[r];
        if iv == S::zero() {
            continue;
        }
        let dh = dxh.row(r);
        let xh = x_hat.row(r);
        let mut dot = S::zero();
        for (&a, &b) in dh.iter().zip(xh) {
            dot += a * b;
        }
        for ((o, &a), &b) in out.row_mut(r).iter_mut().zip(dh).zip(xh) {
            *o += iv * (a - dot * b);
        }
    }
}

fn backward_softmax<S: Scalar>(nodes: &mut [NodeData<S>], input: usize, scale: S, y: &Matrix<S>, g: &Matrix<S>) {
    if !nodes[input].requires_grad {
        return;
    }
    let gp = grad_slot(&mut nodes[input], y.shape());
    let cols = y.cols();
    for r in 0..y.rows() {
        let yr = y.row(r);
        let gr = &g.data()[r * cols..(r + 1) * cols];
        let s = dot_lanes_8(gr, yr);
        for ((o, &gv), &yv) in gp.row_mut(r).iter_mut().zip(gr).zip(yr) {
            *o += scale * yv * (gv - s);
        }
    }
}

fn backward_concat<S: Scalar>(nodes: &mut [NodeData<S>], a: usize, b: usize, g: &Matrix<S>) {
    let ca = nodes[a].value.cols();
    let cb = nodes[b].value.cols();
    if nodes[a].requires_grad {
        let rows = nodes[a].value.rows();
        let gp = grad_slot(&mut nodes[a], (rows, ca));
        for r in 0..rows {
            let grow = &g.data()[r * (ca + cb)..r * (ca + cb) + ca];
            for (o, &gv) in gp.row_mut(r).iter_mut().zip(grow) {
                *o += gv;
            }
        }
    }
    if nodes[b].requires_grad {
        let rows = nodes[b].value.rows();
        let gp = grad_slot(&mut nodes[b], (rows, cb));
        for r in 0..rows {
            let grow = &g.data()[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
            for (o, &gv) in gp.row_mut(r).iter_mut().zip(grow) {
                *o += gv;
            }
        }
    }
}

/// Row-normalized copy plus the inverse norms (zero for zero rows).
fn normalize_rows<S: Scalar>(x: &Matrix<S>) -> (Matrix<S>, Vec<S>) {
    let mut out = x.clone();
    let mut inv = vec![S::zero(); x.rows()];
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mut sq = S::zero();
        for &v in row.iter() {
            sq += v * v;
        }
        if sq > S::zero() {
            let iv = S::one() / sq.sqrt();
            inv[r] = iv;
            for v in row.iter_mut() {
                *v *= iv;
            }
        }
    }
    (out, inv)
}

/// Multiplier matrix for inverted dropout: each entry is 0 with probability
/// `rate`, else `1/(1-rate)`. Row-major draw order, reproducible per seed.
pub fn draw_dropout_weights<S: Scalar>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Matrix<S> {
    let keep = S::from_f64(1.0 / (1.0 - rate)).unwrap();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        if rng.random::<f64>() >= rate {
            *v = keep;
        }
    }
    m
}

/// Per-row keep mask: entry is 0 (skip) with probability `skip_rate`, else 1.
/// Treated as a constant, never differentiated.
pub fn row_dropout_mask<S: Scalar>(n: usize, skip_rate: f64, rng: &mut ChaCha8Rng) -> Vec<S> {
    assert!((0.0..1.0).contains(&skip_rate), "skip rate must lie in [0, 1)");
    (0..n)
        .map(|_| if rng.random::<f64>() < skip_rate { S::zero() } else { S::one() })
        .collect()
}
