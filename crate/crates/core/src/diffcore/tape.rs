//! Eager tape for reverse-mode differentiation.
//!
//! Forward values are computed at record time; `backward` replays the op list
//! in reverse, accumulating adjoints in recording order so repeated runs are
//! bit-identical. Broadcasting is deliberately restricted to bias-add,
//! row-broadcast, and row-repeat: every op the pipeline needs is listed here
//! and each has a hand-written adjoint covered by finite-difference tests.

use super::param::{ParamId, ParamStore};
use super::tensor::{matmul_acc, matmul_t_acc, tmatmul_acc, Tensor};
use crate::error::{Error, Result};
use crate::real::{rl, Real};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Softplus,
    Tanh,
    Exp,
    Neg,
    Abs,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Hand-rolled op with its own adjoint, e.g. the splat renderer.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;
    /// Accumulate input adjoints given the output adjoint. `inputs` are the
    /// recorded input values, `output` the forward value, `grad_out` the
    /// upstream gradient; `grad_inputs` are zero-initialised buffers of the
    /// input sizes to accumulate into.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        grad_inputs: &mut [Vec<T>],
    );
}

enum Op<T: Real> {
    Unary {
        kind: UnaryKind,
        x: NodeId,
        out: NodeId,
    },
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    AddScalar {
        x: NodeId,
        out: NodeId,
    },
    MulScalar {
        x: NodeId,
        c: T,
        out: NodeId,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    /// a[m×k] · b[n×k]ᵀ
    MatmulT {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    BiasAdd {
        x: NodeId,
        b: NodeId,
        out: NodeId,
    },
    BroadcastRows {
        x: NodeId,
        out: NodeId,
    },
    RepeatRows {
        x: NodeId,
        k: usize,
        out: NodeId,
    },
    SumCols {
        x: NodeId,
        out: NodeId,
    },
    SumAll {
        x: NodeId,
        out: NodeId,
    },
    MeanAll {
        x: NodeId,
        out: NodeId,
    },
    ConcatCols {
        xs: Vec<NodeId>,
        out: NodeId,
    },
    SliceCols {
        x: NodeId,
        lo: usize,
        out: NodeId,
    },
    SliceRows {
        x: NodeId,
        lo: usize,
        out: NodeId,
    },
    Reshape {
        x: NodeId,
        out: NodeId,
    },
    SoftmaxRows {
        x: NodeId,
        out: NodeId,
    },
    /// Rows scaled to unit L2 norm; rows whose norm falls below `eps` emit
    /// `fallback` with zero gradient (their indices are kept for backward).
    NormalizeRows {
        x: NodeId,
        fallback_rows: Vec<u32>,
        out: NodeId,
    },
    /// Per-channel 2-D convolution with a fixed kernel, zero padding.
    Conv2dSame {
        x: NodeId,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        kernel: Vec<T>,
        out: NodeId,
    },
    Custom {
        op: Box<dyn CustomOp<T>>,
        inputs: Vec<NodeId>,
        out: NodeId,
    },
}

/// Recording tape. One forward graph per tape; single writer.
pub struct Tape<T: Real> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    param_nodes: Vec<(NodeId, ParamId)>,
    grads: Vec<Vec<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            param_nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push_value(&mut self, t: Tensor<T>) -> NodeId {
        self.values.push(t);
        self.grads.push(Vec::new());
        NodeId(self.values.len() - 1)
    }

    /// A constant leaf (ground truth, camera data, masks, ...).
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push_value(t)
    }

    /// A parameter leaf; `backward_into` accumulates its adjoint into the
    /// store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let node = self.push_value(store.value(id).clone());
        self.param_nodes.push((node, id));
        node
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Adjoint of a node after `backward_into`; empty slice if no gradient
    /// reached it.
    pub fn grad(&self, id: NodeId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    // ── ops ──────────────────────────────────────────────────────────

    pub fn unary(&mut self, kind: UnaryKind, x: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let data = xv.data().iter().map(|&v| unary_eval(kind, v)).collect();
        let out = self.push_value(Tensor::new(xv.shape().to_vec(), data).expect("unary"));
        self.ops.push(Op::Unary { kind, x, out });
        out
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Softplus, x)
    }
    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Abs, x)
    }
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "elementwise {:?}: {:?} vs {:?}",
                kind,
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            })
            .collect();
        let out = self.push_value(Tensor::new(av.shape().to_vec(), data)?);
        self.ops.push(Op::Binary { kind, a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let xv = &self.values[x.0];
        let data = xv.data().iter().map(|&v| v + c).collect();
        let out = self.push_value(Tensor::new(xv.shape().to_vec(), data).expect("add_scalar"));
        self.ops.push(Op::AddScalar { x, out });
        out
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let xv = &self.values[x.0];
        let data = xv.data().iter().map(|&v| v * c).collect();
        let out = self.push_value(Tensor::new(xv.shape().to_vec(), data).expect("mul_scalar"));
        self.ops.push(Op::MulScalar { x, c, out });
        out
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = av.dims2();
        let (k2, n) = bv.dims2();
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: {:?} · {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut data = vec![T::zero(); m * n];
        matmul_acc(av.data(), bv.data(), &mut data, m, k, n);
        let out = self.push_value(Tensor::new(vec![m, n], data)?);
        self.ops.push(Op::Matmul { a, b, out });
        Ok(out)
    }

    /// a[m×k] · b[n×k]ᵀ — the natural orientation for `[out×in]` weights.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = av.dims2();
        let (n, k2) = bv.dims2();
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_t: {:?} · {:?}ᵀ",
                av.shape(),
                bv.shape()
            )));
        }
        let mut data = vec![T::zero(); m * n];
        matmul_t_acc(av.data(), bv.data(), &mut data, m, k, n);
        let out = self.push_value(Tensor::new(vec![m, n], data)?);
        self.ops.push(Op::MatmulT { a, b, out });
        Ok(out)
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (&self.values[x.0], &self.values[b.0]);
        let (m, n) = xv.dims2();
        if bv.numel() != n {
            return Err(Error::Dimension(format!(
                "bias_add: {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (j, &bj) in bv.data().iter().enumerate() {
                data.push(xv.data()[i * n + j] + bj);
            }
        }
        let out = self.push_value(Tensor::new(xv.shape().to_vec(), data)?);
        self.ops.push(Op::BiasAdd { x, b, out });
        Ok(out)
    }

    /// Vector [n] stamped into `rows` identical rows.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> NodeId {
        let xv = &self.values[x.0];
        let n = xv.numel();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(xv.data());
        }
        let out = self.push_value(Tensor::new(vec![rows, n], data).expect("broadcast_rows"));
        self.ops.push(Op::BroadcastRows { x, out });
        out
    }

    /// Each row repeated `k` consecutive times: [m×n] → [m·k×n].
    pub fn repeat_rows(&mut self, x: NodeId, k: usize) -> NodeId {
        let xv = &self.values[x.0];
        let (m, n) = xv.dims2();
        let mut data = Vec::with_capacity(m * k * n);
        for i in 0..m {
            for _ in 0..k {
                data.extend_from_slice(xv.row(i));
            }
        }
        let out = self.push_value(Tensor::new(vec![m * k, n], data).expect("repeat_rows"));
        self.ops.push(Op::RepeatRows { x, k, out });
        out
    }

    /// Row sums: [m×n] → [m].
    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let (m, n) = xv.dims2();
        let mut data = Vec::with_capacity(m);
        for i in 0..m {
            let mut s = T::zero();
            for &v in &xv.data()[i * n..(i + 1) * n] {
                s += v;
            }
            data.push(s);
        }
        let out = self.push_value(Tensor::new(vec![m], data).expect("sum_cols"));
        self.ops.push(Op::SumCols { x, out });
        out
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in self.values[x.0].data() {
            s += v;
        }
        let out = self.push_value(Tensor::scalar(s));
        self.ops.push(Op::SumAll { x, out });
        out
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.values[x.0].numel();
        let mut s = T::zero();
        for &v in self.values[x.0].data() {
            s += v;
        }
        let out = self.push_value(Tensor::scalar(s / rl::<T>(n as f64)));
        self.ops.push(Op::MeanAll { x, out });
        out
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        assert!(!xs.is_empty());
        let m = self.values[xs[0].0].dims2().0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (mx, nx) = self.values[x.0].dims2();
            if mx != m {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts differ ({m} vs {mx})"
                )));
            }
            widths.push(nx);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                let xv = &self.values[x.0];
                data.extend_from_slice(&xv.data()[i * w..(i + 1) * w]);
            }
        }
        let out = self.push_value(Tensor::new(vec![m, total], data)?);
        self.ops.push(Op::ConcatCols {
            xs: xs.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let xv = &self.values[x.0];
        let (m, n) = xv.dims2();
        if lo >= hi || hi > n {
            return Err(Error::Dimension(format!(
                "slice_cols {lo}..{hi} of width {n}"
            )));
        }
        let w = hi - lo;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&xv.data()[i * n + lo..i * n + hi]);
        }
        let out = self.push_value(Tensor::new(vec![m, w], data)?);
        self.ops.push(Op::SliceCols { x, lo, out });
        Ok(out)
    }

    pub fn slice_rows(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let xv = &self.values[x.0];
        let (m, n) = xv.dims2();
        if lo >= hi || hi > m {
            return Err(Error::Dimension(format!(
                "slice_rows {lo}..{hi} of height {m}"
            )));
        }
        let data = xv.data()[lo * n..hi * n].to_vec();
        let out = self.push_value(Tensor::new(vec![hi - lo, n], data)?);
        self.ops.push(Op::SliceRows { x, lo, out });
        Ok(out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let xv = &self.values[x.0];
        let numel: usize = shape.iter().product();
        if numel != xv.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} → {:?}",
                xv.shape(),
                shape
            )));
        }
        let out = self.push_value(Tensor::new(shape, xv.data().to_vec())?);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let (m, n) = xv.dims2();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            let exps: Vec<T> = row
                .iter()
                .map(|&v| {
                    let e = (v - mx).exp();
                    denom += e;
                    e
                })
                .collect();
            data.extend(exps.into_iter().map(|e| e / denom));
        }
        let out = self.push_value(Tensor::new(xv.shape().to_vec(), data).expect("softmax"));
        self.ops.push(Op::SoftmaxRows { x, out });
        out
    }

    /// Unit-normalize each row; rows below `eps` in norm emit `fallback` and
    /// receive zero gradient. Returns the node and how many rows fell back.
    pub fn normalize_rows_guarded(
        &mut self,
        x: NodeId,
        eps: T,
        fallback: &[T],
    ) -> Result<(NodeId, usize)> {
        let xv = &self.values[x.0];
        let (m, n) = xv.dims2();
        if fallback.len() != n {
            return Err(Error::Dimension(format!(
                "normalize_rows fallback width {} vs {}",
                fallback.len(),
                n
            )));
        }
        let mut data = Vec::with_capacity(m * n);
        let mut fallback_rows = Vec::new();
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let norm = row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b).sqrt();
            if norm < eps {
                fallback_rows.push(i as u32);
                data.extend_from_slice(fallback);
            } else {
                data.extend(row.iter().map(|&v| v / norm));
            }
        }
        let count = fallback_rows.len();
        let out = self.push_value(Tensor::new(xv.shape().to_vec(), data)?);
        self.ops.push(Op::NormalizeRows {
            x,
            fallback_rows,
            out,
        });
        Ok((out, count))
    }

    /// Zero-padded same-size convolution of an [h·w × c] image with a fixed
    /// (non-learnable) kh×kw kernel, applied to each channel independently.
    pub fn conv2d_same(
        &mut self,
        x: NodeId,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        kernel: Vec<T>,
    ) -> Result<NodeId> {
        let xv = &self.values[x.0];
        let (m, c) = xv.dims2();
        if m != h * w {
            return Err(Error::Dimension(format!(
                "conv2d_same: {} rows vs {h}×{w} image",
                m
            )));
        }
        if kernel.len() != kh * kw || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Dimension("conv2d_same: bad kernel".into()));
        }
        let data = conv2d_same_eval(xv.data(), h, w, c, kh, kw, &kernel);
        let out = self.push_value(Tensor::new(xv.shape().to_vec(), data)?);
        self.ops.push(Op::Conv2dSame {
            x,
            h,
            w,
            kh,
            kw,
            kernel,
            out,
        });
        Ok(out)
    }

    /// Record a custom op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let out = self.push_value(value);
        self.ops.push(Op::Custom { op, inputs, out });
        out
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`, accumulating parameter adjoints
    /// into `store.grad` (repeated calls without `zero_grad` accumulate).
    pub fn backward_into(&mut self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        let lv = &self.values[loss.0];
        if !lv.is_scalar() {
            return Err(Error::Numeric(format!(
                "backward expects a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.scalar_value().is_finite() {
            return Err(Error::Numeric("backward on non-finite loss".into()));
        }
        self.grads[loss.0] = vec![T::one()];

        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx);
        }

        for &(node, pid) in &self.param_nodes {
            if !self.grads[node.0].is_empty() {
                store.accumulate_grad(pid, &self.grads[node.0]);
            }
        }
        Ok(())
    }

    fn grad_out_cloned(&self, out: NodeId) -> Option<Vec<T>> {
        if self.grads[out.0].is_empty() {
            None
        } else {
            Some(self.grads[out.0].clone())
        }
    }

    fn acc(&mut self, node: NodeId, contrib: impl Fn(usize) -> T) {
        let numel = self.values[node.0].numel();
        if self.grads[node.0].is_empty() {
            self.grads[node.0] = vec![T::zero(); numel];
        }
        let g = &mut self.grads[node.0];
        for (i, gi) in g.iter_mut().enumerate() {
            *gi += contrib(i);
        }
    }

    fn grad_buf(&mut self, node: NodeId) -> &mut [T] {
        let numel = self.values[node.0].numel();
        if self.grads[node.0].is_empty() {
            self.grads[node.0] = vec![T::zero(); numel];
        }
        &mut self.grads[node.0]
    }

    fn backward_op(&mut self, idx: usize) {
        // Ops are moved out one at a time so `self` stays borrowable; the op
        // list is not used again after backward.
        let op = std::mem::replace(
            &mut self.ops[idx],
            Op::SumAll {
                x: NodeId(0),
                out: NodeId(0),
            },
        );
        match &op {
            Op::Unary { kind, x, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let xv = self.values[x.0].data().to_vec();
                    let yv = self.values[out.0].data().to_vec();
                    let kind = *kind;
                    self.acc(*x, |i| unary_grad(kind, xv[i], yv[i]) * g[i]);
                }
            }
            Op::Binary { kind, a, b, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let av = self.values[a.0].data().to_vec();
                    let bv = self.values[b.0].data().to_vec();
                    match kind {
                        BinaryKind::Add => {
                            self.acc(*a, |i| g[i]);
                            self.acc(*b, |i| g[i]);
                        }
                        BinaryKind::Sub => {
                            self.acc(*a, |i| g[i]);
                            self.acc(*b, |i| -g[i]);
                        }
                        BinaryKind::Mul => {
                            self.acc(*a, |i| g[i] * bv[i]);
                            self.acc(*b, |i| g[i] * av[i]);
                        }
                        BinaryKind::Div => {
                            self.acc(*a, |i| g[i] / bv[i]);
                            self.acc(*b, |i| -g[i] * av[i] / (bv[i] * bv[i]));
                        }
                    }
                }
            }
            Op::AddScalar { x, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    self.acc(*x, |i| g[i]);
                }
            }
            Op::MulScalar { x, c, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let c = *c;
                    self.acc(*x, |i| c * g[i]);
                }
            }
            Op::Matmul { a, b, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let (m, k) = self.values[a.0].dims2();
                    let n = self.values[b.0].dims2().1;
                    let av = self.values[a.0].data().to_vec();
                    let bv = self.values[b.0].data().to_vec();
                    matmul_t_acc(&g, &bv, self.grad_buf(*a), m, n, k);
                    tmatmul_acc(&av, &g, self.grad_buf(*b), m, k, n);
                }
            }
            Op::MatmulT { a, b, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let (m, k) = self.values[a.0].dims2();
                    let n = self.values[b.0].dims2().0;
                    let av = self.values[a.0].data().to_vec();
                    let bv = self.values[b.0].data().to_vec();
                    // out = a·bᵀ: dA += g·b, dB += gᵀ·a
                    matmul_acc(&g, &bv, self.grad_buf(*a), m, n, k);
                    tmatmul_acc(&g, &av, self.grad_buf(*b), m, n, k);
                }
            }
            Op::BiasAdd { x, b, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let (m, n) = self.values[x.0].dims2();
                    self.acc(*x, |i| g[i]);
                    let gb = self.grad_buf(*b);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::BroadcastRows { x, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let n = self.values[x.0].numel();
                    let rows = self.values[out.0].numel() / n;
                    self.acc(*x, |j| {
                        let mut s = T::zero();
                        for r in 0..rows {
                            s += g[r * n + j];
                        }
                        s
                    });
                }
            }
            Op::RepeatRows { x, k, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let (_, n) = self.values[x.0].dims2();
                    let k = *k;
                    self.acc(*x, |i| {
                        let (row, col) = (i / n, i % n);
                        let mut s = T::zero();
                        for t in 0..k {
                            s += g[(row * k + t) * n + col];
                        }
                        s
                    });
                }
            }
            Op::SumCols { x, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let (_, n) = self.values[x.0].dims2();
                    self.acc(*x, |i| g[i / n]);
                }
            }
            Op::SumAll { x, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    self.acc(*x, |_| g[0]);
                }
            }
            Op::MeanAll { x, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let scale = T::one() / rl::<T>(self.values[x.0].numel() as f64);
                    self.acc(*x, |_| g[0] * scale);
                }
            }
            Op::ConcatCols { xs, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let total = self.values[out.0].dims2().1;
                    let mut offset = 0usize;
                    for &x in xs {
                        let (_, w) = self.values[x.0].dims2();
                        let off = offset;
                        self.acc(x, |i| {
                            let (row, col) = (i / w, i % w);
                            g[row * total + off + col]
                        });
                        offset += w;
                    }
                }
            }
            Op::SliceCols { x, lo, out, .. } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let (_, n) = self.values[x.0].dims2();
                    let w = self.values[out.0].dims2().1;
                    let lo = *lo;
                    let gx = self.grad_buf(*x);
                    for (i, &gv) in g.iter().enumerate() {
                        let (row, col) = (i / w, i % w);
                        gx[row * n + lo + col] += gv;
                    }
                }
            }
            Op::SliceRows { x, lo, out, .. } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let (_, n) = self.values[x.0].dims2();
                    let lo = *lo;
                    let gx = self.grad_buf(*x);
                    for (i, &gv) in g.iter().enumerate() {
                        gx[lo * n + i] += gv;
                    }
                }
            }
            Op::Reshape { x, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    self.acc(*x, |i| g[i]);
                }
            }
            Op::SoftmaxRows { x, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let (m, n) = self.values[x.0].dims2();
                    let y = self.values[out.0].data().to_vec();
                    let gx = self.grad_buf(*x);
                    for i in 0..m {
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += g[i * n + j] * y[i * n + j];
                        }
                        for j in 0..n {
                            gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                }
            }
            Op::NormalizeRows {
                x,
                fallback_rows,
                out,
                ..
            } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let (m, n) = self.values[x.0].dims2();
                    let xv = self.values[x.0].data().to_vec();
                    let yv = self.values[out.0].data().to_vec();
                    let fallback: std::collections::HashSet<u32> =
                        fallback_rows.iter().copied().collect();
                    let gx = self.grad_buf(*x);
                    for i in 0..m {
                        if fallback.contains(&(i as u32)) {
                            continue;
                        }
                        let row = &xv[i * n..(i + 1) * n];
                        let norm = row
                            .iter()
                            .map(|&v| v * v)
                            .fold(T::zero(), |a, b| a + b)
                            .sqrt();
                        let u = &yv[i * n..(i + 1) * n];
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += g[i * n + j] * u[j];
                        }
                        for j in 0..n {
                            gx[i * n + j] += (g[i * n + j] - u[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::Conv2dSame {
                x,
                h,
                w,
                kh,
                kw,
                kernel,
                out,
            } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let c = self.values[x.0].dims2().1;
                    let (h, w, kh, kw) = (*h, *w, *kh, *kw);
                    let kernel = kernel.clone();
                    let gx = self.grad_buf(*x);
                    conv2d_same_adjoint(&g, gx, h, w, c, kh, kw, &kernel);
                }
            }
            Op::Custom { op, inputs, out } => {
                if let Some(g) = self.grad_out_cloned(*out) {
                    let mut grad_inputs: Vec<Vec<T>> = inputs
                        .iter()
                        .map(|id| vec![T::zero(); self.values[id.0].numel()])
                        .collect();
                    {
                        let input_vals: Vec<&Tensor<T>> =
                            inputs.iter().map(|id| &self.values[id.0]).collect();
                        op.backward(&input_vals, &self.values[out.0], &g, &mut grad_inputs);
                    }
                    for (&id, gi) in inputs.iter().zip(grad_inputs.into_iter()) {
                        let buf = self.grad_buf(id);
                        for (dst, src) in buf.iter_mut().zip(gi) {
                            *dst += src;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn unary_eval<T: Real>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::Sigmoid => crate::math::sigmoid(x),
        UnaryKind::Softplus => crate::math::softplus(x),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Neg => -x,
        UnaryKind::Abs => x.abs(),
        UnaryKind::Sqrt => x.sqrt(),
    }
}

#[inline]
fn unary_grad<T: Real>(kind: UnaryKind, x: T, y: T) -> T {
    match kind {
        UnaryKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Sigmoid => y * (T::one() - y),
        UnaryKind::Softplus => crate::math::sigmoid(x),
        UnaryKind::Tanh => T::one() - y * y,
        UnaryKind::Exp => y,
        UnaryKind::Neg => -T::one(),
        UnaryKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Sqrt => T::one() / (rl::<T>(2.0) * y),
    }
}

fn conv2d_same_eval<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    kernel: &[T],
) -> Vec<T> {
    let (ry, rx) = (kh / 2, kw / 2);
    let mut out = vec![T::zero(); h * w * c];
    for py in 0..h {
        for px in 0..w {
            let o = (py * w + px) * c;
            for dy in 0..kh {
                let sy = py as isize + dy as isize - ry as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let sx = px as isize + dx as isize - rx as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let kv = kernel[dy * kw + dx];
                    let s = ((sy as usize) * w + sx as usize) * c;
                    for ch in 0..c {
                        out[o + ch] += kv * x[s + ch];
                    }
                }
            }
        }
    }
    out
}

fn conv2d_same_adjoint<T: Real>(
    g: &[T],
    gx: &mut [T],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    kernel: &[T],
) {
    let (ry, rx) = (kh / 2, kw / 2);
    for py in 0..h {
        for px in 0..w {
            let o = (py * w + px) * c;
            for dy in 0..kh {
                let sy = py as isize + dy as isize - ry as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let sx = px as isize + dx as isize - rx as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let kv = kernel[dy * kw + dx];
                    let s = ((sy as usize) * w + sx as usize) * c;
                    for ch in 0..c {
                        gx[s + ch] += kv * g[o + ch];
                    }
                }
            }
        }
    }
}
