use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{split_axis, NodeRef, Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind<T> {
    Gelu,
    Abs,
    Sqrt,
    Square,
    SmoothL1(T),
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Arc<Vec<T>>,
        b: Arc<Vec<T>>,
    },
    Unary {
        kind: UnaryKind<T>,
        x: Arc<Vec<T>>,
    },
    Scale(T),
    AddScalar,
    MatMul {
        a: Arc<Vec<T>>,
        b: Arc<Vec<T>>,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Arc<Vec<T>>,
        b: Arc<Vec<T>>,
        dims: [usize; 4],
    },
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    LayerNorm {
        axis: usize,
        inv_std: Vec<T>,
    },
    Reduce {
        kind: ReduceKind,
        axis: Option<usize>,
        in_shape: Vec<usize>,
    },
    Reshape,
    Permute {
        perm: Vec<usize>,
    },
    Concat {
        axis: usize,
        extents: Vec<usize>,
    },
    IndexSelect {
        axis: usize,
        indices: Vec<usize>,
        in_shape: Vec<usize>,
    },
    BroadcastTo {
        in_len: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { .. } => "binary",
            Op::Unary { .. } => "unary",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reduce { .. } => "reduce",
            Op::Reshape => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::BroadcastTo { .. } => "broadcast_to",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<Option<usize>>,
    out: Arc<Vec<T>>,
    shape: Vec<usize>,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are pushed in execution order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
pub struct Tape<T> {
    id: u64,
    recording: bool,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
        }
    }

    /// A tape that never records; every result is a constant.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` as a differentiable leaf and returns the tracked handle.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Tensor<T> {
        if !self.recording {
            return t.detach();
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            out: Arc::clone(t.shared_data()),
            shape: t.shape().to_vec(),
        });
        Tensor::from_parts(
            t.shape().to_vec(),
            Arc::clone(t.shared_data()),
            Some(NodeRef {
                tape: self.id,
                index: self.nodes.len() - 1,
            }),
        )
    }

    fn node_of(&self, t: &Tensor<T>) -> Result<Option<usize>> {
        match t.node() {
            None => Ok(None),
            Some(r) if r.tape == self.id => Ok(Some(r.index)),
            Some(_) => Err(Error::TapeMismatch),
        }
    }

    fn record(
        &mut self,
        op: Op<T>,
        inputs: &[&Tensor<T>],
        shape: Vec<usize>,
        data: Vec<T>,
    ) -> Result<Tensor<T>> {
        let ids = inputs
            .iter()
            .map(|t| self.node_of(t))
            .collect::<Result<Vec<_>>>()?;
        if cfg!(debug_assertions)
            && inputs.iter().all(|t| t.is_finite())
            && !data.iter().all(|x| x.is_finite())
        {
            panic!("{} produced non-finite values from finite inputs", op.name());
        }
        let data = Arc::new(data);
        let node = if self.recording && ids.iter().any(Option::is_some) {
            self.nodes.push(Node {
                op,
                inputs: ids,
                out: Arc::clone(&data),
                shape: shape.clone(),
            });
            Some(NodeRef {
                tape: self.id,
                index: self.nodes.len() - 1,
            })
        } else {
            None
        };
        Ok(Tensor::from_parts(shape, data, node))
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let n: usize = shape.iter().product();
        let data = zip_broadcast(a.data(), b.data(), n, f);
        let op = Op::Binary {
            kind,
            a: Arc::clone(a.shared_data()),
            b: Arc::clone(b.shared_data()),
        };
        self.record(op, &[a, b], shape, data)
    }

    /// Elementwise sum; the smaller operand may broadcast over leading dims.
    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
        let data = a.data().iter().map(|&x| x * factor).collect();
        self.record(Op::Scale(factor), &[a], a.shape().to_vec(), data)
    }

    pub fn add_scalar(&mut self, a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        let data = a.data().iter().map(|&x| x + c).collect();
        self.record(Op::AddScalar, &[a], a.shape().to_vec(), data)
    }

    fn unary(&mut self, kind: UnaryKind<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
        let data = a.data().iter().map(|&x| unary_forward(kind, x)).collect();
        let op = Op::Unary {
            kind,
            x: Arc::clone(a.shared_data()),
        };
        self.record(op, &[a], a.shape().to_vec(), data)
    }

    /// Exact-erf GELU: `0.5 x (1 + erf(x / sqrt 2))`.
    pub fn gelu(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn abs(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn sqrt(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn square(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Square, a)
    }

    /// Elementwise Huber-style penalty of a residual: quadratic below `beta`,
    /// linear above.
    pub fn smooth_l1(&mut self, residual: &Tensor<T>, beta: T) -> Result<Tensor<T>> {
        self.unary(UnaryKind::SmoothL1(beta), residual)
    }

    // ---- linear algebra ----------------------------------------------

    /// `a[.., k] x b[k, n] -> [.., n]`; leading dims of `a` are treated as rows.
    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.ndim() == 0 || b.ndim() != 2 || a.shape()[a.ndim() - 1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (k, n) = (b.shape()[0], b.shape()[1]);
        let m = if k == 0 { 0 } else { a.len() / k };
        let mut out = vec![T::zero(); m * n];
        gemm_acc(a.data(), b.data(), &mut out, m, k, n);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let op = Op::MatMul {
            a: Arc::clone(a.shared_data()),
            b: Arc::clone(b.shared_data()),
            k,
            n,
        };
        self.record(op, &[a, b], shape, out)
    }

    /// Batched product `a[g, m, k] x b[g, k, n] -> [g, m, n]`.
    pub fn bmm(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); g * m * n];
        for i in 0..g {
            gemm_acc(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let op = Op::BatchMatMul {
            a: Arc::clone(a.shared_data()),
            b: Arc::clone(b.shared_data()),
            dims: [g, m, k, n],
        };
        self.record(op, &[a, b], vec![g, m, n], out)
    }

    // ---- normalisation -----------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = split_axis(a.shape(), axis)?;
        let mut out = a.to_vec();
        for_each_slice(outer, len, inner, |idx| {
            let max = idx.clone().fold(T::neg_infinity(), |m, i| m.max(out[i]));
            let mut total = T::zero();
            for i in idx.clone() {
                out[i] = (out[i] - max).exp();
                total = total + out[i];
            }
            for i in idx {
                out[i] = out[i] / total;
            }
        });
        self.record(Op::Softmax { axis }, &[a], a.shape().to_vec(), out)
    }

    pub fn log_softmax(&mut self, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = split_axis(a.shape(), axis)?;
        let mut out = a.to_vec();
        for_each_slice(outer, len, inner, |idx| {
            let max = idx.clone().fold(T::neg_infinity(), |m, i| m.max(out[i]));
            let total: T = idx.clone().map(|i| (out[i] - max).exp()).sum();
            let log_z = max + total.ln();
            for i in idx {
                out[i] = out[i] - log_z;
            }
        });
        self.record(Op::LogSoftmax { axis }, &[a], a.shape().to_vec(), out)
    }

    /// Standardises each slice along `axis` (biased variance), then applies the
    /// optional per-channel `(gamma, beta)`; affine parameters require the last
    /// axis.
    pub fn layer_norm(
        &mut self,
        a: &Tensor<T>,
        axis: usize,
        eps: T,
        affine: Option<(&Tensor<T>, &Tensor<T>)>,
    ) -> Result<Tensor<T>> {
        let (outer, len, inner) = split_axis(a.shape(), axis)?;
        if let Some((gamma, beta)) = affine {
            if axis + 1 != a.ndim() || gamma.shape() != [len] || beta.shape() != [len] {
                return Err(Error::shape("layer_norm affine", a.shape(), gamma.shape()));
            }
        }
        let mut out = a.to_vec();
        let mut inv_std = Vec::with_capacity(outer * inner);
        let n = T::c(len as f64);
        for_each_slice(outer, len, inner, |idx| {
            let first = idx.clone().next().map(|i| out[i]);
            if idx.clone().all(|i| Some(out[i]) == first) {
                // Constant slices standardise to exact zeros.
                let r = T::one() / eps.sqrt();
                for i in idx {
                    out[i] = T::zero();
                }
                inv_std.push(r);
                return;
            }
            let mut mean = idx.clone().map(|i| out[i]).sum::<T>() / n;
            mean = mean + idx.clone().map(|i| out[i] - mean).sum::<T>() / n;
            let var = idx
                .clone()
                .map(|i| {
                    let d = out[i] - mean;
                    d * d
                })
                .sum::<T>()
                / n;
            let r = T::one() / (var + eps).sqrt();
            for i in idx {
                out[i] = (out[i] - mean) * r;
            }
            inv_std.push(r);
        });
        let normed = self.record(Op::LayerNorm { axis, inv_std }, &[a], a.shape().to_vec(), out)?;
        match affine {
            None => Ok(normed),
            Some((gamma, beta)) => {
                let scaled = self.mul(&normed, gamma)?;
                self.add(&scaled, beta)
            }
        }
    }

    // ---- reductions --------------------------------------------------

    /// Sum or mean along `axis` (dropping it), or over everything when `None`.
    pub fn reduce(&mut self, kind: ReduceKind, a: &Tensor<T>, axis: Option<usize>) -> Result<Tensor<T>> {
        let (outer, len, inner, shape) = match axis {
            None => (1, a.len(), 1, Vec::new()),
            Some(ax) => {
                let (o, l, i) = split_axis(a.shape(), ax)?;
                let mut s = a.shape().to_vec();
                s.remove(ax);
                (o, l, i, s)
            }
        };
        if len == 0 {
            return Err(Error::EmptyReduction);
        }
        let src = a.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (dst, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(&src[base..base + inner]) {
                    *dst = *dst + x;
                }
            }
        }
        if kind == ReduceKind::Mean {
            let n = T::c(len as f64);
            out.iter_mut().for_each(|x| *x = *x / n);
        }
        let op = Op::Reduce {
            kind,
            axis,
            in_shape: a.shape().to_vec(),
        };
        self.record(op, &[a], shape, out)
    }

    pub fn sum(&mut self, a: &Tensor<T>, axis: Option<usize>) -> Result<Tensor<T>> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    pub fn mean(&mut self, a: &Tensor<T>, axis: Option<usize>) -> Result<Tensor<T>> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    // ---- shape manipulation ------------------------------------------

    pub fn reshape(&mut self, a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != a.len() {
            return Err(Error::shape("reshape", a.shape(), shape));
        }
        let ids = [self.node_of(a)?];
        let node = if self.recording && ids[0].is_some() {
            self.nodes.push(Node {
                op: Op::Reshape,
                inputs: ids.to_vec(),
                out: Arc::clone(a.shared_data()),
                shape: shape.to_vec(),
            });
            Some(NodeRef {
                tape: self.id,
                index: self.nodes.len() - 1,
            })
        } else {
            None
        };
        Ok(Tensor::from_parts(shape.to_vec(), Arc::clone(a.shared_data()), node))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
        let mut seen = vec![false; a.ndim()];
        if perm.len() != a.ndim() || perm.iter().any(|&p| p >= a.ndim() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", a.shape(), perm));
        }
        let (shape, data) = permute_data(a.data(), a.shape(), perm);
        self.record(Op::Permute { perm: perm.to_vec() }, &[a], shape, data)
    }

    pub fn concat(&mut self, parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or(Error::EmptyReduction)?;
        let (outer, _, inner) = split_axis(first.shape(), axis)?;
        for p in parts {
            let same_rank = p.ndim() == first.ndim();
            let same_other = same_rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same_other {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                out.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        self.record(Op::Concat { axis, extents }, parts, shape, out)
    }

    /// Gathers `indices` along `axis`; repeated indices are allowed.
    pub fn index_select(&mut self, a: &Tensor<T>, axis: usize, indices: &[usize]) -> Result<Tensor<T>> {
        let (outer, len, inner) = split_axis(a.shape(), axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::IndexOutOfRange { index: bad, extent: len });
        }
        let src = a.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = indices.len();
        let op = Op::IndexSelect {
            axis,
            indices: indices.to_vec(),
            in_shape: a.shape().to_vec(),
        };
        self.record(op, &[a], shape, out)
    }

    /// Tiles `a` over new leading dims so it takes `shape`.
    pub fn broadcast_to(&mut self, a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        if broadcast_shape(a.shape(), shape)? != shape {
            return Err(Error::shape("broadcast_to", a.shape(), shape));
        }
        let n: usize = shape.iter().product();
        let data = if a.is_empty() {
            Vec::new()
        } else {
            a.data().iter().copied().cycle().take(n).collect()
        };
        self.record(Op::BroadcastTo { in_len: a.len() }, &[a], shape.to_vec(), data)
    }

    // ---- backward ----------------------------------------------------

    /// Propagates d(loss)/d(leaf) for every leaf that `loss` depends on.
    /// Consumes the tape.
    pub fn backward(self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.len() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let Some(root) = self.node_of(loss)? else {
            return Ok(Gradients {
                tape: self.id,
                grads: Vec::new(),
            });
        };
        grads[root] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = Vec::new();
        leaves.resize_with(self.nodes.len(), || None);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_parts(node.shape.clone(), Arc::new(g), None));
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = node_backward(node, &g, &needs);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(j), Some(ig)) = (input, ig) {
                    match &mut grads[*j] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                        slot => *slot = Some(ig),
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf of the originating tape; `None` when the loss did
    /// not depend on it.
    pub fn get(&self, leaf: &Tensor<T>) -> Option<&Tensor<T>> {
        let r = leaf.node()?;
        if r.tape != self.tape {
            return None;
        }
        self.grads.get(r.index)?.as_ref()
    }

    pub fn get_or_zeros(&self, leaf: &Tensor<T>) -> Tensor<T> {
        self.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }
}

// ---- helpers -------------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let a_is_big = na > nb || (na == nb && a.len() >= b.len());
    let (big, small) = if a_is_big { (a, b) } else { (b, a) };
    let lead = small.iter().take_while(|&&d| d == 1).count();
    if big.ends_with(&small[lead..]) && big.len() >= small.len() - lead {
        Ok(big.to_vec())
    } else {
        Err(Error::shape("broadcast", a, b))
    }
}

fn zip_broadcast<T: Real>(a: &[T], b: &[T], n: usize, f: impl Fn(T, T) -> T) -> Vec<T> {
    if n == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(n);
    if a.len() == n && b.len() == n {
        out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
    } else if a.len() == n {
        for chunk in a.chunks(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    } else {
        for chunk in b.chunks(a.len()) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    }
    out
}

fn unary_forward<T: Real>(kind: UnaryKind<T>, x: T) -> T {
    match kind {
        UnaryKind::Gelu => T::c(0.5) * x * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf()),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Square => x * x,
        UnaryKind::SmoothL1(beta) => {
            let d = x.abs();
            if d < beta {
                T::c(0.5) * d * d / beta
            } else {
                d - T::c(0.5) * beta
            }
        }
    }
}

fn unary_derivative<T: Real>(kind: UnaryKind<T>, x: T, y: T) -> T {
    match kind {
        UnaryKind::Gelu => {
            let cdf = T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (-(x * x) * T::c(0.5)).exp() * T::c(0.398_942_280_401_432_7);
            cdf + x * pdf
        }
        UnaryKind::Abs => sign(x),
        UnaryKind::Sqrt => T::c(0.5) / y,
        UnaryKind::Square => T::c(2.0) * x,
        UnaryKind::SmoothL1(beta) => {
            if x.abs() < beta {
                x / beta
            } else {
                sign(x)
            }
        }
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Calls `f` with the flat indices of each 1-D slice along an axis.
fn for_each_slice(
    outer: usize,
    len: usize,
    inner: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    for o in 0..outer {
        for i in 0..inner {
            let start = o * len * inner + i;
            f((start..start + len * inner).step_by(inner));
        }
    }
}

/// `out += a(m x k) * b(k x n)`, row-major, fixed summation order.
fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    }
}

fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn node_backward<T: Real>(node: &Node<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
    let y = &node.out;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Binary { kind, a, b } => {
            let n = g.len();
            let a_full = |i: usize| a[i % a.len()];
            let b_full = |i: usize| b[i % b.len()];
            let ga = needs[0].then(|| {
                let full: Vec<T> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                    BinaryKind::Mul => (0..n).map(|i| g[i] * b_full(i)).collect(),
                    BinaryKind::Div => (0..n).map(|i| g[i] / b_full(i)).collect(),
                };
                reduce_to_generic(&full, a.len())
            });
            let gb = needs[1].then(|| {
                let full: Vec<T> = match kind {
                    BinaryKind::Add => g.to_vec(),
                    BinaryKind::Sub => g.iter().map(|&x| -x).collect(),
                    BinaryKind::Mul => (0..n).map(|i| g[i] * a_full(i)).collect(),
                    BinaryKind::Div => (0..n)
                        .map(|i| {
                            let bv = b_full(i);
                            -g[i] * a_full(i) / (bv * bv)
                        })
                        .collect(),
                };
                reduce_to_generic(&full, b.len())
            });
            vec![ga, gb]
        }
        Op::Unary { kind, x } => {
            let gx = g
                .iter()
                .zip(x.iter().zip(y.iter()))
                .map(|(&gi, (&xi, &yi))| gi * unary_derivative(*kind, xi, yi))
                .collect();
            vec![Some(gx)]
        }
        Op::Scale(c) => vec![Some(g.iter().map(|&x| x * *c).collect())],
        Op::AddScalar => vec![Some(g.to_vec())],
        Op::MatMul { a, b, k, n } => {
            let (k, n) = (*k, *n);
            let m = g.len() / n.max(1);
            let ga = needs[0].then(|| {
                let bt = transpose(b, k, n);
                let mut out = vec![T::zero(); m * k];
                gemm_acc(g, &bt, &mut out, m, n, k);
                out
            });
            let gb = needs[1].then(|| {
                let at = transpose(a, m, k);
                let mut out = vec![T::zero(); k * n];
                gemm_acc(&at, g, &mut out, k, m, n);
                out
            });
            vec![ga, gb]
        }
        Op::BatchMatMul { a, b, dims } => {
            let [groups, m, k, n] = *dims;
            let ga = needs[0].then(|| {
                let mut out = vec![T::zero(); groups * m * k];
                for i in 0..groups {
                    let bt = transpose(&b[i * k * n..(i + 1) * k * n], k, n);
                    gemm_acc(&g[i * m * n..(i + 1) * m * n], &bt, &mut out[i * m * k..(i + 1) * m * k], m, n, k);
                }
                out
            });
            let gb = needs[1].then(|| {
                let mut out = vec![T::zero(); groups * k * n];
                for i in 0..groups {
                    let at = transpose(&a[i * m * k..(i + 1) * m * k], m, k);
                    gemm_acc(&at, &g[i * m * n..(i + 1) * m * n], &mut out[i * k * n..(i + 1) * k * n], k, m, n);
                }
                out
            });
            vec![ga, gb]
        }
        Op::Softmax { axis } => {
            let (outer, len, inner) = split_axis(&node.shape, *axis).expect("validated in forward");
            let mut gx = vec![T::zero(); g.len()];
            for_each_slice(outer, len, inner, |idx| {
                let dot: T = idx.clone().map(|i| g[i] * y[i]).sum();
                for i in idx {
                    gx[i] = y[i] * (g[i] - dot);
                }
            });
            vec![Some(gx)]
        }
        Op::LogSoftmax { axis } => {
            let (outer, len, inner) = split_axis(&node.shape, *axis).expect("validated in forward");
            let mut gx = vec![T::zero(); g.len()];
            for_each_slice(outer, len, inner, |idx| {
                let total: T = idx.clone().map(|i| g[i]).sum();
                for i in idx {
                    gx[i] = g[i] - y[i].exp() * total;
                }
            });
            vec![Some(gx)]
        }
        Op::LayerNorm { axis, inv_std } => {
            let (outer, len, inner) = split_axis(&node.shape, *axis).expect("validated in forward");
            let n = T::c(len as f64);
            let mut gx = vec![T::zero(); g.len()];
            let mut slice = 0;
            for_each_slice(outer, len, inner, |idx| {
                let r = inv_std[slice];
                slice += 1;
                let mean_g = idx.clone().map(|i| g[i]).sum::<T>() / n;
                let mean_gy = idx.clone().map(|i| g[i] * y[i]).sum::<T>() / n;
                for i in idx {
                    gx[i] = r * (g[i] - mean_g - y[i] * mean_gy);
                }
            });
            vec![Some(gx)]
        }
        Op::Reduce { kind, axis, in_shape } => {
            let (outer, len, inner) = match axis {
                None => (1, in_shape.iter().product(), 1),
                Some(ax) => split_axis(in_shape, *ax).expect("validated in forward"),
            };
            let scale = match kind {
                ReduceKind::Sum => T::one(),
                ReduceKind::Mean => T::one() / T::c(len as f64),
            };
            let mut gx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    gx.extend(src.iter().map(|&x| x * scale));
                }
            }
            vec![Some(gx)]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Permute { perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            vec![Some(permute_data(g, &node.shape, &inverse).1)]
        }
        Op::Concat { axis, extents } => {
            let (outer, total, inner) = split_axis(&node.shape, *axis).expect("validated in forward");
            let mut parts: Vec<Vec<T>> = extents.iter().map(|e| Vec::with_capacity(outer * e * inner)).collect();
            for o in 0..outer {
                let mut offset = o * total * inner;
                for (part, &e) in parts.iter_mut().zip(extents) {
                    part.extend_from_slice(&g[offset..offset + e * inner]);
                    offset += e * inner;
                }
            }
            parts
                .into_iter()
                .zip(needs)
                .map(|(p, &need)| need.then_some(p))
                .collect()
        }
        Op::IndexSelect { axis, indices, in_shape } => {
            let (outer, len, inner) = split_axis(in_shape, *axis).expect("validated in forward");
            let mut gx = vec![T::zero(); outer * len * inner];
            let k = indices.len();
            for o in 0..outer {
                for (j, &i) in indices.iter().enumerate() {
                    let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                    let dst = &mut gx[(o * len + i) * inner..(o * len + i + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                }
            }
            vec![Some(gx)]
        }
        Op::BroadcastTo { in_len } => vec![Some(reduce_to_generic(g, *in_len))],
    }
}

/// Sums a full-size gradient down to an operand of length `len`.
fn reduce_to_generic<T: Real>(g: &[T], len: usize) -> Vec<T> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); len];
    if len == 0 {
        return out;
    }
    for chunk in g.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, &x)| *o = *o + x);
    }
    out
}
