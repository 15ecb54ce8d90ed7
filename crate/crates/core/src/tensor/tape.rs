use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, bilinear_taps, ConvGeometry, DeformLayout, LevelGeometry};
use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddRow { a: usize, b: usize, cols: usize },
    Scale { a: usize, c: T },
    Shift { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    InvSigmoid { a: usize, eps: T },
    Abs { a: usize },
    Exp { a: usize },
    Ln { a: usize },
    Minimum { a: usize, b: usize },
    Maximum { a: usize, b: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, outer: usize, len: usize, inner: usize, inv_std: Vec<T> },
    Sum { a: usize },
    SliceCols { a: usize, start: usize, cols: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    GatherRows { a: usize, rows: Vec<usize> },
    Reshape { a: usize },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeometry },
    Bilinear { map: usize, loc: usize, h: usize, w: usize },
    Deform { value: usize, locs: usize, weights: usize, layout: DeformLayout },
    SigmoidFocal { logits: usize, targets: Vec<T>, alpha: T, gamma: T, eps: T },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so every operand index is smaller
/// than the index of the node consuming it and a single reverse sweep visits
/// each operation once.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, left: left.to_vec(), right: right.to_vec() }
}

/// Splits a shape around `axis` into (outer, axis extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis { axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::StaleTape);
        }
        Ok(v.idx)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        let i = self.check(v)?;
        Ok(&self.nodes[i])
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].value.requires_grad());
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Ok(Var { tape: self.id, idx: self.nodes.len() - 1 })
    }

    /// Records a tensor as given; its `requires_grad` flag decides whether it collects a gradient.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.set_grad(None);
        self.nodes.push(Node { value: tensor, op: Op::Leaf });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Copies the current value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.node(v)?.value.clone();
        Ok(self.constant(t))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v).expect("var from this tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.value(v).data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.check(v).ok().and_then(|i| self.nodes[i].value.grad())
    }

    /// Resets every gradient to absent and re-arms [`Tape::backward`].
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.set_grad(None);
        }
        self.backward_done = false;
    }

    /// Drops all recorded nodes; outstanding `Var`s become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.node(v)?.value.shape();
        match s {
            [r, c] => Ok((*r, *c)),
            _ => Err(mismatch(op, s, &[0, 0])),
        }
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::MatMul { a: a.idx, b: b.idx, m, k, n }, &[a.idx, b.idx])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "transpose")?;
        let src = self.data(a);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        self.push(vec![cols, rows], out, Op::Transpose { a: a.idx, rows, cols }, &[a.idx])
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        let sa = self.node(a)?.value.shape();
        let sb = self.node(b)?.value.shape();
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(sa.to_vec())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let shape = self.same_shape(a, b, name)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(shape, out, op, &[a.idx, b.idx])
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let shape = self.node(a)?.value.shape().to_vec();
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(shape, out, op, &[a.idx])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add { a: a.idx, b: b.idx }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub { a: a.idx, b: b.idx }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul { a: a.idx, b: b.idx }, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "div", Op::Div { a: a.idx, b: b.idx }, |x, y| x / y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "minimum", Op::Minimum { a: a.idx, b: b.idx }, |x, y| if y < x { y } else { x })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "maximum", Op::Maximum { a: a.idx, b: b.idx }, |x, y| if y > x { y } else { x })
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        let bs = self.node(bias)?.value.shape();
        if bs.iter().product::<usize>() != n {
            return Err(mismatch("add_row", &[m, n], bs));
        }
        let b = self.data(bias);
        let out = self.data(a).chunks(n).flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        self.push(vec![m, n], out, Op::AddRow { a: a.idx, b: bias.idx, cols: n }, &[a.idx, bias.idx])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.map(a, Op::Scale { a: a.idx, c }, |x| x * c)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: T) -> Result<Var> {
        self.map(a, Op::Shift { a: a.idx }, |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu { a: a.idx }, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid { a: a.idx }, sigmoid)
    }

    /// `ln(p / (1 − p))` with `p` clamped to `[eps, 1 − eps]`.
    pub fn inverse_sigmoid(&mut self, a: Var, eps: T) -> Result<Var> {
        self.map(a, Op::InvSigmoid { a: a.idx, eps }, |p| inverse_sigmoid(p, eps))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Abs { a: a.idx }, |x| x.abs())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp { a: a.idx }, |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Ln { a: a.idx }, |x| x.ln())
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.node(a)?.value.shape().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let x = self.data(a);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("softmax"));
        }
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        self.push(shape, out, Op::Softmax { a: a.idx, outer, len, inner }, &[a.idx])
    }

    /// Normalizes each slice along `axis` to zero mean and unit variance, then
    /// applies per-position `gain` and `bias` (both of length `shape[axis]`).
    pub fn layer_norm(&mut self, x: Var, axis: usize, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.node(x)?.value.shape().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        for p in [gain, bias] {
            let ps = self.node(p)?.value.shape();
            if ps.iter().product::<usize>() != len {
                return Err(mismatch("layer_norm", &shape, ps));
            }
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let nf = T::from_usize_lossy(len);
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| xs[at(j)]).sum::<T>() / nf;
                let var = (0..len).map(|j| (xs[at(j)] - mean).powi(2)).sum::<T>() / nf;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = inv;
                for j in 0..len {
                    out[at(j)] = (xs[at(j)] - mean) * inv * g[j] + b[j];
                }
            }
        }
        let op = Op::LayerNorm { x: x.idx, gain: gain.idx, bias: bias.idx, outer, len, inner, inv_std };
        self.push(shape, out, op, &[x.idx, gain.idx, bias.idx])
    }

    // ---------------------------------------------------------------- reductions & layout

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.data(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum { a: a.idx }, &[a.idx])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::from_usize_lossy(self.node(a)?.value.numel());
        let s = self.sum(a)?;
        self.scale(s, T::one() / n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(mismatch("slice_cols", &[rows, cols], &[start, len]));
        }
        let out = self.data(a).chunks(cols).flat_map(|r| r[start..start + len].iter().copied()).collect();
        self.push(vec![rows, len], out, Op::SliceCols { a: a.idx, start, cols }, &[a.idx])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", &[rows], &[r, c]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        self.push(vec![rows, total], out, Op::ConcatCols { parts: idx.clone() }, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(mismatch("concat_rows", &[rows, cols], &[r, c]));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        self.push(vec![rows, cols], out, Op::ConcatRows { parts: idx.clone() }, &idx)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(a, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(mismatch("gather_rows", &[r, c], &[bad]));
        }
        let src = self.data(a);
        let out = rows.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        self.push(vec![rows.len(), c], out, Op::GatherRows { a: a.idx, rows: rows.to_vec() }, &[a.idx])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.node(a)?.value.shape();
        if src.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(mismatch("reshape", src, shape));
        }
        let out = self.data(a).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape { a: a.idx }, &[a.idx])
    }

    // ---------------------------------------------------------------- spatial

    /// 2-D convolution of a `[C×H×W]` input with `[O×C×k×k]` weights and `[O]` bias.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.node(x)?.value.shape().to_vec();
        let ws = self.node(weight)?.value.shape().to_vec();
        let (c, h, w) = match xs.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(mismatch("conv2d", &xs, &ws)),
        };
        let (o, k) = match ws.as_slice() {
            [o, ci, k, k2] if *ci == c && k == k2 => (*o, *k),
            _ => return Err(mismatch("conv2d", &xs, &ws)),
        };
        if self.node(bias)?.value.numel() != o || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch("conv2d", &ws, self.shape(bias)));
        }
        let geom = ConvGeometry::new(c, h, w, o, k, stride, pad);
        let out = geom.forward(self.data(x), self.data(weight), self.data(bias));
        let op = Op::Conv2d { x: x.idx, w: weight.idx, b: bias.idx, geom };
        self.push(vec![o, geom.h_out, geom.w_out], out, op, &[x.idx, weight.idx, bias.idx])
    }

    /// Samples an `[H×W×d]` feature map at `P` normalized `(x, y)` locations → `[P×d]`.
    pub fn bilinear_sample(&mut self, map: Var, loc: Var) -> Result<Var> {
        let ms = self.node(map)?.value.shape().to_vec();
        let (h, w, d) = match ms.as_slice() {
            [h, w, d] => (*h, *w, *d),
            _ => return Err(mismatch("bilinear_sample", &ms, &[0, 0, 0])),
        };
        let (p, two) = self.dims2(loc, "bilinear_sample")?;
        if two != 2 {
            return Err(mismatch("bilinear_sample", &ms, &[p, two]));
        }
        let l = self.data(loc);
        if l.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("bilinear_sample"));
        }
        let m = self.data(map);
        let mut out = vec![T::zero(); p * d];
        for i in 0..p {
            let tap = bilinear_taps(l[2 * i], l[2 * i + 1], h, w);
            for (cell, &tw) in tap.cells.iter().zip(&tap.weights) {
                for c in 0..d {
                    out[i * d + c] += tw * m[cell * d + c];
                }
            }
        }
        self.push(vec![p, d], out, Op::Bilinear { map: map.idx, loc: loc.idx, h, w }, &[map.idx, loc.idx])
    }

    /// Fused deformable sampling and weighted aggregation.
    ///
    /// `value` is the `[T×d]` token sequence covering every level in `levels`;
    /// `locs` is `[N × heads·samples·2]` absolute normalized sampling locations;
    /// `weights` is `[N × heads·samples]` attention weights. Query `q` samples
    /// only the level `levels[query_levels[q]]`. Head `m` reads channel block
    /// `m·d/heads .. (m+1)·d/heads`. Output is `[N×d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn deform_aggregate(
        &mut self,
        value: Var,
        locs: Var,
        weights: Var,
        heads: usize,
        samples: usize,
        levels: &[LevelGeometry],
        query_levels: &[usize],
    ) -> Result<Var> {
        let (t, d) = self.dims2(value, "deform_aggregate")?;
        let n = query_levels.len();
        let (ln, lc) = self.dims2(locs, "deform_aggregate")?;
        let (wn, wc) = self.dims2(weights, "deform_aggregate")?;
        if heads == 0 || samples == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "deform_aggregate: dim {d} not divisible into {heads} heads with {samples} samples"
            )));
        }
        if ln != n || wn != n || lc != heads * samples * 2 || wc != heads * samples {
            return Err(mismatch("deform_aggregate", &[ln, lc], &[wn, wc]));
        }
        if let Some(&bad) = query_levels.iter().find(|&&l| l >= levels.len()) {
            return Err(TensorError::Invalid(format!(
                "reference point names level index {bad} but only {} levels were provided",
                levels.len()
            )));
        }
        if levels.iter().any(|g| g.start + g.tokens() > t || g.h == 0 || g.w == 0) {
            return Err(mismatch("deform_aggregate", &[t, d], &[levels.len()]));
        }
        if self.data(locs).iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("deform_aggregate"));
        }
        let layout =
            DeformLayout { heads, samples, dim: d, levels: levels.to_vec(), query_levels: query_levels.to_vec() };
        let out = layout.forward(self.data(value), self.data(locs), self.data(weights));
        let op = Op::Deform { value: value.idx, locs: locs.idx, weights: weights.idx, layout };
        self.push(vec![n, d], out, op, &[value.idx, locs.idx, weights.idx])
    }

    // ---------------------------------------------------------------- losses

    /// Summed sigmoid focal loss of `logits` against 0/1 `targets` of the same shape.
    pub fn sigmoid_focal_loss(&mut self, logits: Var, targets: &[T], alpha: T, gamma: T) -> Result<Var> {
        let shape = self.node(logits)?.value.shape().to_vec();
        if targets.len() != self.value(logits).numel() {
            return Err(mismatch("sigmoid_focal_loss", &shape, &[targets.len()]));
        }
        let eps = T::lit(crate::loss::FOCAL_EPS);
        let total = self
            .data(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &y)| crate::loss::focal_loss(sigmoid(z), y > T::lit(0.5), alpha, gamma))
            .sum();
        let op = Op::SigmoidFocal { logits: logits.idx, targets: targets.to_vec(), alpha, gamma, eps };
        self.push(vec![1], vec![total], op, &[logits.idx])
    }

    // ---------------------------------------------------------------- reverse sweep

    /// Accumulates `d loss / d v` into every upstream node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        let shape = self.nodes[root].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        self.backward_done = true;
        self.nodes[root].value.set_grad(Some(vec![T::one()]));
        for i in (0..=root).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.value.grad() else { continue };
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            propagate(before, node, g);
        }
        Ok(())
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Logit of `p` after clamping it to `[eps, 1 − eps]`.
#[inline]
pub fn inverse_sigmoid<T: Scalar>(p: T, eps: T) -> T {
    let p = p.max(eps).min(T::one() - eps);
    (p / (T::one() - p)).ln()
}

/// Runs `f` on the gradient buffer of node `i` if that node participates in differentiation.
#[inline]
fn acc<T: Scalar>(nodes: &mut [Node<T>], i: usize, f: impl FnOnce(&mut [T], &[T])) {
    let value = &mut nodes[i].value;
    if !value.requires_grad {
        return;
    }
    let Tensor { data, grad, .. } = value;
    let n = data.len();
    f(grad.get_or_insert_with(|| vec![T::zero(); n]), data);
}

fn wants<T: Scalar>(nodes: &[Node<T>], i: usize) -> bool {
    nodes[i].value.requires_grad()
}

fn propagate<T: Scalar>(nodes: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
            if wants(nodes, a) {
                let bv = nodes[b].value.data().to_vec();
                acc(nodes, a, |da, _| kernels::matmul_bt_acc(g, &bv, da, m, k, n));
            }
            if wants(nodes, b) {
                let av = nodes[a].value.data().to_vec();
                acc(nodes, b, |db, _| kernels::matmul_at_acc(&av, g, db, m, k, n));
            }
        }
        Op::Transpose { a, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            acc(nodes, *a, |da, _| {
                for i in 0..rows {
                    for j in 0..cols {
                        da[i * cols + j] += g[j * rows + i];
                    }
                }
            });
        }
        Op::Add { a, b } => {
            for &i in &[*a, *b] {
                acc(nodes, i, |d, _| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
        }
        Op::Sub { a, b } => {
            acc(nodes, *a, |d, _| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            acc(nodes, *b, |d, _| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            let av = nodes[a].value.data().to_vec();
            let bv = nodes[b].value.data().to_vec();
            acc(nodes, a, |d, _| {
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(&bv) {
                    *d += g * o;
                }
            });
            acc(nodes, b, |d, _| {
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(&av) {
                    *d += g * o;
                }
            });
        }
        Op::Div { a, b } => {
            let (a, b) = (*a, *b);
            let bv = nodes[b].value.data().to_vec();
            acc(nodes, a, |d, _| {
                for ((d, &g), &den) in d.iter_mut().zip(g).zip(&bv) {
                    *d += g / den;
                }
            });
            acc(nodes, b, |d, bdata| {
                for (((d, &g), &den), &q) in d.iter_mut().zip(g).zip(bdata).zip(y) {
                    *d -= g * q / den;
                }
            });
        }
        Op::AddRow { a, b, cols } => {
            let cols = *cols;
            acc(nodes, *a, |d, _| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            acc(nodes, *b, |d, _| {
                for row in g.chunks(cols) {
                    d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                }
            });
        }
        Op::Scale { a, c } => {
            let c = *c;
            acc(nodes, *a, |d, _| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c));
        }
        Op::Shift { a } => {
            acc(nodes, *a, |d, _| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
        }
        Op::Relu { a } => {
            acc(nodes, *a, |d, x| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                    if x > T::zero() {
                        *d += g;
                    }
                }
            });
        }
        Op::Sigmoid { a } => {
            acc(nodes, *a, |d, _| {
                for ((d, &g), &s) in d.iter_mut().zip(g).zip(y) {
                    *d += g * s * (T::one() - s);
                }
            });
        }
        Op::InvSigmoid { a, eps } => {
            let eps = *eps;
            acc(nodes, *a, |d, x| {
                for ((d, &g), &p) in d.iter_mut().zip(g).zip(x) {
                    if p >= eps && p <= T::one() - eps {
                        *d += g / (p * (T::one() - p));
                    }
                }
            });
        }
        Op::Abs { a } => {
            acc(nodes, *a, |d, x| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                    *d += g * x.signum() * if x == T::zero() { T::zero() } else { T::one() };
                }
            });
        }
        Op::Exp { a } => {
            acc(nodes, *a, |d, _| {
                for ((d, &g), &e) in d.iter_mut().zip(g).zip(y) {
                    *d += g * e;
                }
            });
        }
        Op::Ln { a } => {
            acc(nodes, *a, |d, x| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                    *d += g / x;
                }
            });
        }
        Op::Minimum { a, b } | Op::Maximum { a, b } => {
            // The forward pass picked `a` on ties; route the gradient the same way.
            let (a, b) = (*a, *b);
            let av = nodes[a].value.data().to_vec();
            let picked_a: Vec<bool> = av.iter().zip(y).map(|(&x, &o)| x == o).collect();
            acc(nodes, a, |d, _| {
                for ((d, &g), &p) in d.iter_mut().zip(g).zip(&picked_a) {
                    if p {
                        *d += g;
                    }
                }
            });
            acc(nodes, b, |d, _| {
                for ((d, &g), &p) in d.iter_mut().zip(g).zip(&picked_a) {
                    if !p {
                        *d += g;
                    }
                }
            });
        }
        Op::Softmax { a, outer, len, inner } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            acc(nodes, *a, |d, _| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, outer, len, inner, inv_std } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            let gv = nodes[*gain].value.data().to_vec();
            // xhat is recomputed from the input; (y − b) / g breaks down for tiny gains.
            let xs = nodes[*x].value.data().to_vec();
            let nf = T::from_usize_lossy(len);
            let mut xhat = vec![T::zero(); xs.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mean = (0..len).map(|j| xs[at(j)]).sum::<T>() / nf;
                    let inv = inv_std[o * inner + i];
                    for j in 0..len {
                        xhat[at(j)] = (xs[at(j)] - mean) * inv;
                    }
                }
            }
            acc(nodes, *gain, |d, _| {
                for (k, (&gg, &xh)) in g.iter().zip(&xhat).enumerate() {
                    d[(k / inner) % len] += gg * xh;
                }
            });
            acc(nodes, *bias, |d, _| {
                for (k, &gg) in g.iter().enumerate() {
                    d[(k / inner) % len] += gg;
                }
            });
            acc(nodes, *x, |d, _| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let inv = inv_std[o * inner + i];
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..len {
                            let dxh = g[at(j)] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[at(j)];
                        }
                        for j in 0..len {
                            let dxh = g[at(j)] * gv[j];
                            d[at(j)] += inv / nf * (nf * dxh - sum_dxh - xhat[at(j)] * sum_dxh_xh);
                        }
                    }
                }
            });
        }
        Op::Sum { a } => {
            let g0 = g[0];
            acc(nodes, *a, |d, _| d.iter_mut().for_each(|d| *d += g0));
        }
        Op::SliceCols { a, start, cols } => {
            let (start, cols) = (*start, *cols);
            let len = node.value.shape()[1];
            acc(nodes, *a, |d, _| {
                for (drow, grow) in d.chunks_mut(cols).zip(g.chunks(len)) {
                    for (dd, &gg) in drow[start..start + len].iter_mut().zip(grow) {
                        *dd += gg;
                    }
                }
            });
        }
        Op::ConcatCols { parts } => {
            let total = node.value.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.shape()[1];
                acc(nodes, p, |d, _| {
                    for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                        for (dd, &gg) in drow.iter_mut().zip(&grow[offset..offset + w]) {
                            *dd += gg;
                        }
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                acc(nodes, p, |d, _| {
                    for (dd, &gg) in d.iter_mut().zip(&g[offset..offset + n]) {
                        *dd += gg;
                    }
                });
                offset += n;
            }
        }
        Op::GatherRows { a, rows } => {
            let c = node.value.shape()[1];
            acc(nodes, *a, |d, _| {
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g[k * c + j];
                    }
                }
            });
        }
        Op::Reshape { a } => {
            acc(nodes, *a, |d, _| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
        }
        Op::Conv2d { x, w, b, geom } => {
            let (x, w, b) = (*x, *w, *b);
            let xv = nodes[x].value.data().to_vec();
            let wv = nodes[w].value.data().to_vec();
            if wants(nodes, b) {
                acc(nodes, b, |db, _| geom.backward(&xv, &wv, g, None, None, Some(db)));
            }
            if wants(nodes, w) {
                acc(nodes, w, |dw, _| geom.backward(&xv, &wv, g, None, Some(dw), None));
            }
            if wants(nodes, x) {
                acc(nodes, x, |dx, _| geom.backward(&xv, &wv, g, Some(dx), None, None));
            }
        }
        Op::Bilinear { map, loc, h, w } => {
            let (map, loc, h, w) = (*map, *loc, *h, *w);
            let mv = nodes[map].value.data().to_vec();
            let lv = nodes[loc].value.data().to_vec();
            let d = node.value.shape()[1];
            let p = lv.len() / 2;
            let taps: Vec<_> = (0..p).map(|i| bilinear_taps(lv[2 * i], lv[2 * i + 1], h, w)).collect();
            acc(nodes, map, |dm, _| {
                for (i, tap) in taps.iter().enumerate() {
                    for (cell, &tw) in tap.cells.iter().zip(&tap.weights) {
                        for c in 0..d {
                            dm[cell * d + c] += tw * g[i * d + c];
                        }
                    }
                }
            });
            acc(nodes, loc, |dl, _| {
                for (i, tap) in taps.iter().enumerate() {
                    for k in 0..4 {
                        let gv: T = (0..d).map(|c| g[i * d + c] * mv[tap.cells[k] * d + c]).sum();
                        dl[2 * i] += tap.dweights_dx[k] * gv;
                        dl[2 * i + 1] += tap.dweights_dy[k] * gv;
                    }
                }
            });
        }
        Op::Deform { value, locs, weights, layout } => {
            let (value, locs, weights) = (*value, *locs, *weights);
            let vv = nodes[value].value.data().to_vec();
            let lv = nodes[locs].value.data().to_vec();
            let wv = nodes[weights].value.data().to_vec();
            if wants(nodes, value) {
                acc(nodes, value, |d, _| layout.backward(&vv, &lv, &wv, g, Some(d), None, None));
            }
            if wants(nodes, locs) {
                acc(nodes, locs, |d, _| layout.backward(&vv, &lv, &wv, g, None, Some(d), None));
            }
            if wants(nodes, weights) {
                acc(nodes, weights, |d, _| layout.backward(&vv, &lv, &wv, g, None, None, Some(d)));
            }
        }
        Op::SigmoidFocal { logits, targets, alpha, gamma, eps } => {
            let (alpha, gamma, eps) = (*alpha, *gamma, *eps);
            let g0 = g[0];
            acc(nodes, *logits, |d, z| {
                for ((d, &z), &t) in d.iter_mut().zip(z).zip(targets) {
                    *d += g0 * focal_grad(z, t > T::lit(0.5), alpha, gamma, eps);
                }
            });
        }
    }
}

/// d focal / d logit, zero where the probability clamp is active.
fn focal_grad<T: Scalar>(z: T, positive: bool, alpha: T, gamma: T, eps: T) -> T {
    let p = sigmoid(z);
    if p < eps || p > T::one() - eps {
        return T::zero();
    }
    let q = T::one() - p;
    if positive {
        alpha * (gamma * p * q.powf(gamma) * p.ln() - q.powf(gamma + T::one()))
    } else {
        -(T::one() - alpha) * (gamma * p.powf(gamma) * q * q.ln() - p.powf(gamma + T::one()))
    }
}
