//! Plain-slice numeric kernels shared by the tape's forward and adjoint passes.

use crate::scalar::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_bt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn matmul_at_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(c_in: usize, h: usize, w: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let h_out = (h + 2 * pad - kernel) / stride + 1;
        let w_out = (w + 2 * pad - kernel) / stride + 1;
        Self { c_in, h, w, c_out, kernel, stride, pad, h_out, w_out }
    }

    /// Input pixel index for output `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    /// Lowers the input to a `[c_in·k·k × h_out·w_out]` patch matrix.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let k = self.kernel;
        let cols = self.h_out * self.w_out;
        let mut out = vec![T::zero(); self.c_in * k * k * cols];
        for c in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let dst = &mut out[r * cols..(r + 1) * cols];
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                dst[oy * self.w_out + ox] = x[(c * self.h + y) * self.w + xx];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im_acc<T: Scalar>(&self, cols_grad: &[T], dx: &mut [T]) {
        let k = self.kernel;
        let cols = self.h_out * self.w_out;
        for c in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let src = &cols_grad[r * cols..(r + 1) * cols];
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                dx[(c * self.h + y) * self.w + xx] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
        let patches = self.im2col(x);
        let cols = self.h_out * self.w_out;
        let kk = self.c_in * self.kernel * self.kernel;
        let mut out = vec![T::zero(); self.c_out * cols];
        for (o, &b) in bias.iter().enumerate() {
            out[o * cols..(o + 1) * cols].iter_mut().for_each(|v| *v = b);
        }
        matmul_acc(weight, &patches, &mut out, self.c_out, kk, cols);
        out
    }

    pub fn backward<T: Scalar>(
        &self,
        x: &[T],
        weight: &[T],
        g: &[T],
        dx: Option<&mut [T]>,
        dw: Option<&mut [T]>,
        db: Option<&mut [T]>,
    ) {
        let cols = self.h_out * self.w_out;
        let kk = self.c_in * self.kernel * self.kernel;
        if let Some(db) = db {
            for (o, d) in db.iter_mut().enumerate() {
                *d += g[o * cols..(o + 1) * cols].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw {
            let patches = self.im2col(x);
            matmul_bt_acc(g, &patches, dw, self.c_out, kk, cols);
        }
        if let Some(dx) = dx {
            let mut cols_grad = vec![T::zero(); kk * cols];
            matmul_at_acc(weight, g, &mut cols_grad, self.c_out, kk, cols);
            self.col2im_acc(&cols_grad, dx);
        }
    }
}

/// One bilinear interpolation stencil: four grid cells, their weights, and the
/// derivatives of those weights with respect to the normalized `x` and `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTap<T> {
    pub cells: [usize; 4],
    pub weights: [T; 4],
    pub dweights_dx: [T; 4],
    pub dweights_dy: [T; 4],
}

/// Stencil for sampling an `h×w` grid at normalized `(x, y)`.
///
/// Cell `(i, j)` has its center at `((j + 0.5)/w, (i + 0.5)/h)`. Locations
/// outside the span of cell centers are clamped to the border, where the
/// location derivative is zero.
pub fn bilinear_taps<T: Scalar>(x: T, y: T, h: usize, w: usize) -> BilinearTap<T> {
    let half = T::lit(0.5);
    let (u0, fu, du) = axis_coord(x * T::from_usize_lossy(w) - half, w);
    let (v0, fv, dv) = axis_coord(y * T::from_usize_lossy(h) - half, h);
    let u1 = (u0 + 1).min(w - 1);
    let v1 = (v0 + 1).min(h - 1);
    let one = T::one();
    let du = du * T::from_usize_lossy(w);
    let dv = dv * T::from_usize_lossy(h);
    BilinearTap {
        cells: [v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1],
        weights: [(one - fu) * (one - fv), fu * (one - fv), (one - fu) * fv, fu * fv],
        dweights_dx: [-(one - fv) * du, (one - fv) * du, -fv * du, fv * du],
        dweights_dy: [-(one - fu) * dv, -fu * dv, (one - fu) * dv, fu * dv],
    }
}

/// Splits a continuous grid coordinate into (base cell, fraction, d fraction / d coord).
fn axis_coord<T: Scalar>(u: T, extent: usize) -> (usize, T, T) {
    let max = T::from_usize_lossy(extent - 1);
    if extent == 1 || u.is_nan() {
        return (0, T::zero(), T::zero());
    }
    if u <= T::zero() {
        return (0, T::zero(), if u == T::zero() { T::one() } else { T::zero() });
    }
    if u >= max {
        return (extent - 2, T::one(), T::zero());
    }
    let base = u.floor().to_usize().unwrap_or(0).min(extent - 2);
    (base, u - T::from_usize_lossy(base), T::one())
}

/// Placement of one feature level inside a concatenated token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelGeometry {
    /// First token row of this level.
    pub start: usize,
    pub h: usize,
    pub w: usize,
}

impl LevelGeometry {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

/// Shape bookkeeping for the fused deformable sampling/aggregation kernel.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DeformLayout {
    pub heads: usize,
    pub samples: usize,
    pub dim: usize,
    pub levels: Vec<LevelGeometry>,
    pub query_levels: Vec<usize>,
}

impl DeformLayout {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `out[q, m·dh + c] = Σ_s a[q,m,s] · bilinear(value[level(q)], loc[q,m,s])[m·dh + c]`
    pub fn forward<T: Scalar>(&self, value: &[T], locs: &[T], weights: &[T]) -> Vec<T> {
        let (mh, k, d, dh) = (self.heads, self.samples, self.dim, self.head_dim());
        let n = self.query_levels.len();
        let mut out = vec![T::zero(); n * d];
        for q in 0..n {
            let lvl = self.levels[self.query_levels[q]];
            for m in 0..mh {
                for s in 0..k {
                    let slot = (q * mh + m) * k + s;
                    let a = weights[slot];
                    let tap = bilinear_taps(locs[2 * slot], locs[2 * slot + 1], lvl.h, lvl.w);
                    let orow = &mut out[q * d + m * dh..q * d + (m + 1) * dh];
                    for (cell, &tw) in tap.cells.iter().zip(&tap.weights) {
                        let coef = a * tw;
                        if coef == T::zero() {
                            continue;
                        }
                        let row = (lvl.start + cell) * d + m * dh;
                        for (o, &v) in orow.iter_mut().zip(&value[row..row + dh]) {
                            *o += coef * v;
                        }
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        value: &[T],
        locs: &[T],
        weights: &[T],
        g: &[T],
        mut dvalue: Option<&mut [T]>,
        mut dlocs: Option<&mut [T]>,
        mut dweights: Option<&mut [T]>,
    ) {
        let (mh, k, d, dh) = (self.heads, self.samples, self.dim, self.head_dim());
        for (q, &level) in self.query_levels.iter().enumerate() {
            let lvl = self.levels[level];
            for m in 0..mh {
                let grow = &g[q * d + m * dh..q * d + (m + 1) * dh];
                for s in 0..k {
                    let slot = (q * mh + m) * k + s;
                    let a = weights[slot];
                    let tap = bilinear_taps(locs[2 * slot], locs[2 * slot + 1], lvl.h, lvl.w);
                    let mut dot_w = T::zero();
                    let mut dot_x = T::zero();
                    let mut dot_y = T::zero();
                    for c in 0..4 {
                        let row = (lvl.start + tap.cells[c]) * d + m * dh;
                        let vrow = &value[row..row + dh];
                        let gv: T = grow.iter().zip(vrow).map(|(&gg, &vv)| gg * vv).sum();
                        dot_w += tap.weights[c] * gv;
                        dot_x += tap.dweights_dx[c] * gv;
                        dot_y += tap.dweights_dy[c] * gv;
                        if let Some(dv) = dvalue.as_deref_mut() {
                            let coef = a * tap.weights[c];
                            if coef != T::zero() {
                                for (o, &gg) in dv[row..row + dh].iter_mut().zip(grow) {
                                    *o += coef * gg;
                                }
                            }
                        }
                    }
                    if let Some(dw) = dweights.as_deref_mut() {
                        dw[slot] += dot_w;
                    }
                    if let Some(dl) = dlocs.as_deref_mut() {
                        dl[2 * slot] += a * dot_x;
                        dl[2 * slot + 1] += a * dot_y;
                    }
                }
            }
        }
    }
}
