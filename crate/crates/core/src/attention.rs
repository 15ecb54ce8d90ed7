//! Standard multi-head attention, cross-attention, and deformable attention.
//!
//! Per-head projections `W_mq, W_mk, W_mv ∈ R^{d×d/M}` are stored side by side
//! as one `d×d` matrix (head `m` owns columns `m·d/M..(m+1)·d/M`), and the
//! per-head output maps `W_mo ∈ R^{d/M×d}` are stacked row-wise, so
//! `Σ_m W_mo[head_m]` is a single product of the concatenated heads.

use std::f64::consts::PI;

use crate::nn::{Graph, Init, Linear, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{LevelGeometry, Result, Tape, Tensor, TensorError, Var};

/// Projection handles for one multi-head attention block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionVars {
    pub heads: usize,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

fn check_heads(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(TensorError::Invalid(format!("model dimension {dim} is not divisible by {heads} heads")));
    }
    Ok(dim / heads)
}

/// `Σ_m W_mo · softmax(Q W_mq (K W_mk)ᵀ / √(d/M)) · V W_mv`
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    p: &AttentionVars,
) -> Result<Var> {
    let (_, d) = tape.value(q_in).dims2()?;
    let (kr, _) = tape.value(k_in).dims2()?;
    let (vr, _) = tape.value(v_in).dims2()?;
    if kr != vr {
        return Err(TensorError::ShapeMismatch {
            op: "attention keys/values",
            left: tape.shape(k_in).to_vec(),
            right: tape.shape(v_in).to_vec(),
        });
    }
    let dh = check_heads(d, p.heads)?;
    let q = tape.matmul(q_in, p.w_q)?;
    let k = tape.matmul(k_in, p.w_k)?;
    let v = tape.matmul(v_in, p.w_v)?;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for m in 0..p.heads {
        let qm = tape.slice_cols(q, m * dh, dh)?;
        let km = tape.slice_cols(k, m * dh, dh)?;
        let vm = tape.slice_cols(v, m * dh, dh)?;
        let kt = tape.transpose(km)?;
        let scores = tape.matmul(qm, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(attn, vm)?);
    }
    let cat = tape.concat_cols(&heads)?;
    tape.matmul(cat, p.w_o)
}

/// Self-attention over tokens `x_f` with positional encodings `x_p`:
/// `Q = K = x_f + x_p`, `V = x_f`.
pub fn mhsa<T: Scalar>(tape: &mut Tape<T>, x_f: Var, x_p: Var, p: &AttentionVars) -> Result<Var> {
    let qk = tape.add(x_f, x_p)?;
    multi_head_attention(tape, qk, qk, x_f, p)
}

/// Cross-attention with `Q = q_c + q_p`, `K = x_enc + x_p`, `V = q_c`.
///
/// The value rows must align with the key rows, so this form is only defined
/// when the number of object queries equals the number of encoder tokens.
pub fn mh_cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q_c: Var,
    q_p: Var,
    x_enc: Var,
    x_p: Var,
    p: &AttentionVars,
) -> Result<Var> {
    let q = tape.add(q_c, q_p)?;
    let k = tape.add(x_enc, x_p)?;
    multi_head_attention(tape, q, k, q_c, p)
}

/// Stored projections of a multi-head attention block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub dim: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl AttentionParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim divisible by heads");
        let mut mk = |suffix: &str| {
            let t = init.xavier(dim, dim, vec![dim, dim]);
            store.add(format!("{name}.{suffix}"), t, ParamGroup::Transformer)
        };
        Self { heads, dim, w_q: mk("w_q"), w_k: mk("w_k"), w_v: mk("w_v"), w_o: mk("w_o") }
    }

    pub fn bind<T: Scalar>(&self, g: &Graph<T>) -> AttentionVars {
        AttentionVars {
            heads: self.heads,
            w_q: g.p(self.w_q),
            w_k: g.p(self.w_k),
            w_v: g.p(self.w_v),
            w_o: g.p(self.w_o),
        }
    }

    pub fn param_count(&self) -> usize {
        4 * self.dim * self.dim
    }

    /// Multiply-adds for `nq` queries attending over `nk` keys.
    pub fn madds(&self, nq: usize, nk: usize) -> u64 {
        let d = self.dim;
        ((nq + 2 * nk) * d * d + 2 * nq * nk * d + nq * d * d) as u64
    }
}

/// Normalized 2-D anchor of a query plus the feature level it samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub x: f64,
    pub y: f64,
    pub level: usize,
}

impl ReferencePoint {
    /// Builds a point, clamping the coordinates into `[0, 1]²`.
    pub fn new(x: f64, y: f64, level: usize) -> Self {
        Self { x: x.clamp(0.0, 1.0), y: y.clamp(0.0, 1.0), level }
    }
}

/// Handles for one deformable attention block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformableVars {
    pub heads: usize,
    pub samples: usize,
    pub offset_w: Var,
    pub offset_b: Var,
    pub logit_w: Var,
    pub logit_b: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Everything a deformable attention call produced, for inspection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformableOutput {
    /// `[N×d]`
    pub output: Var,
    /// `[N × M·k]`, softmax-normalized over the `k` samples of each head.
    pub weights: Var,
    /// `[N × M·k·2]` absolute normalized sampling locations.
    pub locations: Var,
}

/// Deformable attention over a concatenated multi-level token sequence.
///
/// For query `q`, head `m` and sample `s` the block predicts an offset
/// `Δp = (queries·W_off + b_off)[q, m, s]` measured in cells of the query's
/// level and a logit `(queries·W_a + b_a)[q, m, s]`; the `k` logits of a head
/// are softmax-normalized and weight the bilinearly sampled, value-projected
/// features at `p_q + Δp / (W_l, H_l)`.
#[allow(clippy::too_many_arguments)]
pub fn deformable_attention<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    refs: Var,
    query_levels: &[usize],
    value_tokens: Var,
    levels: &[LevelGeometry],
    p: &DeformableVars,
) -> Result<DeformableOutput> {
    let (n, d) = tape.value(queries).dims2()?;
    let (rn, two) = tape.value(refs).dims2()?;
    if rn != n || two != 2 || query_levels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "deformable_attention refs",
            left: vec![n, d],
            right: vec![rn, two, query_levels.len()],
        });
    }
    check_heads(d, p.heads)?;
    if let Some(&bad) = query_levels.iter().find(|&&l| l >= levels.len()) {
        return Err(TensorError::Invalid(format!(
            "reference point names level index {bad} but only {} levels were provided",
            levels.len()
        )));
    }
    let mk = p.heads * p.samples;

    let raw = tape.matmul(queries, p.offset_w)?;
    let offsets = tape.add_row(raw, p.offset_b)?;
    let mut cell = Vec::with_capacity(n * mk * 2);
    for &l in query_levels {
        let g = levels[l];
        for _ in 0..mk {
            cell.push(T::one() / T::from_usize_lossy(g.w));
            cell.push(T::one() / T::from_usize_lossy(g.h));
        }
    }
    let cell = tape.constant(Tensor::new(vec![n, mk * 2], cell)?);
    let scaled = tape.mul(offsets, cell)?;
    let mut expand = vec![T::zero(); 2 * mk * 2];
    for j in 0..mk {
        expand[2 * j] = T::one();
        expand[mk * 2 + 2 * j + 1] = T::one();
    }
    let expand = tape.constant(Tensor::new(vec![2, mk * 2], expand)?);
    let anchors = tape.matmul(refs, expand)?;
    let locations = tape.add(anchors, scaled)?;

    let raw = tape.matmul(queries, p.logit_w)?;
    let logits = tape.add_row(raw, p.logit_b)?;
    let logits = tape.reshape(logits, &[n, p.heads, p.samples])?;
    let weights = tape.softmax(logits, 2)?;
    let weights = tape.reshape(weights, &[n, mk])?;

    let values = tape.matmul(value_tokens, p.w_v)?;
    let agg = tape.deform_aggregate(values, locations, weights, p.heads, p.samples, levels, query_levels)?;
    let output = tape.matmul(agg, p.w_o)?;
    Ok(DeformableOutput { output, weights, locations })
}

/// Deformable attention over explicit per-level `[H×W×d]` feature maps.
pub fn deformable_mhsa<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    ref_points: &[ReferencePoint],
    feature_maps: &[Var],
    p: &DeformableVars,
) -> Result<DeformableOutput> {
    let mut levels = Vec::with_capacity(feature_maps.len());
    let mut flat = Vec::with_capacity(feature_maps.len());
    let mut start = 0;
    for &m in feature_maps {
        let (h, w, d) = match tape.shape(m) {
            [h, w, d] => (*h, *w, *d),
            other => {
                return Err(TensorError::ShapeMismatch {
                    op: "deformable_mhsa feature map",
                    left: other.to_vec(),
                    right: vec![0, 0, 0],
                })
            }
        };
        levels.push(LevelGeometry { start, h, w });
        start += h * w;
        flat.push(tape.reshape(m, &[h * w, d])?);
    }
    if flat.is_empty() {
        return Err(TensorError::Invalid("no feature maps supplied".into()));
    }
    let tokens = tape.concat_rows(&flat)?;
    let coords: Vec<T> = ref_points.iter().flat_map(|r| [T::lit(r.x), T::lit(r.y)]).collect();
    let refs = tape.constant(Tensor::new(vec![ref_points.len(), 2], coords)?);
    let query_levels: Vec<usize> = ref_points.iter().map(|r| r.level).collect();
    deformable_attention(tape, queries, refs, &query_levels, tokens, &levels, p)
}

/// Stored parameters of a deformable attention block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformableParams {
    pub heads: usize,
    pub samples: usize,
    pub dim: usize,
    pub offset: Linear,
    pub logits: Linear,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl DeformableParams {
    /// Offset weights start at zero with biases spread on rings around the
    /// reference point: head `m` points in direction `2πm/M`, sample `s` sits
    /// `s + 1` cells out.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        samples: usize,
    ) -> Self {
        assert!(heads > 0 && samples > 0 && dim.is_multiple_of(heads));
        let offset = Linear::new(
            store,
            init,
            &format!("{name}.offset"),
            dim,
            heads * samples * 2,
            true,
            ParamGroup::Transformer,
        );
        *store.get_mut(offset.weight) = Tensor::zeros(vec![dim, heads * samples * 2]);
        let mut bias = Vec::with_capacity(heads * samples * 2);
        for m in 0..heads {
            let theta = 2.0 * PI * m as f64 / heads as f64;
            let (s, c) = theta.sin_cos();
            let norm = c.abs().max(s.abs());
            for k in 0..samples {
                let r = (k + 1) as f64;
                bias.push(T::lit(c / norm * r));
                bias.push(T::lit(s / norm * r));
            }
        }
        *store.get_mut(offset.bias.expect("offset bias")) =
            Tensor::new(vec![heads * samples * 2], bias).expect("bias shape");
        let logits =
            Linear::new(store, init, &format!("{name}.logits"), dim, heads * samples, true, ParamGroup::Transformer);
        *store.get_mut(logits.weight) = Tensor::zeros(vec![dim, heads * samples]);
        let w_v = store.add(format!("{name}.w_v"), init.xavier(dim, dim, vec![dim, dim]), ParamGroup::Transformer);
        let w_o = store.add(format!("{name}.w_o"), init.xavier(dim, dim, vec![dim, dim]), ParamGroup::Transformer);
        Self { heads, samples, dim, offset, logits, w_v, w_o }
    }

    pub fn bind<T: Scalar>(&self, g: &Graph<T>) -> DeformableVars {
        DeformableVars {
            heads: self.heads,
            samples: self.samples,
            offset_w: g.p(self.offset.weight),
            offset_b: g.p(self.offset.bias.expect("offset bias")),
            logit_w: g.p(self.logits.weight),
            logit_b: g.p(self.logits.bias.expect("logit bias")),
            w_v: g.p(self.w_v),
            w_o: g.p(self.w_o),
        }
    }

    pub fn param_count(&self) -> usize {
        self.offset.param_count() + self.logits.param_count() + 2 * self.dim * self.dim
    }

    /// Multiply-adds for `nq` queries over a value sequence of `nv` tokens.
    pub fn madds(&self, nq: usize, nv: usize) -> u64 {
        let d = self.dim;
        let mk = self.heads * self.samples;
        self.offset.madds(nq)
            + self.logits.madds(nq)
            + (nv * d * d) as u64
            + (nq * mk * 4 * (d / self.heads)) as u64
            + (nq * d * d) as u64
    }
}
