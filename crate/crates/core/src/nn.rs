//! Named parameter storage and the small layer vocabulary the detector uses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::scalar::Scalar;
use crate::tensor::{Result, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group; backbone parameters train at a scaled learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Transformer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub group: ParamGroup,
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, group: ParamGroup) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), tensor, group });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.entries.iter().filter(|e| e.group == group).map(|e| e.tensor.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }
}

/// A tape with every parameter of a store recorded as a gradient-carrying leaf.
#[derive(Debug)]
pub struct Graph<T> {
    pub tape: Tape<T>,
    params: Vec<Var>,
}

impl<T: Scalar> Graph<T> {
    pub fn bind(store: &ParamStore<T>) -> Self {
        let mut tape = Tape::new();
        let params = store.entries.iter().map(|e| tape.param(e.tensor.clone())).collect();
        Self { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Gradient of `id` after a backward pass, zeros if it did not influence the loss.
    pub fn param_grad(&self, id: ParamId) -> Vec<T> {
        let v = self.params[id.0];
        self.tape.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); self.tape.value(v).numel()])
    }
}

/// Seeded initializers.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn xavier<T: Scalar>(&mut self, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(bound, shape)
    }

    /// He-uniform initialization for layers followed by a ReLU.
    pub fn kaiming<T: Scalar>(&mut self, fan_in: usize, shape: Vec<usize>) -> Tensor<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        self.uniform(bound, shape)
    }

    pub fn uniform<T: Scalar>(&mut self, bound: f64, shape: Vec<usize>) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..n).map(|_| T::lit(dist.sample(self.rng))).collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    pub fn normal<T: Scalar>(&mut self, std: f64, shape: Vec<usize>) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| T::lit(dist.sample(self.rng))).collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.gen()
    }
}

/// `y = x·W + b` with `W` stored `[in×out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Self {
        let w = init.xavier(in_dim, out_dim, vec![in_dim, out_dim]);
        let weight = store.add(format!("{name}.weight"), w, group);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]), group));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.p(self.weight);
        let y = g.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.p(b);
                g.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    /// Multiply-adds for `rows` input rows.
    pub fn madds(&self, rows: usize) -> u64 {
        (rows * self.in_dim * self.out_dim) as u64
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        dims: &[usize],
        group: ParamGroup,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{name}.{i}"), w[0], w[1], true, group))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn madds(&self, rows: usize) -> u64 {
        self.layers.iter().map(|l| l.madds(rows)).sum()
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}

/// Layer normalization over the feature (last) axis of a `[rows×dim]` matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![dim], T::one()), group),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]), group),
            dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.p(self.gain), g.p(self.bias));
        g.tape.layer_norm(x, 1, gain, bias, T::lit(LAYER_NORM_EPS))
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// Square-kernel convolution over `[C×H×W]` maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        group: ParamGroup,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = init.kaiming(fan_in, vec![c_out, c_in, kernel, kernel]);
        Self {
            weight: store.add(format!("{name}.weight"), w, group),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]), group),
            c_in,
            c_out,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.p(self.weight), g.p(self.bias));
        g.tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }

    pub fn madds(&self, h_out: usize, w_out: usize) -> u64 {
        (h_out * w_out * self.c_out * self.c_in * self.kernel * self.kernel) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_param_count() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init { rng: &mut rng };
        let l = Linear::new(&mut store, &mut init, "l", 4, 8, true, ParamGroup::Transformer);
        assert_eq!(l.param_count(), 40);
        assert_eq!(store.count(), 40);
    }

    #[test]
    fn linear_forward_matches_hand_product() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), ParamGroup::Transformer);
        let b = store.add("b", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(), ParamGroup::Transformer);
        let lin = Linear { weight: w, bias: Some(b), in_dim: 2, out_dim: 2 };
        let mut g = Graph::bind(&store);
        let x = g.tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.data(y), &[4.5, 5.5]);
    }
}
