//! The configurable detector: backbone, deformable encoder, query
//! initialization, decoder with optional iterative box refinement, and the
//! shared prediction heads.

mod config;
mod positional;
pub mod weights;

pub use config::{ModelConfig, QueryInit, ENCODER_DEPTHS, LEVEL_STRIDES, RESOLUTION_SCALES};
pub use positional::positional_encoding;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{deformable_attention, mhsa, AttentionParams, DeformableParams};
use crate::loss::LayerOutput;
use crate::nn::{Conv2d, Graph, Init, LayerNorm, Linear, Mlp, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{inverse_sigmoid, LevelGeometry, Tape, Tensor, TensorError, Var, INVERSE_SIGMOID_EPS};

/// Smallest image side the stride-64 backbone accepts.
pub const MIN_IMAGE_SIDE: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image {h}×{w} is smaller than the {min}×{min} minimum of the stride-64 backbone")]
    ImageTooSmall { h: usize, w: usize, min: usize },
    #[error("{queries} queries requested but the encoder produced only {tokens} tokens to select from")]
    TooFewTokens { queries: usize, tokens: usize },
    #[error("weights do not fit this configuration: {0}")]
    Weights(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Backbone plan: `(out channels, stride, feature level produced)`.
/// Levels 1..4 sit at strides 8, 16, 32, 64 with 16/32/64/64 channels.
const BACKBONE: [(usize, usize, Option<usize>); 6] =
    [(8, 2, None), (16, 2, None), (16, 2, Some(1)), (32, 2, Some(2)), (64, 2, Some(3)), (64, 2, Some(4))];

/// Channel width of each feature level.
pub const LEVEL_CHANNELS: [usize; 4] = [16, 32, 64, 64];

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayer {
    attn: DeformableParams,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayer {
    self_attn: AttentionParams,
    norm1: LayerNorm,
    cross: DeformableParams,
    norm2: LayerNorm,
    ffn: Mlp,
    norm3: LayerNorm,
}

/// Backbone feature maps, each `[C_l × H_l × W_l]`, for levels `1..=max level`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub maps: Vec<Var>,
    pub extents: Vec<(usize, usize)>,
}

/// Content embedding, positional embedding and reference point of every query.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    /// `[N×d]`
    pub content: Var,
    /// `[N×d]`
    pub positional: Var,
    /// `[N×2]`, in `[0, 1]²`.
    pub references: Var,
    /// Index into the selected-level list sampled by each query.
    pub levels: Vec<usize>,
    /// Encoder tokens supplying the queries under pure/mixed selection.
    pub selected_tokens: Option<Vec<usize>>,
}

/// Tape handles of one full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    /// Encoder input after the 1×1 projection, `[T×d]`.
    pub projected_tokens: Var,
    pub token_positions: Var,
    pub encoder_out: Var,
    pub levels: Vec<LevelGeometry>,
    pub queries: QuerySet,
    /// Per decoder layer: the shared heads' boxes and class logits.
    pub layers: Vec<LayerOutput>,
    /// Per decoder layer: the reference points that layer sampled around.
    pub references: Vec<Var>,
}

impl ForwardOutput {
    pub fn last(&self) -> LayerOutput {
        *self.layers.last().expect("at least one decoder layer")
    }
}

/// Values of one decoder layer's predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPredictions<T> {
    /// `[N×4]` normalized `(cx, cy, w, h)`.
    pub boxes: Tensor<T>,
    /// `[N×C]` pre-sigmoid.
    pub logits: Tensor<T>,
    /// `[N×2]`
    pub references: Tensor<T>,
}

impl<T: Scalar> LayerPredictions<T> {
    /// Sigmoid class scores `[N×C]`.
    pub fn scores(&self) -> Vec<T> {
        self.logits.data().iter().map(|&z| crate::tensor::sigmoid(z)).collect()
    }
}

/// Predictions of every decoder layer; inference uses the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions<T> {
    pub layers: Vec<LayerPredictions<T>>,
}

impl<T: Scalar> Predictions<T> {
    pub fn final_layer(&self) -> &LayerPredictions<T> {
        self.layers.last().expect("at least one decoder layer")
    }

    pub fn from_forward(tape: &Tape<T>, out: &ForwardOutput) -> Self {
        let layers = out
            .layers
            .iter()
            .zip(&out.references)
            .map(|(l, &r)| LayerPredictions {
                boxes: tape.value(l.boxes).clone(),
                logits: tape.value(l.logits).clone(),
                references: tape.value(r).clone(),
            })
            .collect();
        Self { layers }
    }
}

/// Parameter and multiply-add totals of one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Complexity {
    pub params: usize,
    pub backbone_params: usize,
    pub madds: u64,
    pub backbone_madds: u64,
}

/// Deformable DETR with every studied design choice exposed in [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeformableDetr<T> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    backbone: Vec<Conv2d>,
    input_proj: Vec<Linear>,
    level_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    class_head: Linear,
    box_head: Mlp,
    ref_proj: Linear,
    query_pos: Option<ParamId>,
    query_content: Option<ParamId>,
    select_pos_proj: Option<Linear>,
}

/// Prior probability of the class head at initialization.
const CLASS_PRIOR: f64 = 0.01;
/// Initial predicted box side (normalized) before any training.
const BOX_PRIOR: f64 = 0.1;

impl<T: Scalar> DeformableDetr<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        let d = cfg.model_dim;

        let mut backbone = Vec::new();
        let mut c_in = 1;
        for (i, &(c_out, stride, level)) in BACKBONE.iter().enumerate() {
            if level.is_some_and(|l| l > cfg.max_level()) {
                break;
            }
            backbone.push(Conv2d::new(
                &mut store,
                &mut init,
                &format!("backbone.{i}"),
                c_in,
                c_out,
                3,
                stride,
                ParamGroup::Backbone,
            ));
            c_in = c_out;
        }

        let t = ParamGroup::Transformer;
        let input_proj = cfg
            .feature_levels
            .iter()
            .map(|&l| Linear::new(&mut store, &mut init, &format!("input_proj.{l}"), LEVEL_CHANNELS[l - 1], d, true, t))
            .collect();
        let level_embed = store.add("level_embed", init.normal(1.0, vec![4, d]), t);

        let encoder = (0..cfg.encoder_layers)
            .map(|i| {
                let name = format!("encoder.{i}");
                EncoderLayer {
                    attn: DeformableParams::new(
                        &mut store,
                        &mut init,
                        &format!("{name}.attn"),
                        d,
                        cfg.heads,
                        cfg.samples,
                    ),
                    norm1: LayerNorm::new(&mut store, &format!("{name}.norm1"), d, t),
                    ffn: Mlp::new(&mut store, &mut init, &format!("{name}.ffn"), &[d, cfg.ffn_dim, d], t),
                    norm2: LayerNorm::new(&mut store, &format!("{name}.norm2"), d, t),
                }
            })
            .collect();

        let decoder = (0..cfg.decoder_layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                DecoderLayer {
                    self_attn: AttentionParams::new(&mut store, &mut init, &format!("{name}.self_attn"), d, cfg.heads),
                    norm1: LayerNorm::new(&mut store, &format!("{name}.norm1"), d, t),
                    cross: DeformableParams::new(
                        &mut store,
                        &mut init,
                        &format!("{name}.cross"),
                        d,
                        cfg.heads,
                        cfg.samples,
                    ),
                    norm2: LayerNorm::new(&mut store, &format!("{name}.norm2"), d, t),
                    ffn: Mlp::new(&mut store, &mut init, &format!("{name}.ffn"), &[d, cfg.ffn_dim, d], t),
                    norm3: LayerNorm::new(&mut store, &format!("{name}.norm3"), d, t),
                }
            })
            .collect();

        let class_head = Linear::new(&mut store, &mut init, "class_head", d, cfg.num_classes, true, t);
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        *store.get_mut(class_head.bias.expect("bias")) = Tensor::full(vec![cfg.num_classes], T::lit(prior));
        let box_head = Mlp::new(&mut store, &mut init, "box_head", &[d, d, d, 4], t);
        let last = *box_head.last();
        *store.get_mut(last.weight) = Tensor::zeros(vec![d, 4]);
        let size_logit = inverse_sigmoid(BOX_PRIOR, INVERSE_SIGMOID_EPS);
        *store.get_mut(last.bias.expect("bias")) =
            Tensor::new(vec![4], vec![T::zero(), T::zero(), T::lit(size_logit), T::lit(size_logit)])?;

        // The reference map starts as a read-out of the first two positional
        // channels, which are seeded with the logits of a point grid (static
        // queries) or with the selected token's box centre (pure/mixed).
        let ref_proj = Linear::new(&mut store, &mut init, "ref_proj", d, 2, true, t);
        *store.get_mut(ref_proj.weight) = coordinate_readout(d, 0);
        let n = cfg.num_queries;
        let query_pos = (cfg.query_init == QueryInit::Static).then(|| {
            let mut pos: Tensor<T> = init.normal(1.0, vec![n, d]);
            for (i, (x, y)) in query_grid(n).into_iter().enumerate() {
                pos.data_mut()[i * d] = T::lit(inverse_sigmoid(x, INVERSE_SIGMOID_EPS));
                pos.data_mut()[i * d + 1] = T::lit(inverse_sigmoid(y, INVERSE_SIGMOID_EPS));
            }
            store.add("query_pos", pos, t)
        });
        let query_content =
            (cfg.query_init == QueryInit::Mixed).then(|| store.add("query_content", init.normal(1.0, vec![n, d]), t));
        let select_pos_proj = (cfg.query_init != QueryInit::Static).then(|| {
            let proj = Linear::new(&mut store, &mut init, "select_pos_proj", d + 4, d, true, t);
            let w = store.get_mut(proj.weight);
            for r in 0..d + 4 {
                for c in 0..2 {
                    w.data_mut()[r * d + c] = if r == d + c { T::one() } else { T::zero() };
                }
            }
            proj
        });

        Ok(Self {
            cfg,
            store,
            backbone,
            input_proj,
            level_embed,
            encoder,
            decoder,
            class_head,
            box_head,
            ref_proj,
            query_pos,
            query_content,
            select_pos_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Resizes a `[1×H×W]` image by the configured resolution scale, then runs
    /// the whole network and returns every decoder layer's predictions.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Predictions<T>> {
        let image = if self.cfg.resolution_scale == 1.0 {
            image.clone()
        } else {
            resize_image(image, self.cfg.resolution_scale)?
        };
        self.forward_unscaled(&image)
    }

    /// Runs the network on an image already at model resolution.
    pub fn forward_unscaled(&self, image: &Tensor<T>) -> Result<Predictions<T>> {
        let mut g = Graph::bind(&self.store);
        let x = g.tape.constant(image.clone());
        let out = self.forward_graph(&mut g, x)?;
        Ok(Predictions::from_forward(&g.tape, &out))
    }

    /// Records the network on `g` for an image already at model resolution.
    pub fn forward_graph(&self, g: &mut Graph<T>, image: Var) -> Result<ForwardOutput> {
        let pyramid = self.backbone_forward(g, image)?;
        let (projected, positions, levels, token_refs, token_levels) = self.tokens(g, &pyramid)?;
        let encoder_out = self.encode_tokens(g, projected, positions, &levels, &token_refs, &token_levels)?;
        let queries = self.init_queries(g, encoder_out, positions, &token_refs, &token_levels)?;
        let (layers, references) = self.decode(g, &queries, encoder_out, &levels)?;
        Ok(ForwardOutput {
            pyramid,
            projected_tokens: projected,
            token_positions: positions,
            encoder_out,
            levels,
            queries,
            layers,
            references,
        })
    }

    /// Strided convolution stack producing levels `1..=max selected level`.
    pub fn backbone_forward(&self, g: &mut Graph<T>, image: Var) -> Result<FeaturePyramid> {
        let (h, w) = match g.tape.shape(image) {
            [1, h, w] => (*h, *w),
            other => {
                return Err(TensorError::ShapeMismatch {
                    op: "backbone input",
                    left: other.to_vec(),
                    right: vec![1, 0, 0],
                }
                .into())
            }
        };
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(ModelError::ImageTooSmall { h, w, min: MIN_IMAGE_SIDE });
        }
        let mut x = image;
        let mut maps = Vec::new();
        let mut extents = Vec::new();
        for (conv, &(_, _, level)) in self.backbone.iter().zip(BACKBONE.iter()) {
            let y = conv.forward(g, x)?;
            x = g.tape.relu(y)?;
            if level.is_some() {
                let s = g.tape.shape(x);
                extents.push((s[1], s[2]));
                maps.push(x);
            }
        }
        Ok(FeaturePyramid { maps, extents })
    }

    #[allow(clippy::type_complexity)]
    fn tokens(
        &self,
        g: &mut Graph<T>,
        pyramid: &FeaturePyramid,
    ) -> Result<(Var, Var, Vec<LevelGeometry>, Vec<T>, Vec<usize>)> {
        let d = self.cfg.model_dim;
        let mut proj = Vec::new();
        let mut pos = Vec::new();
        let mut levels = Vec::new();
        let mut refs = Vec::new();
        let mut token_levels = Vec::new();
        let mut start = 0;
        for (li, (&level, lin)) in self.cfg.feature_levels.iter().zip(&self.input_proj).enumerate() {
            let map = pyramid.maps[level - 1];
            let (h, w) = pyramid.extents[level - 1];
            let c = LEVEL_CHANNELS[level - 1];
            let flat = g.tape.reshape(map, &[c, h * w])?;
            let seq = g.tape.transpose(flat)?;
            proj.push(lin.forward(g, seq)?);
            let pe = g.tape.constant(positional_encoding(h, w, d)?);
            let embed = g.p(self.level_embed);
            let lvl = g.tape.gather_rows(embed, &vec![level - 1; h * w])?;
            pos.push(g.tape.add(pe, lvl)?);
            levels.push(LevelGeometry { start, h, w });
            for i in 0..h {
                for j in 0..w {
                    refs.push(T::lit((j as f64 + 0.5) / w as f64));
                    refs.push(T::lit((i as f64 + 0.5) / h as f64));
                    token_levels.push(li);
                }
            }
            start += h * w;
        }
        let projected = g.tape.concat_rows(&proj)?;
        let positions = g.tape.concat_rows(&pos)?;
        Ok((projected, positions, levels, refs, token_levels))
    }

    /// Token sequence of the selected levels, passed through the encoder layers.
    /// With zero encoder layers the projected tokens are returned as they are.
    pub fn encode(&self, g: &mut Graph<T>, pyramid: &FeaturePyramid) -> Result<Var> {
        let (projected, positions, levels, refs, token_levels) = self.tokens(g, pyramid)?;
        self.encode_tokens(g, projected, positions, &levels, &refs, &token_levels)
    }

    fn encode_tokens(
        &self,
        g: &mut Graph<T>,
        projected: Var,
        positions: Var,
        levels: &[LevelGeometry],
        token_refs: &[T],
        token_levels: &[usize],
    ) -> Result<Var> {
        let mut src = projected;
        if self.encoder.is_empty() {
            return Ok(src);
        }
        let refs = g.tape.constant(Tensor::new(vec![token_levels.len(), 2], token_refs.to_vec())?);
        for layer in &self.encoder {
            let q = g.tape.add(src, positions)?;
            let vars = layer.attn.bind(g);
            let attn = deformable_attention(&mut g.tape, q, refs, token_levels, src, levels, &vars)?;
            let x = g.tape.add(src, attn.output)?;
            let x = layer.norm1.forward(g, x)?;
            let f = layer.ffn.forward(g, x)?;
            let x2 = g.tape.add(x, f)?;
            src = layer.norm2.forward(g, x2)?;
        }
        Ok(src)
    }

    /// Builds the `N` object queries.
    pub fn init_queries(
        &self,
        g: &mut Graph<T>,
        encoder_out: Var,
        positions: Var,
        token_refs: &[T],
        token_levels: &[usize],
    ) -> Result<QuerySet> {
        let n = self.cfg.num_queries;
        let d = self.cfg.model_dim;
        let n_levels = self.cfg.feature_levels.len();
        match self.cfg.query_init {
            QueryInit::Static => {
                let positional = g.p(self.query_pos.expect("static queries own positional embeddings"));
                let content = g.tape.constant(Tensor::zeros(vec![n, d]));
                let references = self.reference_points(g, positional)?;
                Ok(QuerySet {
                    content,
                    positional,
                    references,
                    levels: (0..n).map(|i| i % n_levels).collect(),
                    selected_tokens: None,
                })
            }
            QueryInit::Pure | QueryInit::Mixed => {
                let tokens = token_levels.len();
                let logits = self.class_head.forward(g, encoder_out)?;
                let c = self.cfg.num_classes;
                let scores: Vec<T> = g
                    .tape
                    .data(logits)
                    .chunks(c)
                    .map(|row| row.iter().copied().fold(T::neg_infinity(), T::max))
                    .collect();
                let chosen =
                    select_top_tokens(&scores, n).map_err(|_| ModelError::TooFewTokens { queries: n, tokens })?;
                let selected = g.tape.gather_rows(encoder_out, &chosen)?;
                let centers: Vec<T> = chosen.iter().flat_map(|&t| [token_refs[2 * t], token_refs[2 * t + 1]]).collect();
                let centers = g.tape.constant(Tensor::new(vec![n, 2], centers)?);
                let boxes = self.predict_boxes(g, selected, centers)?;
                let box_logits = g.tape.inverse_sigmoid(boxes, T::lit(INVERSE_SIGMOID_EPS))?;
                let pe = g.tape.gather_rows(positions, &chosen)?;
                let joined = g.tape.concat_cols(&[pe, box_logits])?;
                let proj = self.select_pos_proj.expect("selection projection");
                let positional = proj.forward(g, joined)?;
                let content = match self.cfg.query_init {
                    QueryInit::Pure => selected,
                    _ => g.p(self.query_content.expect("mixed queries own content embeddings")),
                };
                let references = self.reference_points(g, positional)?;
                Ok(QuerySet {
                    content,
                    positional,
                    references,
                    levels: chosen.iter().map(|&t| token_levels[t]).collect(),
                    selected_tokens: Some(chosen),
                })
            }
        }
    }

    /// `sigmoid(linear(q_p))`
    fn reference_points(&self, g: &mut Graph<T>, positional: Var) -> Result<Var> {
        let r = self.ref_proj.forward(g, positional)?;
        Ok(g.tape.sigmoid(r)?)
    }

    /// Pre-sigmoid box: shared box MLP output with the centre shifted by the
    /// inverse-sigmoid of the reference point.
    fn box_logits(&self, g: &mut Graph<T>, x: Var, refs: Var) -> Result<Var> {
        let delta = self.box_head.forward(g, x)?;
        let anchor = g.tape.inverse_sigmoid(refs, T::lit(INVERSE_SIGMOID_EPS))?;
        let mut pad = vec![T::zero(); 8];
        pad[0] = T::one();
        pad[5] = T::one();
        let pad = g.tape.constant(Tensor::new(vec![2, 4], pad)?);
        let anchor = g.tape.matmul(anchor, pad)?;
        Ok(g.tape.add(delta, anchor)?)
    }

    fn predict_boxes(&self, g: &mut Graph<T>, x: Var, refs: Var) -> Result<Var> {
        let logits = self.box_logits(g, x, refs)?;
        Ok(g.tape.sigmoid(logits)?)
    }

    /// Runs the decoder stack; returns per-layer head outputs and the reference
    /// points each layer sampled around.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        queries: &QuerySet,
        encoder_out: Var,
        levels: &[LevelGeometry],
    ) -> Result<(Vec<LayerOutput>, Vec<Var>)> {
        let mut tgt = queries.content;
        let pos = queries.positional;
        let mut refs = queries.references;
        let mut outputs = Vec::with_capacity(self.decoder.len());
        let mut used_refs = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            used_refs.push(refs);
            let sa = layer.self_attn.bind(g);
            let a = mhsa(&mut g.tape, tgt, pos, &sa)?;
            let x = g.tape.add(tgt, a)?;
            let x = layer.norm1.forward(g, x)?;

            let q = g.tape.add(x, pos)?;
            let cross = layer.cross.bind(g);
            let c = deformable_attention(&mut g.tape, q, refs, &queries.levels, encoder_out, levels, &cross)?;
            let x2 = g.tape.add(x, c.output)?;
            let x2 = layer.norm2.forward(g, x2)?;

            let f = layer.ffn.forward(g, x2)?;
            let x3 = g.tape.add(x2, f)?;
            tgt = layer.norm3.forward(g, x3)?;

            let logits = self.class_head.forward(g, tgt)?;
            let unact = self.box_logits(g, tgt, refs)?;
            let boxes = g.tape.sigmoid(unact)?;
            outputs.push(LayerOutput { boxes, logits });
            if self.cfg.ibbr {
                // S(S⁻¹(r) + MLP(x)) is the centre of the layer's predicted box.
                refs = g.tape.slice_cols(boxes, 0, 2)?;
            }
        }
        Ok((outputs, used_refs))
    }

    /// Exact parameter count and multiply-add estimate for one forward pass on
    /// an `h×w` image (already at model resolution).
    pub fn complexity(&self, h: usize, w: usize) -> Complexity {
        let cfg = &self.cfg;
        let d = cfg.model_dim;
        let n = cfg.num_queries;
        let mut backbone_madds = 0u64;
        let (mut eh, mut ew) = (h, w);
        let mut extents = Vec::new();
        for (conv, &(_, _, level)) in self.backbone.iter().zip(BACKBONE.iter()) {
            eh = conv.out_extent(eh);
            ew = conv.out_extent(ew);
            backbone_madds += conv.madds(eh, ew);
            if level.is_some() {
                extents.push((eh, ew));
            }
        }
        let mut madds = backbone_madds;
        let tokens: usize = cfg.feature_levels.iter().map(|&l| extents[l - 1].0 * extents[l - 1].1).sum();
        for (&l, lin) in cfg.feature_levels.iter().zip(&self.input_proj) {
            madds += lin.madds(extents[l - 1].0 * extents[l - 1].1);
        }
        for layer in &self.encoder {
            madds += layer.attn.madds(tokens, tokens) + layer.ffn.madds(tokens);
        }
        if cfg.query_init != QueryInit::Static {
            madds += self.class_head.madds(tokens) + self.box_head.madds(n);
            madds += self.select_pos_proj.map_or(0, |p| p.madds(n));
        }
        madds += self.ref_proj.madds(n);
        for layer in &self.decoder {
            madds += layer.self_attn.madds(n, n)
                + layer.cross.madds(n, tokens)
                + layer.ffn.madds(n)
                + self.class_head.madds(n)
                + self.box_head.madds(n);
        }
        let _ = d;
        Complexity {
            params: self.store.count(),
            backbone_params: self.store.count_group(ParamGroup::Backbone),
            madds,
            backbone_madds,
        }
    }
}

/// `N` points on the most nearly square grid of cell centres covering `(0, 1)²`, row-major.
pub fn query_grid(n: usize) -> Vec<(f64, f64)> {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols);
    (0..n)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            ((c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64)
        })
        .collect()
}

/// `[rows×2]` weight copying input channels `first` and `first + 1` to the two outputs.
fn coordinate_readout<T: Scalar>(rows: usize, first: usize) -> Tensor<T> {
    let mut w = Tensor::zeros(vec![rows, 2]);
    w.data_mut()[first * 2] = T::one();
    w.data_mut()[(first + 1) * 2 + 1] = T::one();
    w
}

/// Complexity of a configuration at an `h×w` input before resolution scaling.
pub fn count_params_and_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<Complexity> {
    let model = DeformableDetr::<f64>::new(cfg.clone(), 0)?;
    let (sh, sw) = scaled_extent(h, w, cfg.resolution_scale);
    Ok(model.complexity(sh, sw))
}

/// Encoder token count `T` of a configuration at an `h×w` input before resolution scaling.
pub fn token_count(cfg: &ModelConfig, h: usize, w: usize) -> usize {
    let (sh, sw) = scaled_extent(h, w, cfg.resolution_scale);
    cfg.feature_levels.iter().map(|&l| sh.div_ceil(LEVEL_STRIDES[l - 1]) * sw.div_ceil(LEVEL_STRIDES[l - 1])).sum()
}

/// `sigmoid(inverse_sigmoid(r) + offset)`: one refinement step of a reference point.
pub fn refine_reference<T: Scalar>(tape: &mut Tape<T>, refs: Var, offset: Var) -> Result<Var, TensorError> {
    let logits = tape.inverse_sigmoid(refs, T::lit(INVERSE_SIGMOID_EPS))?;
    let moved = tape.add(logits, offset)?;
    tape.sigmoid(moved)
}

/// Indices of the `n` highest scores, ties broken by lower index.
pub fn select_top_tokens<T: Scalar>(scores: &[T], n: usize) -> Result<Vec<usize>> {
    if n > scores.len() {
        return Err(ModelError::TooFewTokens { queries: n, tokens: scores.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(n);
    Ok(order)
}

/// Image extent after scaling, rounded to the nearest pixel.
pub fn scaled_extent(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (((h as f64 * scale).round() as usize).max(1), ((w as f64 * scale).round() as usize).max(1))
}

/// Bilinear resampling of a `[1×H×W]` image by `scale` (pixel-centre aligned).
pub fn resize_image<T: Scalar>(image: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    let (h, w) = match image.shape() {
        [1, h, w] => (*h, *w),
        other => {
            return Err(TensorError::ShapeMismatch { op: "resize", left: other.to_vec(), right: vec![1, 0, 0] }.into())
        }
    };
    let (oh, ow) = scaled_extent(h, w, scale);
    let src: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    let out = crate::data::resample(&src, h, w, oh, ow);
    Ok(Tensor::new(vec![1, oh, ow], out.into_iter().map(T::lit).collect())?)
}
