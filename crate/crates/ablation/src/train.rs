//! Training loop: batched set-prediction loss, AdamW, step learning-rate drop.

use ddtr_core::data::AnnotatedImage;
use ddtr_core::loss::{set_loss, LabelSet};
use ddtr_core::model::{resize_image, DeformableDetr};
use ddtr_core::nn::Graph;
use ddtr_core::optim::{clip_grad_norm, AdamW, AdamWConfig};
use ddtr_core::Tensor64;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::HarnessError;

/// Loss components of one optimization step, averaged per ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub classification: f64,
    pub localization: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
    /// First step run at the dropped learning rate.
    pub lr_drop_step: usize,
}

impl LossTrace {
    /// Mean total loss over `steps` (clamped to the trace length).
    pub fn window_mean(&self, steps: std::ops::Range<usize>) -> f64 {
        let end = steps.end.min(self.entries.len());
        let w = &self.entries[steps.start.min(end)..end];
        w.iter().map(|e| e.total).sum::<f64>() / w.len().max(1) as f64
    }
}

pub struct TrainOutcome {
    pub model: DeformableDetr<f64>,
    pub trace: LossTrace,
    pub seconds: f64,
}

/// Images at model resolution as `[1×H×W]` tensors.
pub fn prepare_inputs(images: &[AnnotatedImage], scale: f64) -> Result<Vec<Tensor64>, HarnessError> {
    images
        .iter()
        .map(|img| {
            let t = img.to_tensor::<f64>();
            if scale == 1.0 {
                Ok(t)
            } else {
                resize_image(&t, scale).map_err(HarnessError::from)
            }
        })
        .collect()
}

/// Trains one model from `seed`; the model initialization and the batch
/// order are both derived from the seed.
pub fn train(cfg: &ExperimentConfig, images: &[AnnotatedImage], seed: u64) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(HarnessError::Config("training set is empty".into()));
    }
    let start = std::time::Instant::now();
    let mc = &cfg.model;
    let t = &cfg.training;
    let mut model = DeformableDetr::<f64>::new(mc.clone(), seed)?;
    let inputs = prepare_inputs(images, mc.resolution_scale)?;
    let labels = images
        .iter()
        .map(|img| LabelSet::new(&img.annotations(), mc.num_queries, mc.num_classes))
        .collect::<Result<Vec<_>, _>>()?;

    let mut opt = AdamW::new(
        AdamWConfig {
            lr: t.lr,
            backbone_scale: t.backbone_lr_scale,
            weight_decay: t.weight_decay,
            ..AdamWConfig::default()
        },
        model.params(),
    );
    let mut batches = ChaCha8Rng::seed_from_u64(seed);
    batches.set_stream(1);
    let batch = t.batch_size.min(images.len());
    let mut trace = LossTrace { entries: Vec::with_capacity(t.steps), lr_drop_step: t.drop_step() };

    for step in 0..t.steps {
        let mut idx = sample(&mut batches, images.len(), batch).into_vec();
        idx.sort_unstable();
        let mut g = Graph::bind(model.params());
        let mut total = None;
        let (mut cls, mut loc) = (0.0, 0.0);
        let objects: usize = idx.iter().map(|&i| labels[i].num_objects()).sum();
        let norm = 1.0 / objects.max(1) as f64;
        for &i in &idx {
            let x = g.tape.constant(inputs[i].clone());
            let out = model.forward_graph(&mut g, x)?;
            let l = set_loss(&mut g.tape, &out.layers, &labels[i], &mc.loss, None)?;
            cls += l.classification * norm;
            loc += l.localization * norm;
            total = Some(match total {
                None => l.total,
                Some(acc) => g.tape.add(acc, l.total)?,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = g.tape.scale(total, norm)?;
        let value = g.tape.data(loss)[0];
        if !value.is_finite() {
            return Err(HarnessError::Diverged { step });
        }
        g.tape.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = model.params().ids().map(|id| g.param_grad(id)).collect();
        if t.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, t.clip_norm);
        }
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(HarnessError::Diverged { step });
        }
        let factor = t.lr_factor(step);
        opt.step(model.params_mut(), &grads, factor);
        trace.entries.push(TraceEntry {
            step,
            lr: t.lr * factor,
            total: value,
            classification: cls,
            localization: loc,
        });
    }
    Ok(TrainOutcome { model, trace, seconds: start.elapsed().as_secs_f64() })
}
