//! Bipartite set-prediction loss with auxiliary per-layer supervision.
//!
//! Each decoder layer's `N` predictions are matched one-to-one against the
//! ground truth padded with empty labels to `N` slots. The matching cost and
//! the minimized loss are the same quantity: a focal classification term on
//! every slot plus L1 and GIoU box terms on non-empty slots.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{giou, Annotation, BoundingBox};
use crate::hungarian::{hungarian_assign, Assignment, AssignmentError};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, Tape, Tensor, TensorError, Var};

/// Probability clamp applied before taking logarithms in the focal loss.
pub const FOCAL_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error("{objects} ground-truth objects do not fit into {slots} prediction slots")]
    TooManyObjects { objects: usize, slots: usize },
    #[error("class {class} outside 1..={num_classes}")]
    BadClass { class: usize, num_classes: usize },
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 2.0, l1: 5.0, giou: 2.0, focal_alpha: 0.25, focal_gamma: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let w = [self.cls, self.l1, self.giou];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LossError::BadWeights("coefficients must be finite and non-negative".into()));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(LossError::BadWeights("at least one coefficient must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(LossError::BadWeights(format!("focal alpha {} outside [0, 1]", self.focal_alpha)));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(LossError::BadWeights(format!("focal gamma {} must be ≥ 0", self.focal_gamma)));
        }
        Ok(())
    }
}

/// Focal loss of one predicted probability against a binary target.
pub fn focal_loss<T: Scalar>(p: T, positive: bool, alpha: T, gamma: T) -> T {
    let eps = T::lit(FOCAL_EPS);
    let p = p.max(eps).min(T::one() - eps);
    if positive {
        -alpha * (T::one() - p).powf(gamma) * p.ln()
    } else {
        -(T::one() - alpha) * p.powf(gamma) * (T::one() - p).ln()
    }
}

/// One of the `N` label slots: a real object or the empty label `(0, ∅)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelSlot {
    Object(Annotation),
    Empty,
}

/// Ground truth padded with empty labels to exactly `N` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    slots: Vec<LabelSlot>,
}

impl LabelSet {
    pub fn new(objects: &[Annotation], slots: usize, num_classes: usize) -> Result<Self, LossError> {
        if objects.len() > slots {
            return Err(LossError::TooManyObjects { objects: objects.len(), slots });
        }
        if let Some(a) = objects.iter().find(|a| a.class == 0 || a.class > num_classes) {
            return Err(LossError::BadClass { class: a.class, num_classes });
        }
        let mut v: Vec<LabelSlot> = objects.iter().copied().map(LabelSlot::Object).collect();
        v.resize(slots, LabelSlot::Empty);
        Ok(Self { slots: v })
    }

    pub fn slots(&self) -> &[LabelSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, LabelSlot::Object(_))).count()
    }
}

/// Per-class probabilities and box of one prediction.
#[derive(Debug, Clone, Copy)]
pub struct PredictionRef<'a> {
    pub probs: &'a [f64],
    pub bbox: BoundingBox,
}

fn l1(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// Classification part of the matching loss: focal loss summed over classes
/// against the one-hot target of `label` (all-negative for an empty label).
pub fn classification_cost(probs: &[f64], label: &LabelSlot, w: &LossWeights) -> f64 {
    let target = match label {
        LabelSlot::Object(a) => Some(a.class - 1),
        LabelSlot::Empty => None,
    };
    probs.iter().enumerate().map(|(c, &p)| focal_loss(p, target == Some(c), w.focal_alpha, w.focal_gamma)).sum()
}

/// `W_cls·L_cls + 1[b ≠ ∅]·(W_l1·L_l1 + W_giou·(1 − GIoU))`
pub fn match_cost(pred: PredictionRef<'_>, label: &LabelSlot, w: &LossWeights) -> f64 {
    let cls = w.cls * classification_cost(pred.probs, label, w);
    match label {
        LabelSlot::Empty => cls,
        LabelSlot::Object(a) => cls + w.l1 * l1(&pred.bbox, &a.bbox) + w.giou * (1.0 - giou(&pred.bbox, &a.bbox)),
    }
}

/// Row-major `N×N` matrix of [`match_cost`] values (rows: predictions, columns: slots).
pub fn cost_matrix(probs: &[f64], boxes: &[f64], labels: &LabelSet, w: &LossWeights) -> Vec<f64> {
    let n = labels.len();
    let c = probs.len() / n.max(1);
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let pred = PredictionRef {
            probs: &probs[i * c..(i + 1) * c],
            bbox: BoundingBox::from_slice(&boxes[i * 4..i * 4 + 4]),
        };
        out.extend(labels.slots().iter().map(|l| match_cost(pred, l, w)));
    }
    out
}

/// Box and class-logit handles of one decoder layer on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOutput {
    /// `[N×4]` normalized `(cx, cy, w, h)` after the sigmoid.
    pub boxes: Var,
    /// `[N×C]` pre-sigmoid class logits.
    pub logits: Var,
}

/// Loss of one image summed over all decoder layers.
#[derive(Debug, Clone)]
pub struct SetLoss {
    pub total: Var,
    /// Weighted focal classification part (summed over layers).
    pub classification: f64,
    /// Weighted L1 + GIoU part (summed over layers).
    pub localization: f64,
    pub assignments: Vec<Assignment>,
}

/// Matches every layer independently and sums the matched losses.
///
/// The assignment is a constant of the backward pass. Passing `fixed`
/// reuses previously computed assignments instead of re-matching, which
/// keeps the loss a smooth function for finite-difference checks.
pub fn set_loss<T: Scalar>(
    tape: &mut Tape<T>,
    layers: &[LayerOutput],
    labels: &LabelSet,
    w: &LossWeights,
    fixed: Option<&[Assignment]>,
) -> Result<SetLoss, LossError> {
    w.validate()?;
    let n = labels.len();
    let mut total: Option<Var> = None;
    let mut classification = 0.0;
    let mut localization = 0.0;
    let mut assignments = Vec::with_capacity(layers.len());
    for (li, layer) in layers.iter().enumerate() {
        let logits = tape.value(layer.logits);
        let (rows, c) = logits.dims2()?;
        if rows != n {
            return Err(TensorError::ShapeMismatch { op: "set_loss", left: vec![rows, c], right: vec![n] }.into());
        }
        let probs: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z.as_f64())).collect();
        let boxes: Vec<f64> = tape.data(layer.boxes).iter().map(|v| v.as_f64()).collect();
        let assignment = match fixed {
            Some(f) => f[li].clone(),
            None => hungarian_assign(&cost_matrix(&probs, &boxes, labels, w), n)?,
        };

        let mut targets = vec![T::zero(); n * c];
        let mut matched_preds = Vec::new();
        let mut matched_boxes = Vec::new();
        for (i, &slot) in assignment.permutation.iter().enumerate() {
            if let LabelSlot::Object(a) = labels.slots()[slot] {
                targets[i * c + a.class - 1] = T::one();
                matched_preds.push(i);
                matched_boxes.extend(a.bbox.to_array().map(T::lit));
            }
        }
        let focal = tape.sigmoid_focal_loss(layer.logits, &targets, T::lit(w.focal_alpha), T::lit(w.focal_gamma))?;
        let mut layer_loss = tape.scale(focal, T::lit(w.cls))?;
        classification += tape.data(layer_loss)[0].as_f64();

        if !matched_preds.is_empty() {
            let g = matched_preds.len();
            let pred = tape.gather_rows(layer.boxes, &matched_preds)?;
            let target = tape.constant(Tensor::new(vec![g, 4], matched_boxes)?);
            let diff = tape.sub(pred, target)?;
            let abs = tape.abs(diff)?;
            let l1_sum = tape.sum(abs)?;
            let l1_term = tape.scale(l1_sum, T::lit(w.l1))?;
            let gi = giou_rows(tape, pred, target)?;
            let gi_sum = tape.sum(gi)?;
            // W_giou · Σ (1 − giou)
            let gi_neg = tape.scale(gi_sum, T::lit(-w.giou))?;
            let gi_term = tape.shift(gi_neg, T::lit(w.giou * g as f64))?;
            let box_term = tape.add(l1_term, gi_term)?;
            localization += tape.data(box_term)[0].as_f64();
            layer_loss = tape.add(layer_loss, box_term)?;
        }
        total = Some(match total {
            None => layer_loss,
            Some(t) => tape.add(t, layer_loss)?,
        });
        assignments.push(assignment);
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    Ok(SetLoss { total, classification, localization, assignments })
}

/// Row-wise differentiable GIoU of `[G×4]` center-form boxes → `[G×1]`.
pub fn giou_rows<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, TensorError> {
    let ca = corners(tape, a)?;
    let cb = corners(tape, b)?;
    let ix0 = tape.maximum(ca[0], cb[0])?;
    let iy0 = tape.maximum(ca[1], cb[1])?;
    let ix1 = tape.minimum(ca[2], cb[2])?;
    let iy1 = tape.minimum(ca[3], cb[3])?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let area_a = area(tape, a)?;
    let area_b = area(tape, b)?;
    let sum_area = tape.add(area_a, area_b)?;
    let union = tape.sub(sum_area, inter)?;
    let iou = tape.div(inter, union)?;
    let hx0 = tape.minimum(ca[0], cb[0])?;
    let hy0 = tape.minimum(ca[1], cb[1])?;
    let hx1 = tape.maximum(ca[2], cb[2])?;
    let hy1 = tape.maximum(ca[3], cb[3])?;
    let hw = tape.sub(hx1, hx0)?;
    let hh = tape.sub(hy1, hy0)?;
    let hull = tape.mul(hw, hh)?;
    let gap = tape.sub(hull, union)?;
    let penalty = tape.div(gap, hull)?;
    tape.sub(iou, penalty)
}

fn corners<T: Scalar>(tape: &mut Tape<T>, b: Var) -> Result<[Var; 4], TensorError> {
    let cx = tape.slice_cols(b, 0, 1)?;
    let cy = tape.slice_cols(b, 1, 1)?;
    let w = tape.slice_cols(b, 2, 1)?;
    let h = tape.slice_cols(b, 3, 1)?;
    let hw = tape.scale(w, T::lit(0.5))?;
    let hh = tape.scale(h, T::lit(0.5))?;
    Ok([tape.sub(cx, hw)?, tape.sub(cy, hh)?, tape.add(cx, hw)?, tape.add(cy, hh)?])
}

fn area<T: Scalar>(tape: &mut Tape<T>, b: Var) -> Result<Var, TensorError> {
    let w = tape.slice_cols(b, 2, 1)?;
    let h = tape.slice_cols(b, 3, 1)?;
    tape.mul(w, h)
}
