//! Inference over a dataset and metric computation.

use std::path::Path;

use ddtr_core::boxes::BoundingBox;
use ddtr_core::data::{write_predictions, AnnotatedImage, DetectionRecord, PredictionRecord};
use ddtr_core::metrics::{EvalSet, MetricValues};
use ddtr_core::model::DeformableDetr;
use ddtr_core::tensor::sigmoid;

use crate::train::prepare_inputs;
use crate::HarnessError;

/// Final-layer predictions of every image: one detection per query and class,
/// scored by the class's sigmoid probability.
pub fn predict(model: &DeformableDetr<f64>, images: &[AnnotatedImage]) -> Result<Vec<PredictionRecord>, HarnessError> {
    let cfg = model.config();
    let inputs = prepare_inputs(images, cfg.resolution_scale)?;
    let c = cfg.num_classes;
    images
        .iter()
        .zip(&inputs)
        .map(|(img, x)| {
            let preds = model.forward_unscaled(x)?;
            let last = preds.final_layer();
            let boxes = last.boxes.data();
            let logits = last.logits.data();
            let mut detections = Vec::with_capacity(cfg.num_queries * c);
            for q in 0..cfg.num_queries {
                let bbox = BoundingBox::from_slice(&boxes[4 * q..4 * q + 4]);
                for k in 0..c {
                    detections.push(DetectionRecord { class: k + 1, bbox, score: sigmoid(logits[q * c + k]) });
                }
            }
            Ok(PredictionRecord { image: img.name.clone(), detections })
        })
        .collect()
}

pub fn score(
    images: &[AnnotatedImage],
    predictions: &[PredictionRecord],
    class: usize,
) -> Result<MetricValues, HarnessError> {
    let evals = EvalSet::from_records(images, predictions, class)?;
    Ok(MetricValues::evaluate(&evals))
}

/// Predicts every image, optionally writes the predictions file, and scores `class`.
pub fn evaluate(
    model: &DeformableDetr<f64>,
    images: &[AnnotatedImage],
    class: usize,
    predictions_out: Option<&Path>,
) -> Result<MetricValues, HarnessError> {
    let preds = predict(model, images)?;
    if let Some(path) = predictions_out {
        write_predictions(&preds, path)?;
    }
    score(images, &preds, class)
}
