//! Lesion-detection metrics: AP at an IoU threshold, AP averaged over
//! thresholds, FROC area up to one false positive per image, and the
//! localization ratios L and L_top10.
//!
//! Metrics that are undefined without ground truth return [`NoLesions`]
//! rather than a number.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{iou, BoundingBox};
use crate::data::{AnnotatedImage, PredictionRecord};

/// IoU at which a detection counts as hitting a lesion.
pub const HIT_IOU: f64 = 0.1;
/// `0.10, 0.15, …, 0.50`
pub const AP_RANGE_THRESHOLDS: [f64; 9] = [0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50];
pub const TOP_K: usize = 10;

/// The evaluation set contains no ground-truth object, so the metric is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no ground-truth lesions: metric undefined")]
pub struct NoLesions;

pub type MetricResult = Result<f64, NoLesions>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalImage {
    pub lesions: Vec<BoundingBox>,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSet {
    pub images: Vec<EvalImage>,
}

#[derive(Debug, Error)]
pub enum EvalSetError {
    #[error("predictions reference image `{0}`, which is not in the dataset")]
    UnknownImage(String),
    #[error("image `{0}` has more than one prediction record")]
    Duplicate(String),
}

impl EvalSet {
    pub fn total_lesions(&self) -> usize {
        self.images.iter().map(|i| i.lesions.len()).sum()
    }

    /// Joins ground truth and predictions, keeping only objects and
    /// detections of `class`. Images without a prediction record have no detections.
    pub fn from_records(
        images: &[AnnotatedImage],
        predictions: &[PredictionRecord],
        class: usize,
    ) -> Result<Self, EvalSetError> {
        let mut out: Vec<EvalImage> = images
            .iter()
            .map(|img| EvalImage {
                lesions: img.annotations().into_iter().filter(|a| a.class == class).map(|a| a.bbox).collect(),
                detections: Vec::new(),
            })
            .collect();
        let mut seen = vec![false; images.len()];
        for rec in predictions {
            let idx = images
                .iter()
                .position(|i| i.name == rec.image)
                .ok_or_else(|| EvalSetError::UnknownImage(rec.image.clone()))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(EvalSetError::Duplicate(rec.image.clone()));
            }
            out[idx].detections = rec
                .detections
                .iter()
                .filter(|d| d.class == class)
                .map(|d| Detection { bbox: d.bbox, score: d.score })
                .collect();
        }
        Ok(Self { images: out })
    }
}

/// `(image, detection)` indices sorted by descending score, ties by ascending indices.
fn ranked(evals: &EvalSet) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> =
        evals.images.iter().enumerate().flat_map(|(i, img)| (0..img.detections.len()).map(move |j| (i, j))).collect();
    let score = |&(i, j): &(usize, usize)| evals.images[i].detections[j].score;
    order.sort_by(|a, b| score(b).partial_cmp(&score(a)).unwrap_or(Ordering::Equal).then(a.cmp(b)));
    order
}

/// PASCAL VOC average precision at `threshold`.
///
/// Each detection, in ranked order, is compared with the lesion of highest
/// IoU in its image. It is a true positive when that IoU reaches the
/// threshold and the lesion is still unclaimed; otherwise it is a false
/// positive. The area under the precision envelope is accumulated per unit
/// of recall.
pub fn ap_at(evals: &EvalSet, threshold: f64) -> MetricResult {
    let total = evals.total_lesions();
    if total == 0 {
        return Err(NoLesions);
    }
    let mut claimed: Vec<Vec<bool>> = evals.images.iter().map(|i| vec![false; i.lesions.len()]).collect();
    let mut tp = 0usize;
    let mut precision_at_hit = Vec::new();
    for (k, (i, j)) in ranked(evals).into_iter().enumerate() {
        let img = &evals.images[i];
        let det = img.detections[j].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (l, lesion) in img.lesions.iter().enumerate() {
            let o = iou(&det, lesion);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((l, o));
            }
        }
        if let Some((l, o)) = best {
            if o >= threshold && !claimed[i][l] {
                claimed[i][l] = true;
                tp += 1;
                precision_at_hit.push(tp as f64 / (k + 1) as f64);
            }
        }
    }
    // Envelope: best precision at this recall level or any higher one.
    for r in (0..precision_at_hit.len().saturating_sub(1)).rev() {
        precision_at_hit[r] = precision_at_hit[r].max(precision_at_hit[r + 1]);
    }
    Ok(precision_at_hit.iter().sum::<f64>() / total as f64)
}

/// Mean of [`ap_at`] over [`AP_RANGE_THRESHOLDS`].
pub fn ap_range(evals: &EvalSet) -> MetricResult {
    let mut s = 0.0;
    for &t in &AP_RANGE_THRESHOLDS {
        s += ap_at(evals, t)?;
    }
    Ok(s / AP_RANGE_THRESHOLDS.len() as f64)
}

fn hits_any(det: &BoundingBox, lesions: &[BoundingBox]) -> bool {
    lesions.iter().any(|l| iou(det, l) >= HIT_IOU)
}

/// Area under the FROC curve for FPI in `[0, fpi_cap]`, divided by `fpi_cap`.
///
/// A detection is a false positive when it overlaps no lesion of its image
/// at IoU 0.1; a lesion counts as found once any retained detection overlaps
/// it. The sensitivity at FPI `u` is that of the largest score-threshold set
/// whose FPI does not exceed `u` (a right-continuous step function).
pub fn fauc(evals: &EvalSet, fpi_cap: f64) -> MetricResult {
    let total = evals.total_lesions();
    if total == 0 {
        return Err(NoLesions);
    }
    let n_images = evals.images.len() as f64;
    let order = ranked(evals);
    let mut found: Vec<Vec<bool>> = evals.images.iter().map(|i| vec![false; i.lesions.len()]).collect();
    let (mut fp, mut hits) = (0usize, 0usize);
    // (false positives, lesions found) after each complete tie group
    let mut points = vec![(0usize, 0usize)];
    for (k, &(i, j)) in order.iter().enumerate() {
        let img = &evals.images[i];
        let det = img.detections[j];
        if !hits_any(&det.bbox, &img.lesions) {
            fp += 1;
        }
        for (l, lesion) in img.lesions.iter().enumerate() {
            if !found[i][l] && iou(&det.bbox, lesion) >= HIT_IOU {
                found[i][l] = true;
                hits += 1;
            }
        }
        let group_ends = order.get(k + 1).is_none_or(|&(ni, nj)| evals.images[ni].detections[nj].score != det.score);
        if group_ends {
            points.push((fp, hits));
        }
    }
    // Integrate in units of one false positive per image.
    let cap = fpi_cap * n_images;
    let mut area = 0.0;
    for (idx, &(f, h)) in points.iter().enumerate() {
        // a later point with the same FP count supersedes this one
        if points.get(idx + 1).is_some_and(|&(nf, _)| nf == f) {
            continue;
        }
        let next = points[idx + 1..].iter().map(|&(nf, _)| nf).find(|&nf| nf > f);
        let start = f as f64;
        let end = next.map_or(cap, |nf| (nf as f64).min(cap));
        if end > start {
            area += (end - start) * h as f64;
        }
    }
    Ok(area / (total as f64 * n_images * fpi_cap))
}

fn localization(evals: &EvalSet, top: Option<usize>) -> MetricResult {
    let total = evals.total_lesions();
    if total == 0 {
        return Err(NoLesions);
    }
    let mut covered = 0usize;
    for img in &evals.images {
        let mut idx: Vec<usize> = (0..img.detections.len()).collect();
        if let Some(k) = top {
            idx.sort_by(|&a, &b| {
                img.detections[b].score.partial_cmp(&img.detections[a].score).unwrap_or(Ordering::Equal).then(a.cmp(&b))
            });
            idx.truncate(k);
        }
        covered +=
            img.lesions.iter().filter(|l| idx.iter().any(|&d| iou(&img.detections[d].bbox, l) >= HIT_IOU)).count();
    }
    Ok(covered as f64 / total as f64)
}

/// Fraction of lesions overlapped (IoU ≥ 0.1) by any detection of their image.
pub fn localization_l(evals: &EvalSet) -> MetricResult {
    localization(evals, None)
}

/// As [`localization_l`], restricted to each image's ten highest-scoring
/// detections (ties by ascending detection index).
pub fn localization_l_top10(evals: &EvalSet) -> MetricResult {
    localization(evals, Some(TOP_K))
}

/// The five metrics of one evaluation; `None` marks an undefined value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub fauc_1_10: Option<f64>,
    pub ap_10: Option<f64>,
    pub ap_10_50: Option<f64>,
    pub loc_l: Option<f64>,
    pub loc_l_top10: Option<f64>,
}

pub const METRIC_NAMES: [&str; 5] = ["fauc_1_10", "ap_10", "ap_10_50", "loc_l", "loc_l_top10"];

impl MetricValues {
    pub fn evaluate(evals: &EvalSet) -> Self {
        Self {
            fauc_1_10: fauc(evals, 1.0).ok(),
            ap_10: ap_at(evals, HIT_IOU).ok(),
            ap_10_50: ap_range(evals).ok(),
            loc_l: localization_l(evals).ok(),
            loc_l_top10: localization_l_top10(evals).ok(),
        }
    }

    pub fn as_array(&self) -> [Option<f64>; 5] {
        [self.fauc_1_10, self.ap_10, self.ap_10_50, self.loc_l, self.loc_l_top10]
    }

    fn from_array(a: [Option<f64>; 5]) -> Self {
        Self { fauc_1_10: a[0], ap_10: a[1], ap_10_50: a[2], loc_l: a[3], loc_l_top10: a[4] }
    }
}

/// Per-seed values with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_seed: Vec<MetricValues>,
    pub mean: MetricValues,
    pub sd: MetricValues,
}

/// Mean and sample SD (`n − 1` denominator, 0 for one seed) of each metric.
/// A metric undefined for any seed stays undefined in the summary.
pub fn aggregate(per_seed: &[MetricValues]) -> MetricReport {
    let mut mean = [None; 5];
    let mut sd = [None; 5];
    for m in 0..5 {
        let vals: Option<Vec<f64>> = per_seed.iter().map(|r| r.as_array()[m]).collect();
        if let Some(v) = vals.filter(|v| !v.is_empty()) {
            let (mu, s) = mean_sd(&v);
            mean[m] = Some(mu);
            sd[m] = Some(s);
        }
    }
    MetricReport { per_seed: per_seed.to_vec(), mean: MetricValues::from_array(mean), sd: MetricValues::from_array(sd) }
}

/// Mean and sample standard deviation, summed in a fixed order after sorting
/// so the result does not depend on the order of `v`.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    if s.len() < 2 {
        return (mean, 0.0);
    }
    let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
