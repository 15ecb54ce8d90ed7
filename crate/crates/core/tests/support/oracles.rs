//! Brute-force reference implementations shared by the oracle tests and the
//! acceptance run. Included with `#[path]`, so each includer uses a subset.
#![allow(dead_code)]

use ddtr_core::boxes::iou;
use ddtr_core::hungarian::permutation_cost;
use ddtr_core::metrics::{Detection, EvalImage};
use ddtr_core::{BoundingBox, EvalSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::from_corners(x0, y0, x1, y1)
}

pub fn det(b: BoundingBox, score: f64) -> Detection {
    Detection { bbox: b, score }
}

/// Boxes on a coarse grid so that hits, misses and partial overlaps all occur.
pub fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let x0 = rng.gen_range(0..6) as f64 / 8.0;
    let y0 = rng.gen_range(0..6) as f64 / 8.0;
    let w = rng.gen_range(1..4) as f64 / 8.0;
    let h = rng.gen_range(1..4) as f64 / 8.0;
    bx(x0, y0, x0 + w, y0 + h)
}

pub fn random_set(rng: &mut ChaCha8Rng, tied_scores: bool) -> EvalSet {
    let images = (0..rng.gen_range(1..=4))
        .map(|_| {
            let lesions = (0..rng.gen_range(0..=3)).map(|_| random_box(rng)).collect::<Vec<_>>();
            let detections = (0..rng.gen_range(0..=6))
                .map(|_| {
                    // Half the detections are jittered copies of a lesion.
                    let b = if !lesions.is_empty() && rng.gen_bool(0.5) {
                        let l: BoundingBox = lesions[rng.gen_range(0..lesions.len())];
                        BoundingBox::new(l.cx + rng.gen_range(-0.1..0.1), l.cy + rng.gen_range(-0.1..0.1), l.w, l.h)
                    } else {
                        random_box(rng)
                    };
                    let score = if tied_scores { rng.gen_range(0..4) as f64 / 4.0 } else { rng.gen() };
                    det(b, score)
                })
                .collect();
            EvalImage { lesions, detections }
        })
        .collect();
    EvalSet { images }
}

/// All detections as (image, index) in rank order: score descending, then
/// image, then detection index.
pub fn rank(e: &EvalSet) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for (i, img) in e.images.iter().enumerate() {
        for j in 0..img.detections.len() {
            all.push((i, j));
        }
    }
    all.sort_by(|a, b| {
        let (sa, sb) = (e.images[a.0].detections[a.1].score, e.images[b.0].detections[b.1].score);
        sb.partial_cmp(&sa).unwrap().then(a.cmp(b))
    });
    all
}

/// Precision and true-positive count of the top-`k` detections, matched from
/// scratch under the PASCAL rule.
pub fn pascal_at_cutoff(e: &EvalSet, order: &[(usize, usize)], k: usize, thr: f64) -> (f64, usize) {
    let mut claimed: Vec<Vec<bool>> = e.images.iter().map(|i| vec![false; i.lesions.len()]).collect();
    let mut tp = 0;
    for &(i, j) in &order[..k] {
        let img = &e.images[i];
        let d = img.detections[j].bbox;
        // first lesion of maximal IoU
        let mut best: Option<usize> = None;
        for l in 0..img.lesions.len() {
            if best.is_none_or(|b| iou(&d, &img.lesions[l]) > iou(&d, &img.lesions[b])) {
                best = Some(l);
            }
        }
        if let Some(l) = best {
            if iou(&d, &img.lesions[l]) >= thr && !claimed[i][l] {
                claimed[i][l] = true;
                tp += 1;
            }
        }
    }
    (tp as f64 / k as f64, tp)
}

/// Enumerates every rank cutoff and integrates the interpolated PR curve:
/// over recall `((j-1)/L, j/L]` the envelope is the best precision of any
/// cutoff reaching recall `j/L`.
pub fn ap_oracle(e: &EvalSet, thr: f64) -> Option<f64> {
    let total: usize = e.images.iter().map(|i| i.lesions.len()).sum();
    if total == 0 {
        return None;
    }
    let order = rank(e);
    let curve: Vec<(f64, usize)> = (1..=order.len()).map(|k| pascal_at_cutoff(e, &order, k, thr)).collect();
    let mut area = 0.0;
    for j in 1..=total {
        let envelope = curve.iter().filter(|&&(_, tp)| tp >= j).map(|&(p, _)| p).fold(0.0, f64::max);
        area += envelope;
    }
    Some(area / total as f64)
}

/// Tests each threshold in {+inf} ∪ {distinct scores}; the sensitivity over
/// FPI bucket `[f/n, (f+1)/n)` is the best one among thresholds with at most
/// `f` false positives.
pub fn fauc_oracle(e: &EvalSet) -> Option<f64> {
    let total: usize = e.images.iter().map(|i| i.lesions.len()).sum();
    if total == 0 {
        return None;
    }
    let n = e.images.len();
    let mut thresholds: Vec<f64> = e.images.iter().flat_map(|i| i.detections.iter().map(|d| d.score)).collect();
    thresholds.push(f64::INFINITY);
    let mut operating = Vec::new();
    for &t in &thresholds {
        let mut fp = 0;
        let mut hit = 0;
        for img in &e.images {
            let kept: Vec<&Detection> = img.detections.iter().filter(|d| d.score >= t).collect();
            fp += kept.iter().filter(|d| img.lesions.iter().all(|l| iou(&d.bbox, l) < 0.1)).count();
            hit += img.lesions.iter().filter(|l| kept.iter().any(|d| iou(&d.bbox, l) >= 0.1)).count();
        }
        operating.push((fp, hit));
    }
    let mut area = 0.0;
    for f in 0..n {
        area += operating.iter().filter(|&&(fp, _)| fp <= f).map(|&(_, h)| h).max().unwrap_or(0) as f64;
    }
    Some(area / (total as f64 * n as f64 * 1.0))
}

pub fn l_oracle(e: &EvalSet, top: usize) -> Option<f64> {
    let total: usize = e.images.iter().map(|i| i.lesions.len()).sum();
    if total == 0 {
        return None;
    }
    let mut covered = 0;
    for img in &e.images {
        let mut idx: Vec<usize> = (0..img.detections.len()).collect();
        idx.sort_by(|&a, &b| img.detections[b].score.partial_cmp(&img.detections[a].score).unwrap().then(a.cmp(&b)));
        let s = &idx[..idx.len().min(top)];
        covered += img.lesions.iter().filter(|l| s.iter().any(|&d| iou(&img.detections[d].bbox, l) >= 0.1)).count();
    }
    Some(covered as f64 / total as f64)
}

/// Minimum over all `n!` permutations, each summed in row order.
pub fn brute_force_min(cost: &[f64], n: usize) -> f64 {
    fn rec(cost: &[f64], n: usize, row: usize, used: &mut [bool], perm: &mut Vec<usize>, best: &mut f64) {
        if row == n {
            *best = best.min(permutation_cost(cost, n, perm));
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                rec(cost, n, row + 1, used, perm, best);
                perm.pop();
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, n, 0, &mut vec![false; n], &mut Vec::new(), &mut best);
    best
}
