//! Normalized `(cx, cy, w, h)` boxes and their overlap measures.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Builds a box from corner coordinates `(x0, y0, x1, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { cx: 0.5 * (x0 + x1), cy: 0.5 * (y0 + y1), w: x1 - x0, h: y1 - y0 }
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let [x0, y0, x1, y1] = self.corners();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }
}

/// One labelled object: class `≥ 1` (class 0 is reserved for "no object") and its box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class: usize,
    #[serde(rename = "box", with = "box_array")]
    pub bbox: BoundingBox,
}

/// Serializes a box as the 4-element array `[cx, cy, w, h]`.
pub mod box_array {
    use super::BoundingBox;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &BoundingBox, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(b.to_array())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BoundingBox, D::Error> {
        let v = <[f64; 4]>::deserialize(d)?;
        Ok(BoundingBox::from_slice(&v))
    }
}

fn intersection(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    iw * ih
}

/// Intersection over union; 0 for disjoint or zero-area pairs.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − (hull − union) / hull`.
///
/// A zero-area box behaves as a point: its IoU term is 0 and only the hull
/// penalty remains.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if hull <= 0.0 {
        return iou;
    }
    iou - (hull - union) / hull
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::from_corners(x0, y0, x1, y1)
    }

    #[test]
    fn iou_examples() {
        let a = c(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &c(3.0, 3.0, 4.0, 4.0)), 0.0);
        assert!((iou(&a, &c(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn giou_examples() {
        let a = c(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        // hull 9, union 2
        assert!((giou(&a, &c(2.0, 2.0, 3.0, 3.0)) - (0.0 - 7.0 / 9.0)).abs() < 1e-15);
        // IoU 1/7, hull 9, union 7
        let g = giou(&c(0.0, 0.0, 2.0, 2.0), &c(1.0, 1.0, 3.0, 3.0));
        assert!((g - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-15);
        assert!((g + 0.0794).abs() < 1e-4);
    }

    #[test]
    fn giou_of_point_box_has_no_iou_term() {
        let p = BoundingBox::new(0.5, 0.5, 0.0, 0.0);
        let b = c(0.0, 0.0, 1.0, 1.0);
        // point inside: hull == b, union == area(b) → 0
        assert_eq!(giou(&p, &b), 0.0);
    }
}
