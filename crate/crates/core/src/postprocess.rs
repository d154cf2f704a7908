//! Box geometry and non-max suppression.

use crate::head::Detection;

/// Axis-aligned box in center form, in image fractions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { cx: (x1 + x2) / 2.0, cy: (y1 + y2) / 2.0, w: x2 - x1, h: y2 - y1 }
    }

    /// (x1, y1, x2, y2)
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let w = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let h = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        w * h
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of `dets` ordered by descending score, ties by lower index.
pub fn rank_by_score(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy per-class suppression. A box is dropped when its IoU with an
/// already-kept box of the same class is strictly above `iou_thresh`.
/// The result is sorted by descending score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let order = rank_by_score(dets);
    let mut kept: Vec<&Detection> = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}
