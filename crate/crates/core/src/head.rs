//! YOLO detection head: raw feature maps to boxes, and ground truth to targets.
//!
//! Each scale's map has `anchors * (5 + classes)` channels; for anchor `a` the
//! block starting at channel `a * (5 + classes)` holds `t_x, t_y, t_w, t_h,
//! t_obj` followed by one logit per class. Decoding for cell `(col, row)` of a
//! `grid_w x grid_h` map with anchor `(pw, ph)`:
//!
//! ```text
//! cx  = (sigmoid(t_x) + col) / grid_w        w = pw * exp(t_w) / input_w
//! cy  = (sigmoid(t_y) + row) / grid_h        h = ph * exp(t_h) / input_h
//! obj = sigmoid(t_obj)                       class_k = sigmoid(t_k)
//! ```

use crate::dataset::GroundTruthLabel;
use crate::error::{Error, Result};
use crate::network::{RawMap, YoloOutput};
use crate::postprocess::BBox;
use crate::tensor::Tensor;

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]` so they never hit
/// exactly 0 or 1, even for saturated logits.
pub const PROB_EPS: f64 = f64::EPSILON;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
    /// `objectness * max(class_scores)`
    pub score: f64,
    pub class_id: usize,
}

/// The five box/objectness logits plus per-class logits of one (cell, anchor).
#[derive(Debug, Clone, PartialEq)]
pub struct RawCellPrediction {
    pub t_x: f32,
    pub t_y: f32,
    pub t_w: f32,
    pub t_h: f32,
    pub t_obj: f32,
    pub t_class: Vec<f32>,
}

/// (grid, grid, anchors * (5 + classes))
pub fn output_shape(grid: usize, anchors: usize, classes: usize) -> (usize, usize, usize) {
    (grid, grid, anchors * (5 + classes))
}

fn classes_for(map: &Tensor, anchors: usize) -> Result<usize> {
    let c = map.channels();
    if anchors == 0 || !c.is_multiple_of(anchors) || c / anchors < 6 {
        return Err(Error::Config(format!(
            "map with {c} channels cannot hold {anchors} anchors x (5 + classes >= 1)"
        )));
    }
    Ok(c / anchors - 5)
}

/// Decodes one scale. Only detections with `score >= conf_thresh` are kept.
/// `input` is the network input (width, height) in pixels.
pub fn decode(
    map: &Tensor,
    anchors: &[(f32, f32)],
    stride: usize,
    input: (usize, usize),
    conf_thresh: f64,
) -> Result<Vec<Detection>> {
    let classes = classes_for(map, anchors.len())?;
    let (input_w, input_h) = input;
    if stride == 0 || input_w % stride != 0 || input_h % stride != 0 {
        return Err(Error::Config(format!("stride {stride} does not divide input {input_w}x{input_h}")));
    }
    let (grid_w, grid_h) = (input_w / stride, input_h / stride);
    if map.batch() != 1 || map.width() != grid_w || map.height() != grid_h {
        return Err(Error::Config(format!(
            "map {:?} does not match a {grid_w}x{grid_h} grid",
            map.dims()
        )));
    }
    let per_anchor = 5 + classes;
    let mut out = Vec::new();
    for row in 0..grid_h {
        for col in 0..grid_w {
            for (a, &(pw, ph)) in anchors.iter().enumerate() {
                let base = a * per_anchor;
                let t = |k: usize| map.at(0, base + k, row, col) as f64;
                let objectness = sigmoid(t(4));
                let class_scores: Vec<f64> = (0..classes).map(|k| sigmoid(t(5 + k))).collect();
                let (class_id, best) = class_scores
                    .iter()
                    .enumerate()
                    .fold((0, f64::MIN), |acc, (k, &s)| if s > acc.1 { (k, s) } else { acc });
                let score = objectness * best;
                if score < conf_thresh {
                    continue;
                }
                let bbox = BBox {
                    cx: (sigmoid(t(0)) + col as f64) / grid_w as f64,
                    cy: (sigmoid(t(1)) + row as f64) / grid_h as f64,
                    w: pw as f64 * t(2).exp() / input_w as f64,
                    h: ph as f64 * t(3).exp() / input_h as f64,
                };
                out.push(Detection { bbox, objectness, class_scores, score, class_id });
            }
        }
    }
    Ok(out)
}

pub fn decode_map(map: &RawMap, conf_thresh: f64) -> Result<Vec<Detection>> {
    let s = &map.scale;
    decode(&map.tensor, &s.anchors, s.stride, (s.input_w, s.input_h), conf_thresh)
}

/// Decodes every scale, concatenating in scale order.
pub fn decode_all(maps: &[RawMap], conf_thresh: f64) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for m in maps {
        out.extend(decode_map(m, conf_thresh)?);
    }
    Ok(out)
}

/// Logits `(t_x, t_y, t_w, t_h)` that decode back to `bbox` from the given
/// cell and anchor. The box center must lie inside the cell.
pub fn inverse_decode(bbox: &BBox, cell: (usize, usize), anchor: (f32, f32), scale: &YoloOutput) -> [f64; 4] {
    let (col, row) = cell;
    let fx = bbox.cx * scale.grid_w as f64 - col as f64;
    let fy = bbox.cy * scale.grid_h as f64 - row as f64;
    [
        logit(fx),
        logit(fy),
        (bbox.w * scale.input_w as f64 / anchor.0 as f64).ln(),
        (bbox.h * scale.input_h as f64 / anchor.1 as f64).ln(),
    ]
}

/// Positive slot in a [`TargetTensor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    /// Midpoint offset inside the cell, in [0, 1).
    pub bx: f64,
    pub by: f64,
    /// Box size as image fractions.
    pub bw: f64,
    pub bh: f64,
    pub class_id: usize,
    /// Which input label this came from.
    pub label_index: usize,
}

impl CellTarget {
    /// The per-anchor y-label `[p_c, b_x, b_y, b_h, b_w, c_1..c_n]` with
    /// `b_h`, `b_w` expressed as multiples of the cell size.
    pub fn y_label(&self, classes: usize, grid_w: usize, grid_h: usize) -> Vec<f64> {
        let mut v = vec![1.0, self.bx, self.by, self.bh * grid_h as f64, self.bw * grid_w as f64];
        v.extend((0..classes).map(|k| if k == self.class_id { 1.0 } else { 0.0 }));
        v
    }

    /// Image-fraction box this target stands for at the given cell.
    pub fn bbox(&self, cell: (usize, usize), grid_w: usize, grid_h: usize) -> BBox {
        BBox::new(
            (cell.0 as f64 + self.bx) / grid_w as f64,
            (cell.1 as f64 + self.by) / grid_h as f64,
            self.bw,
            self.bh,
        )
    }
}

/// Training targets for one scale; slots are indexed (row, col, anchor).
/// Empty slots mean objectness 0 with a don't-care box.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTensor {
    pub grid_w: usize,
    pub grid_h: usize,
    pub anchors: usize,
    pub classes: usize,
    slots: Vec<Option<CellTarget>>,
}

impl TargetTensor {
    fn empty(grid_w: usize, grid_h: usize, anchors: usize, classes: usize) -> Self {
        TargetTensor { grid_w, grid_h, anchors, classes, slots: vec![None; grid_w * grid_h * anchors] }
    }

    fn slot(&self, col: usize, row: usize, anchor: usize) -> usize {
        (row * self.grid_w + col) * self.anchors + anchor
    }

    pub fn get(&self, col: usize, row: usize, anchor: usize) -> Option<&CellTarget> {
        self.slots[self.slot(col, row, anchor)].as_ref()
    }

    pub fn objectness(&self, col: usize, row: usize, anchor: usize) -> f64 {
        if self.get(col, row, anchor).is_some() {
            1.0
        } else {
            0.0
        }
    }

    /// All positive slots as ((col, row, anchor), target).
    pub fn positives(&self) -> impl Iterator<Item = ((usize, usize, usize), &CellTarget)> {
        self.slots.iter().enumerate().filter_map(move |(i, s)| {
            s.as_ref().map(|t| {
                let anchor = i % self.anchors;
                let cell = i / self.anchors;
                ((cell % self.grid_w, cell / self.grid_w, anchor), t)
            })
        })
    }

    /// Full y-label of one cell across its anchors. `None` entries are the
    /// don't-care fields of empty slots.
    pub fn cell_y_label(&self, col: usize, row: usize) -> Vec<Option<f64>> {
        let mut v = Vec::with_capacity(self.anchors * (5 + self.classes));
        for a in 0..self.anchors {
            match self.get(col, row, a) {
                Some(t) => v.extend(t.y_label(self.classes, self.grid_w, self.grid_h).into_iter().map(Some)),
                None => {
                    v.push(Some(0.0));
                    v.extend(std::iter::repeat_n(None, 4 + self.classes));
                }
            }
        }
        v
    }
}

/// IoU of two boxes sharing a center, given as (w, h).
pub fn centered_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Where a label is assigned: scale index, anchor index within that scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Responsibility {
    pub scale: usize,
    pub anchor: usize,
    /// Index in the network-wide anchor list.
    pub anchor_id: usize,
}

/// The anchor, over all scales, with the highest co-centered IoU against the
/// label's size. Ties go to the lowest anchor id.
pub fn responsible_anchor(label: &GroundTruthLabel, scales: &[YoloOutput]) -> Option<Responsibility> {
    let mut best: Option<(f64, Responsibility)> = None;
    for (si, s) in scales.iter().enumerate() {
        let size = (label.w * s.input_w as f64, label.h * s.input_h as f64);
        for (ai, (&(pw, ph), &id)) in s.anchors.iter().zip(&s.anchor_ids).enumerate() {
            let score = centered_iou(size, (pw as f64, ph as f64));
            let cand = Responsibility { scale: si, anchor: ai, anchor_id: id };
            best = match best {
                Some((b, r)) if b > score || (b == score && r.anchor_id < id) => Some((b, r)),
                _ => Some((score, cand)),
            };
        }
    }
    best.map(|(_, r)| r)
}

/// Builds per-scale targets. Each label goes to the cell holding its midpoint
/// on the scale of its best-matching anchor. When two labels land in the same
/// (cell, anchor) slot the larger-area label wins; equal areas keep the
/// earlier label.
pub fn encode_ground_truth(labels: &[GroundTruthLabel], scales: &[YoloOutput]) -> Result<Vec<TargetTensor>> {
    if scales.is_empty() || scales.iter().any(|s| s.anchors.is_empty()) {
        return Err(Error::Config("encoding needs at least one anchor per scale".into()));
    }
    let classes = scales[0].classes;
    let mut targets: Vec<TargetTensor> =
        scales.iter().map(|s| TargetTensor::empty(s.grid_w, s.grid_h, s.anchors.len(), classes)).collect();

    for (index, label) in labels.iter().enumerate() {
        label.validate(Some(classes))?;
        let r = responsible_anchor(label, scales).expect("anchors present");
        let t = &mut targets[r.scale];
        let col = ((label.cx * t.grid_w as f64).floor() as usize).min(t.grid_w - 1);
        let row = ((label.cy * t.grid_h as f64).floor() as usize).min(t.grid_h - 1);
        let cand = CellTarget {
            bx: label.cx * t.grid_w as f64 - col as f64,
            by: label.cy * t.grid_h as f64 - row as f64,
            bw: label.w,
            bh: label.h,
            class_id: label.class_id,
            label_index: index,
        };
        let slot = t.slot(col, row, r.anchor);
        let replace = match &t.slots[slot] {
            None => true,
            Some(old) => cand.bw * cand.bh > old.bw * old.bh,
        };
        if replace {
            t.slots[slot] = Some(cand);
        }
    }
    Ok(targets)
}
