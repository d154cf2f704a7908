//! Detection matching and the metric report.
//!
//! Matching is greedy: within an image, detections are visited by descending
//! score and each claims the unmatched same-class ground truth with the
//! highest IoU, provided that IoU reaches the threshold. AP integrates the
//! precision envelope over every distinct recall value of the full ranking.

use std::fmt::Write as _;

use crate::dataset::GroundTruthLabel;
use crate::error::{Error, Result};
use crate::head::Detection;
use crate::postprocess::{iou, rank_by_score};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub image: usize,
    pub detection: usize,
    pub truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<Match>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn check_aligned(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthLabel>]) -> Result<()> {
    if dets.len() != gts.len() {
        return Err(Error::Validation(format!(
            "detections cover {} images but ground truth covers {}",
            dets.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Greedy matching of one image. Returns `(detection index, Some((truth, iou)))`
/// in visiting order; `None` marks a false positive.
fn match_image(
    dets: &[Detection],
    gts: &[GroundTruthLabel],
    iou_thresh: f64,
    keep: impl Fn(&Detection) -> bool,
) -> Vec<(usize, Option<(usize, f64)>)> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::new();
    for i in rank_by_score(dets) {
        let d = &dets[i];
        if !keep(d) {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox());
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        out.push((i, best));
    }
    out
}

pub fn match_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthLabel>],
    iou_thresh: f64,
    conf_thresh: f64,
) -> Result<MatchResult> {
    check_aligned(dets, gts)?;
    let mut res = MatchResult::default();
    for (image, (d, g)) in dets.iter().zip(gts).enumerate() {
        let visited = match_image(d, g, iou_thresh, |x| x.score >= conf_thresh);
        let mut hits = 0;
        for (detection, m) in visited {
            match m {
                Some((truth, iou)) => {
                    hits += 1;
                    res.matches.push(Match { image, detection, truth, iou });
                }
                None => res.fp += 1,
            }
        }
        res.tp += hits;
        res.fn_ += g.len() - hits;
    }
    Ok(res)
}

/// (precision, recall, F1); each is 0 when its denominator is 0.
pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Mean IoU over matched pairs, 0 with no matches.
pub fn average_iou(matches: &[Match]) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    matches.iter().map(|m| m.iou).sum::<f64>() / matches.len() as f64
}

/// AP of a ranking given as hit flags (true = TP) against `total_truth`
/// ground truths.
pub fn average_precision(hits: &[bool], total_truth: usize) -> f64 {
    if total_truth == 0 {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    for &h in hits {
        if h {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / total_truth as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        if recall[i] != recall[i - 1] {
            ap += (recall[i] - recall[i - 1]) * precision[i];
        }
    }
    ap.clamp(0.0, 1.0)
}

/// Hit flags of `class_id` detections over all images, ranked globally by
/// descending score (ties by image, then index). No confidence cut.
pub fn ranked_hits(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthLabel>],
    iou_thresh: f64,
    class_id: usize,
) -> Result<Vec<bool>> {
    check_aligned(dets, gts)?;
    let mut flagged: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (image, (d, g)) in dets.iter().zip(gts).enumerate() {
        for (i, m) in match_image(d, g, iou_thresh, |x| x.class_id == class_id) {
            flagged.push((d[i].score, image, i, m.is_some()));
        }
    }
    flagged.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(flagged.into_iter().map(|f| f.3).collect())
}

pub fn compute_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthLabel>], iou_thresh: f64, class_id: usize) -> Result<f64> {
    let total = gts.iter().flatten().filter(|g| g.class_id == class_id).count();
    let hits = ranked_hits(dets, gts, iou_thresh, class_id)?;
    if total == 0 {
        log::warn!("class {class_id} has no ground truth; its AP is taken as 0");
    }
    Ok(average_precision(&hits, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub class_id: usize,
    pub name: String,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub detections_count: usize,
    pub unique_truth_count: usize,
    pub classes: Vec<ClassStats>,
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub average_iou: f64,
    pub map50: f64,
    pub total_detection_time: f64,
}

/// Full metric slate over aligned per-image detections and labels. Every
/// detection passed in counts toward `detections_count`.
pub fn evaluate(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthLabel>],
    names: &[String],
    iou_thresh: f64,
    conf_thresh: f64,
    total_detection_time: f64,
) -> Result<EvalReport> {
    let matched = match_detections(dets, gts, iou_thresh, conf_thresh)?;
    let mut classes = Vec::with_capacity(names.len());
    for (class_id, name) in names.iter().enumerate() {
        let only: Vec<Vec<Detection>> =
            dets.iter().map(|d| d.iter().filter(|x| x.class_id == class_id).cloned().collect()).collect();
        let per = match_detections(&only, gts, iou_thresh, conf_thresh)?;
        classes.push(ClassStats {
            class_id,
            name: name.clone(),
            ap: compute_ap(dets, gts, iou_thresh, class_id)?,
            tp: per.tp,
            fp: per.fp,
        });
    }
    let (precision, recall, f1) = precision_recall_f1(matched.tp, matched.fp, matched.fn_);
    let map50 = if classes.is_empty() { 0.0 } else { classes.iter().map(|c| c.ap).sum::<f64>() / classes.len() as f64 };
    Ok(EvalReport {
        detections_count: dets.iter().map(Vec::len).sum(),
        unique_truth_count: gts.iter().map(Vec::len).sum(),
        classes,
        conf_thresh,
        iou_thresh,
        tp: matched.tp,
        fp: matched.fp,
        fn_: matched.fn_,
        precision,
        recall,
        f1,
        average_iou: average_iou(&matched.matches),
        map50,
        total_detection_time,
    })
}

/// Darknet-style text block.
pub fn render_report(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "detections_count = {}, unique_truth_count = {}", r.detections_count, r.unique_truth_count);
    for c in &r.classes {
        let _ = writeln!(s, "class_id = {}, name = {}, ap = {:.2}% (TP = {}, FP = {})", c.class_id, c.name, c.ap * 100.0, c.tp, c.fp);
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "for conf_thresh = {:.2}, precision = {:.2}, recall = {:.2}, F1-score = {:.2}",
        r.conf_thresh, r.precision, r.recall, r.f1
    );
    let _ = writeln!(
        s,
        "for conf_thresh = {:.2}, TP = {}, FP = {}, FN = {}, average IoU = {:.2} %",
        r.conf_thresh,
        r.tp,
        r.fp,
        r.fn_,
        r.average_iou * 100.0
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "IoU threshold = {:.0} %, used Area-Under-Curve for each unique Recall", r.iou_thresh * 100.0);
    let _ = writeln!(s, "mean average precision (mAP@{:.2}) = {:.6}, or {:.2} %", r.iou_thresh, r.map50, r.map50 * 100.0);
    let _ = writeln!(s, "Total Detection Time: {} Seconds", r.total_detection_time.max(0.0).trunc() as u64);
    s
}

/// Flat `key=value` lines; keys follow the report's field names.
pub fn render_report_kv(r: &EvalReport) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k}={v}");
    };
    kv("detections_count", r.detections_count.to_string());
    kv("unique_truth_count", r.unique_truth_count.to_string());
    kv("conf_thresh", r.conf_thresh.to_string());
    kv("iou_thresh", r.iou_thresh.to_string());
    kv("tp", r.tp.to_string());
    kv("fp", r.fp.to_string());
    kv("fn", r.fn_.to_string());
    kv("precision", format!("{:.6}", r.precision));
    kv("recall", format!("{:.6}", r.recall));
    kv("f1", format!("{:.6}", r.f1));
    kv("average_iou", format!("{:.6}", r.average_iou));
    kv("map50", format!("{:.6}", r.map50));
    kv("total_detection_time", format!("{:.3}", r.total_detection_time));
    for c in &r.classes {
        kv(&format!("class.{}.name", c.class_id), c.name.clone());
        kv(&format!("class.{}.ap", c.class_id), format!("{:.6}", c.ap));
        kv(&format!("class.{}.tp", c.class_id), c.tp.to_string());
        kv(&format!("class.{}.fp", c.class_id), c.fp.to_string());
    }
    s
}
