//! Detection quality metrics.
//!
//! Matching and AP follow the COCO conventions: per image and class,
//! detections are taken in descending confidence and each claims the
//! unmatched ground-truth box it overlaps most (if above the IoU threshold).
//! AP is the mean of right-monotone interpolated precision sampled at the 101
//! recall levels `0.00, 0.01, …, 1.00`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::dataset_io::GroundTruthBox;
use crate::detector::Detection;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("box has non-positive width or height")]
    DegenerateBox,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
}

pub const RECALL_POINTS: usize = 101;

/// The ten IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64, EvalError> {
    if !(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0) {
        return Err(EvalError::DegenerateBox);
    }
    let [ax0, ay0, ax1, ay1] = a.to_xyxy();
    let [bx0, by0, bx1, by1] = b.to_xyxy();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok((inter / union).min(1.0))
}

/// Outcome for one detection at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMatch {
    /// Index into the detection slice given to [`match_detections`].
    pub det_index: usize,
    pub class_id: u32,
    pub confidence: f64,
    /// Index into the image's ground-truth list.
    pub matched_gt: Option<usize>,
    /// IoU with the matched box, or the best same-class IoU when unmatched.
    pub iou: f64,
    pub is_tp: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub iou_threshold: f64,
    /// Detections on images of the evaluation set, in input order.
    pub detections: Vec<DetectionMatch>,
    pub gt_per_class: BTreeMap<u32, usize>,
    pub false_negatives: BTreeMap<u32, usize>,
}

impl MatchResult {
    pub fn tp(&self, class: u32) -> usize {
        self.detections
            .iter()
            .filter(|d| d.class_id == class && d.is_tp)
            .count()
    }

    pub fn fp(&self, class: u32) -> usize {
        self.detections
            .iter()
            .filter(|d| d.class_id == class && !d.is_tp)
            .count()
    }

    pub fn classes(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.gt_per_class.keys().copied().collect();
        c.extend(self.detections.iter().map(|d| d.class_id));
        c.sort_unstable();
        c.dedup();
        c
    }
}

fn by_confidence_desc(dets: &[Detection], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
}

/// Greedy confidence-ordered matching of detections to ground truth.
///
/// Only images present in `gts` count; detections on other images are
/// ignored.
pub fn match_detections(
    dets: &[Detection],
    gts: &BTreeMap<String, Vec<GroundTruthBox>>,
    iou_threshold: f64,
) -> MatchResult {
    let mut gt_per_class: BTreeMap<u32, usize> = BTreeMap::new();
    for boxes in gts.values() {
        for b in boxes {
            *gt_per_class.entry(b.class_id).or_default() += 1;
        }
    }

    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        if gts.contains_key(&d.image_id) {
            by_image.entry(d.image_id.as_str()).or_default().push(i);
        }
    }

    let mut outcome: BTreeMap<usize, DetectionMatch> = BTreeMap::new();
    let mut matched_total: BTreeMap<u32, usize> = BTreeMap::new();
    for (image, mut idx) in by_image {
        let truth = &gts[image];
        let mut taken = vec![false; truth.len()];
        by_confidence_desc(dets, &mut idx);
        for i in idx {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            let mut best_any = 0.0f64;
            for (g, gt) in truth.iter().enumerate() {
                if gt.class_id != d.class_id {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox).unwrap_or(0.0);
                best_any = best_any.max(v);
                if taken[g] || v < iou_threshold {
                    continue;
                }
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                *matched_total.entry(d.class_id).or_default() += 1;
            }
            outcome.insert(
                i,
                DetectionMatch {
                    det_index: i,
                    class_id: d.class_id,
                    confidence: d.confidence,
                    matched_gt: best.map(|(g, _)| g),
                    iou: best.map_or(best_any, |(_, v)| v),
                    is_tp: best.is_some(),
                },
            );
        }
    }

    let false_negatives = gt_per_class
        .iter()
        .map(|(c, n)| (*c, n - matched_total.get(c).copied().unwrap_or(0)))
        .collect();
    MatchResult {
        iou_threshold,
        detections: outcome.into_values().collect(),
        gt_per_class,
        false_negatives,
    }
}

/// COCO 101-point AP for one class. `None` when the class has neither
/// ground truth nor detections.
pub fn average_precision(matches: &MatchResult, class: u32) -> Option<f64> {
    let npos = matches.gt_per_class.get(&class).copied().unwrap_or(0);
    let mut dets: Vec<&DetectionMatch> = matches.detections.iter().filter(|d| d.class_id == class).collect();
    if npos == 0 {
        return (!dets.is_empty()).then_some(0.0);
    }
    dets.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.det_index.cmp(&b.det_index))
    });

    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for d in &dets {
        if d.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map50: f64,
    pub map75: f64,
    pub map50_95: f64,
    pub precision: f64,
    pub recall: f64,
    pub per_class: BTreeMap<u32, ClassAp>,
}

fn mean_ap(matches: &MatchResult) -> (f64, BTreeMap<u32, f64>) {
    let per: BTreeMap<u32, f64> = matches
        .classes()
        .into_iter()
        .filter_map(|c| average_precision(matches, c).map(|ap| (c, ap)))
        .collect();
    let mean = if per.is_empty() {
        0.0
    } else {
        per.values().sum::<f64>() / per.len() as f64
    };
    (mean, per)
}

/// Precision and recall at the confidence cut that maximizes F1, pooled
/// over all classes.
fn max_f1_operating_point(matches: &MatchResult) -> (f64, f64) {
    let npos: usize = matches.gt_per_class.values().sum();
    let mut dets: Vec<&DetectionMatch> = matches.detections.iter().collect();
    dets.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.det_index.cmp(&b.det_index))
    });
    let (mut best_f1, mut best) = (-1.0, (0.0, 0.0));
    let (mut tp, mut seen) = (0usize, 0usize);
    for (i, d) in dets.iter().enumerate() {
        seen += 1;
        tp += usize::from(d.is_tp);
        // Only cut between distinct confidences.
        if dets.get(i + 1).is_some_and(|n| n.confidence == d.confidence) {
            continue;
        }
        let p = tp as f64 / seen as f64;
        let r = if npos > 0 { tp as f64 / npos as f64 } else { 0.0 };
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if f1 > best_f1 {
            best_f1 = f1;
            best = (p, r);
        }
    }
    best
}

/// mAP at 0.5, 0.75 and averaged over 0.50:0.95, plus P/R at IoU 0.5.
pub fn map_metrics(dets: &[Detection], gts: &BTreeMap<String, Vec<GroundTruthBox>>) -> Result<EvalReport, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let mut report = EvalReport::default();
    let mut sum = 0.0;
    for t in coco_iou_thresholds() {
        let m = match_detections(dets, gts, t);
        let (mean, per) = mean_ap(&m);
        sum += mean;
        for (c, ap) in per {
            report.per_class.entry(c).or_default().ap50_95 += ap / 10.0;
            if t == 0.5 {
                report.per_class.entry(c).or_default().ap50 = ap;
            } else if t == 0.75 {
                report.per_class.entry(c).or_default().ap75 = ap;
            }
        }
        if t == 0.5 {
            report.map50 = mean;
            (report.precision, report.recall) = max_f1_operating_point(&m);
        } else if t == 0.75 {
            report.map75 = mean;
        }
    }
    report.map50_95 = sum / 10.0;
    Ok(report)
}

/// Labeled instances per class, split at an iteration boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub prior_count: Vec<usize>,
    pub new_count: Vec<usize>,
}

/// Counts `(class_id, iteration)` instances: those tagged before `boundary`
/// are prior, those tagged exactly `boundary` are new.
pub fn class_balance<I>(instances: I, boundary: u32, num_classes: usize) -> ClassBalance
where
    I: IntoIterator<Item = (u32, u32)>,
{
    let mut out = ClassBalance {
        prior_count: vec![0; num_classes],
        new_count: vec![0; num_classes],
    };
    for (class, iteration) in instances {
        let c = class as usize;
        if c >= out.prior_count.len() {
            out.prior_count.resize(c + 1, 0);
            out.new_count.resize(c + 1, 0);
        }
        if iteration < boundary {
            out.prior_count[c] += 1;
        } else if iteration == boundary {
            out.new_count[c] += 1;
        }
    }
    out
}

/// Box-plot summary of one class's confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub outliers: Vec<f64>,
    pub count: usize,
}

/// Per-class summaries; `None` for classes without detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceDistribution {
    pub per_class: Vec<Option<BoxStats>>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v
        .iter()
        .copied()
        .filter(|x| (lo_fence..=hi_fence).contains(x))
        .collect();
    let outliers = v
        .iter()
        .copied()
        .filter(|x| !(lo_fence..=hi_fence).contains(x))
        .collect();
    // Whiskers end at the most extreme non-outlier values.
    let min = inside.first().copied().unwrap_or(q1).min(q1);
    let max = inside.last().copied().unwrap_or(q3).max(q3);
    Some(BoxStats {
        min,
        q1,
        median,
        q3,
        max,
        outliers,
        count: v.len(),
    })
}

pub fn confidence_distribution(dets: &[Detection], num_classes: usize) -> ConfidenceDistribution {
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    for d in dets {
        let c = d.class_id as usize;
        if c >= buckets.len() {
            buckets.resize(c + 1, Vec::new());
        }
        buckets[c].push(d.confidence);
    }
    ConfidenceDistribution {
        per_class: buckets.iter().map(|b| box_stats(b)).collect(),
    }
}

/// One row of a trajectory table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub strategy: String,
    pub iteration: u32,
    pub map50_95: f64,
    pub map50: f64,
    pub map75: f64,
    pub precision: f64,
    pub recall: f64,
}

impl TrajectoryRow {
    pub fn new(strategy: &str, iteration: u32, report: &EvalReport) -> Self {
        Self {
            strategy: strategy.to_owned(),
            iteration,
            map50_95: report.map50_95,
            map50: report.map50,
            map75: report.map75,
            precision: report.precision,
            recall: report.recall,
        }
    }
}

pub const TRAJECTORY_HEADER: &str = "strategy,iteration,map50_95,map50,map75,precision,recall";

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.strategy, r.iteration, r.map50_95, r.map50, r.map75, r.precision, r.recall
        );
    }
    out
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}
