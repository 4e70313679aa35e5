//! Detection evaluation: greedy per-frame matching, precision/recall/F1,
//! 101-point interpolated AP, FPPI and confidence-threshold sweeps.
//!
//! Matching is always restricted to boxes of the same category. Within a
//! frame, detections are visited by descending confidence (stable on input
//! order) and each one claims the unmatched ground truth with the highest
//! IoU at or above the threshold, lowest ground-truth index on ties.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{CategoryLabel, Detection, GroundTruth};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("detections and ground truth span several frames ({0} and {1}); match_frame takes one frame")]
    MixedFrames(u64, u64),
    #[error("IoU threshold {0} is outside (0, 1]")]
    IouThreshold(f64),
    #[error("confidence threshold {0} is not a finite number")]
    ConfThreshold(f64),
    #[error("no ground truth for category {0}")]
    NoGroundTruth(CategoryLabel),
    #[error("no ground truth in any category")]
    NoGroundTruthAtAll,
    #[error("image count must be positive")]
    NoImages,
    #[error("confidence grid is empty")]
    EmptyGrid,
    #[error("confidence grid value {0} is outside [0, 1]")]
    GridValue(f64),
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_threshold_grid() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// Recall sample points 0.00, 0.01, ..., 1.00 used for AP interpolation.
pub fn recall_grid() -> [f64; 101] {
    std::array::from_fn(|k| k as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub detection: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub matched_pairs: Vec<MatchedPair>,
}

fn check_iou_thr(iou_thr: f64) -> Result<(), MetricsError> {
    if iou_thr > 0.0 && iou_thr <= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::IouThreshold(iou_thr))
    }
}

fn check_conf_thr(conf_thr: f64) -> Result<(), MetricsError> {
    if conf_thr.is_finite() {
        Ok(())
    } else {
        Err(MetricsError::ConfThreshold(conf_thr))
    }
}

fn by_confidence_desc(a: &Detection, b: &Detection) -> Ordering {
    b.confidence()
        .partial_cmp(&a.confidence())
        .unwrap_or(Ordering::Equal)
}

/// Core greedy matcher over one frame. Returns, per detection (input
/// order), the index of the matched ground truth and its IoU.
fn greedy_match(
    dets: &[&Detection],
    gts: &[&GroundTruth],
    iou_thr: f64,
) -> Vec<Option<(usize, f64)>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| by_confidence_desc(dets[a], dets[b]));

    let mut gt_taken = vec![false; gts.len()];
    let mut result = vec![None; dets.len()];
    for d in order {
        let det = dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_taken[g] || gt.category != det.category {
                continue;
            }
            let iou = det.bbox.iou(&gt.bbox);
            if iou < iou_thr {
                continue;
            }
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            gt_taken[g] = true;
        }
        result[d] = best;
    }
    result
}

/// Matches the detections of a single frame against its ground truth.
pub fn match_frame(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thr: f64,
) -> Result<MatchResult, MetricsError> {
    check_iou_thr(iou_thr)?;
    let mut frames = dets
        .iter()
        .map(|d| d.frame_index)
        .chain(gts.iter().map(|g| g.frame_index));
    if let Some(first) = frames.next() {
        if let Some(other) = frames.find(|&f| f != first) {
            return Err(MetricsError::MixedFrames(first, other));
        }
    }

    let det_refs: Vec<&Detection> = dets.iter().collect();
    let gt_refs: Vec<&GroundTruth> = gts.iter().collect();
    let assignment = greedy_match(&det_refs, &gt_refs, iou_thr);

    let matched_pairs: Vec<MatchedPair> = assignment
        .iter()
        .enumerate()
        .filter_map(|(d, m)| {
            m.map(|(g, iou)| MatchedPair {
                detection: d,
                ground_truth: g,
                iou,
            })
        })
        .collect();
    let tp = matched_pairs.len();
    Ok(MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        matched_pairs,
    })
}

struct FrameGroup<'a> {
    dets: Vec<(usize, &'a Detection)>,
    gts: Vec<&'a GroundTruth>,
}

fn group_by_frame<'a>(
    dets: impl Iterator<Item = (usize, &'a Detection)>,
    gts: impl Iterator<Item = &'a GroundTruth>,
) -> BTreeMap<u64, FrameGroup<'a>> {
    let mut frames: BTreeMap<u64, FrameGroup<'a>> = BTreeMap::new();
    for (i, d) in dets {
        frames
            .entry(d.frame_index)
            .or_insert_with(|| FrameGroup {
                dets: Vec::new(),
                gts: Vec::new(),
            })
            .dets
            .push((i, d));
    }
    for g in gts {
        frames
            .entry(g.frame_index)
            .or_insert_with(|| FrameGroup {
                dets: Vec::new(),
                gts: Vec::new(),
            })
            .gts
            .push(g);
    }
    frames
}

/// Per-detection true-positive flags (indexed like `dets`) plus the number
/// of ground truths considered, for detections passing `keep`.
fn match_dataset(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thr: f64,
    keep_det: impl Fn(&Detection) -> bool,
    keep_gt: impl Fn(&GroundTruth) -> bool,
) -> (Vec<Option<bool>>, usize) {
    let frames = group_by_frame(
        dets.iter().enumerate().filter(|(_, d)| keep_det(d)),
        gts.iter().filter(|g| keep_gt(g)),
    );
    let mut flags = vec![None; dets.len()];
    let mut n_gt = 0;
    for group in frames.values() {
        n_gt += group.gts.len();
        let frame_dets: Vec<&Detection> = group.dets.iter().map(|(_, d)| *d).collect();
        let assignment = greedy_match(&frame_dets, &group.gts, iou_thr);
        for ((i, _), m) in group.dets.iter().zip(assignment) {
            flags[*i] = Some(m.is_some());
        }
    }
    (flags, n_gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Micro-aggregated TP/FP/FN over all frames for detections at or above
/// `conf_thr`.
pub fn count_matches(
    dets: &[Detection],
    gts: &[GroundTruth],
    conf_thr: f64,
    iou_thr: f64,
) -> Result<Counts, MetricsError> {
    check_iou_thr(iou_thr)?;
    check_conf_thr(conf_thr)?;
    let (flags, n_gt) = match_dataset(dets, gts, iou_thr, |d| d.confidence() >= conf_thr, |_| true);
    let tp = flags.iter().filter(|f| **f == Some(true)).count();
    let fp = flags.iter().filter(|f| **f == Some(false)).count();
    Ok(Counts {
        tp,
        fp,
        fn_: n_gt - tp,
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(precision, recall, f1)`, each defined as 0 on a zero denominator.
pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    };
    (p, r, f1)
}

/// 101-point interpolated AP for one category at one IoU threshold.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thr: f64,
    category: CategoryLabel,
) -> Result<f64, MetricsError> {
    check_iou_thr(iou_thr)?;
    let (flags, n_gt) = match_dataset(
        dets,
        gts,
        iou_thr,
        |d| d.category == category,
        |g| g.category == category,
    );
    if n_gt == 0 {
        return Err(MetricsError::NoGroundTruth(category));
    }

    let mut ranked: Vec<usize> = (0..dets.len()).filter(|&i| flags[i].is_some()).collect();
    ranked.sort_by(|&a, &b| by_confidence_desc(&dets[a], &dets[b]));

    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &ranked {
        if flags[i] == Some(true) {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // Precision envelope: best precision at this rank or any later one.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }

    let sum: f64 = recall_grid()
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Ok(sum / 101.0)
}

/// Category-mean AP at one IoU threshold. Categories without any ground
/// truth are left out of the mean.
pub fn mean_average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thr: f64,
) -> Result<f64, MetricsError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for category in CategoryLabel::ALL {
        match average_precision(dets, gts, iou_thr, category) {
            Ok(ap) => {
                total += ap;
                n += 1;
            }
            Err(MetricsError::NoGroundTruth(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        Err(MetricsError::NoGroundTruthAtAll)
    } else {
        Ok(total / n as f64)
    }
}

/// AP averaged over the IoU thresholds 0.50:0.05:0.95.
pub fn ap_range(dets: &[Detection], gts: &[GroundTruth]) -> Result<f64, MetricsError> {
    let grid = iou_threshold_grid();
    let mut total = 0.0;
    for thr in grid {
        total += mean_average_precision(dets, gts, thr)?;
    }
    Ok(total / grid.len() as f64)
}

/// False positives per image among detections with confidence at or above
/// `conf_thr`. `n_images` counts every evaluated frame, negatives included.
pub fn fppi(
    dets: &[Detection],
    gts: &[GroundTruth],
    conf_thr: f64,
    iou_thr: f64,
    n_images: usize,
) -> Result<f64, MetricsError> {
    if n_images == 0 {
        return Err(MetricsError::NoImages);
    }
    let counts = count_matches(dets, gts, conf_thr, iou_thr)?;
    Ok(counts.fp as f64 / n_images as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub conf: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fppi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
    pub best_conf: f64,
    pub best_f1: f64,
}

/// Evenly spaced thresholds `0, 1/steps, ..., 1`.
pub fn uniform_grid(steps: usize) -> Vec<f64> {
    let steps = steps.max(1);
    (0..=steps).map(|k| k as f64 / steps as f64).collect()
}

/// Evaluates P/R/F1 and FPPI at every threshold of `grid` and picks the
/// F1-maximising operating point (lowest threshold on ties).
pub fn sweep_confidence(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thr: f64,
    grid: &[f64],
    n_images: usize,
) -> Result<SweepCurve, MetricsError> {
    if grid.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    if let Some(&bad) = grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(MetricsError::GridValue(bad));
    }
    if n_images == 0 {
        return Err(MetricsError::NoImages);
    }
    check_iou_thr(iou_thr)?;

    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));

    let mut points = Vec::with_capacity(sorted.len());
    for conf in sorted {
        let c = count_matches(dets, gts, conf, iou_thr)?;
        let (precision, recall, f1) = precision_recall_f1(c.tp, c.fp, c.fn_);
        points.push(SweepPoint {
            conf,
            precision,
            recall,
            f1,
            fppi: c.fp as f64 / n_images as f64,
        });
    }

    let mut best = points[0];
    for p in &points[1..] {
        if p.f1 > best.f1 {
            best = *p;
        }
    }
    Ok(SweepCurve {
        points,
        best_conf: best.conf,
        best_f1: best.f1,
    })
}

/// One operating-point summary row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_50: f64,
    pub ap_50_95: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fppi: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub conf_thr: f64,
    pub iou_thr: f64,
}

/// Full evaluation at one operating point. AP figures are computed on the
/// detections that survive `conf_thr`.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    conf_thr: f64,
    iou_thr: f64,
    n_images: usize,
) -> Result<EvalReport, MetricsError> {
    if n_images == 0 {
        return Err(MetricsError::NoImages);
    }
    let counts = count_matches(dets, gts, conf_thr, iou_thr)?;
    let (precision, recall, f1) = precision_recall_f1(counts.tp, counts.fp, counts.fn_);
    let kept: Vec<Detection> = dets
        .iter()
        .filter(|d| d.confidence() >= conf_thr)
        .copied()
        .collect();
    Ok(EvalReport {
        ap_50: mean_average_precision(&kept, gts, 0.5)?,
        ap_50_95: ap_range(&kept, gts)?,
        precision,
        recall,
        f1,
        fppi: counts.fp as f64 / n_images as f64,
        tp: counts.tp,
        fp: counts.fp,
        fn_: counts.fn_,
        conf_thr,
        iou_thr,
    })
}
