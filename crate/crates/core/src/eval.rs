//! Detection evaluation: greedy ground-truth matching, the miss-rate/FPPI
//! curve, and its log-average summary over nine log-spaced reference points.

use crate::detect::Detection;
use crate::error::{Error, Result};

/// Reasonable-subset thresholds: at least 50 px tall, at most 35% occluded.
pub const REASONABLE_MIN_HEIGHT: f64 = 50.0;
pub const REASONABLE_MAX_OCCLUSION: f64 = 0.35;

/// Matching overlap threshold.
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// Miss rates are floored at this value inside the log average.
pub const MISS_RATE_FLOOR: f64 = 1e-10;

/// An annotated pedestrian box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: crate::detect::BBox,
    /// Occluded fraction in [0,1]; 0 when unspecified.
    pub occlusion: f64,
}

/// The nine FPPI reference points 10^(-2 + k/4), k = 0..8.
pub fn fppi_reference_points() -> [f64; 9] {
    let mut points = [0.0; 9];
    for (k, p) in points.iter_mut().enumerate() {
        *p = 10f64.powf(-2.0 + k as f64 / 4.0);
    }
    points
}

/// Keep ground truths in the reasonable subset.
pub fn reasonable_filter(gts: &[GroundTruth]) -> Vec<GroundTruth> {
    gts.iter()
        .copied()
        .filter(|gt| gt.bbox.h >= REASONABLE_MIN_HEIGHT && gt.occlusion <= REASONABLE_MAX_OCCLUSION)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
}

/// Greedy matching on one image: detections in descending score order (ties
/// keep input order), each claiming its highest-IoU unmatched ground truth at
/// IoU >= `iou_thresh` (ties by lower ground-truth index). Returns each
/// detection's score with its true-positive flag, in the processed order.
pub fn label_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut gt_taken = vec![false; gts.len()];
    let mut labels = Vec::with_capacity(dets.len());
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let iou = det.bbox.iou(&gt.bbox);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_taken[gi] = true;
                labels.push((det.score, true));
            }
            None => labels.push((det.score, false)),
        }
    }
    labels
}

/// Matching counts for one image: unmatched detections are false positives,
/// unmatched ground truths are misses.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> MatchCounts {
    let labels = label_detections(dets, gts, iou_thresh);
    let tp = labels.iter().filter(|(_, is_tp)| *is_tp).count();
    MatchCounts {
        tp,
        fp: labels.len() - tp,
        missed: gts.len() - tp,
    }
}

/// One threshold's operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

/// The miss-rate/FPPI trade-off curve with its log-average summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    /// Operating points in ascending-FPPI order (descending threshold).
    pub points: Vec<OperatingPoint>,
    pub lamr: f64,
}

impl EvalCurve {
    /// Miss rate available at FPPI budget `f`: the minimum miss rate among
    /// operating points with fppi <= f, or 1 when no point qualifies.
    pub fn miss_rate_at(&self, f: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fppi <= f)
            .map(|p| p.miss_rate)
            .fold(f64::INFINITY, f64::min)
            .min(1.0)
    }

    /// The nine (reference FPPI, miss rate) pairs entering the log average.
    pub fn reference_samples(&self) -> Vec<(f64, f64)> {
        fppi_reference_points()
            .iter()
            .map(|&f| (f, self.miss_rate_at(f)))
            .collect()
    }
}

/// Sweep the threshold over the distinct detection scores and build the
/// curve. `per_image` pairs each image's detections with its (already
/// filtered) ground truths; the ground-truth total must be positive.
pub fn curve(per_image: &[(Vec<Detection>, Vec<GroundTruth>)], iou_thresh: f64) -> Result<EvalCurve> {
    let num_images = per_image.len();
    if num_images == 0 {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    let num_gt: usize = per_image.iter().map(|(_, gts)| gts.len()).sum();
    if num_gt == 0 {
        return Err(Error::InvalidArgument(
            "no ground truths: miss rate is undefined".into(),
        ));
    }

    // Greedy matching processes detections in descending score order, so a
    // detection's label does not depend on lower-scored ones; labeling once
    // and filtering by threshold is equivalent to re-matching per threshold.
    let mut labels: Vec<(f64, bool)> = Vec::new();
    for (dets, gts) in per_image {
        labels.extend(label_detections(dets, gts, iou_thresh));
    }
    labels.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < labels.len() {
        let threshold = labels[i].0;
        // absorb the whole tie group
        while i < labels.len() && labels[i].0 == threshold {
            if labels[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(OperatingPoint {
            threshold,
            fppi: fp as f64 / num_images as f64,
            miss_rate: 1.0 - tp as f64 / num_gt as f64,
        });
    }

    let mut curve = EvalCurve { points, lamr: 1.0 };
    curve.lamr = (fppi_reference_points()
        .iter()
        .map(|&f| curve.miss_rate_at(f).max(MISS_RATE_FLOOR).ln())
        .sum::<f64>()
        / 9.0)
        .exp();
    Ok(curve)
}
