//! Keypoint evaluation: COCO-style OKS mAP, PCKh, confusion counts,
//! convergence tables and throughput measurement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::oks_with_area;
use crate::exec;
use crate::model::{PersonPose, SkeletonSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("prediction {0} has a non-finite score")]
    MissingScore(usize),
    #[error("ground-truth instance {0} has no area or bounding box")]
    MissingArea(usize),
    #[error("pose {index} has {actual} keypoints, skeleton expects {expected}")]
    SkeletonMismatch { index: usize, expected: usize, actual: usize },
    #[error("no non-ignored ground truth to evaluate against")]
    NoGroundTruth,
    #[error("skeleton `{0}` defines no head segment")]
    NoHeadSegment(String),
    #[error("convergence history is empty")]
    EmptyHistory,
    #[error("epochs must be strictly increasing (epoch {0} is out of order)")]
    UnorderedHistory(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// OKS thresholds 0.50, 0.55, …, 0.95.
pub const OKS_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
/// Detections kept per image, highest score first.
pub const MAX_DETS: usize = 20;
const AREA_RANGES: [(f64, f64); 3] = [(0.0, 1e10), (32.0 * 32.0, 96.0 * 96.0), (96.0 * 96.0, 1e10)];
const RECALL_POINTS: usize = 101;

/// One accepted prediction/ground-truth pair at OKS 0.5 over all areas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub prediction: usize,
    pub ground_truth: usize,
    pub oks: f64,
}

/// Matching outcome for one image. Indices refer to the input lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatchLog {
    pub image_id: u64,
    pub matches: Vec<MatchEntry>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_ground_truth: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub map_50: f64,
    pub map_75: f64,
    /// Absent when no ground truth falls in the area range.
    pub map_medium: Option<f64>,
    pub map_large: Option<f64>,
    /// AP at each of [`OKS_THRESHOLDS`] over all areas.
    pub ap_per_threshold: Vec<f64>,
    pub pckh_05: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub per_image: Vec<ImageMatchLog>,
}

impl EvalReport {
    /// Fills the confusion-derived fields.
    pub fn with_confusion(mut self, m: &ConfusionMetrics) -> Self {
        self.precision = m.precision;
        self.recall = m.recall;
        self.f1 = m.f1;
        self.accuracy = m.accuracy;
        self
    }

    /// Aligned text table: one header row and one value row.
    pub fn to_table(&self) -> String {
        let cells = [
            ("mAP", Some(self.map)),
            ("mAP_50", Some(self.map_50)),
            ("mAP_75", Some(self.map_75)),
            ("mAP_Medium", self.map_medium),
            ("mAP_Large", self.map_large),
            ("PCKh@0.5", self.pckh_05),
            ("Precision", self.precision),
            ("Recall", self.recall),
            ("F1", self.f1),
            ("Accuracy", self.accuracy),
        ];
        let (mut head, mut row) = (String::new(), String::new());
        for (name, v) in cells {
            let w = name.len().max(6);
            let _ = write!(head, "{name:>w$}  ");
            let _ = write!(row, "{:>w$}  ", fmt_opt(v));
        }
        format!("{}\n{}\n", head.trim_end(), row.trim_end())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn check_inputs(predictions: &[PersonPose], ground_truth: &[PersonPose], skeleton: &SkeletonSpec) -> Result<(), EvalError> {
    let k = skeleton.len();
    for (i, p) in predictions.iter().enumerate() {
        if p.keypoints.len() != k {
            return Err(EvalError::SkeletonMismatch { index: i, expected: k, actual: p.keypoints.len() });
        }
        if !p.score.is_finite() {
            return Err(EvalError::MissingScore(i));
        }
    }
    for (i, g) in ground_truth.iter().enumerate() {
        if g.keypoints.len() != k {
            return Err(EvalError::SkeletonMismatch { index: i, expected: k, actual: g.keypoints.len() });
        }
        if !g.annotated_area().is_some_and(|a| a.is_finite() && a >= 0.0) {
            return Err(EvalError::MissingArea(i));
        }
    }
    Ok(())
}

// OKS following the COCO reference: labeled gt keypoints only; a gt without
// labeled keypoints is scored by distance to a box twice its bbox size.
fn coco_oks(dt: &PersonPose, gt: &PersonPose, sigmas: &[f64]) -> f64 {
    let area = gt.annotated_area().unwrap_or(0.0) + f64::EPSILON;
    if let Some(o) = oks_with_area(dt, gt, area, sigmas) {
        return o;
    }
    let Some(b) = gt.bbox else { return 0.0 };
    let (x0, x1, y0, y1) = (b.x - b.w, b.x + 2.0 * b.w, b.y - b.h, b.y + 2.0 * b.h);
    let sum: f64 = dt
        .keypoints
        .iter()
        .zip(sigmas)
        .map(|(k, s)| {
            let dx = (x0 - k.x).max(0.0) + (k.x - x1).max(0.0);
            let dy = (y0 - k.y).max(0.0) + (k.y - y1).max(0.0);
            (-(dx * dx + dy * dy) / (2.0 * area * (2.0 * s).powi(2))).exp()
        })
        .sum();
    sum / sigmas.len() as f64
}

fn detection_area(p: &PersonPose) -> f64 {
    let mut it = p.keypoints.iter().filter(|k| k.v.is_labeled() || k.confidence > 0.0);
    let Some(f) = it.next() else { return 0.0 };
    let (mut x0, mut y0, mut x1, mut y1) = (f.x, f.y, f.x, f.y);
    for k in it {
        x0 = x0.min(k.x);
        y0 = y0.min(k.y);
        x1 = x1.max(k.x);
        y1 = y1.max(k.y);
    }
    (x1 - x0) * (y1 - y0)
}

// Per image, per area range, per threshold: detection scores with matched /
// ignored flags in descending-score order, and the non-ignored gt count.
struct ImageEval {
    scores: Vec<f64>,
    matched: [[Vec<bool>; 10]; 3],
    ignored: [[Vec<bool>; 10]; 3],
    n_gt: [usize; 3],
    log: ImageMatchLog,
}

fn evaluate_image(
    image_id: u64,
    dts: &[(usize, &PersonPose)],
    gts: &[(usize, &PersonPose)],
    sigmas: &[f64],
) -> ImageEval {
    let mut order: Vec<usize> = (0..dts.len()).collect();
    order.sort_by(|&a, &b| dts[b].1.score.total_cmp(&dts[a].1.score).then(dts[a].0.cmp(&dts[b].0)));
    let dropped: Vec<usize> = order.iter().skip(MAX_DETS).map(|&d| dts[d].0).collect();
    order.truncate(MAX_DETS);
    let d_sorted: Vec<&PersonPose> = order.iter().map(|&d| dts[d].1).collect();
    let ious: Vec<Vec<f64>> = d_sorted.iter().map(|d| gts.iter().map(|(_, g)| coco_oks(d, g, sigmas)).collect()).collect();
    let d_area: Vec<f64> = d_sorted.iter().map(|d| detection_area(d)).collect();

    let mut out = ImageEval {
        scores: d_sorted.iter().map(|d| d.score).collect(),
        matched: Default::default(),
        ignored: Default::default(),
        n_gt: [0; 3],
        log: ImageMatchLog {
            image_id,
            matches: Vec::new(),
            unmatched_predictions: Vec::new(),
            unmatched_ground_truth: Vec::new(),
        },
    };

    for (a, &(lo, hi)) in AREA_RANGES.iter().enumerate() {
        let g_ignore: Vec<bool> = gts
            .iter()
            .map(|(_, g)| {
                let area = g.annotated_area().unwrap_or(0.0);
                g.iscrowd || g.num_labeled() == 0 || area < lo || area > hi
            })
            .collect();
        let mut g_order: Vec<usize> = (0..gts.len()).collect();
        g_order.sort_by_key(|&g| g_ignore[g]);
        out.n_gt[a] = g_ignore.iter().filter(|&&i| !i).count();

        for (t, &thr) in OKS_THRESHOLDS.iter().enumerate() {
            let mut g_taken = vec![false; gts.len()];
            let mut d_matched = vec![false; d_sorted.len()];
            let mut d_ignored = vec![false; d_sorted.len()];
            for d in 0..d_sorted.len() {
                let mut best_iou = thr.min(1.0 - 1e-10);
                let mut m: Option<usize> = None;
                for &g in &g_order {
                    if g_taken[g] && !gts[g].1.iscrowd {
                        continue;
                    }
                    if let Some(mm) = m {
                        if !g_ignore[mm] && g_ignore[g] {
                            break;
                        }
                    }
                    if ious[d][g] < best_iou {
                        continue;
                    }
                    best_iou = ious[d][g];
                    m = Some(g);
                }
                if let Some(g) = m {
                    d_matched[d] = true;
                    d_ignored[d] = g_ignore[g];
                    g_taken[g] = true;
                    if a == 0 && t == 0 && !g_ignore[g] {
                        out.log.matches.push(MatchEntry {
                            prediction: dts[order[d]].0,
                            ground_truth: gts[g].0,
                            oks: ious[d][g],
                        });
                    }
                } else {
                    d_ignored[d] = d_area[d] < lo || d_area[d] > hi;
                }
            }
            if a == 0 && t == 0 {
                let matched_d: Vec<usize> = out.log.matches.iter().map(|m| m.prediction).collect();
                let matched_g: Vec<usize> = out.log.matches.iter().map(|m| m.ground_truth).collect();
                out.log.unmatched_predictions = order
                    .iter()
                    .map(|&d| dts[d].0)
                    .filter(|i| !matched_d.contains(i))
                    .chain(dropped.iter().copied())
                    .collect();
                out.log.unmatched_predictions.sort_unstable();
                out.log.unmatched_ground_truth = gts.iter().map(|g| g.0).filter(|i| !matched_g.contains(i)).collect();
            }
            out.matched[a][t] = d_matched;
            out.ignored[a][t] = d_ignored;
        }
    }
    out
}

fn group_by_image(poses: &[PersonPose]) -> BTreeMap<u64, Vec<(usize, &PersonPose)>> {
    let mut m: BTreeMap<u64, Vec<(usize, &PersonPose)>> = BTreeMap::new();
    for (i, p) in poses.iter().enumerate() {
        m.entry(p.image_id).or_default().push((i, p));
    }
    m
}

fn run_images(predictions: &[PersonPose], ground_truth: &[PersonPose], skeleton: &SkeletonSpec) -> Vec<ImageEval> {
    let dt = group_by_image(predictions);
    let gt = group_by_image(ground_truth);
    let mut ids: Vec<u64> = dt.keys().chain(gt.keys()).copied().collect();
    ids.sort_unstable();
    ids.dedup();
    let empty = Vec::new();
    exec::map_slice(&ids, |id| {
        evaluate_image(*id, dt.get(id).unwrap_or(&empty), gt.get(id).unwrap_or(&empty), skeleton.oks_sigmas())
    })
}

// 101-point interpolated AP; `None` when no ground truth is counted.
fn average_precision(images: &[ImageEval], a: usize, t: usize) -> Option<f64> {
    let n_gt: usize = images.iter().map(|e| e.n_gt[a]).sum();
    if n_gt == 0 {
        return None;
    }
    let mut dets: Vec<(f64, bool, bool)> = Vec::new();
    for e in images {
        for d in 0..e.scores.len() {
            dets.push((e.scores[d], e.matched[a][t][d], e.ignored[a][t][d]));
        }
    }
    // Stable: ties keep image order, then per-image rank.
    dets.sort_by(|x, y| y.0.total_cmp(&x.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut rc = Vec::with_capacity(dets.len());
    let mut pr = Vec::with_capacity(dets.len());
    for &(_, m, ig) in &dets {
        if !ig {
            if m {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        rc.push(tp as f64 / n_gt as f64);
        pr.push(if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 });
    }
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    let sum: f64 = (0..RECALL_POINTS)
        .map(|i| {
            let r = if i + 1 == RECALL_POINTS { 1.0 } else { i as f64 * 0.01 };
            let idx = rc.partition_point(|&x| x < r);
            if idx < pr.len() {
                pr[idx]
            } else {
                0.0
            }
        })
        .sum();
    Some(sum / RECALL_POINTS as f64)
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    // Rounding in the sum can push the mean of equal values one ulp past them.
    (!d.is_empty()).then(|| (d.iter().sum::<f64>() / d.len() as f64).clamp(lo, hi))
}

/// COCO keypoint mAP.
///
/// Per image the top [`MAX_DETS`] predictions by score are greedily matched,
/// in score order, to the unmatched ground truth of highest OKS at each
/// threshold. Crowd ground truth and ground truth without labeled keypoints
/// are ignore regions. AP uses 101-point interpolated precision and mAP
/// averages AP over [`OKS_THRESHOLDS`]. Medium covers areas in
/// `[32², 96²]`, large areas above `96²`.
pub fn evaluate_map(predictions: &[PersonPose], ground_truth: &[PersonPose], skeleton: &SkeletonSpec) -> Result<EvalReport, EvalError> {
    check_inputs(predictions, ground_truth, skeleton)?;
    let images = run_images(predictions, ground_truth, skeleton);
    let ap = |a: usize| -> Vec<Option<f64>> { (0..OKS_THRESHOLDS.len()).map(|t| average_precision(&images, a, t)).collect() };
    let all = ap(0);
    if all[0].is_none() {
        return Err(EvalError::NoGroundTruth);
    }
    let all: Vec<f64> = all.into_iter().map(|v| v.unwrap_or(0.0)).collect();
    Ok(EvalReport {
        map: mean_defined(&all.iter().copied().map(Some).collect::<Vec<_>>()).unwrap_or(0.0),
        map_50: all[0],
        map_75: all[5],
        map_medium: mean_defined(&ap(1)),
        map_large: mean_defined(&ap(2)),
        ap_per_threshold: all,
        pckh_05: None,
        precision: None,
        recall: None,
        f1: None,
        accuracy: None,
        per_image: images.into_iter().map(|e| e.log).collect(),
    })
}

fn matched_pairs(predictions: &[PersonPose], ground_truth: &[PersonPose], skeleton: &SkeletonSpec) -> Vec<ImageMatchLog> {
    run_images(predictions, ground_truth, skeleton).into_iter().map(|e| e.log).collect()
}

/// Fraction of labeled keypoints of every non-crowd ground-truth instance
/// predicted within `alpha ×` the head-segment length, using the matching of
/// [`evaluate_map`] at OKS 0.5. Keypoints of unmatched instances count as
/// misses; instances whose head segment is unlabeled are skipped.
pub fn evaluate_pckh(
    predictions: &[PersonPose],
    ground_truth: &[PersonPose],
    skeleton: &SkeletonSpec,
    alpha: f64,
) -> Result<f64, EvalError> {
    let (h0, h1) = skeleton.head_segment().ok_or_else(|| EvalError::NoHeadSegment(skeleton.name().to_string()))?;
    if !(alpha > 0.0) {
        return Err(EvalError::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    check_inputs(predictions, ground_truth, skeleton)?;
    let mut matched: BTreeMap<usize, usize> = BTreeMap::new();
    for log in matched_pairs(predictions, ground_truth, skeleton) {
        for m in log.matches {
            matched.insert(m.ground_truth, m.prediction);
        }
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (gi, g) in ground_truth.iter().enumerate() {
        if g.iscrowd {
            continue;
        }
        let (a, b) = (&g.keypoints[h0], &g.keypoints[h1]);
        if !(a.v.is_labeled() && b.v.is_labeled()) {
            continue;
        }
        let head = (a.x - b.x).hypot(a.y - b.y);
        let pred = matched.get(&gi).map(|&p| &predictions[p]);
        for (j, k) in g.keypoints.iter().enumerate() {
            if !k.v.is_labeled() {
                continue;
            }
            total += 1;
            if let Some(p) = pred {
                let q = &p.keypoints[j];
                if (q.x - k.x).hypot(q.y - k.y) <= alpha * head {
                    hit += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

/// Confusion-matrix ratios; each is absent when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Harmonic mean of precision and recall; absent when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    let s = precision + recall;
    (s > 0.0).then(|| 2.0 * precision * recall / s)
}

pub fn confusion_metrics(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionMetrics {
    let ratio = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) => f1_score(p, r),
        _ => None,
    };
    ConfusionMetrics {
        accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
        precision,
        recall,
        f1,
    }
}

impl ConfusionCounts {
    pub fn metrics(&self) -> ConfusionMetrics {
        confusion_metrics(self.tp, self.fp, self.fn_, self.tn)
    }
}

/// Confidence above which a predicted keypoint counts as asserted.
pub const CONFIDENT: f64 = 0.5;

/// Keypoint-level confusion counts over the OKS-0.5 matching.
///
/// For a matched pair and keypoint `j`: a confident prediction within
/// `distance_threshold` of a labeled ground-truth keypoint is a true
/// positive; any other confident prediction is a false positive. A labeled
/// ground-truth keypoint without such a hit is a false negative, and an
/// unconfident prediction on an unlabeled keypoint is a true negative.
/// Confident keypoints of unmatched predictions are false positives and
/// labeled keypoints of unmatched ground truth are false negatives.
pub fn keypoint_confusion(
    predictions: &[PersonPose],
    ground_truth: &[PersonPose],
    skeleton: &SkeletonSpec,
    distance_threshold: f64,
) -> Result<ConfusionCounts, EvalError> {
    check_inputs(predictions, ground_truth, skeleton)?;
    let mut c = ConfusionCounts::default();
    for log in matched_pairs(predictions, ground_truth, skeleton) {
        for m in &log.matches {
            let (p, g) = (&predictions[m.prediction], &ground_truth[m.ground_truth]);
            for (q, k) in p.keypoints.iter().zip(&g.keypoints) {
                let confident = q.confidence > CONFIDENT;
                let hit = confident && k.v.is_labeled() && (q.x - k.x).hypot(q.y - k.y) <= distance_threshold;
                match (confident, hit, k.v.is_labeled()) {
                    (true, true, _) => c.tp += 1,
                    (true, false, labeled) => {
                        c.fp += 1;
                        c.fn_ += labeled as u64;
                    }
                    (false, _, true) => c.fn_ += 1,
                    (false, _, false) => c.tn += 1,
                }
            }
        }
        for &p in &log.unmatched_predictions {
            c.fp += predictions[p].keypoints.iter().filter(|q| q.confidence > CONFIDENT).count() as u64;
        }
        for &g in &log.unmatched_ground_truth {
            let g = &ground_truth[g];
            if !g.iscrowd {
                c.fn_ += g.num_labeled() as u64;
            }
        }
    }
    Ok(c)
}

/// Default convergence checkpoints, in epochs.
pub const DEFAULT_CHECKPOINTS: [usize; 5] = [12, 24, 36, 48, 60];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub label: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub checkpoints: Vec<usize>,
    pub rows: Vec<ConvergenceRow>,
}

/// Samples a per-epoch metric history at `checkpoints`: the value at that
/// epoch, else the last recorded epoch before it. Checkpoints before the
/// first or after the last recorded epoch are absent.
pub fn convergence_report(history: &[(usize, f64)], checkpoints: &[usize]) -> Result<Vec<Option<f64>>, EvalError> {
    if history.is_empty() {
        return Err(EvalError::EmptyHistory);
    }
    for w in history.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(EvalError::UnorderedHistory(w[1].0));
        }
    }
    let (first, last) = (history[0].0, history[history.len() - 1].0);
    Ok(checkpoints
        .iter()
        .map(|&c| {
            if c < first || c > last {
                return None;
            }
            let idx = history.partition_point(|&(e, _)| e <= c);
            Some(history[idx - 1].1)
        })
        .collect())
}

impl ConvergenceTable {
    pub fn build(series: &[(String, Vec<(usize, f64)>)], checkpoints: &[usize]) -> Result<Self, EvalError> {
        let rows = series
            .iter()
            .map(|(label, h)| {
                Ok(ConvergenceRow {
                    label: label.clone(),
                    values: convergence_report(h, checkpoints)?,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        Ok(ConvergenceTable {
            checkpoints: checkpoints.to_vec(),
            rows,
        })
    }

    pub fn to_table(&self) -> String {
        let lw = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let mut s = format!("{:<lw$}", "model");
        for c in &self.checkpoints {
            let _ = write!(s, "  {:>7}", format!("{c}e"));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<lw$}", r.label);
            for v in &r.values {
                let _ = write!(s, "  {:>7}", fmt_opt(*v));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub input_resolution: (u32, u32),
    pub fps: f64,
    pub latency_ms: f64,
}

/// Times `workload` per resolution: one untimed warmup call, then `repeats`
/// timed calls; reports the median latency and `fps = 1000 / latency_ms`.
pub fn bench_throughput<F>(mut workload: F, resolutions: &[(u32, u32)], repeats: usize) -> Result<Vec<BenchRow>, EvalError>
where
    F: FnMut((u32, u32)),
{
    if repeats < 3 {
        return Err(EvalError::InvalidArgument(format!("repeats must be >= 3, got {repeats}")));
    }
    let mut rows = Vec::with_capacity(resolutions.len());
    for &res in resolutions {
        workload(res);
        let mut times: Vec<f64> = (0..repeats)
            .map(|_| {
                let t = Instant::now();
                workload(res);
                t.elapsed().as_secs_f64() * 1e3
            })
            .collect();
        times.sort_by(f64::total_cmp);
        let mid = times.len() / 2;
        let latency_ms = if times.len() % 2 == 1 { times[mid] } else { (times[mid - 1] + times[mid]) / 2.0 };
        // Sub-nanosecond medians are clock noise; floor them to keep fps finite.
        let latency_ms = latency_ms.max(1e-6);
        rows.push(BenchRow {
            input_resolution: res,
            fps: 1000.0 / latency_ms,
            latency_ms,
        });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:>12}  {:>12}  {:>12}\n", "resolution", "fps", "time_ms");
    for r in rows {
        let res = format!("{}x{}", r.input_resolution.0, r.input_resolution.1);
        let _ = writeln!(s, "{res:>12}  {:>12.2}  {:>12.3}", r.fps, r.latency_ms);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{skeleton_by_name, Keypoint};

    fn person(image: u64, dx: f64, score: f64) -> PersonPose {
        let kps = (0..17).map(|j| Keypoint::visible(100.0 + dx + 7.0 * j as f64, 80.0 + 11.0 * j as f64)).collect();
        PersonPose::new(image, "m", kps, score)
    }

    fn gt(image: u64, dx: f64, area: f64) -> PersonPose {
        person(image, dx, 1.0).with_area(area)
    }

    #[test]
    fn perfect_predictions() {
        let sk = skeleton_by_name("coco17").unwrap();
        let g = vec![gt(1, 0.0, 5000.0), gt(1, 400.0, 20000.0), gt(2, 0.0, 5000.0)];
        let p: Vec<PersonPose> = g.iter().map(|x| PersonPose { score: 0.9, ..x.clone() }).collect();
        let r = evaluate_map(&p, &g, &sk).unwrap();
        assert_eq!((r.map, r.map_50, r.map_75), (1.0, 1.0, 1.0));
        assert_eq!(r.map_medium, Some(1.0));
        assert_eq!(r.map_large, Some(1.0));
    }

    #[test]
    fn no_predictions() {
        let sk = skeleton_by_name("coco17").unwrap();
        let r = evaluate_map(&[], &[gt(1, 0.0, 5000.0)], &sk).unwrap();
        assert_eq!(r.map, 0.0);
        assert_eq!(r.map_large, None);
        assert!(matches!(evaluate_map(&[], &[], &sk), Err(EvalError::NoGroundTruth)));
    }

    #[test]
    fn two_by_two_pr_curve() {
        let sk = skeleton_by_name("coco17").unwrap();
        let g = vec![gt(1, 0.0, 5000.0), gt(1, 500.0, 5000.0)];
        // Exact hit ranked first, then a far miss: precision 1 up to recall 0.5.
        let p = vec![person(1, 0.0, 0.9), person(1, 2000.0, 0.8)];
        let r = evaluate_map(&p, &g, &sk).unwrap();
        assert!((r.map_50 - 51.0 / 101.0).abs() < 1e-12);
        // Miss ranked first: interpolated precision 1/2 up to recall 0.5.
        let p = vec![person(1, 0.0, 0.8), person(1, 2000.0, 0.9)];
        let r = evaluate_map(&p, &g, &sk).unwrap();
        assert!((r.map_50 - 0.5 * 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn missing_area_and_score() {
        let sk = skeleton_by_name("coco17").unwrap();
        assert_eq!(evaluate_map(&[], &[person(1, 0.0, 1.0)], &sk), Err(EvalError::MissingArea(0)));
        let p = PersonPose { score: f64::NAN, ..person(1, 0.0, 1.0) };
        assert_eq!(evaluate_map(&[p], &[gt(1, 0.0, 1.0)], &sk), Err(EvalError::MissingScore(0)));
    }

    #[test]
    fn reported_f1_values() {
        let a = f1_score(0.9950, 1.0).unwrap();
        assert!((a - 0.9975).abs() < 5e-5, "{a}");
        let b = f1_score(0.9950, 0.9800).unwrap();
        assert!((b - 0.9874).abs() < 5e-5, "{b}");
    }

    #[test]
    fn confusion_degenerate() {
        let m = confusion_metrics(0, 0, 0, 0);
        assert_eq!(m, ConfusionMetrics::default());
        let m = confusion_metrics(9751, 49, 199, 0);
        assert!((m.precision.unwrap() - 0.9950).abs() < 1e-4);
        assert!((m.recall.unwrap() - 0.9800).abs() < 1e-4);
    }

    #[test]
    fn convergence_rules() {
        let h = vec![(10, 0.1), (20, 0.2), (30, 0.3), (50, 0.5)];
        let v = convergence_report(&h, &DEFAULT_CHECKPOINTS).unwrap();
        assert_eq!(v, vec![Some(0.1), Some(0.2), Some(0.3), Some(0.3), None]);
        let v = convergence_report(&[(12, 0.4)], &DEFAULT_CHECKPOINTS).unwrap();
        assert_eq!(v, vec![Some(0.4), None, None, None, None]);
        assert_eq!(convergence_report(&[], &[1]), Err(EvalError::EmptyHistory));
        assert_eq!(convergence_report(&[(2, 0.0), (2, 0.1)], &[1]), Err(EvalError::UnorderedHistory(2)));
    }

    #[test]
    fn bench_requires_repeats() {
        assert!(bench_throughput(|_| {}, &[(1, 1)], 2).is_err());
        let rows = bench_throughput(|_| {}, &[(640, 480)], 5).unwrap();
        assert!(rows[0].latency_ms < 1.0);
    }
}
