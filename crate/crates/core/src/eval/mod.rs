//! Detection evaluation: image-space and BEV association, precision/recall
//! sweeps with AUC, and top-view precision/recall heatmaps.

pub mod assignment;
pub mod bev;
pub mod heatmap;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use assignment::{hungarian, Assignment, FORBIDDEN_COST};
pub use bev::bev_iou;
pub use heatmap::{heatmap_eval, HeatmapCell, HeatmapConfig, HeatmapGrid, OverflowCounts};

use crate::geometry::Cuboid3D;
use crate::spl::{iou_2d, Annotation, Box2D, CameraView};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("cost matrix rows have different lengths")]
    RaggedMatrix,
    #[error("cost matrix contains a non-finite value")]
    NonFiniteCost,
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("invalid heatmap configuration: {0}")]
    InvalidGrid(&'static str),
}

/// Default association IoU for image and BEV matching.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Default confidence of the single reported precision/recall point.
pub const DEFAULT_OPERATING_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(gt index, pred index)`, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

/// Optimal one-to-one matching where `cost(gt, pred)` returns `None` for
/// pairs that fail the gate.
pub fn match_gated<F>(n_gt: usize, n_pred: usize, cost: F) -> MatchResult
where
    F: Fn(usize, usize) -> Option<f64>,
{
    let mut gated = vec![vec![FORBIDDEN_COST; n_pred]; n_gt];
    let mut any = false;
    for (i, row) in gated.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            if let Some(v) = cost(i, j) {
                *c = v;
                any = true;
            }
        }
    }
    let pairs = if any {
        hungarian(&gated)
            .expect("gated costs are finite")
            .pairs
            .into_iter()
            .filter(|&(i, j)| gated[i][j] < FORBIDDEN_COST)
            .collect()
    } else {
        Vec::new()
    };
    let mut gt_used = vec![false; n_gt];
    let mut pred_used = vec![false; n_pred];
    for &(i, j) in &pairs {
        gt_used[i] = true;
        pred_used[j] = true;
    }
    MatchResult {
        pairs,
        unmatched_gt: (0..n_gt).filter(|&i| !gt_used[i]).collect(),
        unmatched_pred: (0..n_pred).filter(|&j| !pred_used[j]).collect(),
    }
}

fn iou_cost(iou: f64, threshold: f64) -> Option<f64> {
    (iou >= threshold && iou > 0.0).then_some(1.0 - iou)
}

/// Hungarian matching on `1 - IoU` of image boxes, gated at `iou_threshold`.
pub fn match_2d(gts: &[Box2D], preds: &[Box2D], iou_threshold: f64) -> MatchResult {
    match_gated(gts.len(), preds.len(), |i, j| iou_cost(iou_2d(&gts[i], &preds[j]), iou_threshold))
}

/// Hungarian matching on `1 - BEV IoU`, gated at `iou_threshold`.
pub fn match_bev(gts: &[Cuboid3D], preds: &[Cuboid3D], iou_threshold: f64) -> MatchResult {
    match_gated(gts.len(), preds.len(), |i, j| iou_cost(bev_iou(&gts[i], &preds[j]), iou_threshold))
}

/// Association rule used by the sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Matcher {
    Image { iou_threshold: f64, class_agnostic: bool },
    Bev { iou_threshold: f64, class_agnostic: bool },
    /// Top-view center distance strictly below `max_distance` meters.
    Distance { max_distance: f64, class_agnostic: bool },
}

impl Matcher {
    pub fn image() -> Self {
        Matcher::Image { iou_threshold: DEFAULT_IOU_THRESHOLD, class_agnostic: false }
    }

    pub fn bev() -> Self {
        Matcher::Bev { iou_threshold: DEFAULT_IOU_THRESHOLD, class_agnostic: false }
    }

    fn class_agnostic(&self) -> bool {
        match *self {
            Matcher::Image { class_agnostic, .. }
            | Matcher::Bev { class_agnostic, .. }
            | Matcher::Distance { class_agnostic, .. } => class_agnostic,
        }
    }

    fn pair_cost(&self, gt: &Annotation, pred: &Annotation) -> Option<f64> {
        if !self.class_agnostic() && gt.category != pred.category {
            return None;
        }
        match *self {
            Matcher::Image { iou_threshold, .. } => iou_cost(iou_2d(&gt.box2d, &pred.box2d), iou_threshold),
            Matcher::Bev { iou_threshold, .. } => {
                let (g, p) = (gt.cuboid.as_ref()?, pred.cuboid.as_ref()?);
                iou_cost(bev_iou(g, p), iou_threshold)
            }
            Matcher::Distance { max_distance, .. } => {
                let (g, p) = (gt.cuboid.as_ref()?, pred.cuboid.as_ref()?);
                let d = (g.center.x - p.center.x).hypot(g.center.z - p.center.z);
                (d < max_distance).then_some(d)
            }
        }
    }

    pub fn match_annotations(&self, gts: &[Annotation], preds: &[&Annotation]) -> MatchResult {
        match_gated(gts.len(), preds.len(), |i, j| self.pair_cost(&gts[i], preds[j]))
    }
}

/// Ground truth and predictions of one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameEval<'a> {
    pub gts: &'a [Annotation],
    pub preds: &'a [Annotation],
    pub view: CameraView,
}

impl<'a> FrameEval<'a> {
    pub fn new(gts: &'a [Annotation], preds: &'a [Annotation]) -> Self {
        Self { gts, preds, view: CameraView::Front }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PRPoint {
    fn from_counts(threshold: f64, tp: usize, n_pred: usize, n_gt: usize) -> Self {
        let fp = n_pred - tp;
        let fn_ = n_gt - tp;
        Self {
            threshold,
            precision: if n_pred == 0 { 1.0 } else { tp as f64 / n_pred as f64 },
            recall: if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 },
            tp,
            fp,
            fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per distinct confidence, descending.
    pub points: Vec<PRPoint>,
    /// `Σ precision · Δrecall` over the descending sweep, starting from
    /// recall 0.
    pub auc: f64,
    /// Set when there is neither ground truth nor any prediction; `auc` is
    /// then reported as 1.
    pub auc_undefined: bool,
}

fn validate_confidences(frames: &[FrameEval<'_>]) -> Result<(), EvalError> {
    for p in frames.iter().flat_map(|f| f.preds) {
        if !(0.0..=1.0).contains(&p.confidence) {
            return Err(EvalError::InvalidConfidence(p.confidence));
        }
    }
    Ok(())
}

fn kept<'a>(preds: &'a [Annotation], threshold: f64) -> Vec<&'a Annotation> {
    preds.iter().filter(|p| p.confidence >= threshold).collect()
}

/// Sweeps every distinct confidence, re-matching at each threshold.
///
/// A frame is only re-matched at thresholds equal to one of its own
/// confidences, since its kept set is unchanged otherwise.
pub fn pr_curve_and_auc(frames: &[FrameEval<'_>], matcher: &Matcher) -> Result<PrCurve, EvalError> {
    validate_confidences(frames)?;
    let n_gt: usize = frames.iter().map(|f| f.gts.len()).sum();
    let n_pred: usize = frames.iter().map(|f| f.preds.len()).sum();
    if n_pred == 0 {
        let undefined = n_gt == 0;
        return Ok(PrCurve { points: Vec::new(), auc: if undefined { 1.0 } else { 0.0 }, auc_undefined: undefined });
    }

    // Distinct confidences, descending, with the frames that hold them.
    let mut by_conf: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (fi, f) in frames.iter().enumerate() {
        for p in f.preds {
            let frames_here = by_conf.entry(p.confidence.to_bits()).or_default();
            if frames_here.last() != Some(&fi) {
                frames_here.push(fi);
            }
        }
    }
    let mut thresholds: Vec<(f64, Vec<usize>)> =
        by_conf.into_iter().map(|(bits, fr)| (f64::from_bits(bits), fr)).collect();
    thresholds.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut tp_per_frame = vec![0usize; frames.len()];
    let mut kept_per_frame = vec![0usize; frames.len()];
    let (mut tp, mut kept_total) = (0usize, 0usize);
    let mut points = Vec::with_capacity(thresholds.len());
    let (mut auc, mut prev_recall) = (0.0, 0.0);
    for (t, touched) in thresholds {
        for fi in touched {
            let f = &frames[fi];
            let preds = kept(f.preds, t);
            let m = matcher.match_annotations(f.gts, &preds);
            tp = tp - tp_per_frame[fi] + m.pairs.len();
            kept_total = kept_total - kept_per_frame[fi] + preds.len();
            tp_per_frame[fi] = m.pairs.len();
            kept_per_frame[fi] = preds.len();
        }
        let pt = PRPoint::from_counts(t, tp, kept_total, n_gt);
        auc += pt.precision * (pt.recall - prev_recall);
        prev_recall = pt.recall;
        points.push(pt);
    }
    Ok(PrCurve { points, auc, auc_undefined: false })
}

/// Precision and recall keeping predictions with confidence `>= threshold`.
pub fn operating_point(frames: &[FrameEval<'_>], matcher: &Matcher, threshold: f64) -> Result<PRPoint, EvalError> {
    validate_confidences(frames)?;
    let (mut tp, mut n_pred, mut n_gt) = (0, 0, 0);
    for f in frames {
        let preds = kept(f.preds, threshold);
        tp += matcher.match_annotations(f.gts, &preds).pairs.len();
        n_pred += preds.len();
        n_gt += f.gts.len();
    }
    Ok(PRPoint::from_counts(threshold, tp, n_pred, n_gt))
}

/// Recall restricted to ground truth whose depth lies in `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandRecall {
    pub lo: f64,
    pub hi: f64,
    pub tp: usize,
    pub gt: usize,
}

impl BandRecall {
    pub fn recall(&self) -> Option<f64> {
        (self.gt > 0).then(|| self.tp as f64 / self.gt as f64)
    }
}

/// Matches each frame once at `threshold` and attributes every ground
/// truth to the depth band of its cuboid center.
pub fn recall_by_band(
    frames: &[FrameEval<'_>],
    matcher: &Matcher,
    threshold: f64,
    bands: &[(f64, f64)],
) -> Result<Vec<BandRecall>, EvalError> {
    validate_confidences(frames)?;
    let mut out: Vec<BandRecall> = bands.iter().map(|&(lo, hi)| BandRecall { lo, hi, tp: 0, gt: 0 }).collect();
    for f in frames {
        let preds = kept(f.preds, threshold);
        let m = matcher.match_annotations(f.gts, &preds);
        let mut matched = vec![false; f.gts.len()];
        for &(g, _) in &m.pairs {
            matched[g] = true;
        }
        for (g, gt) in f.gts.iter().enumerate() {
            let Some(c) = &gt.cuboid else { continue };
            for b in out.iter_mut().filter(|b| c.center.z > b.lo && c.center.z <= b.hi) {
                b.gt += 1;
                b.tp += matched[g] as usize;
            }
        }
    }
    Ok(out)
}
