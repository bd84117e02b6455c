//! Top-view precision/recall heatmaps over a lateral × longitudinal grid
//! around the ego vehicle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{match_gated, EvalError, FrameEval};
use crate::geometry::Cuboid3D;
use crate::spl::{Annotation, CameraView};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    pub cell_lateral: f64,
    pub cell_longitudinal: f64,
    pub longitudinal_min: f64,
    pub longitudinal_max: f64,
    /// Half-width of the grid; the lateral span is `[-extent, extent)`.
    pub lateral_extent: f64,
    /// Association requires a top-view center distance strictly below this.
    pub assoc_distance: f64,
    pub min_confidence: f64,
    pub class_agnostic: bool,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            cell_lateral: 4.0,
            cell_longitudinal: 10.0,
            longitudinal_min: -100.0,
            longitudinal_max: 200.0,
            lateral_extent: 20.0,
            assoc_distance: 10.0,
            min_confidence: super::DEFAULT_OPERATING_THRESHOLD,
            class_agnostic: true,
        }
    }
}

impl HeatmapConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let positive = [self.cell_lateral, self.cell_longitudinal, self.lateral_extent, self.assoc_distance];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(EvalError::InvalidGrid("cell sizes, lateral extent and association distance must be positive"));
        }
        if !(self.longitudinal_min < self.longitudinal_max) {
            return Err(EvalError::InvalidGrid("longitudinal range must be ordered"));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(EvalError::InvalidGrid("min_confidence outside [0, 1]"));
        }
        Ok(())
    }

    pub fn columns(&self) -> usize {
        (2.0 * self.lateral_extent / self.cell_lateral).ceil() as usize
    }

    pub fn rows(&self) -> usize {
        ((self.longitudinal_max - self.longitudinal_min) / self.cell_longitudinal).ceil() as usize
    }

    /// `(row, col)` of a top-view position, `None` outside the grid. Row 0
    /// is the rearmost band.
    pub fn cell_of(&self, lateral: f64, longitudinal: f64) -> Option<(usize, usize)> {
        let r = ((longitudinal - self.longitudinal_min) / self.cell_longitudinal).floor();
        let c = ((lateral + self.lateral_extent) / self.cell_lateral).floor();
        if r < 0.0 || c < 0.0 || !r.is_finite() || !c.is_finite() {
            return None;
        }
        let (r, c) = (r as usize, c as usize);
        (r < self.rows() && c < self.columns()).then_some((r, c))
    }

    /// Longitudinal interval `[lo, hi)` covered by `row`.
    pub fn row_range(&self, row: usize) -> (f64, f64) {
        let lo = self.longitudinal_min + row as f64 * self.cell_longitudinal;
        (lo, lo + self.cell_longitudinal)
    }

    pub fn column_range(&self, col: usize) -> (f64, f64) {
        let lo = -self.lateral_extent + col as f64 * self.cell_lateral;
        (lo, lo + self.cell_lateral)
    }
}

/// Ego top-view `(lateral, longitudinal)` of a cuboid seen from `view`. The
/// rear camera looks backwards, so both axes flip.
pub fn ego_position(c: &Cuboid3D, view: CameraView) -> (f64, f64) {
    match view {
        CameraView::Front => (c.center.x, c.center.z),
        CameraView::Rear => (-c.center.x, -c.center.z),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HeatmapCell {
    /// True positives binned at the ground-truth position.
    pub tp_gt: usize,
    /// True positives binned at the predicted position.
    pub tp_pred: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub blank: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OverflowCounts {
    pub tp_gt: usize,
    pub tp_pred: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Annotations without a cuboid, which have no top-view position.
    pub unplaced_gt: usize,
    pub unplaced_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub config: HeatmapConfig,
    pub rows: usize,
    pub columns: usize,
    /// Row-major, `rows × columns`.
    pub cells: Vec<HeatmapCell>,
    pub overflow: OverflowCounts,
    pub total_precision: Option<f64>,
    pub total_recall: Option<f64>,
    /// Global matched pairs.
    pub tp: usize,
}

impl HeatmapGrid {
    pub fn cell(&self, row: usize, col: usize) -> &HeatmapCell {
        &self.cells[row * self.columns + col]
    }
}

#[derive(Default, Clone)]
struct Counts {
    cells: Vec<HeatmapCell>,
    overflow: OverflowCounts,
    tp: usize,
}

impl Counts {
    fn new(n: usize) -> Self {
        Self { cells: vec![HeatmapCell::default(); n], ..Default::default() }
    }

    fn merge(mut self, other: Counts) -> Counts {
        for (a, b) in self.cells.iter_mut().zip(other.cells) {
            a.tp_gt += b.tp_gt;
            a.tp_pred += b.tp_pred;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
        let (o, p) = (&mut self.overflow, other.overflow);
        o.tp_gt += p.tp_gt;
        o.tp_pred += p.tp_pred;
        o.fp += p.fp;
        o.fn_ += p.fn_;
        o.unplaced_gt += p.unplaced_gt;
        o.unplaced_pred += p.unplaced_pred;
        self.tp += other.tp;
        self
    }
}

#[derive(Clone, Copy)]
enum Event {
    TpGt,
    TpPred,
    Fp,
    Fn,
}

fn frame_counts(frame: &FrameEval<'_>, cfg: &HeatmapConfig) -> Counts {
    let cols = cfg.columns();
    let mut out = Counts::new(cfg.rows() * cols);
    let gts: Vec<(&Annotation, (f64, f64))> = frame
        .gts
        .iter()
        .filter_map(|a| a.cuboid.as_ref().map(|c| (a, ego_position(c, frame.view))))
        .collect();
    let preds: Vec<(&Annotation, (f64, f64))> = frame
        .preds
        .iter()
        .filter(|p| p.confidence >= cfg.min_confidence)
        .filter_map(|a| a.cuboid.as_ref().map(|c| (a, ego_position(c, frame.view))))
        .collect();
    out.overflow.unplaced_gt = frame.gts.iter().filter(|a| a.cuboid.is_none()).count();
    out.overflow.unplaced_pred =
        frame.preds.iter().filter(|p| p.confidence >= cfg.min_confidence && p.cuboid.is_none()).count();

    let m = match_gated(gts.len(), preds.len(), |i, j| {
        let ((g, gp), (p, pp)) = (gts[i], preds[j]);
        if !cfg.class_agnostic && g.category != p.category {
            return None;
        }
        let d = (gp.0 - pp.0).hypot(gp.1 - pp.1);
        (d < cfg.assoc_distance).then_some(d)
    });

    let mut record = |pos: (f64, f64), ev: Event| {
        let (tp_gt, tp_pred, fp, fn_) = match cfg.cell_of(pos.0, pos.1) {
            Some((r, c)) => {
                let cell = &mut out.cells[r * cols + c];
                (&mut cell.tp_gt, &mut cell.tp_pred, &mut cell.fp, &mut cell.fn_)
            }
            None => {
                let o = &mut out.overflow;
                (&mut o.tp_gt, &mut o.tp_pred, &mut o.fp, &mut o.fn_)
            }
        };
        *match ev {
            Event::TpGt => tp_gt,
            Event::TpPred => tp_pred,
            Event::Fp => fp,
            Event::Fn => fn_,
        } += 1;
    };
    for &(g, p) in &m.pairs {
        record(gts[g].1, Event::TpGt);
        record(preds[p].1, Event::TpPred);
    }
    for &g in &m.unmatched_gt {
        record(gts[g].1, Event::Fn);
    }
    for &p in &m.unmatched_pred {
        record(preds[p].1, Event::Fp);
    }
    out.tp = m.pairs.len();
    out
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Associates predictions to ground truth by top-view center distance and
/// accumulates per-cell counts.
///
/// The cell containing the ego origin is blank: its counts are kept but its
/// precision and recall stay undefined and it does not enter the totals.
pub fn heatmap_eval(frames: &[FrameEval<'_>], config: &HeatmapConfig) -> Result<HeatmapGrid, EvalError> {
    config.validate()?;
    let (rows, columns) = (config.rows(), config.columns());
    let per_frame: Vec<Counts> = frames.par_iter().map(|f| frame_counts(f, config)).collect();
    let Counts { mut cells, overflow, tp } =
        per_frame.into_iter().fold(Counts::new(rows * columns), Counts::merge);

    let ego = config.cell_of(0.0, 0.0).map(|(r, c)| r * columns + c);
    for (i, cell) in cells.iter_mut().enumerate() {
        if Some(i) == ego {
            cell.blank = true;
            continue;
        }
        let n_pred = cell.tp_pred + cell.fp;
        let n_gt = cell.tp_gt + cell.fn_;
        cell.precision = (n_pred > 0).then(|| cell.tp_pred as f64 / n_pred as f64);
        cell.recall = (n_gt > 0).then(|| cell.tp_gt as f64 / n_gt as f64);
    }
    let total_precision = mean(cells.iter().filter_map(|c| c.precision));
    let total_recall = mean(cells.iter().filter_map(|c| c.recall));
    Ok(HeatmapGrid { config: *config, rows, columns, cells, overflow, total_precision, total_recall, tp })
}
