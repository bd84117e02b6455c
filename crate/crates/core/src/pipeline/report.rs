//! Evaluation tables, heatmap grids and pixmaps, and the text report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{canonical_line, round_sig9, write_ppm8, write_text, CategoryEntry};
use super::{PipelineConfig, PipelineError};
use crate::eval::{
    heatmap_eval, operating_point, pr_curve_and_auc, recall_by_band, FrameEval, HeatmapGrid, Matcher,
};
use crate::spl::{Annotation, Frame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// `2d` or `bev`.
    pub space: String,
    /// Category name, or `all`.
    pub category: String,
    pub auc: f64,
    pub auc_undefined: bool,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub space: String,
    pub lo: f64,
    pub hi: f64,
    pub tp: usize,
    pub gt: usize,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub frames: usize,
    pub ground_truth: usize,
    pub predictions: usize,
    pub metrics: Vec<MetricRow>,
    pub bands: Vec<BandRow>,
    pub heatmap: HeatmapGrid,
}

fn bands(cfg: &PipelineConfig) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut lo = 0.0;
    while lo < cfg.max_range {
        out.push((lo, (lo + 40.0).min(cfg.max_range)));
        lo += 40.0;
    }
    out.push((0.0, cfg.annotation_cutoff));
    out.push((cfg.annotation_cutoff, cfg.max_range));
    out
}

/// Class-aware 2D and BEV metrics overall and per category, depth-band
/// recall, and the class-agnostic heatmap.
pub fn evaluate(
    gt_frames: &[Frame],
    predictions: &[Vec<Annotation>],
    categories: &[CategoryEntry],
    cfg: &PipelineConfig,
) -> Result<EvalSummary, PipelineError> {
    let invalid = |e: crate::eval::EvalError| PipelineError::Invalid(e.to_string());
    let frames: Vec<FrameEval<'_>> = gt_frames
        .iter()
        .zip(predictions)
        .map(|(f, p)| FrameEval { gts: &f.annotations, preds: p, view: f.view })
        .collect();
    let matchers = [
        ("2d", Matcher::Image { iou_threshold: cfg.eval_iou, class_agnostic: false }),
        ("bev", Matcher::Bev { iou_threshold: cfg.eval_iou, class_agnostic: false }),
    ];

    let mut selections: Vec<(String, Option<u32>)> = vec![("all".into(), None)];
    selections.extend(categories.iter().map(|c| (c.name.clone(), Some(c.id))));
    let mut metrics = Vec::new();
    for (space, matcher) in &matchers {
        for (name, id) in &selections {
            let keep = |a: &&Annotation| id.is_none_or(|i| a.category.0 == i);
            let filtered: Vec<(Vec<Annotation>, Vec<Annotation>)> = frames
                .iter()
                .map(|f| (f.gts.iter().filter(keep).cloned().collect(), f.preds.iter().filter(keep).cloned().collect()))
                .collect();
            let sub: Vec<FrameEval<'_>> = filtered
                .iter()
                .zip(&frames)
                .map(|((g, p), f)| FrameEval { gts: g, preds: p, view: f.view })
                .collect();
            let curve = pr_curve_and_auc(&sub, matcher).map_err(invalid)?;
            let op = operating_point(&sub, matcher, cfg.operating_threshold).map_err(invalid)?;
            metrics.push(MetricRow {
                space: space.to_string(),
                category: name.clone(),
                auc: curve.auc,
                auc_undefined: curve.auc_undefined,
                threshold: op.threshold,
                precision: op.precision,
                recall: op.recall,
                tp: op.tp,
                fp: op.fp,
                fn_: op.fn_,
            });
        }
    }

    let band_list = bands(cfg);
    let mut band_rows = Vec::new();
    for (space, matcher) in &matchers {
        for b in recall_by_band(&frames, matcher, cfg.operating_threshold, &band_list).map_err(invalid)? {
            band_rows.push(BandRow { space: space.to_string(), lo: b.lo, hi: b.hi, tp: b.tp, gt: b.gt, recall: b.recall() });
        }
    }

    let heatmap = heatmap_eval(&frames, &cfg.heatmap()).map_err(invalid)?;
    Ok(EvalSummary {
        frames: frames.len(),
        ground_truth: frames.iter().map(|f| f.gts.len()).sum(),
        predictions: frames.iter().map(|f| f.preds.len()).sum(),
        metrics,
        bands: band_rows,
        heatmap,
    })
}

fn num(v: f64) -> String {
    format!("{}", round_sig9(v))
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn metrics_csv(s: &EvalSummary) -> String {
    let mut out = String::from("space,category,auc,auc_undefined,threshold,precision,recall,tp,fp,fn\n");
    for r in &s.metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.space,
            r.category,
            num(r.auc),
            r.auc_undefined,
            num(r.threshold),
            num(r.precision),
            num(r.recall),
            r.tp,
            r.fp,
            r.fn_
        );
    }
    out
}

pub fn bands_csv(s: &EvalSummary) -> String {
    let mut out = String::from("space,lo,hi,tp,gt,recall\n");
    for b in &s.bands {
        let _ = writeln!(out, "{},{},{},{},{},{}", b.space, num(b.lo), num(b.hi), b.tp, b.gt, opt(b.recall));
    }
    out
}

/// One row per cell with its extent, counts and values.
pub fn heatmap_cells_csv(g: &HeatmapGrid) -> String {
    let mut out = String::from("row,col,lateral_lo,lateral_hi,longitudinal_lo,longitudinal_hi,tp_gt,tp_pred,fp,fn,precision,recall,blank\n");
    for r in 0..g.rows {
        for c in 0..g.columns {
            let cell = g.cell(r, c);
            let (llo, lhi) = g.config.column_range(c);
            let (zlo, zhi) = g.config.row_range(r);
            let _ = writeln!(
                out,
                "{r},{c},{},{},{},{},{},{},{},{},{},{},{}",
                num(llo),
                num(lhi),
                num(zlo),
                num(zhi),
                cell.tp_gt,
                cell.tp_pred,
                cell.fp,
                cell.fn_,
                opt(cell.precision),
                opt(cell.recall),
                cell.blank
            );
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapValue {
    Precision,
    Recall,
}

fn value(g: &HeatmapGrid, r: usize, c: usize, which: HeatmapValue) -> Option<f64> {
    let cell = g.cell(r, c);
    match which {
        HeatmapValue::Precision => cell.precision,
        HeatmapValue::Recall => cell.recall,
    }
}

/// The grid as a table, farthest forward row first; undefined cells are
/// empty and the ego cell reads `blank`.
pub fn heatmap_grid_csv(g: &HeatmapGrid, which: HeatmapValue) -> String {
    let mut out = String::from("longitudinal");
    for c in 0..g.columns {
        let (lo, hi) = g.config.column_range(c);
        let _ = write!(out, ",{}..{}", num(lo), num(hi));
    }
    out.push('\n');
    for r in (0..g.rows).rev() {
        let (lo, hi) = g.config.row_range(r);
        let _ = write!(out, "{}..{}", num(lo), num(hi));
        for c in 0..g.columns {
            if g.cell(r, c).blank {
                out.push_str(",blank");
            } else {
                let _ = write!(out, ",{}", opt(value(g, r, c, which)));
            }
        }
        out.push('\n');
    }
    out
}

/// Heatmap color ramp: 0 is red (215, 48, 39), 0.5 yellow (254, 224, 139),
/// 1 green (26, 152, 80), linear in RGB between them. Undefined cells are
/// gray (128, 128, 128) and the ego cell white.
pub fn ramp(t: f64) -> [u8; 3] {
    const LO: [f64; 3] = [215.0, 48.0, 39.0];
    const MID: [f64; 3] = [254.0, 224.0, 139.0];
    const HI: [f64; 3] = [26.0, 152.0, 80.0];
    let t = t.clamp(0.0, 1.0);
    let (a, b, f) = if t < 0.5 { (LO, MID, t * 2.0) } else { (MID, HI, (t - 0.5) * 2.0) };
    std::array::from_fn(|i| (a[i] + (b[i] - a[i]) * f).round() as u8)
}

pub const CELL_PIXELS: u32 = 12;

/// `(width, height, pixels)` of the heatmap image, forward at the top.
pub fn heatmap_image(g: &HeatmapGrid, which: HeatmapValue) -> (u32, u32, Vec<[u8; 3]>) {
    let (w, h) = (g.columns as u32 * CELL_PIXELS, g.rows as u32 * CELL_PIXELS);
    let mut px = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        let r = g.rows - 1 - (y / CELL_PIXELS) as usize;
        for x in 0..w {
            let c = (x / CELL_PIXELS) as usize;
            let color = if g.cell(r, c).blank {
                [255, 255, 255]
            } else {
                value(g, r, c, which).map_or([128, 128, 128], ramp)
            };
            px.push(color);
        }
    }
    (w, h, px)
}

/// Writes every evaluation artifact into `dir`.
pub fn write_eval_outputs(dir: &Path, s: &EvalSummary) -> Result<(), PipelineError> {
    write_text(&dir.join("metrics.csv"), &metrics_csv(s))?;
    write_text(&dir.join("bands.csv"), &bands_csv(s))?;
    write_text(&dir.join("heatmap_cells.csv"), &heatmap_cells_csv(&s.heatmap))?;
    for (which, name) in [(HeatmapValue::Precision, "precision"), (HeatmapValue::Recall, "recall")] {
        write_text(&dir.join(format!("heatmap_{name}.csv")), &heatmap_grid_csv(&s.heatmap, which))?;
        let (w, h, px) = heatmap_image(&s.heatmap, which);
        write_ppm8(&dir.join(format!("heatmap_{name}.ppm")), w, h, &px)?;
    }
    write_text(&dir.join("summary.json"), &(canonical_line(s)? + "\n"))
}

pub fn read_summary(dir: &Path) -> Result<EvalSummary, PipelineError> {
    let p = dir.join("summary.json");
    let text = std::fs::read_to_string(&p).map_err(|source| PipelineError::Io { path: p.clone(), source })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::MalformedRecord { path: p, line: 1, message: e.to_string() })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |v| format!("{v:.4}"))
}

/// Human-readable summary of an evaluation.
pub fn render_report(s: &EvalSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Evaluation over {} frames: {} ground-truth objects, {} predictions", s.frames, s.ground_truth, s.predictions);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<5} {:<12} {:>7} {:>9} {:>7} {:>6} {:>6} {:>6}", "space", "category", "AUC", "precision", "recall", "TP", "FP", "FN");
    for r in &s.metrics {
        let auc = if r.auc_undefined { "n/a".to_string() } else { format!("{:.4}", r.auc) };
        let _ = writeln!(
            out,
            "{:<5} {:<12} {:>7} {:>9.4} {:>7.4} {:>6} {:>6} {:>6}",
            r.space, r.category, auc, r.precision, r.recall, r.tp, r.fp, r.fn_
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "Recall by depth band (confidence >= {}):", s.metrics.first().map_or(0.5, |m| m.threshold));
    for b in &s.bands {
        let _ = writeln!(out, "  {:<4} ({:>5.0}, {:>5.0}] m  {:>5}/{:<5} {}", b.space, b.lo, b.hi, b.tp, b.gt, fmt_opt(b.recall));
    }
    let g = &s.heatmap;
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "Heatmap ({} x {} m cells, {} .. {} m): mean precision {}, mean recall {}",
        g.config.cell_lateral,
        g.config.cell_longitudinal,
        g.config.longitudinal_min,
        g.config.longitudinal_max,
        fmt_opt(g.total_precision),
        fmt_opt(g.total_recall)
    );
    let o = &g.overflow;
    let _ = writeln!(
        out,
        "Outside the grid: {} TP (gt), {} TP (pred), {} FP, {} FN; without cuboid: {} gt, {} pred",
        o.tp_gt, o.tp_pred, o.fp, o.fn_, o.unplaced_gt, o.unplaced_pred
    );
    out
}
