//! Flat key = value configuration (TOML syntax) holding every tunable of
//! the pipeline. Precedence: command-line flags, then the config file, then
//! the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::augment::{ScaleBounds, DEFAULT_SHIFT_FRACTION, DEFAULT_VISIBILITY_THRESHOLD};
use crate::datagen::{DropoutCurve, ErrorModel, SceneConfig};
use crate::eval::{HeatmapConfig, DEFAULT_IOU_THRESHOLD, DEFAULT_OPERATING_THRESHOLD};
use crate::geometry::CameraIntrinsics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub frames: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub min_range: f64,
    pub max_range: f64,
    pub lateral_range: f64,
    pub annotation_cutoff: f64,
    pub rear_frames: bool,
    pub rear_range: f64,
    pub rasters: bool,
    pub image_width: u32,
    pub image_height: u32,
    pub focal_length: f64,

    /// Zero every detector and predictor error.
    pub noiseless: bool,
    pub detector_box_noise: f64,
    pub detector_dropout_near: f64,
    pub detector_dropout_far: f64,
    /// Depth from which detector dropout ramps up to `detector_dropout_far`
    /// at `max_range`.
    pub detector_dropout_start: f64,
    pub predictor_longitudinal_coeff: f64,
    pub predictor_lateral_std: f64,
    pub predictor_orientation_std_deg: f64,
    pub confidence_spread: f64,

    pub scale_lower: f64,
    pub scale_upper: f64,
    pub shift_fraction: f64,
    pub visibility_threshold: f64,

    pub dedup_iou: f64,
    pub eval_iou: f64,
    pub operating_threshold: f64,
    pub cell_lateral: f64,
    pub cell_longitudinal: f64,
    pub longitudinal_min: f64,
    pub longitudinal_max: f64,
    pub lateral_extent: f64,
    pub assoc_distance: f64,

    pub losscheck_trials: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let det = ErrorModel::detector();
        let pred = ErrorModel::predictor();
        let heat = HeatmapConfig::default();
        let scale = ScaleBounds::default();
        Self {
            seed: 0,
            frames: 10,
            objects_min: 4,
            objects_max: 12,
            min_range: 5.0,
            max_range: 200.0,
            lateral_range: 20.0,
            annotation_cutoff: 120.0,
            rear_frames: false,
            rear_range: 100.0,
            rasters: false,
            image_width: 1280,
            image_height: 720,
            focal_length: 1000.0,
            noiseless: false,
            detector_box_noise: det.box_noise_px,
            detector_dropout_near: 0.02,
            detector_dropout_far: 0.6,
            detector_dropout_start: 150.0,
            predictor_longitudinal_coeff: pred.longitudinal_coeff,
            predictor_lateral_std: pred.lateral_std,
            predictor_orientation_std_deg: pred.orientation_std_deg,
            confidence_spread: pred.confidence_spread,
            scale_lower: scale.lower,
            scale_upper: scale.upper,
            shift_fraction: DEFAULT_SHIFT_FRACTION,
            visibility_threshold: DEFAULT_VISIBILITY_THRESHOLD,
            dedup_iou: DEFAULT_IOU_THRESHOLD,
            eval_iou: DEFAULT_IOU_THRESHOLD,
            operating_threshold: DEFAULT_OPERATING_THRESHOLD,
            cell_lateral: heat.cell_lateral,
            cell_longitudinal: heat.cell_longitudinal,
            longitudinal_min: heat.longitudinal_min,
            longitudinal_max: heat.longitudinal_max,
            lateral_extent: heat.lateral_extent,
            assoc_distance: heat.assoc_distance,
            losscheck_trials: 200,
        }
    }
}

fn parse_override(raw: &str) -> Result<(String, toml::Value), PipelineError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| PipelineError::Invalid(format!("override {raw:?} is not of the form key=value")))?;
    let key = key.trim().to_string();
    let value = value.trim();
    // Bare words that are not TOML literals are taken as strings.
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key, parsed))
}

impl PipelineConfig {
    /// Defaults, overlaid with `file` (if any), overlaid with `overrides`
    /// of the form `key=value`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| PipelineError::Io { path: p.to_path_buf(), source })?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| PipelineError::Invalid(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for raw in overrides {
            let (k, v) = parse_override(raw)?;
            // Integers given where a float is expected still deserialize,
            // since toml's float visitor accepts integers.
            table.insert(k, v);
        }
        let cfg: PipelineConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| PipelineError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |e: &dyn std::fmt::Display| PipelineError::Invalid(e.to_string());
        self.scale_bounds().validate().map_err(|e| invalid(&e))?;
        self.scene().validate().map_err(|e| invalid(&e))?;
        self.heatmap().validate().map_err(|e| invalid(&e))?;
        self.detector_model().validate().map_err(|e| invalid(&e))?;
        self.predictor_model().validate().map_err(|e| invalid(&e))?;
        for (name, v) in [("dedup_iou", self.dedup_iou), ("eval_iou", self.eval_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(PipelineError::Invalid(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("operating_threshold", self.operating_threshold),
            ("visibility_threshold", self.visibility_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PipelineError::Invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.shift_fraction >= 0.0 && self.shift_fraction < 1.0) {
            return Err(PipelineError::Invalid(format!("shift_fraction must lie in [0, 1), got {}", self.shift_fraction)));
        }
        if !(self.annotation_cutoff > 0.0) || !(self.rear_range > 0.0) {
            return Err(PipelineError::Invalid("annotation_cutoff and rear_range must be positive".into()));
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal_length,
            fy: self.focal_length,
            cx: self.image_width as f64 / 2.0,
            cy: self.image_height as f64 / 2.0,
            width: self.image_width,
            height: self.image_height,
        }
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            camera: self.camera(),
            object_count: (self.objects_min, self.objects_max),
            longitudinal_range: (self.min_range, self.max_range),
            lateral_range: (-self.lateral_range, self.lateral_range),
            render_raster: self.rasters,
            ..SceneConfig::default()
        }
    }

    pub fn scale_bounds(&self) -> ScaleBounds {
        ScaleBounds { lower: self.scale_lower, upper: self.scale_upper }
    }

    pub fn heatmap(&self) -> HeatmapConfig {
        HeatmapConfig {
            cell_lateral: self.cell_lateral,
            cell_longitudinal: self.cell_longitudinal,
            longitudinal_min: self.longitudinal_min,
            longitudinal_max: self.longitudinal_max,
            lateral_extent: self.lateral_extent,
            assoc_distance: self.assoc_distance,
            min_confidence: self.operating_threshold,
            class_agnostic: true,
        }
    }

    pub fn detector_model(&self) -> ErrorModel {
        if self.noiseless {
            return ErrorModel::noiseless();
        }
        let mut knots = vec![(0.0, self.detector_dropout_near)];
        if self.detector_dropout_start > 0.0 && self.detector_dropout_start < self.max_range {
            knots.push((self.detector_dropout_start, self.detector_dropout_near));
            knots.push((self.max_range, self.detector_dropout_far));
        }
        ErrorModel {
            box_noise_px: self.detector_box_noise,
            dropout: DropoutCurve { knots },
            confidence_spread: self.confidence_spread / 2.0,
            ..ErrorModel::noiseless()
        }
    }

    pub fn predictor_model(&self) -> ErrorModel {
        if self.noiseless {
            return ErrorModel::noiseless();
        }
        ErrorModel {
            longitudinal_coeff: self.predictor_longitudinal_coeff,
            lateral_std: self.predictor_lateral_std,
            orientation_std_deg: self.predictor_orientation_std_deg,
            confidence_spread: self.confidence_spread,
            ..ErrorModel::noiseless()
        }
    }
}
