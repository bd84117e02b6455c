//! Synthetic scenes with full ground truth to long range, a simulated
//! annotation cutoff, a 2D detector oracle and a noisy 3D predictor.
//!
//! Every random draw comes from a ChaCha stream seeded by the base seed, the
//! frame id and a per-purpose stream tag, so frames are independent of each
//! other and of the order in which they are generated.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::Raster;
use crate::geometry::{CameraIntrinsics, Cuboid3D, Dimensions3, Point3, Quaternion};
use crate::spl::{iou_2d, project_cuboid_to_box2d, Annotation, CameraView, CategoryId, Detection2D, Frame};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatagenError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("invalid error model: {0}")]
    InvalidErrorModel(String),
    #[error("frame {frame}: placed {placed} of {requested} objects before running out of attempts")]
    PlacementExhausted { frame: String, placed: usize, requested: usize },
}

/// Stream tags mixed into per-frame seeds.
const STREAM_SCENE: u64 = 1;
const STREAM_DETECTOR: u64 = 2;
const STREAM_PREDICTOR: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Seed for the `stream` draws of frame `frame_id` under `base`.
pub fn derive_seed(base: u64, frame_id: &str, stream: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(fnv1a(frame_id))) ^ stream)
}

fn frame_rng(base: u64, frame_id: &str, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, frame_id, stream))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub weight: f64,
    pub prior: Dimensions3,
    /// Relative standard deviation applied to each prior dimension.
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LongitudinalDistribution {
    Uniform,
    /// Exponential with the given mean, truncated to the placement range.
    Exponential { mean: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub camera: CameraIntrinsics,
    /// Inclusive range of objects per frame.
    pub object_count: (usize, usize),
    /// Depth range of object centers, meters.
    pub longitudinal_range: (f64, f64),
    pub longitudinal_distribution: LongitudinalDistribution,
    /// Lateral range of object centers; further narrowed by the frustum.
    pub lateral_range: (f64, f64),
    pub categories: Vec<CategorySpec>,
    /// Yaw drawn uniformly from this interval, radians.
    pub yaw_range: (f64, f64),
    pub camera_height: f64,
    /// Largest image-space IoU allowed between two placed objects.
    pub max_image_iou: f64,
    pub max_attempts: usize,
    pub render_raster: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            camera: CameraIntrinsics { fx: 1000.0, fy: 1000.0, cx: 640.0, cy: 360.0, width: 1280, height: 720 },
            object_count: (4, 12),
            longitudinal_range: (5.0, 200.0),
            longitudinal_distribution: LongitudinalDistribution::Uniform,
            lateral_range: (-20.0, 20.0),
            categories: default_categories(),
            yaw_range: (-PI, PI),
            camera_height: 1.5,
            max_image_iou: 0.3,
            max_attempts: 200,
            render_raster: false,
        }
    }
}

pub fn default_categories() -> Vec<CategorySpec> {
    let spec = |name: &str, weight, w, h, l| CategorySpec {
        name: name.to_string(),
        weight,
        prior: Dimensions3 { width: w, height: h, length: l },
        jitter: 0.05,
    };
    vec![spec("car", 0.7, 1.8, 1.5, 4.5), spec("truck", 0.15, 2.5, 3.2, 10.0), spec("pedestrian", 0.15, 0.6, 1.7, 0.6)]
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidConfig(m.to_string()));
        self.camera.validate().map_err(|e| DatagenError::InvalidConfig(e.to_string()))?;
        let (zlo, zhi) = self.longitudinal_range;
        if !(zlo > 0.0 && zlo < zhi && zhi.is_finite()) {
            return bad("longitudinal range must be positive and ordered");
        }
        let (xlo, xhi) = self.lateral_range;
        if !(xlo < xhi && xlo.is_finite() && xhi.is_finite()) {
            return bad("lateral range must be ordered");
        }
        if self.object_count.0 > self.object_count.1 {
            return bad("object count range must be ordered");
        }
        if !(self.yaw_range.0 <= self.yaw_range.1) {
            return bad("yaw range must be ordered");
        }
        if let LongitudinalDistribution::Exponential { mean } = self.longitudinal_distribution {
            if !(mean > 0.0 && mean.is_finite()) {
                return bad("exponential mean must be positive");
            }
        }
        if self.categories.is_empty() {
            return bad("at least one category is required");
        }
        let total: f64 = self.categories.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.categories.iter().any(|c| !(c.weight >= 0.0)) {
            return bad("category weights must be non-negative and sum to 1");
        }
        for c in &self.categories {
            c.prior.validate().map_err(|e| DatagenError::InvalidConfig(format!("{}: {e}", c.name)))?;
            if !(c.jitter >= 0.0 && c.jitter < 0.5) {
                return bad("dimension jitter must lie in [0, 0.5)");
            }
        }
        if !(self.max_image_iou > 0.0 && self.max_image_iou <= 1.0) {
            return bad("max_image_iou must lie in (0, 1]");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }

    fn sample_depth<R: Rng>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.longitudinal_range;
        match self.longitudinal_distribution {
            LongitudinalDistribution::Uniform => rng.random_range(lo..hi),
            LongitudinalDistribution::Exponential { mean } => {
                let exp = Exp::new(1.0 / mean).expect("validated mean");
                loop {
                    let z = lo + exp.sample(rng);
                    if z < hi {
                        return z;
                    }
                }
            }
        }
    }
}

/// Image-visible: every corner in front of the camera and the projected box
/// center inside the image.
pub fn is_image_visible(k: &CameraIntrinsics, c: &Cuboid3D) -> bool {
    project_cuboid_to_box2d(k, c).is_ok_and(|b| k.contains(b.center()))
}

fn footprints_overlap(a: &Cuboid3D, b: &Cuboid3D) -> bool {
    let ra = a.dims.width.hypot(a.dims.length) / 2.0;
    let rb = b.dims.width.hypot(b.dims.length) / 2.0;
    (a.center.x - b.center.x).hypot(a.center.z - b.center.z) < ra + rb
}

fn try_place<R: Rng>(
    cfg: &SceneConfig,
    category: usize,
    z: f64,
    placed: &[Annotation],
    rng: &mut R,
) -> Option<Annotation> {
    let spec = &cfg.categories[category];
    let k = &cfg.camera;
    // Lateral limits of the frustum at this depth, with a small margin.
    let half_fov_left = (k.cx - 0.5) / k.fx;
    let half_fov_right = (k.width as f64 - k.cx - 0.5) / k.fx;
    let xlo = cfg.lateral_range.0.max(-z * half_fov_left);
    let xhi = cfg.lateral_range.1.min(z * half_fov_right);
    if xlo >= xhi {
        return None;
    }
    let jitter = |rng: &mut R, v: f64| {
        if spec.jitter == 0.0 {
            v
        } else {
            let n: f64 = Normal::new(0.0, spec.jitter).expect("validated jitter").sample(rng);
            v * (1.0 + n.clamp(-2.0 * spec.jitter, 2.0 * spec.jitter))
        }
    };
    let dims = Dimensions3 {
        width: jitter(rng, spec.prior.width),
        height: jitter(rng, spec.prior.height),
        length: jitter(rng, spec.prior.length),
    };
    let x = rng.random_range(xlo..xhi);
    let yaw = if cfg.yaw_range.0 == cfg.yaw_range.1 { cfg.yaw_range.0 } else { rng.random_range(cfg.yaw_range.0..cfg.yaw_range.1) };
    let center = Point3::new(x, cfg.camera_height - dims.height / 2.0, z);
    let cuboid = Cuboid3D::new(center, dims, Quaternion::from_yaw(yaw));
    if !is_image_visible(k, &cuboid) {
        return None;
    }
    let box2d = project_cuboid_to_box2d(k, &cuboid).ok()?;
    for other in placed {
        let oc = other.cuboid.as_ref().expect("placed objects carry cuboids");
        if footprints_overlap(&cuboid, oc) || iou_2d(&box2d, &other.box2d) >= cfg.max_image_iou {
            return None;
        }
    }
    Some(Annotation::with_cuboid(CategoryId(category as u32), box2d, cuboid, 1.0))
}

/// One frame with full ground truth, deterministic in `(config, seed, frame_id)`.
pub fn generate_scene(config: &SceneConfig, seed: u64, frame_id: &str) -> Result<Frame, DatagenError> {
    config.validate()?;
    let mut rng = frame_rng(seed, frame_id, STREAM_SCENE);
    let requested = rng.random_range(config.object_count.0..=config.object_count.1);
    let weights = WeightedIndex::new(config.categories.iter().map(|c| c.weight))
        .map_err(|e| DatagenError::InvalidConfig(e.to_string()))?;
    let mut placed: Vec<Annotation> = Vec::with_capacity(requested);
    let inner = 20.min(config.max_attempts);
    'objects: while placed.len() < requested {
        let category = weights.sample(&mut rng);
        for _ in 0..config.max_attempts {
            // Depth drawn once per attempt batch keeps its distribution close
            // to the configured one even when lateral placement is crowded.
            let z = config.sample_depth(&mut rng);
            for _ in 0..inner {
                if let Some(a) = try_place(config, category, z, &placed, &mut rng) {
                    placed.push(a);
                    continue 'objects;
                }
            }
        }
        return Err(DatagenError::PlacementExhausted { frame: frame_id.to_string(), placed: placed.len(), requested });
    }
    let mut frame = Frame::new(frame_id, config.camera);
    frame.annotations = placed;
    if config.render_raster {
        frame.raster = Some(render_raster(&frame));
    }
    Ok(frame)
}

/// `n` frames named `frame-00000`, `frame-00001`, ...; generated in parallel.
pub fn generate_dataset(config: &SceneConfig, seed: u64, n: usize) -> Result<Vec<Frame>, DatagenError> {
    (0..n).into_par_iter().map(|i| generate_scene(config, seed, &frame_name(i))).collect()
}

pub fn frame_name(i: usize) -> String {
    format!("frame-{i:05}")
}

/// Flat-shaded silhouettes: sky above the horizon, road below, every object
/// box filled with a per-category color darkened with distance, far first.
pub fn render_raster(frame: &Frame) -> Raster {
    let k = &frame.intrinsics;
    let (w, h) = (k.width, k.height);
    let mut r = Raster::filled(w, h, [0.0; 3]);
    for row in 0..h {
        let value = if (row as f64 + 0.5) < k.cy { [0.55, 0.7, 0.9] } else { [0.3, 0.3, 0.32] };
        for col in 0..w {
            r.set(col, row, value);
        }
    }
    const PALETTE: [[f32; 3]; 4] = [[0.85, 0.2, 0.15], [0.95, 0.75, 0.1], [0.2, 0.6, 0.9], [0.4, 0.8, 0.3]];
    let mut order: Vec<&Annotation> = frame.annotations.iter().collect();
    order.sort_by(|a, b| {
        let za = a.cuboid.map_or(0.0, |c| c.center.z);
        let zb = b.cuboid.map_or(0.0, |c| c.center.z);
        zb.total_cmp(&za)
    });
    for a in order {
        let z = a.cuboid.map_or(0.0, |c| c.center.z);
        let shade = (1.0 - (z / 250.0).clamp(0.0, 0.7)) as f32;
        let base = PALETTE[a.category.index() % PALETTE.len()];
        let color = [base[0] * shade, base[1] * shade, base[2] * shade];
        let b = &a.box2d;
        let c0 = b.min_u().floor().max(0.0) as u32;
        let c1 = (b.max_u().ceil().min(w as f64).max(0.0)) as u32;
        let r0 = b.min_v().floor().max(0.0) as u32;
        let r1 = (b.max_v().ceil().min(h as f64).max(0.0)) as u32;
        for row in r0..r1 {
            for col in c0..c1 {
                r.set(col, row, color);
            }
        }
    }
    r
}

/// Drops every annotation whose center lies beyond `max_range` in depth.
/// Annotations without a cuboid are kept.
pub fn apply_annotation_cutoff(frame: &Frame, max_range: f64) -> Frame {
    let mut out = frame.clone();
    out.annotations.retain(|a| a.cuboid.is_none_or(|c| c.center.z <= max_range));
    out
}

/// Piecewise-linear probability of missing an object as a function of
/// depth, held constant outside the outermost knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DropoutCurve {
    /// `(depth, probability)`, strictly increasing in depth.
    pub knots: Vec<(f64, f64)>,
}

impl DropoutCurve {
    pub fn constant(p: f64) -> Self {
        Self { knots: vec![(0.0, p)] }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.knots.iter().any(|&(d, p)| !d.is_finite() || !(0.0..=1.0).contains(&p)) {
            return Err(DatagenError::InvalidErrorModel("dropout knots must be finite with probabilities in [0, 1]".into()));
        }
        if self.knots.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(DatagenError::InvalidErrorModel("dropout knot depths must increase".into()));
        }
        Ok(())
    }

    pub fn at(&self, depth: f64) -> f64 {
        let Some(first) = self.knots.first() else { return 0.0 };
        if depth <= first.0 {
            return first.1;
        }
        for w in self.knots.windows(2) {
            let ((d0, p0), (d1, p1)) = (w[0], w[1]);
            if depth <= d1 {
                return p0 + (p1 - p0) * (depth - d0) / (d1 - d0);
            }
        }
        self.knots.last().expect("non-empty").1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ErrorModel {
    /// Standard deviation of 2D box center and corner noise, pixels.
    pub box_noise_px: f64,
    pub dropout: DropoutCurve,
    /// Depth noise standard deviation per meter of depth.
    pub longitudinal_coeff: f64,
    /// Noise perpendicular to the viewing ray, meters.
    pub lateral_std: f64,
    pub orientation_std_deg: f64,
    /// Confidences are `1 - |N(0, spread)|`, clamped to `[0.05, 1]`.
    pub confidence_spread: f64,
}

impl ErrorModel {
    pub fn noiseless() -> Self {
        Self::default()
    }

    /// A reasonable 2D detector: 2 px noise and a recall drop past 150 m.
    pub fn detector() -> Self {
        Self {
            box_noise_px: 2.0,
            dropout: DropoutCurve { knots: vec![(0.0, 0.02), (150.0, 0.02), (200.0, 0.6)] },
            confidence_spread: 0.1,
            ..Self::default()
        }
    }

    /// A monocular 3D predictor whose depth error grows with distance.
    pub fn predictor() -> Self {
        Self {
            longitudinal_coeff: 0.015,
            lateral_std: 0.1,
            orientation_std_deg: 2.0,
            confidence_spread: 0.2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let stds = [self.box_noise_px, self.longitudinal_coeff, self.lateral_std, self.orientation_std_deg, self.confidence_spread];
        if stds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(DatagenError::InvalidErrorModel("standard deviations must be finite and non-negative".into()));
        }
        self.dropout.validate()
    }
}

fn gaussian<R: Rng>(rng: &mut R, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).expect("validated std").sample(rng)
    }
}

fn sample_confidence<R: Rng>(rng: &mut R, spread: f64) -> f64 {
    if spread == 0.0 {
        1.0
    } else {
        (1.0 - gaussian(rng, spread).abs()).clamp(0.05, 1.0)
    }
}

fn dropped<R: Rng>(rng: &mut R, curve: &DropoutCurve, depth: f64) -> bool {
    let p = curve.at(depth);
    p > 0.0 && (p >= 1.0 || rng.random::<f64>() < p)
}

/// Detections of every image-visible annotated object in `frame`: the
/// projected box with Gaussian pixel noise, confidence near 1.
pub fn oracle_detector_2d(
    frame: &Frame,
    model: &ErrorModel,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<Detection2D>, DatagenError> {
    model.validate()?;
    let mut rng = frame_rng(seed, &frame.id, STREAM_DETECTOR);
    let mut out = Vec::new();
    for a in &frame.annotations {
        let Some(c) = &a.cuboid else { continue };
        if !is_image_visible(&frame.intrinsics, c) || dropped(&mut rng, &model.dropout, c.center.z) {
            continue;
        }
        let mut bbox = project_cuboid_to_box2d(&frame.intrinsics, c).expect("visible objects project");
        if model.box_noise_px > 0.0 {
            let n = model.box_noise_px;
            bbox.center_u += gaussian(&mut rng, n);
            bbox.center_v += gaussian(&mut rng, n);
            bbox.width = (bbox.width + gaussian(&mut rng, n)).max(1.0);
            bbox.height = (bbox.height + gaussian(&mut rng, n)).max(1.0);
        }
        let mut class_probs = vec![0.0; n_classes.max(a.category.index() + 1)];
        class_probs[a.category.index()] = 1.0;
        out.push(Detection2D { bbox, objectness: sample_confidence(&mut rng, model.confidence_spread), class_probs });
    }
    Ok(out)
}

fn perturb_cuboid<R: Rng>(rng: &mut R, model: &ErrorModel, c: &Cuboid3D) -> Cuboid3D {
    let mut out = *c;
    if model.longitudinal_coeff > 0.0 {
        // Scaling along the viewing ray moves depth but keeps the projected
        // center in place, like a monocular depth error.
        let f = 1.0 + gaussian(rng, model.longitudinal_coeff);
        out.center = out.center * f.max(0.05);
    }
    if model.lateral_std > 0.0 {
        let (x, z) = (out.center.x, out.center.z);
        let r = x.hypot(z);
        let d = gaussian(rng, model.lateral_std);
        out.center.x = x + d * z / r;
        out.center.z = z - d * x / r;
    }
    if model.orientation_std_deg > 0.0 {
        let yaw = gaussian(rng, model.orientation_std_deg.to_radians());
        out.orientation = (Quaternion::from_yaw(yaw) * out.orientation).normalized();
    }
    out
}

/// Predictions for every annotated object in `frame`, with distance-scaled
/// depth error, fixed lateral and yaw noise and distance-dependent dropout.
/// Predictions whose perturbed cuboid crosses behind the camera are lost.
pub fn noisy_predictor_3d(frame: &Frame, model: &ErrorModel, seed: u64) -> Result<Vec<Annotation>, DatagenError> {
    model.validate()?;
    let mut rng = frame_rng(seed, &frame.id, STREAM_PREDICTOR);
    let mut out = Vec::new();
    for a in &frame.annotations {
        let Some(c) = &a.cuboid else { continue };
        if dropped(&mut rng, &model.dropout, c.center.z) {
            continue;
        }
        let p = perturb_cuboid(&mut rng, model, c);
        let confidence = sample_confidence(&mut rng, model.confidence_spread);
        if let Ok(b) = project_cuboid_to_box2d(&frame.intrinsics, &p) {
            out.push(Annotation::with_cuboid(a.category, b, p, confidence));
        }
    }
    Ok(out)
}

/// Objects per depth band `(lo, hi]`, counted from full ground truth.
pub fn count_by_band(frames: &[Frame], bands: &[(f64, f64)]) -> Vec<usize> {
    bands
        .iter()
        .map(|&(lo, hi)| {
            frames
                .iter()
                .flat_map(|f| &f.annotations)
                .filter_map(|a| a.cuboid.as_ref())
                .filter(|c| c.center.z > lo && c.center.z <= hi)
                .count()
        })
        .collect()
}

/// Rear frames reuse the scene generator with the depth range capped at
/// `rear_range`.
pub fn rear_config(config: &SceneConfig, rear_range: f64) -> SceneConfig {
    let mut c = config.clone();
    c.longitudinal_range.1 = c.longitudinal_range.1.min(rear_range);
    c
}

pub fn generate_rear_scene(config: &SceneConfig, rear_range: f64, seed: u64, frame_id: &str) -> Result<Frame, DatagenError> {
    let mut f = generate_scene(&rear_config(config, rear_range), seed, frame_id)?;
    f.view = CameraView::Rear;
    Ok(f)
}
