//! Masked multitask 2D + 3D detection loss.
//!
//! Predictions are encoded the way a single-stage detector regresses them:
//! an image box with objectness and class scores, the projected 3D center
//! plus depth, log-residuals of the dimensions against per-category priors,
//! and the apparent orientation. The 3D part is a corner loss, disentangled
//! into center, dimension and orientation groups: each group's loss is the
//! mean squared corner distance of a cuboid built from that group's
//! prediction and ground truth for everything else. 3D terms are masked out
//! for pseudo-labelled targets.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    apparent_from_egocentric, backproject, egocentric_from_apparent, project, CameraIntrinsics,
    Cuboid3D, Dimensions3, GeometryError, Pixel, Point3, Quaternion,
};
use crate::spl::{Annotation, Box2D, CategoryId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no dimension prior for category {0:?}")]
    UnknownCategory(CategoryId),
    #[error("degenerate box: width and height must be positive (w = {width}, h = {height})")]
    DegenerateBox { width: f64, height: f64 },
    #[error("category {category:?} outside the {len} predicted class probabilities")]
    ClassOutOfRange { category: CategoryId, len: usize },
    #[error("invalid matching: {0}")]
    InvalidMatching(String),
    #[error("target annotation {0} is not pseudo but carries no cuboid")]
    MissingCuboid(usize),
    #[error("loss is not differentiable at the requested point: {0}")]
    NonDifferentiablePoint(String),
}

/// Everything a detector regresses for one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEncoding {
    pub box2d: Box2D,
    pub objectness: f64,
    pub class_probs: Vec<f64>,
    pub center_proj: Pixel,
    pub depth: f64,
    /// `ln(dim / prior)` for width, height and length.
    pub dim_residuals: [f64; 3],
    pub orientation_apparent: Quaternion,
}

/// Number of scalars in [`PredictionEncoding::to_params`] for `n` classes.
pub fn param_len(n_classes: usize) -> usize {
    4 + 1 + n_classes + 3 + 3 + 4
}

impl PredictionEncoding {
    /// Flat parameter vector: box (4), objectness, class probs, projected
    /// center (2), depth, dimension residuals (3), quaternion (4).
    pub fn to_params(&self) -> Vec<f64> {
        let mut p = vec![self.box2d.center_u, self.box2d.center_v, self.box2d.width, self.box2d.height, self.objectness];
        p.extend_from_slice(&self.class_probs);
        p.extend_from_slice(&[self.center_proj.u, self.center_proj.v, self.depth]);
        p.extend_from_slice(&self.dim_residuals);
        let q = self.orientation_apparent;
        p.extend_from_slice(&[q.w, q.x, q.y, q.z]);
        p
    }

    pub fn from_params(p: &[f64], n_classes: usize) -> Self {
        assert_eq!(p.len(), param_len(n_classes), "parameter vector length");
        let c = 5 + n_classes;
        Self {
            box2d: Box2D::new(p[0], p[1], p[2], p[3]),
            objectness: p[4],
            class_probs: p[5..c].to_vec(),
            center_proj: Pixel::new(p[c], p[c + 1]),
            depth: p[c + 2],
            dim_residuals: [p[c + 3], p[c + 4], p[c + 5]],
            orientation_apparent: Quaternion::new(p[c + 6], p[c + 7], p[c + 8], p[c + 9]),
        }
    }

    /// Indices in [`Self::to_params`] that only feed the 3D loss.
    pub fn params_3d(n_classes: usize) -> std::ops::Range<usize> {
        5 + n_classes..param_len(n_classes)
    }
}

/// Mean dimensions per category.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryPriors(pub BTreeMap<CategoryId, Dimensions3>);

impl CategoryPriors {
    pub fn get(&self, category: CategoryId) -> Result<Dimensions3, LossError> {
        self.0.get(&category).copied().ok_or(LossError::UnknownCategory(category))
    }
}

impl FromIterator<(CategoryId, Dimensions3)> for CategoryPriors {
    fn from_iter<I: IntoIterator<Item = (CategoryId, Dimensions3)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Loss2d {
    pub objectness: f64,
    pub class: f64,
    pub box_term: f64,
}

impl Loss2d {
    pub fn total(&self) -> f64 {
        self.objectness + self.class + self.box_term
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Loss3d {
    pub center: f64,
    pub dims: f64,
    pub orientation: f64,
}

impl Loss3d {
    pub fn total(&self) -> f64 {
        self.center + self.dims + self.orientation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_2d: f64,
    pub loss_3d: f64,
    pub total: f64,
    pub objectness: f64,
    pub class: f64,
    pub box_term: f64,
    pub center: f64,
    pub dims: f64,
    pub orientation: f64,
}

fn decode_dims(residuals: &[f64; 3], prior: &Dimensions3) -> Dimensions3 {
    Dimensions3 {
        width: prior.width * residuals[0].exp(),
        height: prior.height * residuals[1].exp(),
        length: prior.length * residuals[2].exp(),
    }
}

fn decode_center(pred: &PredictionEncoding, k: &CameraIntrinsics) -> Result<Point3, LossError> {
    Ok(backproject(k, pred.center_proj, pred.depth)?)
}

pub fn decode_cuboid(
    pred: &PredictionEncoding,
    k: &CameraIntrinsics,
    priors: &CategoryPriors,
    category: CategoryId,
) -> Result<Cuboid3D, LossError> {
    let prior = priors.get(category)?;
    let center = decode_center(pred, k)?;
    let orientation = egocentric_from_apparent(&pred.orientation_apparent, center)?;
    Ok(Cuboid3D::new(center, decode_dims(&pred.dim_residuals, &prior), orientation))
}

/// Inverse of [`decode_cuboid`] for the 3D fields; the 2D fields of the
/// result describe `box2d` with objectness 1 and a one-hot class vector.
pub fn encode_cuboid(
    cuboid: &Cuboid3D,
    box2d: Box2D,
    n_classes: usize,
    k: &CameraIntrinsics,
    priors: &CategoryPriors,
    category: CategoryId,
) -> Result<PredictionEncoding, LossError> {
    let prior = priors.get(category)?;
    let mut class_probs = vec![0.0; n_classes];
    if let Some(p) = class_probs.get_mut(category.index()) {
        *p = 1.0;
    }
    Ok(PredictionEncoding {
        box2d,
        objectness: 1.0,
        class_probs,
        center_proj: project(k, cuboid.center)?,
        depth: cuboid.center.z,
        dim_residuals: [
            (cuboid.dims.width / prior.width).ln(),
            (cuboid.dims.height / prior.height).ln(),
            (cuboid.dims.length / prior.length).ln(),
        ],
        orientation_apparent: apparent_from_egocentric(&cuboid.orientation, cuboid.center)?,
    })
}

const LN_FLOOR: f64 = 1e-15;

/// Binary cross-entropy with an exact zero when `p == target`.
fn bce(p: f64, target: f64) -> f64 {
    let mut l = 0.0;
    if target > 0.0 {
        l -= target * p.max(LN_FLOOR).ln();
    }
    if target < 1.0 {
        l -= (1.0 - target) * (1.0 - p).max(LN_FLOOR).ln();
    }
    l
}

/// YOLO-style image loss against a positive target: BCE on objectness and
/// one-hot class scores, squared error on center and log size.
pub fn loss_2d(pred: &PredictionEncoding, target: &Annotation) -> Result<Loss2d, LossError> {
    let t = &target.box2d;
    if !(t.width > 0.0 && t.height > 0.0) {
        return Err(LossError::DegenerateBox { width: t.width, height: t.height });
    }
    let p = &pred.box2d;
    if !(p.width > 0.0 && p.height > 0.0) {
        return Err(LossError::DegenerateBox { width: p.width, height: p.height });
    }
    let ci = target.category.index();
    if ci >= pred.class_probs.len() {
        return Err(LossError::ClassOutOfRange { category: target.category, len: pred.class_probs.len() });
    }
    let class = pred
        .class_probs
        .iter()
        .enumerate()
        .map(|(i, &q)| bce(q, if i == ci { 1.0 } else { 0.0 }))
        .sum();
    let sq = |a: f64, b: f64| (a - b) * (a - b);
    let box_term = sq(p.center_u, t.center_u)
        + sq(p.center_v, t.center_v)
        + sq(p.width.ln(), t.width.ln())
        + sq(p.height.ln(), t.height.ln());
    Ok(Loss2d { objectness: bce(pred.objectness, 1.0), class, box_term })
}

fn corner_mse(a: &Cuboid3D, b: &[Point3; 8]) -> f64 {
    a.corners().iter().zip(b).map(|(p, q)| { let d = *p - *q; d.dot(d) }).sum::<f64>() / 8.0
}

/// Disentangled corner loss. Each group's hybrid cuboid takes the
/// predicted group and the target's own center, dimensions and egocentric
/// orientation for the other two.
pub fn loss_3d_disentangled(
    pred: &PredictionEncoding,
    target: &Cuboid3D,
    k: &CameraIntrinsics,
    priors: &CategoryPriors,
    category: CategoryId,
) -> Result<Loss3d, LossError> {
    let prior = priors.get(category)?;
    let reference = target.corners();

    let center = decode_center(pred, k)?;
    let center_hybrid = Cuboid3D { center, ..*target };

    let dims_hybrid = Cuboid3D { dims: decode_dims(&pred.dim_residuals, &prior), ..*target };

    let orientation = egocentric_from_apparent(&pred.orientation_apparent, target.center)?;
    let orientation_hybrid = Cuboid3D { orientation, ..*target };

    Ok(Loss3d {
        center: corner_mse(&center_hybrid, &reference),
        dims: corner_mse(&dims_hybrid, &reference),
        orientation: corner_mse(&orientation_hybrid, &reference),
    })
}

/// Sum of per-pair losses over `matching = [(pred index, target index)]`.
///
/// The 3D term of a pair is skipped entirely when the target is a pseudo
/// label, so no 3D field of that prediction is even read.
pub fn total_loss(
    preds: &[PredictionEncoding],
    targets: &[Annotation],
    matching: &[(usize, usize)],
    k: &CameraIntrinsics,
    priors: &CategoryPriors,
) -> Result<LossBreakdown, LossError> {
    let mut seen_p = vec![false; preds.len()];
    let mut seen_t = vec![false; targets.len()];
    let mut out = LossBreakdown::default();
    for &(pi, ti) in matching {
        if pi >= preds.len() || ti >= targets.len() {
            return Err(LossError::InvalidMatching(format!("pair ({pi}, {ti}) out of range")));
        }
        if std::mem::replace(&mut seen_p[pi], true) || std::mem::replace(&mut seen_t[ti], true) {
            return Err(LossError::InvalidMatching(format!("pair ({pi}, {ti}) reuses an index")));
        }
        let (pred, target) = (&preds[pi], &targets[ti]);
        let l2 = loss_2d(pred, target)?;
        out.objectness += l2.objectness;
        out.class += l2.class;
        out.box_term += l2.box_term;
        out.loss_2d += l2.total();
        if target.is_pseudo {
            continue;
        }
        let cuboid = target.cuboid.as_ref().ok_or(LossError::MissingCuboid(ti))?;
        let l3 = loss_3d_disentangled(pred, cuboid, k, priors, target.category)?;
        out.center += l3.center;
        out.dims += l3.dims;
        out.orientation += l3.orientation;
        out.loss_3d += l3.total();
    }
    out.total = out.loss_2d + out.loss_3d;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub numeric: Vec<f64>,
    pub reference: Vec<f64>,
}

fn central_difference<F>(f: &F, point: &[f64], eps: f64) -> Result<Vec<f64>, LossError>
where
    F: Fn(&[f64]) -> Result<f64, LossError>,
{
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x)?;
        x[i] = orig - eps;
        let down = f(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(LossError::NonDifferentiablePoint(format!("non-finite value near parameter {i}")));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Checks a gradient numerically.
///
/// With `analytic`, compares it against central differences at `eps`.
/// Without, compares central differences at `eps` and `eps / 10`, which
/// agree to `O(eps^2)` wherever the function is smooth. The relative error
/// of a component is `|a - b| / max(|a|, |b|, 1e-6 * (1 + max_k |b_k|))`.
pub fn gradient_check<F>(
    f: F,
    point: &[f64],
    eps: f64,
    analytic: Option<&[f64]>,
) -> Result<GradientReport, LossError>
where
    F: Fn(&[f64]) -> Result<f64, LossError>,
{
    if !(eps > 0.0) {
        return Err(LossError::NonDifferentiablePoint(format!("step {eps} must be positive")));
    }
    let f0 = f(point).map_err(|e| LossError::NonDifferentiablePoint(e.to_string()))?;
    if !f0.is_finite() {
        return Err(LossError::NonDifferentiablePoint("non-finite value at point".into()));
    }
    let diff = |e| central_difference(&f, point, e).map_err(|err| match err {
        LossError::NonDifferentiablePoint(_) => err,
        other => LossError::NonDifferentiablePoint(other.to_string()),
    });
    let numeric = diff(eps)?;
    let reference = match analytic {
        Some(g) => {
            assert_eq!(g.len(), point.len(), "analytic gradient length");
            g.to_vec()
        }
        None => diff(eps / 10.0)?,
    };
    let scale = reference.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = 1e-6 * (1.0 + scale);
    let (mut worst, mut worst_index) = (0.0f64, 0usize);
    for (i, (a, b)) in numeric.iter().zip(&reference).enumerate() {
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(floor);
        if rel > worst {
            worst = rel;
            worst_index = i;
        }
    }
    Ok(GradientReport { max_relative_error: worst, worst_index, numeric, reference })
}

/// Random inputs shared by the invariant checks, the gradient suite and the
/// acceptance tests.
pub mod sampling {
    use super::*;
    use crate::spl::project_cuboid_to_box2d;

    pub const N_CLASSES: usize = 3;

    pub fn camera() -> CameraIntrinsics {
        CameraIntrinsics { fx: 1000.0, fy: 1000.0, cx: 960.0, cy: 540.0, width: 1920, height: 1080 }
    }

    pub fn priors() -> CategoryPriors {
        [
            (CategoryId(0), Dimensions3 { width: 1.8, height: 1.5, length: 4.5 }),
            (CategoryId(1), Dimensions3 { width: 2.5, height: 3.2, length: 10.0 }),
            (CategoryId(2), Dimensions3 { width: 0.6, height: 1.7, length: 0.6 }),
        ]
        .into_iter()
        .collect()
    }

    pub fn random_quaternion<R: Rng>(rng: &mut R) -> Quaternion {
        loop {
            let q = Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if q.norm() > 0.2 {
                return q.normalized();
            }
        }
    }

    /// A target object fully in front of the camera.
    pub fn random_target<R: Rng>(rng: &mut R, k: &CameraIntrinsics, priors: &CategoryPriors) -> Annotation {
        let category = CategoryId(rng.random_range(0..N_CLASSES as u32));
        let prior = priors.get(category).expect("sampling priors cover every class");
        let dims = Dimensions3 {
            width: prior.width * rng.random_range(0.8..1.2),
            height: prior.height * rng.random_range(0.8..1.2),
            length: prior.length * rng.random_range(0.8..1.2),
        };
        let center = Point3::new(rng.random_range(-15.0..15.0), rng.random_range(-1.0..2.0), rng.random_range(15.0..150.0));
        let cuboid = Cuboid3D::new(center, dims, random_quaternion(rng));
        let box2d = project_cuboid_to_box2d(k, &cuboid).expect("targets lie in front of the camera");
        Annotation::with_cuboid(category, box2d, cuboid, 1.0)
    }

    /// The exact encoding of `target`.
    pub fn exact_prediction(target: &Annotation, k: &CameraIntrinsics, priors: &CategoryPriors) -> PredictionEncoding {
        let cuboid = target.cuboid.as_ref().expect("target with cuboid");
        encode_cuboid(cuboid, target.box2d, N_CLASSES, k, priors, target.category).expect("valid target")
    }

    /// The exact encoding of `target` with every field moved a little,
    /// staying inside the differentiable domain.
    pub fn perturbed_prediction<R: Rng>(
        rng: &mut R,
        target: &Annotation,
        k: &CameraIntrinsics,
        priors: &CategoryPriors,
    ) -> PredictionEncoding {
        let mut p = exact_prediction(target, k, priors);
        p.box2d.center_u += rng.random_range(-5.0..5.0);
        p.box2d.center_v += rng.random_range(-5.0..5.0);
        p.box2d.width *= rng.random_range(0.8..1.25);
        p.box2d.height *= rng.random_range(0.8..1.25);
        p.objectness = rng.random_range(0.2..0.95);
        for c in p.class_probs.iter_mut() {
            *c = rng.random_range(0.05..0.95);
        }
        perturb_3d(rng, &mut p);
        p
    }

    /// Moves every 3D field of `p`.
    pub fn perturb_3d<R: Rng>(rng: &mut R, p: &mut PredictionEncoding) {
        p.center_proj.u += rng.random_range(-10.0..10.0);
        p.center_proj.v += rng.random_range(-10.0..10.0);
        p.depth *= rng.random_range(0.8..1.25);
        for r in p.dim_residuals.iter_mut() {
            *r += rng.random_range(-0.2..0.2);
        }
        let q = p.orientation_apparent;
        p.orientation_apparent = Quaternion::new(
            q.w + rng.random_range(-0.2..0.2),
            q.x + rng.random_range(-0.2..0.2),
            q.y + rng.random_range(-0.2..0.2),
            q.z + rng.random_range(-0.2..0.2),
        );
    }

    pub fn pseudo_of(target: &Annotation) -> Annotation {
        Annotation::pseudo(target.category, target.box2d, target.confidence)
    }
}

/// Outcome of one invariant in [`run_checks`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name: name.to_string(), passed, detail }
}

/// Masking, disentanglement, decode round trip and gradient consistency
/// over `trials` random samples each.
pub fn run_checks(seed: u64, trials: usize) -> Result<Vec<CheckOutcome>, LossError> {
    use sampling::*;
    let k = camera();
    let priors = priors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    // Masking.
    let mut violations = 0;
    for _ in 0..trials {
        let real = random_target(&mut rng, &k, &priors);
        let pseudo = pseudo_of(&random_target(&mut rng, &k, &priors));
        let preds = vec![perturbed_prediction(&mut rng, &real, &k, &priors), perturbed_prediction(&mut rng, &pseudo_target_base(&pseudo, &real), &k, &priors)];
        let targets = vec![real, pseudo];
        let matching = [(0, 0), (1, 1)];
        let base = total_loss(&preds, &targets, &matching, &k, &priors)?;
        let mut moved = preds.clone();
        perturb_3d(&mut rng, &mut moved[1]);
        let after = total_loss(&moved, &targets, &matching, &k, &priors)?;
        if base.total.to_bits() != after.total.to_bits() || base != after {
            violations += 1;
        }
    }
    results.push(outcome("masking", violations == 0, format!("{violations} of {trials} perturbations changed the loss")));

    // Disentanglement.
    let mut violations = 0;
    for _ in 0..trials {
        let target = random_target(&mut rng, &k, &priors);
        let cuboid = target.cuboid.unwrap();
        let base_pred = perturbed_prediction(&mut rng, &target, &k, &priors);
        let base = loss_3d_disentangled(&base_pred, &cuboid, &k, &priors, target.category)?;
        let group = rng.random_range(0..3);
        let mut p = base_pred.clone();
        match group {
            0 => p.depth *= 1.1,
            1 => p.dim_residuals[0] += 0.1,
            _ => p.orientation_apparent.x += 0.1,
        }
        let after = loss_3d_disentangled(&p, &cuboid, &k, &priors, target.category)?;
        let same = [base.center == after.center, base.dims == after.dims, base.orientation == after.orientation];
        if same.iter().enumerate().any(|(g, s)| (g == group) == *s) {
            violations += 1;
        }
    }
    results.push(outcome("disentanglement", violations == 0, format!("{violations} of {trials} trials leaked across groups")));

    // Decode/encode round trip.
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let target = random_target(&mut rng, &k, &priors);
        let mut p = exact_prediction(&target, &k, &priors);
        perturb_3d(&mut rng, &mut p);
        p.orientation_apparent = p.orientation_apparent.normalized();
        let c = decode_cuboid(&p, &k, &priors, target.category)?;
        let back = encode_cuboid(&c, p.box2d, N_CLASSES, &k, &priors, target.category)?;
        let err = [
            back.center_proj.distance(p.center_proj),
            (back.depth - p.depth).abs(),
            (back.dim_residuals[0] - p.dim_residuals[0]).abs(),
            (back.dim_residuals[1] - p.dim_residuals[1]).abs(),
            (back.dim_residuals[2] - p.dim_residuals[2]).abs(),
            back.orientation_apparent.angle_to(&p.orientation_apparent),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    results.push(outcome("decode_round_trip", worst < 1e-9, format!("max error {worst:.3e}")));

    // Gradient self-consistency on mixed batches.
    let mut worst = 0.0f64;
    let grad_trials = trials.min(100);
    for _ in 0..grad_trials {
        let report = random_gradient_check(&mut rng, &k, &priors)?;
        worst = worst.max(report.max_relative_error);
    }
    results.push(outcome("gradient_consistency", worst < 1e-3, format!("max relative discrepancy {worst:.3e} over {grad_trials} points")));
    Ok(results)
}

/// Keeps the pseudo target's 2D box but borrows a real cuboid so that a
/// full prediction can be sampled around it.
fn pseudo_target_base(pseudo: &Annotation, real: &Annotation) -> Annotation {
    Annotation { cuboid: real.cuboid, is_pseudo: false, ..pseudo.clone() }
}

/// Central-difference consistency of [`total_loss`] over all prediction
/// parameters at one random batch of one real and one pseudo pair.
pub fn random_gradient_check<R: Rng>(
    rng: &mut R,
    k: &CameraIntrinsics,
    priors: &CategoryPriors,
) -> Result<GradientReport, LossError> {
    use sampling::{perturbed_prediction, pseudo_of, random_target, N_CLASSES};
    let real = random_target(rng, k, priors);
    let other = random_target(rng, k, priors);
    let pseudo = pseudo_of(&other);
    let preds = [perturbed_prediction(rng, &real, k, priors), perturbed_prediction(rng, &other, k, priors)];
    let targets = vec![real, pseudo];
    let n = param_len(N_CLASSES);
    let point: Vec<f64> = preds.iter().flat_map(|p| p.to_params()).collect();
    let f = |x: &[f64]| {
        let ps: Vec<_> = x.chunks(n).map(|c| PredictionEncoding::from_params(c, N_CLASSES)).collect();
        Ok(total_loss(&ps, &targets, &[(0, 0), (1, 1)], k, priors)?.total)
    };
    gradient_check(f, &point, 1e-4, None)
}

#[cfg(test)]
mod tests {
    use super::sampling::*;
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn zero_residuals_give_prior() {
        let k = camera();
        let priors = priors();
        let p = PredictionEncoding {
            box2d: Box2D::new(960.0, 540.0, 10.0, 10.0),
            objectness: 1.0,
            class_probs: vec![1.0, 0.0, 0.0],
            center_proj: Pixel::new(k.cx, k.cy),
            depth: 42.0,
            dim_residuals: [0.0; 3],
            orientation_apparent: Quaternion::IDENTITY,
        };
        let c = decode_cuboid(&p, &k, &priors, CategoryId(0)).unwrap();
        assert_eq!(c.dims, priors.get(CategoryId(0)).unwrap());
        assert_eq!(c.center, Point3::new(0.0, 0.0, 42.0));
        assert!(matches!(decode_cuboid(&p, &k, &priors, CategoryId(9)), Err(LossError::UnknownCategory(_))));
        let behind = PredictionEncoding { depth: -1.0, ..p };
        assert!(matches!(decode_cuboid(&behind, &k, &priors, CategoryId(0)), Err(LossError::Geometry(_))));
    }

    #[test]
    fn loss_2d_examples() {
        let k = camera();
        let priors = priors();
        let target = random_target(&mut rng(), &k, &priors);
        let exact = exact_prediction(&target, &k, &priors);
        assert_eq!(loss_2d(&exact, &target).unwrap().total(), 0.0);

        let half = PredictionEncoding { objectness: 0.5, ..exact.clone() };
        let l = loss_2d(&half, &target).unwrap();
        assert!((l.objectness - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(l.class + l.box_term, 0.0);

        let mut degenerate = target.clone();
        degenerate.box2d.width = 0.0;
        assert!(matches!(loss_2d(&exact, &degenerate), Err(LossError::DegenerateBox { .. })));
    }

    #[test]
    fn loss_2d_positive_under_perturbation() {
        let (k, priors, mut r) = (camera(), priors(), rng());
        for _ in 0..200 {
            let t = random_target(&mut r, &k, &priors);
            let p = perturbed_prediction(&mut r, &t, &k, &priors);
            assert!(loss_2d(&p, &t).unwrap().total() > 0.0);
        }
    }

    #[test]
    fn loss_3d_exact_and_depth_only() {
        let (k, priors) = (camera(), priors());
        // Target decoded from an encoding, so hybrids rebuild it bit for bit.
        let enc = PredictionEncoding {
            box2d: Box2D::new(1000.0, 560.0, 40.0, 30.0),
            objectness: 1.0,
            class_probs: vec![1.0, 0.0, 0.0],
            center_proj: Pixel::new(1000.0, 560.0),
            depth: 35.0,
            dim_residuals: [0.1, -0.05, 0.02],
            orientation_apparent: Quaternion::from_yaw(0.3),
        };
        let target = decode_cuboid(&enc, &k, &priors, CategoryId(0)).unwrap();
        let l = loss_3d_disentangled(&enc, &target, &k, &priors, CategoryId(0)).unwrap();
        assert_eq!(l.center, 0.0);
        assert_eq!(l.dims, 0.0);
        assert!(l.orientation < 1e-24);

        let deeper = PredictionEncoding { depth: 37.0, ..enc.clone() };
        let l = loss_3d_disentangled(&deeper, &target, &k, &priors, CategoryId(0)).unwrap();
        assert!(l.center > 0.0);
        assert_eq!(l.dims, 0.0);
        assert!(l.orientation < 1e-24);
    }

    #[test]
    fn pure_depth_shift_costs_delta_squared() {
        let (k, priors) = (camera(), priors());
        let target = Cuboid3D::new(Point3::new(0.0, 0.0, 40.0), priors.get(CategoryId(0)).unwrap(), Quaternion::IDENTITY);
        let box2d = crate::spl::project_cuboid_to_box2d(&k, &target).unwrap();
        let exact = encode_cuboid(&target, box2d, N_CLASSES, &k, &priors, CategoryId(0)).unwrap();
        for dz in [0.5, -1.0, 3.0] {
            let pred = PredictionEncoding { depth: 40.0 + dz, ..exact.clone() };
            let l = loss_3d_disentangled(&pred, &target, &k, &priors, CategoryId(0)).unwrap();
            // Oracle: enumerate the corners of the translated cuboid.
            let moved = Cuboid3D { center: Point3::new(0.0, 0.0, 40.0 + dz), ..target };
            let oracle: f64 = moved.corners().iter().zip(target.corners()).map(|(a, b)| (*a - b).dot(*a - b)).sum::<f64>() / 8.0;
            assert!((l.center - oracle).abs() < 1e-12);
            assert!((l.center - dz * dz).abs() < 1e-12);
        }
    }

    #[test]
    fn all_pseudo_batch_has_no_3d_loss() {
        let (k, priors, mut r) = (camera(), priors(), rng());
        let targets: Vec<_> = (0..4).map(|_| pseudo_of(&random_target(&mut r, &k, &priors))).collect();
        let mut preds: Vec<_> = targets.iter().map(|t| {
            let mut p = exact_prediction(&pseudo_target_base(t, &random_target(&mut r, &k, &priors)), &k, &priors);
            p.objectness = 0.7;
            p
        }).collect();
        // Nonsense 3D fields are never read.
        preds[0].depth = -5.0;
        let matching: Vec<_> = (0..4).map(|i| (i, i)).collect();
        let l = total_loss(&preds, &targets, &matching, &k, &priors).unwrap();
        assert_eq!(l.loss_3d, 0.0);
        let sum_2d: f64 = preds.iter().zip(&targets).map(|(p, t)| loss_2d(p, t).unwrap().total()).sum();
        assert_eq!(l.total, sum_2d);
    }

    #[test]
    fn mixed_batch_is_additive() {
        let (k, priors, mut r) = (camera(), priors(), rng());
        let targets: Vec<_> = (0..6)
            .map(|i| {
                let t = random_target(&mut r, &k, &priors);
                if i % 2 == 0 { t } else { pseudo_of(&t) }
            })
            .collect();
        let preds: Vec<_> = targets
            .iter()
            .map(|t| {
                let base = if t.is_pseudo { pseudo_target_base(t, &random_target(&mut r, &k, &priors)) } else { t.clone() };
                perturbed_prediction(&mut r, &base, &k, &priors)
            })
            .collect();
        let matching: Vec<_> = (0..6).map(|i| (5 - i, 5 - i)).collect();
        let l = total_loss(&preds, &targets, &matching, &k, &priors).unwrap();
        let mut oracle = 0.0;
        for &(p, t) in &matching {
            oracle += loss_2d(&preds[p], &targets[t]).unwrap().total();
            if !targets[t].is_pseudo {
                oracle += loss_3d_disentangled(&preds[p], targets[t].cuboid.as_ref().unwrap(), &k, &priors, targets[t].category).unwrap().total();
            }
        }
        assert!((l.total - oracle).abs() <= 1e-9 * oracle.max(1.0));
        assert_eq!(l.total, l.loss_2d + l.loss_3d);
        assert!(l.loss_3d > 0.0);
    }

    #[test]
    fn matching_is_validated() {
        let (k, priors, mut r) = (camera(), priors(), rng());
        let t = random_target(&mut r, &k, &priors);
        let p = exact_prediction(&t, &k, &priors);
        let preds = vec![p.clone(), p];
        let targets = vec![t.clone(), t];
        assert!(matches!(total_loss(&preds, &targets, &[(0, 0), (0, 1)], &k, &priors), Err(LossError::InvalidMatching(_))));
        assert!(matches!(total_loss(&preds, &targets, &[(2, 0)], &k, &priors), Err(LossError::InvalidMatching(_))));
    }

    #[test]
    fn gradient_check_on_quadratic() {
        let f = |x: &[f64]| Ok((x[0] - 3.0).powi(2) + 2.0 * x[1] * x[1]);
        let point = [1.0, -0.5];
        let analytic = [2.0 * (1.0 - 3.0), 4.0 * -0.5];
        let r = gradient_check(f, &point, 1e-4, Some(&analytic)).unwrap();
        assert!(r.max_relative_error < 1e-8, "{}", r.max_relative_error);
    }

    #[test]
    fn gradient_check_rejects_non_finite() {
        let f = |x: &[f64]| Ok(x[0].ln());
        assert!(matches!(gradient_check(f, &[0.0], 1e-4, None), Err(LossError::NonDifferentiablePoint(_))));
        let g = |_: &[f64]| Err(LossError::UnknownCategory(CategoryId(0)));
        assert!(matches!(gradient_check(g, &[0.0], 1e-4, None), Err(LossError::NonDifferentiablePoint(_))));
    }

    #[test]
    fn masked_parameters_have_zero_gradient() {
        let (k, priors, mut r) = (camera(), priors(), rng());
        let report = random_gradient_check(&mut r, &k, &priors).unwrap();
        let n = param_len(N_CLASSES);
        for i in PredictionEncoding::params_3d(N_CLASSES) {
            assert_eq!(report.numeric[n + i], 0.0, "pseudo pair parameter {i}");
            assert_ne!(report.numeric[i], 0.0, "real pair parameter {i}");
        }
        assert!(report.max_relative_error < 1e-3);
    }

    #[test]
    fn params_round_trip() {
        let (k, priors, mut r) = (camera(), priors(), rng());
        let t = random_target(&mut r, &k, &priors);
        let p = perturbed_prediction(&mut r, &t, &k, &priors);
        assert_eq!(PredictionEncoding::from_params(&p.to_params(), N_CLASSES), p);
    }

    #[test]
    fn checks_pass() {
        for c in run_checks(11, 100).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
