//! Semi-pseudo-label fusion.
//!
//! A frame annotated in 3D (up to the annotation range) is extended with 2D
//! detections from a simpler model. Detections that duplicate an existing
//! object, judged by IoU against the projected 3D boxes and the existing 2D
//! boxes, are dropped; the rest become pseudo annotations that carry no 3D
//! cuboid.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::Raster;
use crate::geometry::{project, CameraIntrinsics, Cuboid3D, Pixel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplError {
    #[error("cuboid corner {corner} lies at or behind the camera (z = {z})")]
    CornerBehindCamera { corner: usize, z: f64 },
    #[error("detection class {class} in frame {frame} has no entry in the class map")]
    UnmappedCategory { frame: String, class: usize },
    #[error("detection with empty class probability vector in frame {0}")]
    EmptyClassProbs(String),
    #[error("IoU threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("detections supplied for {detections} frames but dataset has {frames}")]
    FrameCountMismatch { frames: usize, detections: usize },
}

/// Category identifier of the complex (3D) label space.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct CategoryId(pub u32);

impl CategoryId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Axis-aligned image box given by center and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Box2D {
    pub center_u: f64,
    pub center_v: f64,
    pub width: f64,
    pub height: f64,
}

impl Box2D {
    pub const fn new(center_u: f64, center_v: f64, width: f64, height: f64) -> Self {
        Self { center_u, center_v, width, height }
    }

    pub fn from_corners(min_u: f64, min_v: f64, max_u: f64, max_v: f64) -> Self {
        Self::new((min_u + max_u) / 2.0, (min_v + max_v) / 2.0, max_u - min_u, max_v - min_v)
    }

    pub fn min_u(&self) -> f64 {
        self.center_u - self.width / 2.0
    }
    pub fn max_u(&self) -> f64 {
        self.center_u + self.width / 2.0
    }
    pub fn min_v(&self) -> f64 {
        self.center_v - self.height / 2.0
    }
    pub fn max_v(&self) -> f64 {
        self.center_v + self.height / 2.0
    }

    pub fn area(&self) -> f64 {
        self.width.max(0.0) * self.height.max(0.0)
    }

    pub fn center(&self) -> Pixel {
        Pixel::new(self.center_u, self.center_v)
    }

    pub fn intersection_area(&self, o: &Box2D) -> f64 {
        let w = (self.max_u().min(o.max_u()) - self.min_u().max(o.min_u())).max(0.0);
        let h = (self.max_v().min(o.max_v()) - self.min_v().max(o.min_v())).max(0.0);
        w * h
    }

    pub fn is_finite(&self) -> bool {
        self.center_u.is_finite()
            && self.center_v.is_finite()
            && self.width.is_finite()
            && self.height.is_finite()
    }

    fn sort_key(&self) -> [f64; 4] {
        [self.center_u, self.center_v, self.width, self.height]
    }
}

/// Output of the 2D detector: box, objectness and per-class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub objectness: f64,
    pub class_probs: Vec<f64>,
}

impl Detection2D {
    /// Index and value of the most probable class; lowest index wins ties.
    pub fn best_class(&self) -> Option<(usize, f64)> {
        self.class_probs
            .iter()
            .copied()
            .enumerate()
            .fold(None, |best, (i, p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((i, p)),
            })
    }

    /// Stored confidence: objectness times the maximum class probability.
    pub fn confidence(&self) -> f64 {
        self.objectness * self.best_class().map_or(0.0, |(_, p)| p)
    }
}

/// One labelled object. Real annotations carry a cuboid; pseudo annotations
/// (`is_pseudo`) never do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub category: CategoryId,
    pub box2d: Box2D,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cuboid: Option<Cuboid3D>,
    pub confidence: f64,
    pub is_pseudo: bool,
}

impl Annotation {
    pub fn with_cuboid(category: CategoryId, box2d: Box2D, cuboid: Cuboid3D, confidence: f64) -> Self {
        Self { category, box2d, cuboid: Some(cuboid), confidence, is_pseudo: false }
    }

    pub fn pseudo(category: CategoryId, box2d: Box2D, confidence: f64) -> Self {
        Self { category, box2d, cuboid: None, confidence, is_pseudo: true }
    }

    /// `is_pseudo` holds exactly when the cuboid is absent.
    pub fn is_consistent(&self) -> bool {
        self.is_pseudo == self.cuboid.is_none()
    }
}

/// Which way the camera producing a frame looks, relative to the ego vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraView {
    #[default]
    Front,
    Rear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    pub view: CameraView,
    pub raster: Option<Raster>,
    pub annotations: Vec<Annotation>,
}

impl Frame {
    pub fn new(id: impl Into<String>, intrinsics: CameraIntrinsics) -> Self {
        Self {
            id: id.into(),
            intrinsics,
            view: CameraView::Front,
            raster: None,
            annotations: Vec::new(),
        }
    }
}

pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Tight image box around the eight projected corners.
pub fn project_cuboid_to_box2d(k: &CameraIntrinsics, c: &Cuboid3D) -> Result<Box2D, SplError> {
    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (i, corner) in c.corners().into_iter().enumerate() {
        let px = project(k, corner).map_err(|_| SplError::CornerBehindCamera { corner: i, z: corner.z })?;
        min = (min.0.min(px.u), min.1.min(px.v));
        max = (max.0.max(px.u), max.1.max(px.v));
    }
    Ok(Box2D::from_corners(min.0, min.1, max.0, max.1))
}

/// Maps simple-model class indices onto complex-model categories.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassMap(pub BTreeMap<usize, CategoryId>);

impl ClassMap {
    /// Class `i` maps onto category `i` for `i < n`.
    pub fn identity(n: usize) -> Self {
        Self((0..n).map(|i| (i, CategoryId(i as u32))).collect())
    }

    pub fn get(&self, class: usize) -> Option<CategoryId> {
        self.0.get(&class).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FusionCounts {
    pub added: usize,
    pub filtered: usize,
}

impl FusionCounts {
    pub fn total(&self) -> usize {
        self.added + self.filtered
    }
}

impl std::ops::Add for FusionCounts {
    type Output = FusionCounts;
    fn add(self, o: FusionCounts) -> FusionCounts {
        FusionCounts { added: self.added + o.added, filtered: self.filtered + o.filtered }
    }
}

/// Boxes a detection is checked against: every existing 2D box, plus the
/// projection of every cuboid that lies fully in front of the camera.
fn reference_boxes(frame: &Frame) -> Vec<Box2D> {
    let mut refs = Vec::with_capacity(frame.annotations.len() * 2);
    for ann in &frame.annotations {
        refs.push(ann.box2d);
        if let Some(c) = &ann.cuboid {
            if let Ok(b) = project_cuboid_to_box2d(&frame.intrinsics, c) {
                refs.push(b);
            }
        }
    }
    refs
}

fn cmp_detections(a: &(f64, Box2D), b: &(f64, Box2D)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| {
        a.1.sort_key()
            .iter()
            .zip(b.1.sort_key().iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Adds non-duplicate detections to `frame` as pseudo annotations.
///
/// A detection is a duplicate when its IoU with any reference box (see
/// above) reaches `iou_threshold`. Original annotations are kept untouched
/// and in order; pseudo annotations are appended sorted by descending
/// confidence, then box coordinates, so the result does not depend on the
/// order of `detections`.
pub fn fuse_frame(
    frame: &Frame,
    detections: &[Detection2D],
    iou_threshold: f64,
    class_map: &ClassMap,
) -> Result<(Frame, FusionCounts), SplError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(SplError::InvalidThreshold(iou_threshold));
    }
    let refs = reference_boxes(frame);
    let mut added = Vec::new();
    let mut counts = FusionCounts::default();
    for det in detections {
        let (class, _) = det.best_class().ok_or_else(|| SplError::EmptyClassProbs(frame.id.clone()))?;
        let category = class_map
            .get(class)
            .ok_or_else(|| SplError::UnmappedCategory { frame: frame.id.clone(), class })?;
        let max_iou = refs.iter().map(|r| iou_2d(&det.bbox, r)).fold(0.0, f64::max);
        if max_iou >= iou_threshold {
            counts.filtered += 1;
        } else {
            counts.added += 1;
            added.push((det.confidence(), det.bbox, category));
        }
    }
    added.sort_by(|a, b| {
        cmp_detections(&(a.0, a.1), &(b.0, b.1)).then_with(|| a.2.cmp(&b.2))
    });
    let mut out = frame.clone();
    out.annotations.extend(added.into_iter().map(|(conf, bbox, cat)| Annotation::pseudo(cat, bbox, conf)));
    Ok((out, counts))
}

/// Applies [`fuse_frame`] to every frame (in parallel) and sums the counts.
///
/// `detections[i]` belongs to `frames[i]`.
pub fn fuse_dataset(
    frames: &[Frame],
    detections: &[Vec<Detection2D>],
    iou_threshold: f64,
    class_map: &ClassMap,
) -> Result<(Vec<Frame>, FusionCounts), SplError> {
    if frames.len() != detections.len() {
        return Err(SplError::FrameCountMismatch { frames: frames.len(), detections: detections.len() });
    }
    let fused: Vec<(Frame, FusionCounts)> = frames
        .par_iter()
        .zip(detections.par_iter())
        .map(|(f, d)| fuse_frame(f, d, iou_threshold, class_map))
        .collect::<Result<_, _>>()?;
    let counts = fused.iter().fold(FusionCounts::default(), |acc, (_, c)| acc + *c);
    Ok((fused.into_iter().map(|(f, _)| f).collect(), counts))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::geometry::{Dimensions3, Point3, Quaternion};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0, 1920, 1080).unwrap()
    }

    fn cube(z: f64) -> Cuboid3D {
        Cuboid3D::new(Point3::new(0.0, 0.0, z), Dimensions3::new(2.0, 2.0, 2.0).unwrap(), Quaternion::IDENTITY)
    }

    fn det(b: Box2D, obj: f64) -> Detection2D {
        Detection2D { bbox: b, objectness: obj, class_probs: vec![0.9, 0.1] }
    }

    fn gt_frame() -> Frame {
        let mut f = Frame::new("f0", k());
        let c = Cuboid3D::new(Point3::new(2.0, 0.5, 30.0), Dimensions3::new(1.8, 1.5, 4.5).unwrap(), Quaternion::from_yaw(0.3));
        let b = project_cuboid_to_box2d(&k(), &c).unwrap();
        f.annotations.push(Annotation::with_cuboid(CategoryId(0), b, c, 1.0));
        f
    }

    #[test]
    fn iou_examples() {
        let a = Box2D::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = Box2D::from_corners(1.0, 0.0, 3.0, 2.0);
        assert_eq!(iou_2d(&a, &a), 1.0);
        assert_eq!(iou_2d(&a, &Box2D::from_corners(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou_2d(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou_2d(&a, &b), iou_2d(&b, &a));
        let z = Box2D::new(1.0, 1.0, 0.0, 0.0);
        assert_eq!(iou_2d(&z, &z), 0.0);
    }

    #[test]
    fn projected_cube_is_symmetric() {
        let b = project_cuboid_to_box2d(&k(), &cube(50.0)).unwrap();
        assert!((b.center_u - 960.0).abs() < 1e-9 && (b.center_v - 540.0).abs() < 1e-9);
        assert!((b.width - b.height).abs() < 1e-9);
        // Near face at z = 49 spans ±1 m: 2000/49 px.
        assert!((b.width - 2000.0 / 49.0).abs() < 1e-9);
    }

    #[test]
    fn projected_width_halves_with_distance() {
        // Oracle: enumerate the near-face corner projections directly.
        let oracle_width = |z: f64| 2.0 * 1000.0 * 1.0 / (z - 1.0);
        let w50 = project_cuboid_to_box2d(&k(), &cube(50.0)).unwrap().width;
        let w100 = project_cuboid_to_box2d(&k(), &cube(100.0)).unwrap().width;
        assert!((w50 - oracle_width(50.0)).abs() < 1e-9);
        assert!((w100 - oracle_width(100.0)).abs() < 1e-9);
        assert!((w100 / w50 - 0.5).abs() < 0.011);
    }

    #[test]
    fn straddling_cuboid_rejected() {
        assert!(matches!(
            project_cuboid_to_box2d(&k(), &cube(0.5)),
            Err(SplError::CornerBehindCamera { .. })
        ));
    }

    #[test]
    fn fuse_empty_is_identity() {
        let f = gt_frame();
        let (out, counts) = fuse_frame(&f, &[], 0.5, &ClassMap::identity(2)).unwrap();
        assert_eq!(out, f);
        assert_eq!(counts, FusionCounts::default());
    }

    #[test]
    fn duplicate_of_projected_gt_is_filtered() {
        let f = gt_frame();
        let d = det(f.annotations[0].box2d, 0.95);
        let (out, counts) = fuse_frame(&f, &[d], 0.5, &ClassMap::identity(2)).unwrap();
        assert_eq!(out.annotations.len(), 1);
        assert_eq!(counts, FusionCounts { added: 0, filtered: 1 });
    }

    #[test]
    fn distinct_detection_becomes_pseudo() {
        let f = gt_frame();
        let d = det(Box2D::new(200.0, 300.0, 20.0, 15.0), 0.8);
        let (out, counts) = fuse_frame(&f, &[d], 0.5, &ClassMap::identity(2)).unwrap();
        assert_eq!(counts.added, 1);
        let p = &out.annotations[1];
        assert!(p.is_pseudo && p.cuboid.is_none() && p.is_consistent());
        assert!((p.confidence - 0.8 * 0.9).abs() < 1e-15);
        assert_eq!(out.annotations[0], f.annotations[0]);
    }

    #[test]
    fn unmapped_class_errors() {
        let f = gt_frame();
        let d = Detection2D { bbox: Box2D::new(10.0, 10.0, 5.0, 5.0), objectness: 1.0, class_probs: vec![0.1, 0.2, 0.7] };
        assert!(matches!(
            fuse_frame(&f, &[d], 0.5, &ClassMap::identity(2)),
            Err(SplError::UnmappedCategory { class: 2, .. })
        ));
        assert!(matches!(fuse_frame(&f, &[], 0.0, &ClassMap::identity(2)), Err(SplError::InvalidThreshold(_))));
    }

    #[test]
    fn dataset_counts_conserve() {
        let frames = vec![gt_frame(), gt_frame()];
        let dup = det(frames[0].annotations[0].box2d, 0.9);
        let new = det(Box2D::new(100.0, 100.0, 30.0, 30.0), 0.9);
        let dets = vec![vec![dup.clone(), new.clone()], vec![dup]];
        let (out, counts) = fuse_dataset(&frames, &dets, 0.5, &ClassMap::identity(2)).unwrap();
        assert_eq!(counts, FusionCounts { added: 1, filtered: 2 });
        assert_eq!(out[0].annotations.len(), 2);
        assert_eq!(out[1].annotations.len(), 1);
        assert!(fuse_dataset(&frames, &[vec![]], 0.5, &ClassMap::identity(2)).is_err());
    }

    fn detections() -> impl Strategy<Value = Vec<Detection2D>> {
        prop::collection::vec(
            (700.0..1200.0f64, 400.0..700.0f64, 5.0..200.0f64, 5.0..200.0f64, 0.05..1.0f64, 0.0..1.0f64),
            0..12,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(u, vv, w, h, o, p)| Detection2D { bbox: Box2D::new(u, vv, w, h), objectness: o, class_probs: vec![p, 1.0 - p] })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn fusion_invariants(dets in detections(), thr in 0.05..1.0f64, lower in 0.0..1.0f64) {
            let f = gt_frame();
            let map = ClassMap::identity(2);
            let (out, counts) = fuse_frame(&f, &dets, thr, &map).unwrap();
            prop_assert_eq!(counts.total(), dets.len());
            prop_assert_eq!(&out.annotations[..1], &f.annotations[..]);
            prop_assert!(out.annotations[1..].iter().all(|a| a.is_pseudo && a.cuboid.is_none()));

            // Order independence.
            let mut rev = dets.clone();
            rev.reverse();
            let (out_rev, _) = fuse_frame(&f, &rev, thr, &map).unwrap();
            prop_assert_eq!(&out, &out_rev);

            // Lowering the threshold never adds more.
            let (_, fewer) = fuse_frame(&f, &dets, thr * lower.max(0.01), &map).unwrap();
            prop_assert!(fewer.added <= counts.added);

            // Re-running with the same detections adds nothing new.
            let (again, counts2) = fuse_frame(&out, &dets, thr, &map).unwrap();
            prop_assert_eq!(counts2.added, 0);
            prop_assert_eq!(again, out);
        }
    }
}
