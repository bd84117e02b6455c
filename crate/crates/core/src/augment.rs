//! 3D-consistent zoom and shift augmentation.
//!
//! The image is scaled about its center and then shifted. Instead of moving
//! the 3D labels, the camera matrix is adjusted so that every 3D point
//! projects onto the transformed pixel: focal lengths are scaled by the zoom
//! factor and the principal point follows the same affine map as the pixels.
//! Cuboid centers and egocentric orientations stay untouched, hence so does
//! the apparent orientation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pixel};
use crate::spl::{Box2D, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum AugmentError {
    #[error("scale bounds must satisfy 0 < lower <= upper, got [{lower}, {upper}]")]
    InvalidBounds { lower: f64, upper: f64 },
    #[error("zoom scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("raster has {actual} values, expected {expected}")]
    RasterSize { expected: usize, actual: usize },
}

/// Default fraction of box area that must stay inside the image.
pub const DEFAULT_VISIBILITY_THRESHOLD: f64 = 0.25;
/// Default maximum shift as a fraction of the image size.
pub const DEFAULT_SHIFT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoomShiftParams {
    pub scale: f64,
    pub shift_u: f64,
    pub shift_v: f64,
}

impl ZoomShiftParams {
    pub const IDENTITY: ZoomShiftParams = ZoomShiftParams { scale: 1.0, shift_u: 0.0, shift_v: 0.0 };

    pub fn new(scale: f64, shift_u: f64, shift_v: f64) -> Result<Self, AugmentError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(AugmentError::InvalidScale(scale));
        }
        Ok(Self { scale, shift_u, shift_v })
    }

    pub fn zoom(scale: f64) -> Result<Self, AugmentError> {
        Self::new(scale, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleBounds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for ScaleBounds {
    fn default() -> Self {
        Self { lower: 0.5, upper: 2.0 }
    }
}

impl ScaleBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self, AugmentError> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.lower > 0.0 && self.lower <= self.upper && self.upper.is_finite() {
            Ok(())
        } else {
            Err(AugmentError::InvalidBounds { lower: self.lower, upper: self.upper })
        }
    }
}

/// Row-major RGB image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub values: Vec<[f32; 3]>,
}

impl Raster {
    pub fn new(width: u32, height: u32, values: Vec<[f32; 3]>) -> Result<Self, AugmentError> {
        let expected = width as usize * height as usize;
        if values.len() != expected {
            return Err(AugmentError::RasterSize { expected, actual: values.len() });
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: u32, height: u32, value: [f32; 3]) -> Self {
        Self { width, height, values: vec![value; width as usize * height as usize] }
    }

    pub fn get(&self, col: u32, row: u32) -> [f32; 3] {
        self.values[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, value: [f32; 3]) {
        let w = self.width as usize;
        self.values[row as usize * w + col as usize] = value;
    }
}

/// Draws a zoom factor log-uniformly from `bounds`.
pub fn draw_scale<R: Rng + ?Sized>(bounds: &ScaleBounds, rng: &mut R) -> f64 {
    if bounds.lower == bounds.upper {
        return bounds.lower;
    }
    let t: f64 = rng.random();
    let s = (bounds.lower.ln() + t * (bounds.upper.ln() - bounds.lower.ln())).exp();
    s.clamp(bounds.lower, bounds.upper)
}

/// Draws a zoom factor and a uniform shift of at most `shift_fraction` of
/// the image size on each axis.
pub fn draw_params<R: Rng + ?Sized>(
    bounds: &ScaleBounds,
    shift_fraction: f64,
    k: &CameraIntrinsics,
    rng: &mut R,
) -> ZoomShiftParams {
    let scale = draw_scale(bounds, rng);
    let mut shift = |extent: u32| {
        let max = shift_fraction.abs() * extent as f64;
        if max == 0.0 {
            0.0
        } else {
            rng.random_range(-max..=max)
        }
    };
    let shift_u = shift(k.width);
    let shift_v = shift(k.height);
    ZoomShiftParams { scale, shift_u, shift_v }
}

/// Zoom about the image center, then shift.
pub fn transform_pixel(params: &ZoomShiftParams, k: &CameraIntrinsics, p: Pixel) -> Pixel {
    let c = k.image_center();
    Pixel::new(
        params.scale * (p.u - c.u) + c.u + params.shift_u,
        params.scale * (p.v - c.v) + c.v + params.shift_v,
    )
}

pub fn inverse_transform_pixel(params: &ZoomShiftParams, k: &CameraIntrinsics, p: Pixel) -> Pixel {
    let c = k.image_center();
    Pixel::new(
        (p.u - c.u - params.shift_u) / params.scale + c.u,
        (p.v - c.v - params.shift_v) / params.scale + c.v,
    )
}

/// Virtual camera matching [`transform_pixel`].
pub fn adjust_intrinsics(params: &ZoomShiftParams, k: &CameraIntrinsics) -> CameraIntrinsics {
    let pp = transform_pixel(params, k, Pixel::new(k.cx, k.cy));
    CameraIntrinsics {
        fx: params.scale * k.fx,
        fy: params.scale * k.fy,
        cx: pp.u,
        cy: pp.v,
        width: k.width,
        height: k.height,
    }
}

fn sample_bilinear(raster: &Raster, u: f64, v: f64) -> [f32; 3] {
    let (w, h) = (raster.width as f64, raster.height as f64);
    if !(u >= 0.0 && u <= w && v >= 0.0 && v <= h) {
        return [0.0; 3];
    }
    // Pixel (i, j) has its center at (i + 0.5, j + 0.5).
    let x = (u - 0.5).clamp(0.0, w - 1.0);
    let y = (v - 0.5).clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let (x0, y0) = (x0 as u32, y0 as u32);
    let x1 = (x0 + 1).min(raster.width - 1);
    let y1 = (y0 + 1).min(raster.height - 1);
    let (a, b, c, d) = (raster.get(x0, y0), raster.get(x1, y0), raster.get(x0, y1), raster.get(x1, y1));
    let mut out = [0.0f32; 3];
    for ch in 0..3 {
        let top = a[ch] + (b[ch] - a[ch]) * fx;
        let bottom = c[ch] + (d[ch] - c[ch]) * fx;
        out[ch] = top + (bottom - top) * fy;
    }
    out
}

/// Resamples `raster` under the zoom/shift; uncovered pixels are zero.
pub fn resample(raster: &Raster, params: &ZoomShiftParams) -> Raster {
    if *params == ZoomShiftParams::IDENTITY {
        return raster.clone();
    }
    // Only the image size matters for the pixel map.
    let k = CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: raster.width, height: raster.height };
    let mut values = Vec::with_capacity(raster.values.len());
    for row in 0..raster.height {
        for col in 0..raster.width {
            let dst = Pixel::new(col as f64 + 0.5, row as f64 + 0.5);
            let src = inverse_transform_pixel(params, &k, dst);
            values.push(sample_bilinear(raster, src.u, src.v));
        }
    }
    Raster { width: raster.width, height: raster.height, values }
}

pub fn transform_box(params: &ZoomShiftParams, k: &CameraIntrinsics, b: &Box2D) -> Box2D {
    let c = transform_pixel(params, k, b.center());
    Box2D::new(c.u, c.v, b.width * params.scale, b.height * params.scale)
}

/// Fraction of the box area that lies inside the image. A zero-area box
/// counts as fully visible when its center is inside the image.
pub fn visible_fraction(k: &CameraIntrinsics, b: &Box2D) -> f64 {
    let area = b.area();
    if area <= 0.0 {
        return if k.contains(b.center()) { 1.0 } else { 0.0 };
    }
    let image = Box2D::from_corners(0.0, 0.0, k.width as f64, k.height as f64);
    b.intersection_area(&image) / area
}

/// Applies the zoom/shift to the raster, the intrinsics and every 2D box.
/// Cuboids are copied unchanged. Annotations with less than
/// `visibility_threshold` of their transformed box inside the image are
/// dropped; survivors keep their order.
pub fn augment_frame(frame: &Frame, params: &ZoomShiftParams, visibility_threshold: f64) -> Frame {
    let k = &frame.intrinsics;
    let annotations = frame
        .annotations
        .iter()
        .filter_map(|a| {
            let b = transform_box(params, k, &a.box2d);
            (visible_fraction(k, &b) >= visibility_threshold).then(|| {
                let mut out = a.clone();
                out.box2d = b;
                out
            })
        })
        .collect();
    Frame {
        id: frame.id.clone(),
        intrinsics: adjust_intrinsics(params, k),
        view: frame.view,
        raster: frame.raster.as_ref().map(|r| resample(r, params)),
        annotations,
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{apparent_from_egocentric, project, Cuboid3D, Dimensions3, Point3, Quaternion};
    use crate::spl::{project_cuboid_to_box2d, Annotation, CategoryId};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0, 1920, 1080).unwrap()
    }

    #[test]
    fn draw_scale_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(draw_scale(&ScaleBounds::new(1.0, 1.0).unwrap(), &mut rng), 1.0);
        let b = ScaleBounds::default();
        assert_eq!((b.lower, b.upper), (0.5, 2.0));
        for _ in 0..2000 {
            let s = draw_scale(&b, &mut rng);
            assert!((0.5..=2.0).contains(&s));
        }
        let a = draw_scale(&b, &mut ChaCha8Rng::seed_from_u64(42));
        let c = draw_scale(&b, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, c);
        assert!(ScaleBounds::new(2.0, 1.0).is_err());
        assert!(ScaleBounds::new(0.0, 1.0).is_err());
    }

    #[test]
    fn log_uniform_is_symmetric_in_log_space() {
        let b = ScaleBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let zoom_in = (0..n).filter(|_| draw_scale(&b, &mut rng) > 1.0).count();
        let frac = zoom_in as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn transform_pixel_examples() {
        let p = Pixel::new(123.0, 456.0);
        assert_eq!(transform_pixel(&ZoomShiftParams::IDENTITY, &k(), p), p);
        let z2 = ZoomShiftParams::zoom(2.0).unwrap();
        assert_eq!(transform_pixel(&z2, &k(), Pixel::new(960.0, 540.0)), Pixel::new(960.0, 540.0));
        assert_eq!(transform_pixel(&z2, &k(), Pixel::new(970.0, 540.0)), Pixel::new(980.0, 540.0));
        let params = ZoomShiftParams::new(0.7, 12.0, -3.0).unwrap();
        let q = inverse_transform_pixel(&params, &k(), transform_pixel(&params, &k(), p));
        assert!(q.distance(p) < 1e-12);
        assert!(ZoomShiftParams::new(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn adjust_intrinsics_examples() {
        assert_eq!(adjust_intrinsics(&ZoomShiftParams::IDENTITY, &k()), k());
        let z2 = adjust_intrinsics(&ZoomShiftParams::zoom(2.0).unwrap(), &k());
        assert_eq!(z2.fx, 2000.0);
        assert_eq!((z2.width, z2.height), (1920, 1080));
        let k900 = CameraIntrinsics { cx: 900.0, ..k() };
        assert_eq!(adjust_intrinsics(&ZoomShiftParams::zoom(0.5).unwrap(), &k900).cx, 930.0);
    }

    fn gradient_raster(w: u32, h: u32) -> Raster {
        let mut r = Raster::filled(w, h, [0.0; 3]);
        for row in 0..h {
            for col in 0..w {
                r.set(col, row, [col as f32 / w as f32, row as f32 / h as f32, 0.5]);
            }
        }
        r
    }

    #[test]
    fn resample_identity_is_bit_identical() {
        let r = gradient_raster(37, 21);
        assert_eq!(resample(&r, &ZoomShiftParams::IDENTITY), r);
        // Same result without the shortcut: the sampling hits pixel centers.
        let nearly = ZoomShiftParams { scale: 1.0, shift_u: 0.0, shift_v: -0.0 };
        let k = CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 37, height: 21 };
        for row in 0..21 {
            for col in 0..37 {
                let src = inverse_transform_pixel(&nearly, &k, Pixel::new(col as f64 + 0.5, row as f64 + 0.5));
                assert_eq!(sample_bilinear(&r, src.u, src.v), r.get(col, row));
            }
        }
    }

    #[test]
    fn zoom_out_pads_with_zeros() {
        let r = Raster::filled(64, 48, [0.8, 0.6, 0.4]);
        let out = resample(&r, &ZoomShiftParams::zoom(0.5).unwrap());
        assert_eq!((out.width, out.height), (64, 48));
        for row in 0..48u32 {
            for col in 0..64u32 {
                let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
                let inside = (16.0..=48.0).contains(&u) && (12.0..=36.0).contains(&v);
                let px = out.get(col, row);
                if !inside {
                    assert_eq!(px, [0.0; 3], "({col},{row})");
                } else {
                    assert_eq!(px, [0.8, 0.6, 0.4]);
                }
            }
        }
    }

    #[test]
    fn zoom_in_keeps_constant_interior() {
        let r = Raster::filled(40, 30, [0.25, 0.5, 0.75]);
        let out = resample(&r, &ZoomShiftParams::zoom(2.0).unwrap());
        assert!(out.values.iter().all(|v| *v == [0.25, 0.5, 0.75]));
    }

    fn frame_with(cuboids: &[Cuboid3D]) -> Frame {
        let mut f = Frame::new("a", k());
        for c in cuboids {
            let b = project_cuboid_to_box2d(&k(), c).unwrap();
            f.annotations.push(Annotation::with_cuboid(CategoryId(0), b, *c, 1.0));
        }
        f
    }

    fn car(x: f64, z: f64) -> Cuboid3D {
        Cuboid3D::new(Point3::new(x, 0.8, z), Dimensions3::new(1.8, 1.5, 4.5).unwrap(), Quaternion::from_yaw(0.2))
    }

    #[test]
    fn identity_augmentation_preserves_frame() {
        let f = frame_with(&[car(0.0, 20.0), car(-3.0, 40.0)]);
        assert_eq!(augment_frame(&f, &ZoomShiftParams::IDENTITY, 0.25), f);
    }

    #[test]
    fn zoom_in_drops_box_pushed_outside() {
        // Near the left edge: u ≈ 1000 * -9 / 10 + 960 = 60.
        let f = frame_with(&[car(-9.0, 10.0), car(0.0, 30.0)]);
        let out = augment_frame(&f, &ZoomShiftParams::zoom(2.0).unwrap(), 0.25);
        assert_eq!(out.annotations.len(), 1);
        assert_eq!(out.annotations[0].cuboid, f.annotations[1].cuboid);
    }

    #[test]
    fn visible_fraction_cases() {
        let inside = Box2D::new(100.0, 100.0, 10.0, 10.0);
        assert_eq!(visible_fraction(&k(), &inside), 1.0);
        let half = Box2D::new(0.0, 100.0, 10.0, 10.0);
        assert_eq!(visible_fraction(&k(), &half), 0.5);
        assert_eq!(visible_fraction(&k(), &Box2D::new(-10.0, 5.0, 0.0, 0.0)), 0.0);
    }

    fn params() -> impl Strategy<Value = ZoomShiftParams> {
        (0.5..2.0f64, -200.0..200.0f64, -100.0..100.0f64).prop_map(|(s, u, v)| ZoomShiftParams { scale: s, shift_u: u, shift_v: v })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn virtual_camera_consistency(p in params(), x in -50.0..50.0f64, y in -5.0..5.0f64, z in 1.0..200.0f64,
                                      fx in 300.0..3000.0f64, cx in 500.0..1400.0f64, cy in 300.0..800.0f64) {
            let k = CameraIntrinsics::new(fx, fx * 1.01, cx, cy, 1920, 1080).unwrap();
            let x3 = Point3::new(x, y, z);
            let lhs = project(&adjust_intrinsics(&p, &k), x3).unwrap();
            let rhs = transform_pixel(&p, &k, project(&k, x3).unwrap());
            prop_assert!(lhs.distance(rhs) < 1e-9);
        }

        #[test]
        fn zoom_composition(s in 0.5..2.0f64, t in 0.5..2.0f64) {
            let a = ZoomShiftParams::zoom(s).unwrap();
            let b = ZoomShiftParams::zoom(t).unwrap();
            let st = ZoomShiftParams::zoom(s * t).unwrap();
            let two = adjust_intrinsics(&b, &adjust_intrinsics(&a, &k()));
            let one = adjust_intrinsics(&st, &k());
            prop_assert!((two.fx - one.fx).abs() < 1e-9 && (two.cx - one.cx).abs() < 1e-9 && (two.cy - one.cy).abs() < 1e-9);
        }

        #[test]
        fn augmented_frames_stay_consistent(p in params(), xs in prop::collection::vec((-10.0..10.0f64, 8.0..150.0f64), 1..6),
                                            thr_lo in 0.0..0.5f64, thr_hi in 0.5..1.0f64) {
            let cubs: Vec<_> = xs.iter().map(|(x, z)| car(*x, *z)).collect();
            let f = frame_with(&cubs);
            let out = augment_frame(&f, &p, 0.25);
            prop_assert_eq!((out.intrinsics.width, out.intrinsics.height), (1920, 1080));
            for a in &out.annotations {
                let c = a.cuboid.unwrap();
                prop_assert!(cubs.contains(&c));
                let lhs = project(&out.intrinsics, c.center).unwrap();
                let rhs = transform_pixel(&p, &k(), project(&k(), c.center).unwrap());
                prop_assert!(lhs.distance(rhs) < 1e-9);
                let before = apparent_from_egocentric(&c.orientation, c.center).unwrap();
                let after = apparent_from_egocentric(&a.cuboid.unwrap().orientation, c.center).unwrap();
                prop_assert!(before.angle_to(&after) < 1e-9);
            }
            // Raising the threshold never keeps more annotations.
            let lo = augment_frame(&f, &p, thr_lo).annotations.len();
            let hi = augment_frame(&f, &p, thr_hi).annotations.len();
            prop_assert!(hi <= lo);
        }
    }
}
