//! Pinhole projection, quaternion rotation, cuboid corners and the
//! apparent/egocentric orientation conversions.
//!
//! Camera frame convention: x right, y down, z forward. Quaternions follow
//! the Hamilton convention and act on column vectors as `q * v * q^-1`.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("point depth must be positive, got z = {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(&'static str),
}

/// Pinhole camera matrix plus image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fx.is_finite()) || !(self.fy > 0.0 && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics("principal point must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("image size must be positive"));
        }
        Ok(())
    }

    /// Geometric center of the image, `(width/2, height/2)`.
    pub fn image_center(&self) -> Pixel {
        Pixel::new(self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn contains(&self, px: Pixel) -> bool {
        px.u >= 0.0 && px.u <= self.width as f64 && px.v >= 0.0 && px.v <= self.height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// A point (or free vector) in the camera frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(&self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(&self) -> f64 {
        self.dot(*self).sqrt()
    }

    pub fn normalized(&self) -> Point3 {
        *self * (1.0 / self.norm())
    }

    pub fn distance(&self, o: Point3) -> f64 {
        (*self - o).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// Hamilton quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Point3, angle: f64) -> Self {
        let a = axis.normalized();
        let (s, c) = (angle / 2.0).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Heading rotation about the camera's +y (down) axis.
    ///
    /// With yaw `θ` the object's local +z (length) axis points along
    /// `(sin θ, 0, cos θ)`.
    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = (yaw / 2.0).sin_cos();
        Self::new(c, 0.0, s, 0.0)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Inverse of a unit quaternion.
    pub fn inverse(&self) -> Self {
        self.normalized().conjugate()
    }

    fn vector(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Row-major 3x3 rotation matrix of the normalized quaternion.
    pub fn to_rotation_matrix(&self) -> [[f64; 3]; 3] {
        let q = self.normalized();
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Angle in radians of the rotation taking `self` to `other`, in `[0, π]`.
    ///
    /// Sign-invariant: `q` and `-q` are at distance zero. Uses `atan2` so the
    /// result stays accurate for nearly identical rotations.
    pub fn angle_to(&self, other: &Quaternion) -> f64 {
        let d = self.inverse() * other.normalized();
        2.0 * d.vector().norm().atan2(d.w.abs())
    }

    /// Heading of the rotated +z axis projected on the x–z plane.
    pub fn yaw(&self) -> f64 {
        let f = rotate(self, Point3::new(0.0, 0.0, 1.0));
        f.x.atan2(f.z)
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, r: Quaternion) -> Quaternion {
        Quaternion::new(
            self.w * r.w - self.x * r.x - self.y * r.y - self.z * r.z,
            self.w * r.x + self.x * r.w + self.y * r.z - self.z * r.y,
            self.w * r.y - self.x * r.z + self.y * r.w + self.z * r.x,
            self.w * r.z + self.x * r.y - self.y * r.x + self.z * r.w,
        )
    }
}

/// Object extents in meters: width along local x, height along local y,
/// length along local z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dimensions3 {
    pub width: f64,
    pub height: f64,
    pub length: f64,
}

impl Dimensions3 {
    pub fn new(width: f64, height: f64, length: f64) -> Result<Self, GeometryError> {
        let d = Self { width, height, length };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if ok(self.width) && ok(self.height) && ok(self.length) {
            Ok(())
        } else {
            Err(GeometryError::InvalidDimensions("all extents must be positive and finite"))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.width, self.height, self.length]
    }
}

/// Oriented 3D box: center, extents and egocentric (camera-frame) rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid3D {
    pub center: Point3,
    pub dims: Dimensions3,
    pub orientation: Quaternion,
}

impl Cuboid3D {
    pub fn new(center: Point3, dims: Dimensions3, orientation: Quaternion) -> Self {
        Self { center, dims, orientation }
    }

    pub fn corners(&self) -> [Point3; 8] {
        cuboid_corners(self)
    }
}

pub fn project(k: &CameraIntrinsics, p: Point3) -> Result<Pixel, GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(Pixel::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

pub fn backproject(k: &CameraIntrinsics, px: Pixel, depth: f64) -> Result<Point3, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(Point3::new(
        (px.u - k.cx) * depth / k.fx,
        (px.v - k.cy) * depth / k.fy,
        depth,
    ))
}

/// Rotates `p` by `q`; `q` is normalized first.
pub fn rotate(q: &Quaternion, p: Point3) -> Point3 {
    let q = q.normalized();
    let u = q.vector();
    let t = u.cross(p) * 2.0;
    p + t * q.w + u.cross(t)
}

/// Sign triple of corner `i`: bit 2 selects x, bit 1 selects y, bit 0
/// selects z, with a set bit meaning `+`. Corner `7 - i` is opposite `i`.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, 1.0, 1.0],
];

/// The eight corners in [`CORNER_SIGNS`] order.
pub fn cuboid_corners(c: &Cuboid3D) -> [Point3; 8] {
    let half = Point3::new(c.dims.width / 2.0, c.dims.height / 2.0, c.dims.length / 2.0);
    CORNER_SIGNS.map(|[sx, sy, sz]| {
        c.center + rotate(&c.orientation, Point3::new(sx * half.x, sy * half.y, sz * half.z))
    })
}

/// Minimal rotation taking the optical axis (+z) onto the ray through `center`.
pub fn ray_rotation(center: Point3) -> Result<Quaternion, GeometryError> {
    if !(center.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(center.z));
    }
    let d = center.normalized();
    let z = Point3::new(0.0, 0.0, 1.0);
    let axis = z.cross(d);
    // Half-way construction; 1 + cos > 1 because d.z > 0.
    Ok(Quaternion::new(1.0 + z.dot(d), axis.x, axis.y, axis.z).normalized())
}

pub fn apparent_from_egocentric(
    q_ego: &Quaternion,
    center: Point3,
) -> Result<Quaternion, GeometryError> {
    let ray = ray_rotation(center)?;
    Ok((ray.conjugate() * q_ego.normalized()).normalized())
}

pub fn egocentric_from_apparent(
    q_app: &Quaternion,
    center: Point3,
) -> Result<Quaternion, GeometryError> {
    let ray = ray_rotation(center)?;
    Ok((ray * q_app.normalized()).normalized())
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    use proptest::prelude::*;

    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0, 1920, 1080).unwrap()
    }

    fn close(a: Point3, b: Point3, tol: f64) -> bool {
        a.distance(b) <= tol
    }

    fn matrix_apply(m: &[[f64; 3]; 3], p: Point3) -> Point3 {
        Point3::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z,
            m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z,
            m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z,
        )
    }

    /// Rodrigues' formula, independent of the quaternion code path.
    fn axis_angle_matrix(axis: Point3, angle: f64) -> [[f64; 3]; 3] {
        let a = axis.normalized();
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        [
            [t * a.x * a.x + c, t * a.x * a.y - s * a.z, t * a.x * a.z + s * a.y],
            [t * a.x * a.y + s * a.z, t * a.y * a.y + c, t * a.y * a.z - s * a.x],
            [t * a.x * a.z - s * a.y, t * a.y * a.z + s * a.x, t * a.z * a.z + c],
        ]
    }

    #[test]
    fn project_examples() {
        assert_eq!(project(&k(), Point3::new(0.0, 0.0, 50.0)).unwrap(), Pixel::new(960.0, 540.0));
        assert_eq!(project(&k(), Point3::new(1.0, 0.0, 10.0)).unwrap(), Pixel::new(1060.0, 540.0));
        assert_eq!(
            project(&k(), Point3::new(0.0, 0.0, -5.0)),
            Err(GeometryError::NonPositiveDepth(-5.0))
        );
        assert!(project(&k(), Point3::new(1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn backproject_examples() {
        assert_eq!(
            backproject(&k(), Pixel::new(960.0, 540.0), 50.0).unwrap(),
            Point3::new(0.0, 0.0, 50.0)
        );
        assert_eq!(
            backproject(&k(), Pixel::new(1060.0, 540.0), 10.0).unwrap(),
            Point3::new(1.0, 0.0, 10.0)
        );
        assert!(matches!(
            backproject(&k(), Pixel::new(0.0, 0.0), 0.0),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 10).is_err());
        assert!(Dimensions3::new(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn rotate_examples() {
        let p = Point3::new(0.3, -2.0, 7.0);
        assert_eq!(rotate(&Quaternion::IDENTITY, p), p);
        let r = rotate(&Quaternion::from_yaw(PI), Point3::new(1.0, 0.0, 2.0));
        assert!(close(r, Point3::new(-1.0, 0.0, -2.0), 1e-12), "{r:?}");
    }

    #[test]
    fn rotate_matches_rodrigues_oracle() {
        let axes = [
            Point3::new(1.0, 2.0, 3.0),
            Point3::new(-0.5, 0.1, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        for (i, axis) in axes.into_iter().enumerate() {
            let angle = 0.7 * (i as f64 + 1.0);
            let q = Quaternion::from_axis_angle(axis, angle);
            let p = Point3::new(1.5, -0.25, 4.0);
            let m = axis_angle_matrix(axis, angle);
            assert!(close(rotate(&q, p), matrix_apply(&m, p), 1e-12));
            assert!(close(matrix_apply(&q.to_rotation_matrix(), p), matrix_apply(&m, p), 1e-12));
        }
    }

    #[test]
    fn yaw_convention() {
        let q = Quaternion::from_yaw(0.4);
        let f = rotate(&q, Point3::new(0.0, 0.0, 1.0));
        assert!(close(f, Point3::new(0.4f64.sin(), 0.0, 0.4f64.cos()), 1e-15));
        assert!((q.yaw() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn cube_corners_identity() {
        let c = Cuboid3D::new(Point3::ORIGIN, Dimensions3::new(2.0, 2.0, 2.0).unwrap(), Quaternion::IDENTITY);
        let corners = cuboid_corners(&c);
        for (corner, s) in corners.iter().zip(CORNER_SIGNS) {
            assert_eq!(*corner, Point3::new(s[0], s[1], s[2]));
        }
    }

    #[test]
    fn cube_corners_quarter_turn_is_permutation() {
        let c = Cuboid3D::new(
            Point3::ORIGIN,
            Dimensions3::new(2.0, 2.0, 2.0).unwrap(),
            Quaternion::from_yaw(FRAC_PI_2),
        );
        let corners = cuboid_corners(&c);
        // (x, z) -> (z, -x) under +90° yaw; corner (-,-,-) lands on (-,-,+).
        assert!(close(corners[0], Point3::new(-1.0, -1.0, 1.0), 1e-12));
        for s in CORNER_SIGNS {
            let target = Point3::new(s[0], s[1], s[2]);
            assert!(corners.iter().any(|c| close(*c, target, 1e-12)));
        }
    }

    #[test]
    fn quarter_turn_swaps_extents() {
        let c = Cuboid3D::new(
            Point3::ORIGIN,
            Dimensions3::new(2.0, 1.0, 4.0).unwrap(),
            Quaternion::from_yaw(FRAC_PI_2),
        );
        let corners = cuboid_corners(&c);
        let max_x = corners.iter().map(|p| p.x.abs()).fold(0.0, f64::max);
        let max_z = corners.iter().map(|p| p.z.abs()).fold(0.0, f64::max);
        assert!((max_x - 2.0).abs() < 1e-12 && (max_z - 1.0).abs() < 1e-12);
    }

    #[test]
    fn on_axis_apparent_equals_egocentric() {
        let q = Quaternion::from_axis_angle(Point3::new(0.2, 1.0, -0.3), 1.1);
        let app = apparent_from_egocentric(&q, Point3::new(0.0, 0.0, 30.0)).unwrap();
        assert!(app.angle_to(&q) < 1e-15);
    }

    #[test]
    fn off_axis_apparent_is_negative_45_yaw() {
        let center = Point3::new(10.0, 0.0, 10.0);
        let app = apparent_from_egocentric(&Quaternion::IDENTITY, center).unwrap();
        // Oracle: inverse of the rotation-matrix taking +z onto the ray.
        let expected = axis_angle_matrix(Point3::new(0.0, 1.0, 0.0), -FRAC_PI_4);
        let probe = Point3::new(0.3, 0.7, -1.2);
        assert!(close(rotate(&app, probe), matrix_apply(&expected, probe), 1e-12));
        assert!(app.angle_to(&Quaternion::from_yaw(-FRAC_PI_4)) < 1e-12);

        let back = egocentric_from_apparent(&Quaternion::from_yaw(-FRAC_PI_4), center).unwrap();
        assert!(back.angle_to(&Quaternion::IDENTITY) < 1e-12);
    }

    #[test]
    fn ray_rotation_rejects_behind_camera() {
        assert!(ray_rotation(Point3::new(1.0, 0.0, 0.0)).is_err());
        assert!(apparent_from_egocentric(&Quaternion::IDENTITY, Point3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn angle_to_ignores_sign() {
        let q = Quaternion::from_axis_angle(Point3::new(1.0, 1.0, 0.0), 0.9);
        let neg = Quaternion::new(-q.w, -q.x, -q.y, -q.z);
        assert_eq!(q.angle_to(&neg), 0.0);
        assert!((q.angle_to(&Quaternion::IDENTITY) - 0.9).abs() < 1e-12);
    }

    fn quat() -> impl Strategy<Value = Quaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z))
    }

    fn point() -> impl Strategy<Value = Point3> {
        (-100.0..100.0f64, -100.0..100.0f64, -100.0..100.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn projection_round_trip(x in -200.0..200.0f64, y in -50.0..50.0f64, z in 1e-3..1000.0f64) {
            let p = Point3::new(x, y, z);
            let px = project(&k(), p).unwrap();
            let back = backproject(&k(), px, z).unwrap();
            prop_assert_eq!(back.z, z);
            prop_assert!(back.distance(p) <= 1e-9 * (1.0 + p.norm()));
            let px2 = project(&k(), back).unwrap();
            prop_assert!(px2.distance(px) <= 1e-9);
        }

        #[test]
        fn rotation_preserves_norm(q in quat(), p in point()) {
            let r = rotate(&q, p);
            prop_assert!((r.norm() - p.norm()).abs() <= 1e-9);
            let m = q.to_rotation_matrix();
            prop_assert!(r.distance(matrix_apply(&m, p)) <= 1e-9);
            let undone = rotate(&q.inverse(), r);
            prop_assert!(undone.distance(p) <= 1e-9);
            prop_assert!((q * q.inverse()).angle_to(&Quaternion::IDENTITY) <= 1e-9);
        }

        #[test]
        fn corners_symmetric_about_center(q in quat(), c in point(), w in 0.1..10.0f64, h in 0.1..10.0f64, l in 0.1..10.0f64) {
            let cub = Cuboid3D::new(c, Dimensions3::new(w, h, l).unwrap(), q);
            let corners = cuboid_corners(&cub);
            let sum = corners.iter().fold(Point3::ORIGIN, |a, p| a + *p);
            prop_assert!((sum * 0.125).distance(c) <= 1e-9);
            for i in 0..8 {
                let mid = (corners[i] + corners[7 - i]) * 0.5;
                prop_assert!(mid.distance(c) <= 1e-9);
            }
        }

        #[test]
        fn apparent_round_trip(q in quat(), x in -100.0..100.0f64, y in -20.0..20.0f64, z in 0.5..300.0f64) {
            let c = Point3::new(x, y, z);
            let app = apparent_from_egocentric(&q, c).unwrap();
            let ego = egocentric_from_apparent(&app, c).unwrap();
            prop_assert!(ego.angle_to(&q) <= 1e-9);
        }
    }
}
