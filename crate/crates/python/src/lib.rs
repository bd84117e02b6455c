//! Python bindings for the geometry, augmentation, evaluation and pipeline
//! entry points of `spl3d`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use spl3d::augment::{self as aug, ZoomShiftParams};
use spl3d::datagen::{self, SceneConfig};
use spl3d::eval;
use spl3d::geometry::{self as geo, CameraIntrinsics, Cuboid3D, Dimensions3, Pixel, Point3};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Vec3 = (f64, f64, f64);

fn point(p: Vec3) -> Point3 {
    Point3::new(p.0, p.1, p.2)
}

fn tuple(p: Point3) -> Vec3 {
    (p.x, p.y, p.z)
}

/// Pinhole camera: focal lengths, principal point and image size in pixels.
#[pyclass(name = "Camera", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
pub struct PyCamera(CameraIntrinsics);

#[pymethods]
impl PyCamera {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> PyResult<Self> {
        CameraIntrinsics::new(fx, fy, cx, cy, width, height).map(Self).map_err(value_err)
    }

    #[getter]
    fn fx(&self) -> f64 {
        self.0.fx
    }
    #[getter]
    fn fy(&self) -> f64 {
        self.0.fy
    }
    #[getter]
    fn cx(&self) -> f64 {
        self.0.cx
    }
    #[getter]
    fn cy(&self) -> f64 {
        self.0.cy
    }
    #[getter]
    fn width(&self) -> u32 {
        self.0.width
    }
    #[getter]
    fn height(&self) -> u32 {
        self.0.height
    }

    fn project(&self, p: Vec3) -> PyResult<(f64, f64)> {
        let px = geo::project(&self.0, point(p)).map_err(value_err)?;
        Ok((px.u, px.v))
    }

    fn backproject(&self, px: (f64, f64), depth: f64) -> PyResult<Vec3> {
        geo::backproject(&self.0, Pixel::new(px.0, px.1), depth).map(tuple).map_err(value_err)
    }

    /// Virtual camera after a zoom by `scale` about the image center and a
    /// pixel shift.
    fn zoom_shift(&self, scale: f64, shift_u: f64, shift_v: f64) -> Self {
        Self(aug::adjust_intrinsics(&ZoomShiftParams { scale, shift_u, shift_v }, &self.0))
    }

    /// Where pixel `px` lands under the same zoom and shift.
    fn transform_pixel(&self, px: (f64, f64), scale: f64, shift_u: f64, shift_v: f64) -> (f64, f64) {
        let p = aug::transform_pixel(&ZoomShiftParams { scale, shift_u, shift_v }, &self.0, Pixel::new(px.0, px.1));
        (p.u, p.v)
    }

    fn __repr__(&self) -> String {
        let k = &self.0;
        format!("Camera(fx={}, fy={}, cx={}, cy={}, width={}, height={})", k.fx, k.fy, k.cx, k.cy, k.width, k.height)
    }
}

/// Hamilton quaternion `w + xi + yj + zk`.
#[pyclass(name = "Quaternion", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
pub struct PyQuaternion(geo::Quaternion);

#[pymethods]
impl PyQuaternion {
    #[new]
    fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self(geo::Quaternion::new(w, x, y, z))
    }

    /// Rotation about the camera's vertical axis; yaw 0 faces +z.
    #[staticmethod]
    fn from_yaw(yaw: f64) -> Self {
        Self(geo::Quaternion::from_yaw(yaw))
    }

    #[staticmethod]
    fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        Self(geo::Quaternion::from_axis_angle(point(axis), angle))
    }

    #[getter]
    fn components(&self) -> (f64, f64, f64, f64) {
        (self.0.w, self.0.x, self.0.y, self.0.z)
    }

    fn yaw(&self) -> f64 {
        self.0.yaw()
    }

    /// Rotation angle in radians between the two orientations.
    fn angle_to(&self, other: &PyQuaternion) -> f64 {
        self.0.angle_to(&other.0)
    }

    fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        self.0.to_rotation_matrix()
    }

    fn rotate(&self, p: Vec3) -> Vec3 {
        tuple(geo::rotate(&self.0, point(p)))
    }

    fn __mul__(&self, other: &PyQuaternion) -> Self {
        Self(self.0 * other.0)
    }

    fn __repr__(&self) -> String {
        format!("Quaternion({}, {}, {}, {})", self.0.w, self.0.x, self.0.y, self.0.z)
    }
}

/// Oriented 3D box in camera coordinates; `dims` is (width, height, length).
#[pyclass(name = "Cuboid", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
pub struct PyCuboid(Cuboid3D);

#[pymethods]
impl PyCuboid {
    #[new]
    fn new(center: Vec3, dims: Vec3, orientation: &PyQuaternion) -> PyResult<Self> {
        let d = Dimensions3::new(dims.0, dims.1, dims.2).map_err(value_err)?;
        Ok(Self(Cuboid3D::new(point(center), d, orientation.0)))
    }

    #[getter]
    fn center(&self) -> Vec3 {
        tuple(self.0.center)
    }

    #[getter]
    fn dims(&self) -> Vec3 {
        (self.0.dims.width, self.0.dims.height, self.0.dims.length)
    }

    #[getter]
    fn orientation(&self) -> PyQuaternion {
        PyQuaternion(self.0.orientation)
    }

    fn corners(&self) -> Vec<Vec3> {
        self.0.corners().into_iter().map(tuple).collect()
    }

    /// Tight image box `(cx, cy, w, h)` around the projected corners.
    fn project_box(&self, camera: &PyCamera) -> PyResult<(f64, f64, f64, f64)> {
        let b = spl3d::spl::project_cuboid_to_box2d(&camera.0, &self.0).map_err(value_err)?;
        Ok((b.center_u, b.center_v, b.width, b.height))
    }

    /// Orientation relative to the viewing ray through the center.
    fn apparent_orientation(&self) -> PyResult<PyQuaternion> {
        geo::apparent_from_egocentric(&self.0.orientation, self.0.center).map(PyQuaternion).map_err(value_err)
    }
}

#[pyfunction]
fn apparent_from_egocentric(q: &PyQuaternion, center: Vec3) -> PyResult<PyQuaternion> {
    geo::apparent_from_egocentric(&q.0, point(center)).map(PyQuaternion).map_err(value_err)
}

#[pyfunction]
fn egocentric_from_apparent(q: &PyQuaternion, center: Vec3) -> PyResult<PyQuaternion> {
    geo::egocentric_from_apparent(&q.0, point(center)).map(PyQuaternion).map_err(value_err)
}

/// Rotated-rectangle IoU of the two ground-plane footprints.
#[pyfunction]
fn bev_iou(a: &PyCuboid, b: &PyCuboid) -> f64 {
    eval::bev_iou(&a.0, &b.0)
}

/// Minimum-cost assignment; returns `(pairs, total_cost)`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let a = eval::hungarian(&cost).map_err(value_err)?;
    Ok((a.pairs, a.total_cost))
}

#[pyfunction]
fn derive_seed(base: u64, frame_id: &str, stream: u64) -> u64 {
    datagen::derive_seed(base, frame_id, stream)
}

/// Synthetic frames with full ground truth as `(frame_id, annotations)`,
/// annotations being a JSON array.
#[pyfunction]
#[pyo3(signature = (n, seed = 0))]
fn generate_frames(n: usize, seed: u64) -> PyResult<Vec<(String, String)>> {
    let frames = datagen::generate_dataset(&SceneConfig::default(), seed, n).map_err(value_err)?;
    frames
        .into_iter()
        .map(|f| Ok((f.id, serde_json::to_string(&f.annotations).map_err(value_err)?)))
        .collect()
}

/// Loss invariant checks as `(name, passed, detail)` triples.
#[pyfunction]
#[pyo3(signature = (seed = 0, trials = 50))]
fn loss_checks(seed: u64, trials: usize) -> PyResult<Vec<(String, bool, String)>> {
    let out = spl3d::loss::run_checks(seed, trials).map_err(value_err)?;
    Ok(out.into_iter().map(|c| (c.name, c.passed, c.detail)).collect())
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("spl3d".to_string()).chain(args).collect();
    py.detach(|| spl3d::pipeline::run_command(argv))
}

#[pymodule]
pub fn spl3d_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCamera>()?;
    m.add_class::<PyQuaternion>()?;
    m.add_class::<PyCuboid>()?;
    m.add_function(wrap_pyfunction!(apparent_from_egocentric, m)?)?;
    m.add_function(wrap_pyfunction!(egocentric_from_apparent, m)?)?;
    m.add_function(wrap_pyfunction!(bev_iou, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(generate_frames, m)?)?;
    m.add_function(wrap_pyfunction!(loss_checks, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
