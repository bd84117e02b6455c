use std::ffi::CString;

use pyo3::prelude::*;
use spl3d_py::spl3d_py;

fn run(code: &str) {
    pyo3::append_to_inittab!(spl3d_py);
    Python::attach(|py| {
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, None, None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn geometry_and_eval_round_trip() {
    run(r#"
import math
import spl3d_py as s
cam = s.Camera(1000.0, 1000.0, 640.0, 360.0, 1280, 720)
px = cam.project((2.0, 1.0, 20.0))
assert math.dist(cam.backproject(px, 20.0), (2.0, 1.0, 20.0)) < 1e-9
a = s.Cuboid((0.0, 1.0, 10.0), (1.0, 1.5, 1.0), s.Quaternion.from_yaw(0.0))
b = s.Cuboid((0.0, 1.0, 10.0), (1.0, 1.5, 1.0), s.Quaternion.from_yaw(math.pi / 4))
assert abs(s.bev_iou(a, b) - 0.7071) < 1e-4
pairs, total = s.hungarian([[1.0, 2.0], [2.0, 4.0]])
assert (pairs, total) == ([(0, 1), (1, 0)], 4.0)
try:
    s.Camera(-1.0, 1.0, 0.0, 0.0, 10, 10)
    raise AssertionError("negative focal length accepted")
except ValueError:
    pass
"#);
}
