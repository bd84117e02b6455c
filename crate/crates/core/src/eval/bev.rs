//! Bird's-eye-view footprints and their IoU.

use crate::geometry::Cuboid3D;

/// Point on the ground plane: `(x, z)` of the camera frame.
pub type Point2 = [f64; 2];

/// Yaw-rotated `width x length` rectangle of `c` on the x–z plane,
/// counter-clockwise in the `(x, z)` coordinate system.
pub fn footprint(c: &Cuboid3D) -> [Point2; 4] {
    let yaw = c.orientation.yaw();
    let (s, co) = yaw.sin_cos();
    // Local x (width) and z (length) axes after the yaw.
    let ax = [co, -s];
    let az = [s, co];
    let (hw, hl) = (c.dims.width / 2.0, c.dims.length / 2.0);
    let at = |a: f64, b: f64| [c.center.x + a * ax[0] + b * az[0], c.center.z + a * ax[1] + b * az[1]];
    let quad = [at(-hw, -hl), at(hw, -hl), at(hw, hl), at(-hw, hl)];
    if signed_area(&quad) < 0.0 {
        [quad[3], quad[2], quad[1], quad[0]]
    } else {
        quad
    }
}

/// Shoelace formula; positive for counter-clockwise polygons.
pub fn signed_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn line_intersection(p: Point2, q: Point2, a: Point2, b: Point2) -> Point2 {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    out.push(line_intersection(prev, cur, a, b));
                }
                out.push(cur);
            } else if prev_in {
                out.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    out
}

pub fn polygon_iou(a: &[Point2], b: &[Point2]) -> f64 {
    let (area_a, area_b) = (signed_area(a).abs(), signed_area(b).abs());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let inter = signed_area(&clip_convex(a, b)).abs();
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// IoU of the top-view footprints of two cuboids.
pub fn bev_iou(a: &Cuboid3D, b: &Cuboid3D) -> f64 {
    let (fa, fb) = (footprint(a), footprint(b));
    // Cheap reject on circumscribed circles.
    let ra = a.dims.width.hypot(a.dims.length) / 2.0;
    let rb = b.dims.width.hypot(b.dims.length) / 2.0;
    let d = (a.center.x - b.center.x).hypot(a.center.z - b.center.z);
    if d > ra + rb {
        return 0.0;
    }
    polygon_iou(&fa, &fb)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_4;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{Dimensions3, Point3, Quaternion};

    fn rect(x: f64, z: f64, w: f64, l: f64, yaw: f64) -> Cuboid3D {
        Cuboid3D::new(Point3::new(x, 1.0, z), Dimensions3::new(w, 1.5, l).unwrap(), Quaternion::from_yaw(yaw))
    }

    fn inside(c: &Cuboid3D, p: Point2) -> bool {
        let yaw = c.orientation.yaw();
        let (dx, dz) = (p[0] - c.center.x, p[1] - c.center.z);
        // Inverse yaw into the box's local frame.
        let (s, co) = yaw.sin_cos();
        let lx = co * dx - s * dz;
        let lz = s * dx + co * dz;
        lx.abs() <= c.dims.width / 2.0 && lz.abs() <= c.dims.length / 2.0
    }

    /// Uniform sampling over the joint bounding box.
    fn monte_carlo_iou(a: &Cuboid3D, b: &Cuboid3D, n: usize, seed: u64) -> f64 {
        let pts: Vec<Point2> = footprint(a).into_iter().chain(footprint(b)).collect();
        let (min_x, max_x) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
        let (min_z, max_z) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut inter, mut union) = (0usize, 0usize);
        for _ in 0..n {
            let p = [rng.random_range(min_x..max_x), rng.random_range(min_z..max_z)];
            let (ia, ib) = (inside(a, p), inside(b, p));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
        inter as f64 / union as f64
    }

    #[test]
    fn identical_and_disjoint() {
        let a = rect(1.0, 30.0, 1.8, 4.5, 0.4);
        assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = rect(21.0, 30.0, 2.0, 2.0, 0.0);
        let c = rect(1.0, 30.0, 2.0, 2.0, 0.0);
        assert_eq!(bev_iou(&b, &c), 0.0);
    }

    #[test]
    fn rotated_unit_squares() {
        let a = rect(0.0, 10.0, 1.0, 1.0, 0.0);
        let b = rect(0.0, 10.0, 1.0, 1.0, FRAC_PI_4);
        let iou = bev_iou(&a, &b);
        // Octagon area 2(√2 − 1) over union 2 − 2(√2 − 1).
        let exact = 2.0 * (2f64.sqrt() - 1.0) / (2.0 - 2.0 * (2f64.sqrt() - 1.0));
        assert!((iou - exact).abs() < 1e-12);
        assert!((iou - 0.7071).abs() < 1e-4);
        assert!((monte_carlo_iou(&a, &b, 200_000, 3) - iou).abs() < 0.005);
    }

    #[test]
    fn half_overlap() {
        let a = rect(0.0, 10.0, 2.0, 2.0, 0.0);
        let b = rect(1.0, 10.0, 2.0, 2.0, 0.0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_footprint() {
        let mut a = rect(0.0, 10.0, 2.0, 2.0, 0.0);
        a.dims.width = 0.0;
        assert_eq!(bev_iou(&a, &a), 0.0);
    }

    #[test]
    fn footprints_are_ccw() {
        for yaw in [-3.0, -1.0, 0.0, 0.5, 2.0, 3.1] {
            let f = footprint(&rect(0.0, 0.0, 1.0, 3.0, yaw));
            assert!((signed_area(&f) - 3.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn symmetric_bounded_and_rotation_equivariant(
            x1 in -3.0..3.0f64, z1 in -3.0..3.0f64, w1 in 0.5..3.0f64, l1 in 0.5..6.0f64, y1 in -3.1..3.1f64,
            x2 in -3.0..3.0f64, z2 in -3.0..3.0f64, w2 in 0.5..3.0f64, l2 in 0.5..6.0f64, y2 in -3.1..3.1f64,
            spin in -3.1..3.1f64,
        ) {
            let a = rect(x1, z1, w1, l1, y1);
            let b = rect(x2, z2, w2, l2, y2);
            let iou = bev_iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&iou));
            prop_assert!((iou - bev_iou(&b, &a)).abs() < 1e-12);

            // Rotate the whole scene about the origin. The yaw convention maps
            // (x, z) -> (x cos + z sin, -x sin + z cos).
            let (s, c) = spin.sin_cos();
            let turn = |r: &Cuboid3D, yaw: f64| {
                let (x, z) = (r.center.x, r.center.z);
                rect(x * c + z * s, -x * s + z * c, r.dims.width, r.dims.length, yaw + spin)
            };
            let iou_rot = bev_iou(&turn(&a, y1), &turn(&b, y2));
            prop_assert!((iou - iou_rot).abs() < 1e-9, "{} vs {}", iou, iou_rot);
        }
    }
}
