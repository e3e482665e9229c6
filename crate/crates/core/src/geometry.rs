//! Oriented 3D boxes rotated about the vertical axis, their 8-corner form,
//! and rotated-box IoU in bird's-eye view and in 3D.
//!
//! Axis convention: `l` runs along the local heading (x) axis, `w` along the
//! lateral (y) axis and `h` along the vertical (z) axis.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Intersections below this area (m²) are treated as empty.
pub const AREA_EPS: f64 = 1e-12;

/// Corner sets whose rigid reconstruction deviates by more than this (m) are rejected.
pub const RIGIDITY_TOL: f64 = 1e-6;

/// `(sin, cos)` from two separate libm calls. Left alone, the optimizer may
/// fuse the pair into `sincos`, which disagrees in the last bit on some inputs,
/// and whether it does depends on inlining. Every pair goes through here so
/// results are the same in every build profile.
pub fn sin_cos(angle: f64) -> (f64, f64) {
    (std::hint::black_box(angle).sin(), std::hint::black_box(angle).cos())
}

/// Wraps an angle into (−π, π].
pub fn normalize_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a - 2.0 * PI
    } else {
        a
    }
}

/// Wraps an angle into (−π/2, π/2]. Boxes are symmetric under a half turn,
/// so this picks the parallel representative of a heading.
pub fn wrap_parallel(angle: f64) -> f64 {
    if angle > -FRAC_PI_2 && angle <= FRAC_PI_2 {
        return angle;
    }
    let a = angle.rem_euclid(PI);
    if a > FRAC_PI_2 {
        a - PI
    } else {
        a
    }
}

pub fn rotation_z(yaw: f64) -> Result<Mat3> {
    if !yaw.is_finite() {
        return Err(Error::InvalidArgument(format!("yaw must be finite, got {yaw}")));
    }
    let (s, c) = sin_cos(yaw);
    Ok([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
}

#[inline]
pub(crate) fn rotate_z(v: Vec3, sin: f64, cos: f64) -> Vec3 {
    [cos * v[0] - sin * v[1], sin * v[0] + cos * v[1], v[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl OrientedBox3D {
    pub fn new(center: Vec3, l: f64, w: f64, h: f64, yaw: f64) -> Result<Self> {
        let all = [center[0], center[1], center[2], l, w, h, yaw];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite box value in {all:?}")));
        }
        if l <= 0.0 || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "box extents must be positive, got l={l} w={w} h={h}"
            )));
        }
        Ok(Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l,
            w,
            h,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn center(&self) -> Vec3 {
        [self.cx, self.cy, self.cz]
    }

    pub fn extents(&self) -> Vec3 {
        [self.l, self.w, self.h]
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn z_min(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.cz + 0.5 * self.h
    }

    /// Distance of the box center from the ego origin in the ground plane.
    pub fn range_xy(&self) -> f64 {
        self.cx.hypot(self.cy)
    }

    /// Expresses an ego-frame point in the box frame (center at origin, heading along +x).
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let (s, c) = sin_cos(self.yaw);
        let d = [p[0] - self.cx, p[1] - self.cy, p[2] - self.cz];
        rotate_z(d, -s, c)
    }

    pub fn from_local(&self, p: Vec3) -> Vec3 {
        let (s, c) = sin_cos(self.yaw);
        let r = rotate_z(p, s, c);
        [r[0] + self.cx, r[1] + self.cy, r[2] + self.cz]
    }

    pub fn contains_point(&self, p: Vec3) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= 0.5 * self.l && q[1].abs() <= 0.5 * self.w && q[2].abs() <= 0.5 * self.h
    }

    /// Top-down footprint, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = sin_cos(self.yaw);
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)].map(|(x, y)| {
            [c * x - s * y + self.cx, s * x + c * y + self.cy]
        })
    }
}

/// The 8 corners of a box. Corner `i` uses the sign pattern of its bits:
/// bit 2 selects ±l/2, bit 1 selects ±w/2, bit 0 selects ±h/2 (0 = negative).
/// Corners `i` and `7 − i` are therefore opposite each other.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet {
    pub corners: [Vec3; 8],
}

#[inline]
pub(crate) fn corner_signs(i: usize) -> Vec3 {
    let s = |bit: usize| if i >> bit & 1 == 1 { 1.0 } else { -1.0 };
    [s(2), s(1), s(0)]
}

pub fn box_to_corners(b: &OrientedBox3D) -> CornerSet {
    let (s, c) = sin_cos(b.yaw);
    let half = [0.5 * b.l, 0.5 * b.w, 0.5 * b.h];
    let mut corners = [[0.0; 3]; 8];
    for (i, corner) in corners.iter_mut().enumerate() {
        let sg = corner_signs(i);
        let local = [sg[0] * half[0], sg[1] * half[1], sg[2] * half[2]];
        let r = rotate_z(local, s, c);
        *corner = [r[0] + b.cx, r[1] + b.cy, r[2] + b.cz];
    }
    CornerSet { corners }
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn corners_to_box(cs: &CornerSet) -> Result<OrientedBox3D> {
    let c = &cs.corners;
    let mut center = [0.0; 3];
    for p in c {
        for k in 0..3 {
            center[k] += p[k] / 8.0;
        }
    }

    // Average the four parallel edges along each local axis.
    let mut extents = [0.0; 3];
    let mut heading = [0.0; 2];
    for (axis, bit) in [(0usize, 4usize), (1, 2), (2, 1)] {
        for i in (0..8).filter(|i| i & bit == 0) {
            let e = sub(c[i | bit], c[i]);
            extents[axis] += norm(e) / 4.0;
            if axis == 0 {
                heading[0] += e[0];
                heading[1] += e[1];
            }
        }
    }
    let yaw = heading[1].atan2(heading[0]);
    let rebuilt = OrientedBox3D::new(center, extents[0], extents[1], extents[2], yaw)
        .map_err(|_| Error::MalformedCorners(f64::INFINITY))?;

    let regenerated = box_to_corners(&rebuilt);
    let deviation = c
        .iter()
        .zip(regenerated.corners.iter())
        .map(|(a, b)| norm(sub(*a, *b)))
        .fold(0.0, f64::max);
    if !(deviation <= RIGIDITY_TOL) {
        return Err(Error::MalformedCorners(deviation));
    }
    Ok(rebuilt)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        twice += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * twice.abs()
}

/// Sutherland–Hodgman clipping of `subject` against a convex, counter-clockwise `clip` polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let d_cur = cross(a, b, cur);
            let d_prev = cross(a, b, prev);
            let cur_in = d_cur >= 0.0;
            let prev_in = d_prev >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_cut(prev, cur, d_prev, d_cur));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_cut(prev, cur, d_prev, d_cur));
            }
        }
    }
    output
}

fn segment_cut(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the overlap of the two footprints, zero below [`AREA_EPS`].
pub fn bev_intersection_area(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    // Cheap reject on circumscribed circles.
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return 0.0;
    }
    let area = polygon_area(&clip_convex(&a.footprint(), &b.footprint()));
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

fn ratio(inter: f64, union: f64) -> f64 {
    if union <= AREA_EPS || inter <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn iou_bev(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    ratio(inter, a.l * a.w + b.l * b.w - inter)
}

pub fn iou_3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let dz = (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    ratio(inter, a.volume() + b.volume() - inter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bx(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, yaw: f64) -> OrientedBox3D {
        OrientedBox3D::new([cx, cy, cz], l, w, h, yaw).unwrap()
    }

    #[test]
    fn rotation_identity_and_quarter_turn() {
        let r = rotation_z(0.0).unwrap();
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let q = rotation_z(FRAC_PI_2).unwrap();
        let x = [q[0][0], q[1][0], q[2][0]];
        assert_abs_diff_eq!(x[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation_z(0.3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dot, expected, epsilon = 1e-12);
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        assert_abs_diff_eq!(det, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_rejects_non_finite() {
        assert!(matches!(rotation_z(f64::NAN), Err(Error::InvalidArgument(_))));
        assert!(rotation_z(f64::INFINITY).is_err());
    }

    #[test]
    fn yaw_is_normalized() {
        let b = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 3.0 * PI);
        assert_abs_diff_eq!(b.yaw, PI, epsilon = 1e-12);
        let b = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, -PI);
        assert_eq!(b.yaw, PI);
        assert!(OrientedBox3D::new([0.0; 3], 0.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn cube_corners() {
        let cs = box_to_corners(&bx(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0));
        for (i, c) in cs.corners.iter().enumerate() {
            assert_eq!(*c, corner_signs(i));
        }
        let b = corners_to_box(&cs).unwrap();
        assert_eq!(b, bx(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0));
    }

    #[test]
    fn corner_layout_invariants() {
        let b = bx(1.0, -2.0, 0.4, 4.0, 1.8, 1.5, -2.2);
        let cs = box_to_corners(&b);
        for i in 0..8 {
            let (p, q) = (cs.corners[i], cs.corners[7 - i]);
            for k in 0..3 {
                assert_abs_diff_eq!(0.5 * (p[k] + q[k]), b.center()[k], epsilon = 1e-12);
            }
        }
        for i in 0..8 {
            let z = b.to_local(cs.corners[i])[2];
            let expected = if i & 1 == 0 { -0.75 } else { 0.75 };
            assert_abs_diff_eq!(z, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn corners_translate_with_box() {
        let b = bx(1.0, 2.0, 0.0, 4.0, 2.0, 1.5, 0.7);
        let t = [3.0, -1.0, 0.5];
        let moved = bx(4.0, 1.0, 0.5, 4.0, 2.0, 1.5, 0.7);
        let (a, m) = (box_to_corners(&b), box_to_corners(&moved));
        for i in 0..8 {
            for k in 0..3 {
                assert_abs_diff_eq!(a.corners[i][k] + t[k], m.corners[i][k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn perturbed_corner_is_rejected() {
        let mut cs = box_to_corners(&bx(1.0, 2.0, 0.0, 4.0, 2.0, 1.5, 0.7));
        cs.corners[3][0] += 1.0;
        assert!(matches!(corners_to_box(&cs), Err(Error::MalformedCorners(_))));
    }

    #[test]
    fn axis_aligned_square_overlap() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = bx(0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert_abs_diff_eq!(iou_bev(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(iou_bev(&a, &a), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(iou_3d(&a, &a), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn vertical_offset_of_half_height() {
        let a = bx(0.0, 0.0, 0.0, 4.0, 2.0, 2.0, 0.4);
        let b = bx(0.0, 0.0, 1.0, 4.0, 2.0, 2.0, 0.4);
        assert_abs_diff_eq!(iou_3d(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn disjoint_and_touching_boxes() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let far = bx(10.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.3);
        let touching = bx(1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let stacked = bx(0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(iou_bev(&a, &far), 0.0);
        assert_eq!(iou_3d(&a, &far), 0.0);
        assert_eq!(iou_bev(&a, &touching), 0.0);
        assert_eq!(iou_3d(&a, &stacked), 0.0);
    }

    #[test]
    fn clip_handles_containment() {
        let big = bx(0.0, 0.0, 0.0, 4.0, 4.0, 1.0, 0.2);
        let small = bx(0.1, 0.1, 0.0, 1.0, 1.0, 1.0, 1.1);
        assert_abs_diff_eq!(bev_intersection_area(&big, &small), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(iou_bev(&big, &small), 1.0 / 16.0, epsilon = 1e-12);
    }

    #[test]
    fn angle_wrapping_ranges() {
        for k in -20..=20 {
            let a = k as f64 * 0.37;
            let n = normalize_angle(a);
            assert!(n > -PI && n <= PI);
            assert_abs_diff_eq!(n.sin(), a.sin(), epsilon = 1e-12);
            let p = wrap_parallel(a);
            assert!(p > -FRAC_PI_2 && p <= FRAC_PI_2);
            assert_abs_diff_eq!((2.0 * p).sin(), (2.0 * a).sin(), epsilon = 1e-12);
        }
        assert_eq!(wrap_parallel(-FRAC_PI_2), FRAC_PI_2);
    }
}
