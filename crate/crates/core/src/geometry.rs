//! Planar poses, oriented boxes and rotated BEV intersection-over-union.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub type Point2 = [f64; 2];

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the other endpoint.
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
        }
    }

    /// Maps a point from this pose's local frame to the world frame.
    pub fn to_world(&self, p: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1] + self.x, s * p[0] + c * p[1] + self.y]
    }

    /// Maps a world point into this pose's local frame.
    pub fn to_local(&self, p: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

/// Oriented 3D box; `l` runs along the heading `yaw`, `w` across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box7 {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box7 {
    pub fn center(&self) -> Point2 {
        [self.cx, self.cy]
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// BEV corners in counter-clockwise order.
    pub fn corners(&self) -> [Point2; 4] {
        self.corners_inflated(0.0)
    }

    fn corners_inflated(&self, pad: f64) -> [Point2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0 + pad, self.w / 2.0 + pad);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]]
            .map(|[u, v]| [self.cx + c * u - s * v, self.cy + s * u + c * v])
    }

    /// Radius of the circle circumscribing the BEV footprint.
    pub fn circumradius(&self) -> f64 {
        0.5 * self.w.hypot(self.l)
    }

    pub fn contains_xy(&self, p: Point2) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.cx, p[1] - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.l / 2.0 && v.abs() <= self.w / 2.0
    }

    /// Re-expresses a box given in the local frame of `from` in the local frame of `to`.
    pub fn transformed(&self, from: &Pose, to: &Pose) -> Box7 {
        let [x, y] = to.to_local(from.to_world(self.center()));
        Box7 {
            cx: x,
            cy: y,
            yaw: wrap_angle(self.yaw + from.yaw - to.yaw),
            ..*self
        }
    }

    /// Separating-axis overlap test after growing each box by `gap / 2` on every side.
    pub fn overlaps_bev(&self, other: &Box7, gap: f64) -> bool {
        let a = self.corners_inflated(gap / 2.0);
        let b = other.corners_inflated(gap / 2.0);
        for poly in [&a, &b] {
            for i in 0..2 {
                let e = [poly[i + 1][0] - poly[i][0], poly[i + 1][1] - poly[i][1]];
                let axis = [-e[1], e[0]];
                let proj = |p: &Point2| p[0] * axis[0] + p[1] * axis[1];
                let (amin, amax) = min_max(a.iter().map(proj));
                let (bmin, bmax) = min_max(b.iter().map(proj));
                if amax <= bmin || bmax <= amin {
                    return false;
                }
            }
        }
        true
    }

    /// Smallest parameter `t > 0` at which the ray `origin + t * dir` meets the footprint boundary.
    pub fn ray_hit(&self, origin: Point2, dir: Point2) -> Option<f64> {
        let c = self.corners();
        let mut best: Option<f64> = None;
        for i in 0..4 {
            let (p, q) = (c[i], c[(i + 1) % 4]);
            if let Some(t) = ray_segment(origin, dir, p, q) {
                if t > 0.0 && best.is_none_or(|b| t < b) {
                    best = Some(t);
                }
            }
        }
        best
    }
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    })
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Ray parameter at which `origin + t * dir` crosses segment `p`-`q`, if it does.
fn ray_segment(origin: Point2, dir: Point2, p: Point2, q: Point2) -> Option<f64> {
    let e = [q[0] - p[0], q[1] - p[1]];
    let denom = dir[0] * e[1] - dir[1] * e[0];
    if denom.abs() < 1e-15 {
        return None;
    }
    let w = [p[0] - origin[0], p[1] - origin[1]];
    let t = (w[0] * e[1] - w[1] * e[0]) / denom;
    let u = (w[0] * dir[1] - w[1] * dir[0]) / denom;
    (0.0..=1.0).contains(&u).then_some(t)
}

/// True when the open segment `a`-`b` passes through the interior of `bx`.
pub fn segment_crosses_box(a: Point2, b: Point2, bx: &Box7) -> bool {
    let dir = [b[0] - a[0], b[1] - a[1]];
    let c = bx.corners();
    let eps = 1e-9;
    for i in 0..4 {
        if let Some(t) = ray_segment(a, dir, c[i], c[(i + 1) % 4]) {
            if t > eps && t < 1.0 - eps {
                return true;
            }
        }
    }
    // Segment fully inside the box.
    bx.contains_xy([(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]) && bx.contains_xy(a)
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s
}

/// Sutherland-Hodgman clipping of `subject` by the convex counter-clockwise polygon `clip`.
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
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: Point2, q: Point2, dp: f64, dq: f64) -> Point2 {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// BEV intersection-over-union of two oriented boxes.
pub fn rotated_iou(a: &Box7, b: &Box7) -> Result<f64> {
    let (aa, ab) = (a.area(), b.area());
    if !(aa > 0.0 && ab > 0.0) {
        return Err(contract(format!(
            "rotated_iou on a degenerate box (areas {aa}, {ab})"
        )));
    }
    Ok(rotated_iou_unchecked(a, b))
}

/// [`rotated_iou`] for boxes already known to have positive area.
pub fn rotated_iou_unchecked(a: &Box7, b: &Box7) -> f64 {
    let d = (a.cx - b.cx).hypot(a.cy - b.cy);
    if d >= a.circumradius() + b.circumradius() {
        return 0.0;
    }
    let inter = polygon_area(&clip_convex(&a.corners(), &b.corners())).max(0.0);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, w: f64, l: f64, yaw: f64) -> Box7 {
        Box7 {
            cx,
            cy,
            cz: 0.0,
            w,
            l,
            h: 1.0,
            yaw,
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.25)).eq(&0.25));
    }

    #[test]
    fn pose_round_trip() {
        let p = Pose::new(3.0, -2.0, 0.7);
        let q = p.to_local(p.to_world([1.5, -4.0]));
        assert!((q[0] - 1.5).abs() < 1e-12 && (q[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn iou_basic_cases() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        assert!((rotated_iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = bx(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!((rotated_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let c = bx(5.0, 0.0, 1.0, 1.0, 0.3);
        assert_eq!(rotated_iou(&a, &c).unwrap(), 0.0);
        // A square rotated by 90 degrees is the same footprint.
        let d = bx(0.0, 0.0, 1.0, 1.0, PI / 2.0);
        assert!((rotated_iou(&a, &d).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 0.0);
        assert!(rotated_iou(&a, &bx(0.0, 0.0, 1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn overlap_respects_gap() {
        let a = bx(0.0, 0.0, 2.0, 4.0, 0.0);
        let b = bx(4.5, 0.0, 2.0, 4.0, 0.0);
        assert!(!a.overlaps_bev(&b, 0.0));
        assert!(a.overlaps_bev(&b, 1.0));
    }

    #[test]
    fn ray_hits_nearest_face() {
        let a = bx(10.0, 0.0, 2.0, 4.0, 0.0);
        let t = a.ray_hit([0.0, 0.0], [1.0, 0.0]).unwrap();
        assert!((t - 8.0).abs() < 1e-12);
        assert!(a.ray_hit([0.0, 0.0], [-1.0, 0.0]).is_none());
    }
}
