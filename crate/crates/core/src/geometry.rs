//! Oriented rectangles, separating-axis intersection and convex clipping.

use crate::scene::Extent;
use crate::se2::Pose;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: Pose,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Pose, extent: Extent) -> Self {
        Self {
            center,
            length: extent.length,
            width: extent.width,
        }
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|p| self.center.transform_point(p))
    }

    fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.center.yaw.sin_cos();
        [[c, s], [-s, c]]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let q = self.center.inverse_transform_point(p);
        q[0].abs() <= self.length / 2.0 && q[1].abs() <= self.width / 2.0
    }
}

fn project(corners: &[[f64; 2]; 4], axis: [f64; 2]) -> (f64, f64) {
    corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p[0] * axis[0] + p[1] * axis[1];
        (lo.min(d), hi.max(d))
    })
}

/// Separating-axis test; touching boxes count as intersecting.
pub fn boxes_intersect(a: &OrientedBox, b: &OrientedBox) -> bool {
    let (ca, cb) = (a.corners(), b.corners());
    for axis in a.axes().into_iter().chain(b.axes()) {
        let (amin, amax) = project(&ca, axis);
        let (bmin, bmax) = project(&cb, axis);
        if amax < bmin || bmax < amin {
            return false;
        }
    }
    true
}

/// Intersection of two convex counter-clockwise polygons (Sutherland-Hodgman).
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Area centroid of a simple polygon; falls back to the vertex mean when degenerate.
pub fn polygon_centroid(poly: &[[f64; 2]]) -> Option<[f64; 2]> {
    if poly.is_empty() {
        return None;
    }
    let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        let cross = p[0] * q[1] - q[0] * p[1];
        a += cross;
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    if a.abs() < 1e-12 {
        let n = poly.len() as f64;
        let (sx, sy) = poly.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
        return Some([sx / n, sy / n]);
    }
    Some([cx / (3.0 * a), cy / (3.0 * a)])
}
