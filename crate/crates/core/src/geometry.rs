//! Small fixed-size vector helpers. Points are plain `[f64; 3]` so they
//! serialize as `[x, y, z]`.

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// Distance in the horizontal plane.
#[inline]
pub fn dist_xy(a: Vec3, b: Vec3) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        c[0] += p[0];
        c[1] += p[1];
        c[2] += p[2];
    }
    [c[0] / n, c[1] / n, c[2] / n]
}

/// Rotates `v` about the z axis by `yaw`.
#[inline]
pub fn rotate_z(v: Vec3, yaw: f64) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    if w <= -PI {
        w += TAU;
    }
    w
}

/// Distance from `p` to the segment `a`-`b` in the horizontal plane.
pub fn point_segment_dist_xy(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return dist_xy(p, a);
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    (p[0] - (a[0] + t * dx)).hypot(p[1] - (a[1] + t * dy))
}

/// Convex hull of 2D points (Andrew's monotone chain), counter-clockwise,
/// without repeated end point. Collinear points are dropped.
pub fn convex_hull_xy(points: &[Vec3]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.iter().map(|p| [p[0], p[1]]).collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Signed distance from `p` to the boundary of a counter-clockwise convex
/// polygon: positive inside, negative outside. Degenerate polygons (fewer
/// than three vertices) report `-inf`.
pub fn signed_dist_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return f64::NEG_INFINITY;
    }
    let mut best = f64::INFINITY;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let len = ex.hypot(ey);
        // Inward normal of a CCW edge is (-ey, ex).
        let d = ((p[0] - a[0]) * -ey + (p[1] - a[1]) * ex) / len;
        best = best.min(d);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn square_hull_and_inside_distance() {
        let pts = [[1.0, 1.0, 0.0], [-1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [-1.0, -1.0, 0.0], [0.0, 0.0, 0.0]];
        let hull = convex_hull_xy(&pts);
        assert_eq!(hull.len(), 4);
        assert!((signed_dist_in_polygon([0.0, 0.0], &hull) - 1.0).abs() < 1e-12);
        assert!((signed_dist_in_polygon([2.0, 0.0], &hull) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn segment_distance() {
        let d = point_segment_dist_xy([0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
        assert!((d - 1.0).abs() < 1e-12);
        let d = point_segment_dist_xy([3.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
        assert!((d - 2.0).abs() < 1e-12);
    }
}
