//! Shared 2D geometry: oriented rectangles, convex polygon clipping,
//! convex hulls, minimum-area enclosing rectangles and ray casting.
//!
//! Everything works on the BEV (bird's-eye-view) plane. Points are `[x, y]`.

use std::f64::consts::PI;

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Corners of an oriented rectangle, counter-clockwise.
/// `l` extends along the yaw direction, `w` across it.
pub fn rect_corners(cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> [[f64; 2]; 4] {
    let (s, c) = yaw.sin_cos();
    let hl = 0.5 * l;
    let hw = 0.5 * w;
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    let mut out = [[0.0; 2]; 4];
    for (o, p) in out.iter_mut().zip(local.iter()) {
        o[0] = cx + c * p[0] - s * p[1];
        o[1] = cy + s * p[0] + c * p[1];
    }
    out
}

/// Signed area of a polygon (positive when counter-clockwise).
pub fn polygon_signed_area(pts: &[[f64; 2]]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..pts.len() {
        let j = (i + 1) % pts.len();
        acc += pts[i][0] * pts[j][1] - pts[j][0] * pts[i][1];
    }
    0.5 * acc
}

/// Absolute polygon area.
pub fn polygon_area(pts: &[[f64; 2]]) -> f64 {
    polygon_signed_area(pts).abs()
}

/// Sutherland-Hodgman clip of `subject` against a convex counter-clockwise
/// polygon `clip`. Returns the (possibly empty) intersection polygon.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            return output;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        // inside = left of directed edge a->b
        let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        let intersect = |p: [f64; 2], q: [f64; 2]| -> [f64; 2] {
            let dpx = q[0] - p[0];
            let dpy = q[1] - p[1];
            let dcx = b[0] - a[0];
            let dcy = b[1] - a[1];
            let denom = dcx * dpy - dcy * dpx;
            if denom.abs() < 1e-300 {
                return q;
            }
            let t = (dcy * (p[0] - a[0]) - dcx * (p[1] - a[1])) / denom;
            [p[0] + t * dpx, p[1] + t * dpy]
        };
        for k in 0..input.len() {
            let cur = input[k];
            let prev = input[(k + input.len() - 1) % input.len()];
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur));
            }
        }
    }
    output
}

/// Intersection-over-union of two oriented rectangles given by corner lists
/// (both counter-clockwise). Degenerate results clamp to 0.
pub fn rect_iou_from_corners(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> f64 {
    let area_a = polygon_area(a);
    let area_b = polygon_area(b);
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let inter_poly = clip_polygon(a, b);
    let inter = polygon_area(&inter_poly).min(area_a).min(area_b);
    let union = area_a + area_b - inter;
    if union <= 0.0 || !inter.is_finite() {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Andrew monotone-chain convex hull; returns counter-clockwise corners.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|p, q| p[0].total_cmp(&q[0]).then(p[1].total_cmp(&q[1])));
    pts.dedup_by(|p, q| p[0] == q[0] && p[1] == q[1]);
    let n = pts.len();
    if n < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * n);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Minimum oriented rectangle enclosing a point set: one hull edge is
/// always flush with the optimum, so scan edge orientations
/// (rotating-calipers style). The objective is the half-perimeter rather
/// than the area: partial box silhouettes (an L of two sides) form
/// right-triangle hulls whose area-minimal enclosure ties between the
/// side-flush and hypotenuse-flush orientations, while the perimeter
/// objective picks the side-flush fit decisively. For filled convex
/// shapes both objectives agree.
/// Returns (cx, cy, l, w, yaw) with `l` along the yaw direction.
pub fn min_area_rect(points: &[[f64; 2]]) -> Option<(f64, f64, f64, f64, f64)> {
    let hull = convex_hull(points);
    if hull.is_empty() {
        return None;
    }
    if hull.len() == 1 {
        return Some((hull[0][0], hull[0][1], 0.0, 0.0, 0.0));
    }
    if hull.len() == 2 {
        let dx = hull[1][0] - hull[0][0];
        let dy = hull[1][1] - hull[0][1];
        let len = (dx * dx + dy * dy).sqrt();
        return Some((
            0.5 * (hull[0][0] + hull[1][0]),
            0.5 * (hull[0][1] + hull[1][1]),
            len,
            0.0,
            wrap_angle(dy.atan2(dx)),
        ));
    }
    let mut best: Option<(f64, f64, f64, f64, f64, f64)> = None; // (cost, cx, cy, l, w, yaw)
    for i in 0..hull.len() {
        let j = (i + 1) % hull.len();
        let ex = hull[j][0] - hull[i][0];
        let ey = hull[j][1] - hull[i][1];
        let elen = (ex * ex + ey * ey).sqrt();
        if elen < 1e-12 {
            continue;
        }
        let ux = ex / elen;
        let uy = ey / elen;
        // Project hull onto edge direction u and its normal.
        let mut min_u = f64::INFINITY;
        let mut max_u = f64::NEG_INFINITY;
        let mut min_v = f64::INFINITY;
        let mut max_v = f64::NEG_INFINITY;
        for p in &hull {
            let pu = p[0] * ux + p[1] * uy;
            let pv = -p[0] * uy + p[1] * ux;
            min_u = min_u.min(pu);
            max_u = max_u.max(pu);
            min_v = min_v.min(pv);
            max_v = max_v.max(pv);
        }
        let du = max_u - min_u;
        let dv = max_v - min_v;
        let cost = du + dv;
        if best.map_or(true, |b| cost < b.0) {
            let cu = 0.5 * (min_u + max_u);
            let cv = 0.5 * (min_v + max_v);
            let cx = cu * ux - cv * uy;
            let cy = cu * uy + cv * ux;
            best = Some((cost, cx, cy, du, dv, uy.atan2(ux)));
        }
    }
    best.map(|(_, cx, cy, l, w, yaw)| (cx, cy, l, w, wrap_angle(yaw)))
}

/// Distance along a ray (origin + t * dir, t >= 0) to segment [a, b],
/// or None when the ray misses.
pub fn ray_segment_intersection(
    origin: [f64; 2],
    dir: [f64; 2],
    a: [f64; 2],
    b: [f64; 2],
) -> Option<f64> {
    let v1 = [origin[0] - a[0], origin[1] - a[1]];
    let v2 = [b[0] - a[0], b[1] - a[1]];
    let v3 = [-dir[1], dir[0]];
    let denom = v2[0] * v3[0] + v2[1] * v3[1];
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (v2[0] * v1[1] - v2[1] * v1[0]) / denom;
    let s = (v1[0] * v3[0] + v1[1] * v3[1]) / denom;
    if t >= 0.0 && (0.0..=1.0).contains(&s) {
        Some(t)
    } else {
        None
    }
}
