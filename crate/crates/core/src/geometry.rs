//! Cuboid primitives shared by the renderer, registration and metrics.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::scalar::Real;
use crate::types::{BoxDims, Pose};

/// Sign pattern of template vertex `i`: bit `a` set means `+0.5` on axis `a`.
#[inline]
pub fn vertex_sign(i: usize, a: usize) -> f64 {
    if (i >> a) & 1 == 1 {
        0.5
    } else {
        -0.5
    }
}

/// The eight corners of a posed box, in the pose's parent frame.
pub fn box_vertices<T: Real>(pose: &Pose<T>, dims: &BoxDims<T>) -> [Vector3<T>; 8] {
    let d = dims.as_vector();
    std::array::from_fn(|i| {
        let local = Vector3::new(
            T::lit(vertex_sign(i, 0)) * d.x,
            T::lit(vertex_sign(i, 1)) * d.y,
            T::lit(vertex_sign(i, 2)) * d.z,
        );
        pose.transform_point(&local)
    })
}

/// A face of the template: outward normal axis/sign and its corners,
/// counter-clockwise when seen from outside.
#[derive(Debug, Clone, Copy)]
pub struct Face {
    pub axis: usize,
    pub positive: bool,
    pub corners: [usize; 4],
}

fn vertex_index(signs: [bool; 3]) -> usize {
    signs
        .iter()
        .enumerate()
        .map(|(a, s)| usize::from(*s) << a)
        .sum()
}

/// The six faces of the template.
pub fn box_faces() -> [Face; 6] {
    std::array::from_fn(|k| {
        let axis = k / 2;
        let positive = k % 2 == 1;
        let b = (axis + 1) % 3;
        let c = (axis + 2) % 3;
        let corner = |sb: bool, sc: bool| {
            let mut s = [false; 3];
            s[axis] = positive;
            s[b] = sb;
            s[c] = sc;
            vertex_index(s)
        };
        let mut corners = [
            corner(false, false),
            corner(true, false),
            corner(true, true),
            corner(false, true),
        ];
        if !positive {
            corners.reverse();
        }
        Face {
            axis,
            positive,
            corners,
        }
    })
}

/// Twelve outward-facing triangles of the template mesh.
pub fn box_triangles() -> [[usize; 3]; 12] {
    let faces = box_faces();
    std::array::from_fn(|k| {
        let f = &faces[k / 2];
        if k % 2 == 0 {
            [f.corners[0], f.corners[1], f.corners[2]]
        } else {
            [f.corners[0], f.corners[2], f.corners[3]]
        }
    })
}

/// Closest point on the surface of an axis-aligned box with half extents
/// `half`, for a query point `p` in the box frame.
pub fn closest_point_on_box_surface<T: Real>(p: &Vector3<T>, half: &Vector3<T>) -> Vector3<T> {
    let outside = (0..3).any(|a| p[a].abs() > half[a]);
    if outside {
        Vector3::from_fn(|a, _| {
            let v = p[a];
            if v > half[a] {
                half[a]
            } else if v < -half[a] {
                -half[a]
            } else {
                v
            }
        })
    } else {
        let mut best = 0;
        let mut best_gap = half[0] - p[0].abs();
        for a in 1..3 {
            let gap = half[a] - p[a].abs();
            if gap < best_gap {
                best = a;
                best_gap = gap;
            }
        }
        let mut q = *p;
        q[best] = if p[best] < T::zero() {
            -half[best]
        } else {
            half[best]
        };
        q
    }
}

/// Unsigned distance from a box-frame point to the box surface.
pub fn distance_to_box_surface<T: Real>(p: &Vector3<T>, half: &Vector3<T>) -> T {
    (closest_point_on_box_surface(p, half) - p).norm()
}

/// Separating-axis test for two oriented boxes. Touching boxes (penetration
/// depth below `tol`) do not count as overlapping.
pub fn boxes_interpenetrate(
    pose_a: &Pose,
    dims_a: &BoxDims,
    pose_b: &Pose,
    dims_b: &BoxDims,
    tol: f64,
) -> bool {
    let ha = dims_a.half();
    let hb = dims_b.half();
    let axes_a: [Vector3<f64>; 3] = std::array::from_fn(|i| pose_a.axis(i));
    let axes_b: [Vector3<f64>; 3] = std::array::from_fn(|i| pose_b.axis(i));
    let d = pose_b.translation - pose_a.translation;

    let separated_on = |n: &Vector3<f64>| -> bool {
        let len = n.norm();
        if len < 1e-9 {
            return false;
        }
        let n = n / len;
        let ra: f64 = (0..3).map(|i| ha[i] * axes_a[i].dot(&n).abs()).sum();
        let rb: f64 = (0..3).map(|i| hb[i] * axes_b[i].dot(&n).abs()).sum();
        d.dot(&n).abs() >= ra + rb - tol
    };

    for ax in axes_a.iter().chain(axes_b.iter()) {
        if separated_on(ax) {
            return false;
        }
    }
    for a in &axes_a {
        for b in &axes_b {
            if separated_on(&a.cross(b)) {
                return false;
            }
        }
    }
    true
}

/// The 24 proper rotations of the cube (signed permutation matrices with
/// determinant +1). The identity comes first.
pub fn octahedral_group<T: Real>() -> Vec<Matrix3<T>> {
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut out = Vec::with_capacity(24);
    for perm in PERMS {
        for signs in 0..8u8 {
            let mut m = Matrix3::<T>::zeros();
            for (col, row) in perm.iter().enumerate() {
                let s = if (signs >> col) & 1 == 1 {
                    -T::one()
                } else {
                    T::one()
                };
                m[(*row, col)] = s;
            }
            if m.determinant() > T::zero() {
                out.push(m);
            }
        }
    }
    out
}

/// Rotations of the octahedral group that map a box with `dims` onto itself.
/// Edges whose lengths agree within `eq_tol` are considered interchangeable.
pub fn box_symmetry_group<T: Real>(dims: &BoxDims<T>, eq_tol: T) -> Vec<Matrix3<T>> {
    let d = dims.as_vector();
    octahedral_group::<T>()
        .into_iter()
        .filter(|g| {
            (0..3).all(|col| {
                (0..3)
                    .find(|row| g[(*row, col)] != T::zero())
                    .map(|row| (d[row] - d[col]).abs() <= eq_tol)
                    .unwrap_or(false)
            })
        })
        .collect()
}

/// Cross product of `b - a` and `c - a` in 2D.
#[inline]
pub fn cross2(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Convex hull (Andrew's monotone chain), counter-clockwise in a y-up
/// convention, without collinear points.
pub fn convex_hull_2d(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts: Vec<Vector2<f64>> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Vector2<f64>> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross2(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Vector2<f64>> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross2(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Direction (unit vector) of one edge of the minimum-area rectangle
/// enclosing `points`, or `None` for fewer than three non-collinear points.
pub fn min_area_rect_direction(points: &[Vector2<f64>]) -> Option<Vector2<f64>> {
    let hull = convex_hull_2d(points);
    if hull.len() < 3 {
        return None;
    }
    let mut best: Option<(f64, Vector2<f64>)> = None;
    for i in 0..hull.len() {
        let e = hull[(i + 1) % hull.len()] - hull[i];
        let len = e.norm();
        if len < 1e-12 {
            continue;
        }
        let u = e / len;
        let v = Vector2::new(-u.y, u.x);
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &hull {
            let a = p.dot(&u);
            let b = p.dot(&v);
            umin = umin.min(a);
            umax = umax.max(a);
            vmin = vmin.min(b);
            vmax = vmax.max(b);
        }
        let area = (umax - umin) * (vmax - vmin);
        if best.map(|(a, _)| area < a).unwrap_or(true) {
            best = Some((area, u));
        }
    }
    best.map(|(_, u)| u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faces_are_outward_and_ccw() {
        let pose = Pose::identity();
        let dims = BoxDims::new(1.0, 2.0, 3.0).unwrap();
        let v = box_vertices(&pose, &dims);
        for f in box_faces() {
            let [a, b, c, _] = f.corners;
            let n = (v[b] - v[a]).cross(&(v[c] - v[a]));
            let sign = if f.positive { 1.0 } else { -1.0 };
            assert!(n[f.axis] * sign > 0.0, "face {f:?}");
            for i in f.corners {
                assert_eq!(vertex_sign(i, f.axis) > 0.0, f.positive);
            }
        }
    }

    #[test]
    fn octahedral_group_has_24_distinct_proper_rotations() {
        let g = octahedral_group::<f64>();
        assert_eq!(g.len(), 24);
        assert_eq!(g[0], Matrix3::identity());
        for (i, a) in g.iter().enumerate() {
            assert!((a.determinant() - 1.0).abs() < 1e-12);
            for b in &g[i + 1..] {
                assert!((a - b).amax() > 0.5);
            }
        }
    }

    #[test]
    fn symmetry_group_orders() {
        let tol = 1e-6;
        let distinct = BoxDims::new(0.2, 0.3, 0.4).unwrap();
        let square = BoxDims::new(0.3, 0.3, 0.5).unwrap();
        let cube = BoxDims::new(0.4, 0.4, 0.4).unwrap();
        assert_eq!(box_symmetry_group(&distinct, tol).len(), 4);
        assert_eq!(box_symmetry_group(&square, tol).len(), 8);
        assert_eq!(box_symmetry_group(&cube, tol).len(), 24);
    }

    #[test]
    fn closest_point_inside_and_outside() {
        let half: Vector3<f64> = Vector3::new(0.5, 1.0, 2.0);
        let q = closest_point_on_box_surface(&Vector3::new(0.1, 0.2, 0.3), &half);
        assert_eq!(q, Vector3::new(0.5, 0.2, 0.3));
        let q = closest_point_on_box_surface(&Vector3::new(3.0, 0.0, -5.0), &half);
        assert_eq!(q, Vector3::new(0.5, 0.0, -2.0));
        assert!((distance_to_box_surface(&Vector3::new(1.5, 0.0, 0.0), &half) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sat_detects_touching_and_overlap() {
        let d = BoxDims::new(1.0, 1.0, 1.0).unwrap();
        let a = Pose::identity();
        let touching = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let overlapping = Pose::from_translation(Vector3::new(0.9, 0.0, 0.0));
        assert!(!boxes_interpenetrate(&a, &d, &touching, &d, 1e-9));
        assert!(boxes_interpenetrate(&a, &d, &overlapping, &d, 1e-9));
    }

    #[test]
    fn min_area_rect_of_rotated_rectangle() {
        let th: f64 = 0.3;
        let u = Vector2::new(th.cos(), th.sin());
        let v = Vector2::new(-th.sin(), th.cos());
        let mut pts = Vec::new();
        for i in 0..=20 {
            for j in 0..=10 {
                pts.push(u * (i as f64 * 0.1) + v * (j as f64 * 0.1));
            }
        }
        let d = min_area_rect_direction(&pts).unwrap();
        assert!(d.dot(&u).abs() > 0.9999 || d.dot(&v).abs() > 0.9999);
    }
}
