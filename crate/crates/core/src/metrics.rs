//! Oriented-box IoU, symmetry-aware pose errors and dataset precision.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{box_faces, box_symmetry_group, octahedral_group, vertex_sign};
use crate::scalar::Real;
use crate::types::{rotation_angle, BoxDims, Pose};

/// Default tolerance (meters) under which two edge lengths are treated as
/// equal when building a box's symmetry group.
pub const DEFAULT_SYMMETRY_TOL: f64 = 1e-6;

type Polygon<T> = Vec<Vector3<T>>;

/// Face polygons (outward, counter-clockwise from outside) of a box, given
/// its vertices.
fn face_polygons<T: Real>(verts: &[Vector3<T>; 8]) -> Vec<(usize, bool, Polygon<T>)> {
    box_faces()
        .iter()
        .map(|f| {
            (
                f.axis,
                f.positive,
                f.corners.iter().map(|i| verts[*i]).collect(),
            )
        })
        .collect()
}

/// Clips a polygon to the half-space `sign * p[axis] <= limit + eps`.
fn clip_half_space<T: Real>(
    poly: &Polygon<T>,
    axis: usize,
    sign: T,
    limit: T,
    eps: T,
) -> Polygon<T> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let fa = sign * a[axis] - limit;
        let fb = sign * b[axis] - limit;
        let a_in = fa <= eps;
        let b_in = fb <= eps;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (fa - eps) / (fa - fb);
            out.push(a + (b - a) * t);
        }
    }
    out
}

/// Clips a polygon to an axis-aligned box `|p_a| <= half_a`. Points within
/// `eps` of a bounding plane count as inside, so coplanar touching faces are
/// kept on both sides and cancel.
fn clip_to_box<T: Real>(poly: &Polygon<T>, half: &Vector3<T>, eps: T) -> Polygon<T> {
    let mut p = poly.clone();
    for a in 0..3 {
        for sign in [T::one(), -T::one()] {
            if p.len() < 3 {
                return Vec::new();
            }
            p = clip_half_space(&p, a, sign, half[a], eps);
        }
    }
    if p.len() < 3 {
        Vec::new()
    } else {
        p
    }
}

/// Signed volume contribution of an outward polygon (divergence theorem).
fn polygon_volume_term<T: Real>(poly: &Polygon<T>) -> T {
    let p0 = poly[0];
    let mut acc = T::zero();
    for i in 1..poly.len() - 1 {
        acc += p0.dot(&poly[i].cross(&poly[i + 1]));
    }
    acc / T::lit(6.0)
}

/// Volume of the intersection of two oriented boxes.
pub fn intersection_volume<T: Real>(
    pose_a: &Pose<T>,
    dims_a: &BoxDims<T>,
    pose_b: &Pose<T>,
    dims_b: &BoxDims<T>,
) -> T {
    // Work in B's frame: B is axis aligned there.
    let a_in_b = pose_b.inverse().compose(pose_a);
    let b_in_a = a_in_b.inverse();
    let ha = dims_a.half();
    let hb = dims_b.half();
    let local_verts = |h: &Vector3<T>, pose: &Pose<T>| -> [Vector3<T>; 8] {
        std::array::from_fn(|i| {
            pose.transform_point(&Vector3::new(
                T::lit(vertex_sign(i, 0) * 2.0) * h.x,
                T::lit(vertex_sign(i, 1) * 2.0) * h.y,
                T::lit(vertex_sign(i, 2) * 2.0) * h.z,
            ))
        })
    };
    let va = local_verts(&ha, &a_in_b);
    let vb = local_verts(&hb, &Pose::identity());
    let scale = ha.amax().max(hb.amax());
    let eps = scale * T::default_epsilon() * T::lit(64.0);

    let mut vol = T::zero();
    // Faces of A clipped by B.
    for (_, _, poly) in face_polygons(&va) {
        let c = clip_to_box(&poly, &hb, eps);
        if !c.is_empty() {
            vol += polygon_volume_term(&c);
        }
    }
    // Faces of B clipped by A (in A's frame, mapped back). A face of B lying
    // on a face of A with the same orientation is already counted.
    let a_normals: Vec<(Vector3<T>, T)> = box_faces()
        .iter()
        .map(|f| {
            let s = if f.positive { T::one() } else { -T::one() };
            let n = a_in_b.axis(f.axis) * s;
            let off = n.dot(&a_in_b.translation) + ha[f.axis];
            (n, off)
        })
        .collect();
    for (axis, positive, poly) in face_polygons(&vb) {
        let s = if positive { T::one() } else { -T::one() };
        let mut n = Vector3::zeros();
        n[axis] = s;
        let off = hb[axis];
        let duplicate = a_normals
            .iter()
            .any(|(na, oa)| (na.dot(&n) - T::one()).abs() <= eps && (*oa - off).abs() <= eps);
        if duplicate {
            continue;
        }
        let in_a: Polygon<T> = poly.iter().map(|p| b_in_a.transform_point(p)).collect();
        let c = clip_to_box(&in_a, &ha, eps);
        if !c.is_empty() {
            let back: Polygon<T> = c.iter().map(|p| a_in_b.transform_point(p)).collect();
            vol += polygon_volume_term(&back);
        }
    }
    if vol < T::zero() {
        T::zero()
    } else {
        vol
    }
}

/// Intersection over union of two oriented boxes, in `[0, 1]`.
pub fn iou3d<T: Real>(
    pose_a: &Pose<T>,
    dims_a: &BoxDims<T>,
    pose_b: &Pose<T>,
    dims_b: &BoxDims<T>,
) -> T {
    let inter = intersection_volume(pose_a, dims_a, pose_b, dims_b);
    let union = dims_a.volume() + dims_b.volume() - inter;
    let iou = inter / union;
    if iou > T::one() {
        T::one()
    } else if iou < T::zero() {
        T::zero()
    } else {
        iou
    }
}

/// Rotation error in degrees, minimized over the rotations that map a box
/// with `dims` onto itself.
pub fn rotation_error_sym<T: Real>(r_pred: &Matrix3<T>, r_gt: &Matrix3<T>, dims: &BoxDims<T>) -> T {
    rotation_error_sym_tol(r_pred, r_gt, dims, T::lit(DEFAULT_SYMMETRY_TOL))
}

pub fn rotation_error_sym_tol<T: Real>(
    r_pred: &Matrix3<T>,
    r_gt: &Matrix3<T>,
    dims: &BoxDims<T>,
    tol: T,
) -> T {
    box_symmetry_group(dims, tol)
        .iter()
        .map(|g| rotation_angle(&(r_pred * g), r_gt))
        .fold(T::lit(f64::INFINITY), |a, b| if b < a { b } else { a })
        * T::lit(180.0 / std::f64::consts::PI)
}

/// Relabels the axes of a predicted box so its dimensions line up with
/// `reference`. The box itself is unchanged: `(R·g, dims permuted by g)`
/// describes the same solid for every `g` of the octahedral group. Among
/// relabelings with equally close dims the one nearest `reference_rot` wins.
pub fn align_box_axes(
    pose: &Pose,
    dims: &BoxDims,
    reference: &BoxDims,
    reference_rot: &Matrix3<f64>,
) -> (Pose, BoxDims) {
    let mut best: Option<(f64, f64, Pose, BoxDims)> = None;
    for g in octahedral_group::<f64>() {
        let d =
            BoxDims::from_vector(g.abs().transpose() * dims.as_vector()).expect("permuted dims");
        let cost = (d.as_vector() - reference.as_vector()).abs().sum();
        let rot = pose.rotation * g;
        let ang = rotation_angle(&rot, reference_rot);
        let better = match &best {
            None => true,
            Some((c, a, _, _)) => cost < c - 1e-12 || ((cost - c).abs() <= 1e-12 && ang < *a),
        };
        if better {
            best = Some((cost, ang, Pose::from_parts(rot, pose.translation), d));
        }
    }
    let (_, _, p, d) = best.expect("nonempty group");
    (p, d)
}

/// Translation error in centimeters.
pub fn translation_error_cm<T: Real>(pred: &Pose<T>, gt: &Pose<T>) -> T {
    (pred.translation - gt.translation).norm() * T::lit(100.0)
}

/// `n°/m cm` criterion; both bounds are inclusive.
pub fn pose_true_positive(pred: &Pose, gt: &Pose, dims: &BoxDims, n_deg: f64, m_cm: f64) -> bool {
    rotation_error_sym(&pred.rotation, &gt.rotation, dims) <= n_deg
        && translation_error_cm(pred, gt) <= m_cm
}

/// One evaluated ground-truth instance with its matched prediction, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceResult {
    pub gt_pose: Pose,
    pub gt_dims: BoxDims,
    pub pred: Option<(Pose, BoxDims)>,
}

impl InstanceResult {
    pub fn iou(&self) -> f64 {
        self.pred
            .map(|(p, d)| iou3d(&p, &d, &self.gt_pose, &self.gt_dims))
            .unwrap_or(0.0)
    }

    /// Symmetry-aware rotation error after relabeling the predicted axes
    /// to match the ground-truth dimensions.
    pub fn rotation_error_deg(&self) -> Option<f64> {
        self.pred.map(|(p, d)| {
            let (p, _) = align_box_axes(&p, &d, &self.gt_dims, &self.gt_pose.rotation);
            rotation_error_sym(&p.rotation, &self.gt_pose.rotation, &self.gt_dims)
        })
    }

    pub fn translation_error_cm(&self) -> Option<f64> {
        self.pred
            .map(|(p, _)| translation_error_cm(&p, &self.gt_pose))
    }
}

/// What makes a matched prediction a true positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    Iou(f64),
    Rotation(f64),
    Translation(f64),
    /// Rotation error ≤ n° and translation error ≤ m cm.
    PoseNm(f64, f64),
}

impl Criterion {
    pub fn passes(&self, r: &InstanceResult) -> bool {
        let Some((pose, _)) = r.pred else {
            return false;
        };
        match *self {
            Criterion::Iou(t) => r.iou() >= t,
            Criterion::Rotation(n) => r.rotation_error_deg().is_some_and(|e| e <= n),
            Criterion::Translation(m) => r.translation_error_cm().is_some_and(|e| e <= m),
            Criterion::PoseNm(n, m) => {
                r.rotation_error_deg().is_some_and(|e| e <= n)
                    && translation_error_cm(&pose, &r.gt_pose) <= m
            }
        }
    }
}

/// A detection to be matched against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub pose: Pose,
    pub dims: BoxDims,
    pub confidence: f64,
}

/// Greedy matching by decreasing confidence: each prediction takes the
/// unmatched ground-truth box it overlaps most (IoU > 0). Returns, per
/// ground-truth box, the index of its prediction.
pub fn match_predictions(gt: &[(Pose, BoxDims)], preds: &[Prediction]) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|a, b| {
        preds[*b]
            .confidence
            .total_cmp(&preds[*a].confidence)
            .then(a.cmp(b))
    });
    let mut assigned: Vec<Option<usize>> = vec![None; gt.len()];
    for pi in order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gp, gd)) in gt.iter().enumerate() {
            if assigned[gi].is_some() {
                continue;
            }
            let iou = iou3d(&p.pose, &p.dims, gp, gd);
            if iou > 0.0 && best.map(|(_, b)| iou > b).unwrap_or(true) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            assigned[gi] = Some(pi);
        }
    }
    assigned
}

/// Fraction of ground-truth instances whose matched prediction satisfies
/// `criterion` (precision at the pipeline's single operating point).
pub fn average_precision(results: &[InstanceResult], criterion: Criterion) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::UndefinedMetric("no ground-truth instances".into()));
    }
    let tp = results.iter().filter(|r| criterion.passes(r)).count();
    Ok(tp as f64 / results.len() as f64)
}

/// Precision over parsed result rows. A row counts as a true positive when
/// its recorded errors satisfy `criterion`; unmatched rows never do.
pub fn precision_of_rows(rows: &[ResultRow], criterion: Criterion) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::UndefinedMetric("no result rows".into()));
    }
    let ok = |x: f64, t: f64| x.is_finite() && x <= t;
    let tp = rows
        .iter()
        .filter(|r| r.trace_reason != "unmatched" && r.trace_reason != "failed")
        .filter(|r| match criterion {
            Criterion::Iou(t) => r.iou3d >= t,
            Criterion::Rotation(n) => ok(r.rot_err_deg, n),
            Criterion::Translation(m) => ok(r.trans_err_cm, m),
            Criterion::PoseNm(n, m) => ok(r.rot_err_deg, n) && ok(r.trans_err_cm, m),
        })
        .count();
    Ok(tp as f64 / rows.len() as f64)
}

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scene_id: String,
    pub instance_id: u32,
    pub iou3d: f64,
    pub rot_err_deg: f64,
    pub trans_err_cm: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub trace_reason: String,
}

pub const RESULTS_HEADER: &str =
    "scene_id,instance_id,iou3d,rot_err_deg,trans_err_cm,iterations,wall_time_s,trace_reason";

impl ResultRow {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{:.6},{:.6},{:.6},{},{:.6},{}",
            self.scene_id,
            self.instance_id,
            self.iou3d,
            self.rot_err_deg,
            self.trans_err_cm,
            self.iterations,
            self.wall_time_s,
            self.trace_reason
        );
        s
    }

    pub fn parse(line: &str) -> Option<ResultRow> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 8 {
            return None;
        }
        Some(ResultRow {
            scene_id: f[0].to_string(),
            instance_id: f[1].parse().ok()?,
            iou3d: f[2].parse().ok()?,
            rot_err_deg: f[3].parse().ok()?,
            trans_err_cm: f[4].parse().ok()?,
            iterations: f[5].parse().ok()?,
            wall_time_s: f[6].parse().ok()?,
            trace_reason: f[7].to_string(),
        })
    }
}
