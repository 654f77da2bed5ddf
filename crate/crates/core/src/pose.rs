//! Point clouds, box-frame initialization, rotation hypotheses and rigid
//! registration of a cuboid template to observed surface points.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};

use crate::depthfilter::{canonical_cmp, filter_hypotheses, FilterConfig, Observation};
use crate::error::{Error, Result};
use crate::geometry::{
    box_symmetry_group, closest_point_on_box_surface, distance_to_box_surface,
    min_area_rect_direction, octahedral_group,
};
use crate::scalar::Real;
use crate::types::{
    rotation_angle, BoxDims, CameraIntrinsics, DepthImage, Hypothesis, InstanceMask, Pose,
};

/// Camera-frame points in meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let n = self.points.len().max(1) as f64;
        self.points.iter().sum::<Vector3<f64>>() / n
    }

    /// Deterministic evenly strided subset of at most `n` points.
    pub fn subsample(&self, n: usize) -> PointCloud {
        if n == 0 || self.points.len() <= n {
            return self.clone();
        }
        let step = self.points.len() as f64 / n as f64;
        PointCloud {
            points: (0..n)
                .map(|i| self.points[(i as f64 * step) as usize])
                .collect(),
        }
    }
}

/// Lifts the pixels of `instance` with valid depth to camera-frame points.
pub fn backproject(
    depth: &DepthImage,
    mask: &InstanceMask,
    instance: u8,
    k: &CameraIntrinsics,
) -> Result<PointCloud> {
    if depth.width != mask.width || depth.height != mask.height {
        return Err(Error::invalid("depth and mask sizes differ"));
    }
    let w = depth.width;
    let points: Vec<Vector3<f64>> = mask
        .data
        .iter()
        .zip(&depth.data)
        .enumerate()
        .filter(|(_, (l, z))| **l == instance && **z > 0.0)
        .map(|(i, (_, z))| {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            Vector3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, *z)
        })
        .collect();
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(PointCloud { points })
}

pub(crate) fn covariance(points: &[Vector3<f64>], c: &Vector3<f64>) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for p in points {
        let d = p - c;
        m += d * d.transpose();
    }
    m / points.len().max(1) as f64
}

/// Eigenvectors sorted by decreasing eigenvalue, as columns of a proper
/// rotation, together with the sorted eigenvalues.
pub(crate) fn sorted_eigen(cov: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let eig = SymmetricEigen::new(*cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let mut r = Matrix3::zeros();
    for (col, i) in idx.iter().enumerate() {
        r.set_column(col, &eig.eigenvectors.column(*i));
    }
    if r.determinant() < 0.0 {
        let c = -r.column(2);
        r.set_column(2, &c);
    }
    let vals = Vector3::new(
        eig.eigenvalues[idx[0]],
        eig.eigenvalues[idx[1]],
        eig.eigenvalues[idx[2]],
    );
    (r, vals)
}

struct VoxelGrid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl VoxelGrid {
    fn new(points: &[Vector3<f64>], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Indices of points within `cell` of `p`.
    fn neighbors<'a>(&'a self, points: &'a [Vector3<f64>], p: &Vector3<f64>) -> Vec<usize> {
        let (kx, ky, kz) = Self::key(p, self.cell);
        let r2 = self.cell * self.cell;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                        out.extend(
                            ids.iter()
                                .copied()
                                .filter(|i| (points[*i] - p).norm_squared() <= r2),
                        );
                    }
                }
            }
        }
        out
    }
}

/// Unit normals of locally planar neighbourhoods, for up to `max_samples`
/// evenly spaced query points.
fn surface_normals(points: &[Vector3<f64>], radius: f64, max_samples: usize) -> Vec<Vector3<f64>> {
    let grid = VoxelGrid::new(points, radius);
    let step = (points.len() / max_samples.max(1)).max(1);
    let mut normals = Vec::new();
    for p in points.iter().step_by(step) {
        let nb = grid.neighbors(points, p);
        if nb.len() < 8 {
            continue;
        }
        let pts: Vec<Vector3<f64>> = nb.iter().map(|i| points[*i]).collect();
        let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        let (r, vals) = sorted_eigen(&covariance(&pts, &c));
        // Reject edge and corner neighbourhoods.
        if vals[2] > 0.05 * vals[1] {
            continue;
        }
        normals.push(r.column(2).into_owned());
    }
    normals
}

/// Axial mode of a set of unit vectors (`n` and `-n` are the same
/// direction): the vector with the most others within `tol_rad`, refined by
/// averaging its sign-aligned neighbours. Returns the mode and its support.
fn axial_mode(normals: &[Vector3<f64>], tol_rad: f64) -> Option<(Vector3<f64>, usize)> {
    let cos_tol = tol_rad.cos();
    let mut best: Option<(usize, usize)> = None;
    for (i, n) in normals.iter().enumerate() {
        let count = normals.iter().filter(|m| n.dot(m).abs() >= cos_tol).count();
        if best.map(|(_, c)| count > c).unwrap_or(true) {
            best = Some((i, count));
        }
    }
    let (i, count) = best?;
    let seed = normals[i];
    let mut sum = Vector3::zeros();
    for m in normals {
        let d = seed.dot(m);
        if d.abs() >= cos_tol {
            sum += if d < 0.0 { -m } else { *m };
        }
    }
    Some((sum.normalize(), count))
}

/// Oriented frame of a box-shaped cloud: centroid, right-handed axes and the
/// maximum absolute projection of the points on each axis.
///
/// Axes come from the dominant surface-normal directions of the visible
/// faces; a single visible face is completed by the minimum-area rectangle of
/// the points in its plane. Without usable normals the principal axes of the
/// points are used.
pub fn obb_init(cloud: &PointCloud) -> Result<(Pose, Vector3<f64>)> {
    let pts = &cloud.points;
    if pts.len() < 10 {
        return Err(Error::invalid(format!(
            "obb_init needs at least 10 points, got {}",
            pts.len()
        )));
    }
    let c = cloud.centroid();
    let (pca, vals) = sorted_eigen(&covariance(pts, &c));
    let scale = vals[0].sqrt();
    if !(scale > 0.0) || vals[1] <= 1e-12 * vals[0].max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateCloud(
            "points are collinear or coincident".into(),
        ));
    }

    let extent = pts.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
    let radius = (extent * 0.06).clamp(0.004, 0.05);
    let normals = surface_normals(pts, radius, 1500);
    let min_support = (normals.len() / 20).max(5);

    let rotation = match axial_mode(&normals, 10f64.to_radians()) {
        Some((n1, s1)) if s1 >= min_support => {
            let sin_tol = 20f64.to_radians().sin();
            let ortho: Vec<Vector3<f64>> = normals
                .iter()
                .filter(|m| n1.dot(m).abs() < sin_tol)
                .copied()
                .collect();
            let n2 = match axial_mode(&ortho, 10f64.to_radians()) {
                Some((n2, s2)) if s2 >= min_support => Some(n2),
                _ => None,
            };
            let n2 = match n2 {
                Some(n2) => (n2 - n1 * n1.dot(&n2)).normalize(),
                None => {
                    let helper = if n1.x.abs() < 0.9 {
                        Vector3::x()
                    } else {
                        Vector3::y()
                    };
                    let b1 = (helper - n1 * n1.dot(&helper)).normalize();
                    let b2 = n1.cross(&b1);
                    let planar: Vec<Vector2<f64>> = pts
                        .iter()
                        .map(|p| Vector2::new((p - c).dot(&b1), (p - c).dot(&b2)))
                        .collect();
                    match min_area_rect_direction(&planar) {
                        Some(d) => (b1 * d.x + b2 * d.y).normalize(),
                        None => b1,
                    }
                }
            };
            let n3 = n1.cross(&n2);
            Matrix3::from_columns(&[n1, n2, n3])
        }
        _ => pca,
    };

    let mut half = Vector3::zeros();
    for p in pts {
        let local = rotation.tr_mul(&(p - c));
        for a in 0..3 {
            half[a] = f64::max(half[a], local[a].abs());
        }
    }
    Ok((Pose::from_parts(rotation, c), half))
}

/// The 24 rotations `R·g`, `g` in the cube group, sharing the frame's
/// translation, with uniform confidence.
pub fn enumerate_hypotheses(frame: &Pose) -> Vec<Hypothesis> {
    let group = octahedral_group::<f64>();
    let conf = 1.0 / group.len() as f64;
    group
        .into_iter()
        .map(|g| {
            Hypothesis::new(
                Pose::from_parts(frame.rotation * g, frame.translation),
                conf,
            )
        })
        .collect()
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]`.
pub fn kabsch<T: Real>(src: &[Vector3<T>], dst: &[Vector3<T>]) -> Result<Pose<T>> {
    if src.len() != dst.len() {
        return Err(Error::invalid("kabsch: point counts differ"));
    }
    if src.len() < 3 {
        return Err(Error::Rank);
    }
    let n = T::from_usize(src.len()).expect("count fits");
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::<T>::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    let smax = sv.max();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    if !(smax > T::zero()) || sorted[1] <= smax * T::default_epsilon() * T::lit(1e3) {
        return Err(Error::Rank);
    }
    let u = svd.u.ok_or(Error::Rank)?;
    let v_t = svd.v_t.ok_or(Error::Rank)?;
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < T::zero() {
        d[(2, 2)] = -T::one();
    }
    let r = v * d * u.transpose();
    let t = cd - r * cs;
    Ok(Pose::from_parts(r, t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Convergence threshold on the per-iteration rotation update, degrees.
    pub rot_tol_deg: f64,
    /// Convergence threshold on the per-iteration translation update, meters.
    pub trans_tol: f64,
    /// Correspondences farther than this are ignored, meters.
    pub max_correspondence_dist: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rot_tol_deg: 0.01,
            trans_tol: 1e-4,
            max_correspondence_dist: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    pub pose: Pose,
    /// RMSE of the inlier correspondences at `pose`, meters.
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn correspondences(
    cloud: &[Vector3<f64>],
    half: &Vector3<f64>,
    pose: &Pose,
    max_dist: f64,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, f64) {
    let mut src = Vec::with_capacity(cloud.len());
    let mut dst = Vec::with_capacity(cloud.len());
    let mut sq = 0.0;
    for p in cloud {
        let local = pose.inverse_transform_point(p);
        let q = closest_point_on_box_surface(&local, half);
        let d2 = (q - local).norm_squared();
        if d2 <= max_dist * max_dist {
            src.push(*p);
            dst.push(pose.transform_point(&q));
            sq += d2;
        }
    }
    let rmse = if src.is_empty() {
        f64::INFINITY
    } else {
        (sq / src.len() as f64).sqrt()
    };
    (src, dst, rmse)
}

/// Point-to-cuboid ICP. Returns the best iterate; `converged` is false when
/// the iteration budget ran out or the error kept growing.
pub fn icp_refine(
    cloud: &PointCloud,
    dims: &BoxDims,
    init: &Pose,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let half = dims.half();
    let mut pose = *init;
    let mut best = IcpResult {
        pose,
        rmse: f64::INFINITY,
        iterations: 0,
        converged: false,
    };
    let mut prev_rmse = f64::INFINITY;
    let mut increases = 0;
    for it in 0..cfg.max_iters {
        let (src, dst, rmse) =
            correspondences(&cloud.points, &half, &pose, cfg.max_correspondence_dist);
        if rmse < best.rmse {
            best = IcpResult {
                pose,
                rmse,
                iterations: it,
                converged: false,
            };
        }
        if rmse > prev_rmse {
            increases += 1;
            if increases >= 5 {
                return Ok(best);
            }
        } else {
            increases = 0;
        }
        prev_rmse = rmse;
        let delta = match kabsch(&src, &dst) {
            Ok(d) => d,
            Err(_) => return Ok(best),
        };
        let old = pose;
        pose = delta.inverse().compose(&pose);
        let dr = rotation_angle(&Matrix3::identity(), &delta.rotation).to_degrees();
        let dt = (pose.translation - old.translation).norm();
        if dr < cfg.rot_tol_deg && dt < cfg.trans_tol {
            let (_, _, rmse) =
                correspondences(&cloud.points, &half, &pose, cfg.max_correspondence_dist);
            if rmse <= best.rmse {
                best = IcpResult {
                    pose,
                    rmse,
                    iterations: it + 1,
                    converged: true,
                };
            } else {
                best.converged = true;
                best.iterations = it + 1;
            }
            return Ok(best);
        }
    }
    let (_, _, rmse) = correspondences(&cloud.points, &half, &pose, cfg.max_correspondence_dist);
    if rmse < best.rmse {
        best.pose = pose;
        best.rmse = rmse;
    }
    best.iterations = cfg.max_iters;
    Ok(best)
}

/// Fraction of cloud points within `delta` of the surface of the posed box.
pub fn score_hypothesis(h: &Hypothesis, cloud: &PointCloud, dims: &BoxDims, delta: f64) -> f64 {
    if cloud.is_empty() {
        return 0.0;
    }
    let half = dims.half();
    let inl = cloud
        .points
        .iter()
        .filter(|p| distance_to_box_surface(&h.pose.inverse_transform_point(p), &half) <= delta)
        .count();
    inl as f64 / cloud.len() as f64
}

/// Which side of the observed surface a seated box occupies along the box
/// axis closest to the viewing ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// The observed surface is the box's near face.
    Behind,
    /// The observed surface is the box's far face.
    InFront,
}

/// Axis of `rotation` closest to the viewing ray through `c`.
fn depth_axis(rotation: &Matrix3<f64>, c: &Vector3<f64>) -> usize {
    (0..3)
        .max_by(|&a, &b| {
            let da = rotation.column(a).dot(c).abs();
            let db = rotation.column(b).dot(c).abs();
            da.total_cmp(&db)
        })
        .expect("three axes")
}

/// Axis `a` of `rotation`, signed to point from `c` toward the camera.
fn toward_camera(rotation: &Matrix3<f64>, a: usize, c: &Vector3<f64>) -> Vector3<f64> {
    let u: Vector3<f64> = rotation.column(a).into();
    if u.dot(c) > 0.0 {
        -u
    } else {
        u
    }
}

fn front(cloud: &PointCloud, n: &Vector3<f64>) -> f64 {
    cloud
        .points
        .iter()
        .map(|p| n.dot(p))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Places a box of the given rotation and size so that, along each axis,
/// its face toward the camera lies on the outermost observed point. With
/// [`Side::InFront`] the box is instead pushed toward the camera along its
/// depth axis until its far face lies there.
pub fn seat(cloud: &PointCloud, rotation: &Matrix3<f64>, dims: &BoxDims, side: Side) -> Pose {
    let c = cloud.centroid();
    let half = dims.half();
    let depth = depth_axis(rotation, &c);
    let mut t = Vector3::zeros();
    for a in 0..3 {
        let n = toward_camera(rotation, a, &c);
        let f = front(cloud, &n);
        let offset = if side == Side::InFront && a == depth {
            half[a]
        } else {
            -half[a]
        };
        t += n * (f + offset);
    }
    Pose::from_parts(*rotation, t)
}

pub fn seat_on_surface(cloud: &PointCloud, rotation: &Matrix3<f64>, dims: &BoxDims) -> Pose {
    seat(cloud, rotation, dims, Side::Behind)
}

/// Side of the observed surface `pose` lies on.
pub fn side_of(cloud: &PointCloud, pose: &Pose) -> Side {
    let c = cloud.centroid();
    let a = depth_axis(&pose.rotation, &c);
    let n = toward_camera(&pose.rotation, a, &c);
    if n.dot(&pose.translation) > front(cloud, &n) {
        Side::InFront
    } else {
        Side::Behind
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseConfig {
    pub icp: IcpConfig,
    /// Points used for the per-hypothesis refinement.
    pub coarse_points: usize,
    pub coarse_iters: usize,
    /// Points used for scoring and the final refinement.
    pub final_points: usize,
    /// Inlier band of the hypothesis score, meters.
    pub score_delta: f64,
    /// Hypotheses scoring within this margin of the best are ties.
    pub tie_margin: f64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            icp: IcpConfig::default(),
            coarse_points: 300,
            coarse_iters: 15,
            final_points: 1500,
            score_delta: 0.01,
            tie_margin: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub confidence: f64,
    pub rmse: f64,
    /// Hypotheses that passed the depth filter (all of them without filter).
    pub survivors: usize,
    /// The depth filter rejected every hypothesis.
    pub fallback: bool,
}

/// Hypothesize → refine → (filter) → score → select → refine, for one
/// instance and one template size.
///
/// Hypotheses are generated around `prev` when given, else around `frame`;
/// each rotation is seated on both sides of the observed surface.
/// Among hypotheses scoring within `tie_margin` of the best, the one closest
/// in rotation to `prev` wins; without `prev` the first in canonical order.
#[allow(clippy::too_many_arguments)]
pub fn estimate_pose(
    cloud: &PointCloud,
    frame: &Pose,
    dims: &BoxDims,
    prev: Option<&Pose>,
    obs: &Observation<'_>,
    filter: Option<&FilterConfig>,
    cfg: &PoseConfig,
) -> Result<PoseEstimate> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let base = prev.unwrap_or(frame);
    let coarse = cloud.subsample(cfg.coarse_points);
    let coarse_cfg = IcpConfig {
        max_iters: cfg.coarse_iters,
        ..cfg.icp
    };
    let mut hs = Vec::with_capacity(48);
    for h in enumerate_hypotheses(base) {
        for side in [Side::Behind, Side::InFront] {
            let seated = seat(cloud, &h.pose.rotation, dims, side);
            let r = icp_refine(&coarse, dims, &seated, &coarse_cfg)?;
            hs.push(Hypothesis::new(r.pose, h.confidence));
        }
    }

    let (mut survivors, fallback) = match filter {
        Some(fc) => {
            let kept = filter_hypotheses(&hs, dims, obs, fc)?;
            let fb = kept.len() == 1 && kept[0].fallback;
            (kept, fb)
        }
        None => (hs, false),
    };
    let fine = cloud.subsample(cfg.final_points);
    for h in &mut survivors {
        h.confidence = score_hypothesis(h, &fine, dims, cfg.score_delta);
    }
    survivors.sort_by(canonical_cmp);
    let n_surv = survivors.len();
    let best_score = survivors[0].confidence;
    let tied = survivors
        .iter()
        .filter(|h| h.confidence >= best_score - cfg.tie_margin);
    let chosen = match prev {
        Some(p) => tied
            .min_by(|a, b| {
                rotation_angle(&a.pose.rotation, &p.rotation)
                    .total_cmp(&rotation_angle(&b.pose.rotation, &p.rotation))
            })
            .expect("nonempty"),
        None => tied.into_iter().next().expect("nonempty"),
    }
    .clone();

    let mut r = icp_refine(&fine, dims, &chosen.pose, &cfg.icp)?;
    if let Some(p) = prev {
        // Same solid, axes labeled consistently with the previous estimate.
        r.pose.rotation = box_symmetry_group::<f64>(dims, 1e-9)
            .iter()
            .map(|g| r.pose.rotation * g)
            .min_by(|a, b| {
                rotation_angle(a, &p.rotation).total_cmp(&rotation_angle(b, &p.rotation))
            })
            .expect("group has the identity");
    }
    let confidence = score_hypothesis(&Hypothesis::new(r.pose, 1.0), &fine, dims, cfg.score_delta);
    Ok(PoseEstimate {
        pose: r.pose,
        confidence,
        rmse: r.rmse,
        survivors: n_surv,
        fallback,
    })
}
