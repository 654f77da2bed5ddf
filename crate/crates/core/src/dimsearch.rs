//! Per-axis scale search of the box template.
//!
//! Each iteration refreshes the pose for the current template size, renders
//! it, and compares rendered and observed measurements per axis. An axis is
//! measured by its silhouette extent in pixels when its image direction is
//! usable, by the span of visible depth otherwise, and is frozen when neither
//! carries signal.
//!
//! Silhouette extents along the projected axes mix the three scales in
//! oblique views, so the per-axis decision uses decoupled residuals
//! `J^-1 (m_obs - m_cad)`, with `J` the sensitivity of an analytic
//! measurement model to the scale. For a fronto-parallel box `J` is diagonal
//! and the decision reduces to the sign of `e_obs - e_cad`.

use std::fmt;
use std::time::Instant;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::depthfilter::Observation;
use crate::error::{Error, Result};
use crate::geometry::{box_faces, box_vertices, convex_hull_2d, vertex_sign};
use crate::pose::backproject;
use crate::render::{axis_directions, extents_along, project_point, rasterize_box};
use crate::types::{
    rotation_angle, scaled_template, BoxDims, CameraIntrinsics, Pose, ScaleInterval, ScaleVec,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub tau_px: f64,
    pub tau_scale: f64,
    pub t_max: usize,
    pub bounds_init: ScaleInterval,
    pub early_stop_enabled: bool,
    /// Degrees.
    pub vertex_align_tol: f64,
    /// Degrees between an axis and the viewing ray below which its image
    /// extent is ignored.
    pub unobservable_angle: f64,
    /// Largest condition number of the pixel-extent sensitivity before the
    /// most ray-aligned axis is measured by depth instead.
    pub max_extent_condition: f64,
    /// Iterations before early stopping may fire.
    pub min_search_iters: usize,
    /// Refresh the pose by local refinement from the previous one instead of
    /// re-running hypothesis selection.
    pub warm_start: bool,
    /// Tail fraction trimmed on each side of depth spans.
    pub span_percentile: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            tau_px: 10.0,
            tau_scale: 0.01,
            t_max: 20,
            bounds_init: ScaleInterval::uniform(0.05, 2.0).expect("valid"),
            early_stop_enabled: true,
            vertex_align_tol: 5.0,
            unobservable_angle: 5.0,
            max_extent_condition: 10.0,
            min_search_iters: 2,
            warm_start: false,
            span_percentile: 0.01,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_px > 0.0 && self.tau_px.is_finite()) {
            return Err(Error::config("search.tau_px", "must be positive"));
        }
        if !(self.tau_scale > 0.0 && self.tau_scale.is_finite()) {
            return Err(Error::config("search.tau_scale", "must be positive"));
        }
        if self.t_max == 0 {
            return Err(Error::config("search.t_max", "must be at least 1"));
        }
        ScaleInterval::new(self.bounds_init.lo, self.bounds_init.hi)
            .map_err(|e| Error::config("search.bounds", e.to_string()))?;
        if !(self.vertex_align_tol > 0.0) {
            return Err(Error::config("search.vertex_align_tol", "must be positive"));
        }
        if !(0.0..90.0).contains(&self.unobservable_angle) {
            return Err(Error::config(
                "search.unobservable_angle",
                "must be in [0, 90)",
            ));
        }
        if !(self.max_extent_condition >= 1.0) {
            return Err(Error::config("search.max_extent_condition", "must be >= 1"));
        }
        if !(0.0..0.5).contains(&self.span_percentile) {
            return Err(Error::config(
                "search.span_percentile",
                "must be in [0, 0.5)",
            ));
        }
        Ok(())
    }
}

/// How an axis is measured in one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    /// Silhouette extent along the axis's image direction.
    Pixel,
    /// Extent of the back-projected surface along the axis, in pixels at
    /// the median observed depth.
    DepthSpan,
    Frozen,
}

impl AxisKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AxisKind::Pixel => "pixel",
            AxisKind::DepthSpan => "depth",
            AxisKind::Frozen => "frozen",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// Rendered box too small: raise the lower bound.
    Grow,
    /// Rendered box too large or exact: lower the upper bound.
    Shrink,
    Hold,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Grow => "grow",
            Decision::Shrink => "shrink",
            Decision::Hold => "hold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    ExtentConverged,
    IntervalConverged,
    MaxIters,
    EarlyStopped,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::ExtentConverged => "extent-converged",
            StopReason::IntervalConverged => "interval-converged",
            StopReason::MaxIters => "max-iters",
            StopReason::EarlyStopped => "early-stopped",
        })
    }
}

/// One iteration. Measurements are in pixels; depth spans are converted
/// with the focal length at the box center.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub scale: Vector3<f64>,
    pub pose: Pose,
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
    pub e_cad: Vector3<f64>,
    pub e_obs: Vector3<f64>,
    pub kinds: [AxisKind; 3],
    pub decisions: [Decision; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchTrace {
    pub records: Vec<IterationRecord>,
    pub reason: Option<StopReason>,
    pub iterations_used: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub scale: ScaleVec,
    pub pose: Pose,
    pub trace: SearchTrace,
}

#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct SearchFailure {
    #[source]
    pub error: Error,
    pub trace: SearchTrace,
}

/// Pose provider for a given template size.
pub trait PoseSource {
    fn estimate(&mut self, dims: &BoxDims, prev: Option<&Pose>) -> Result<Pose>;

    /// Cheap refresh after an early-stop rescale.
    fn refresh(&mut self, dims: &BoxDims, pose: &Pose) -> Result<Pose> {
        self.estimate(dims, Some(pose))
    }
}

impl<F> PoseSource for F
where
    F: FnMut(&BoxDims, Option<&Pose>) -> Result<Pose>,
{
    fn estimate(&mut self, dims: &BoxDims, prev: Option<&Pose>) -> Result<Pose> {
        self(dims, prev)
    }
}

/// Per-axis extents: `s'_a = s_a * e_obs_a / e_cad_a` on observable axes.
pub fn proportional_update(
    s: &ScaleVec,
    e_obs: &crate::render::AxisExtents,
    e_cad: &crate::render::AxisExtents,
) -> Result<ScaleVec> {
    let mut out = *s.as_vector();
    for a in 0..3 {
        if !e_cad.observable[a] {
            continue;
        }
        if !(e_cad.e[a] > 0.0) {
            return Err(Error::DegenerateExtent { axis: a });
        }
        out[a] *= e_obs.e[a] / e_cad.e[a];
    }
    ScaleVec::from_vector(out)
}

fn nearest_vertex(pose: &Pose, dims: &BoxDims) -> usize {
    let v = box_vertices(pose, dims);
    (0..8)
        .min_by(|a, b| v[*a].norm_squared().total_cmp(&v[*b].norm_squared()))
        .expect("eight vertices")
}

/// Observed silhouette boundary as maximal straight hull chains: runs of
/// hull vertices within `max_dev` pixels of their chord. Returned as
/// (direction, length) pairs.
fn hull_chains(hull: &[Vector2<f64>], max_dev: f64) -> Vec<(Vector2<f64>, f64)> {
    let n = hull.len();
    if n < 2 {
        return Vec::new();
    }
    // Start at the sharpest corner so no straight run wraps around.
    let turn = |i: usize| {
        let a = hull[i] - hull[(i + n - 1) % n];
        let b = hull[(i + 1) % n] - hull[i];
        a.angle(&b)
    };
    let first = (0..n)
        .max_by(|a, b| turn(*a).total_cmp(&turn(*b)))
        .expect("nonempty");
    let pts: Vec<Vector2<f64>> = (0..=n).map(|i| hull[(first + i) % n]).collect();
    let straight = |s: usize, e: usize| {
        let chord = pts[e] - pts[s];
        let len = chord.norm();
        len > 0.0
            && pts[s + 1..e].iter().all(|p| {
                let d = p - pts[s];
                (chord.x * d.y - chord.y * d.x).abs() / len <= max_dev
            })
    };
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && straight(start, end + 1) {
            end += 1;
        }
        let chord = pts[end] - pts[start];
        let len = chord.norm();
        if len > 0.0 {
            out.push((chord / len, len));
        }
        start = end;
    }
    out
}

fn silhouette_hull(obs: &Observation<'_>) -> Vec<Vector2<f64>> {
    let w = obs.mask.width;
    let mut pts = Vec::new();
    for v in 0..obs.mask.height {
        let row = &obs.mask.data[v * w..(v + 1) * w];
        let first = row.iter().position(|l| *l == obs.instance);
        let last = row.iter().rposition(|l| *l == obs.instance);
        if let (Some(a), Some(b)) = (first, last) {
            pts.push(Vector2::new(a as f64, v as f64));
            if b != a {
                pts.push(Vector2::new(b as f64, v as f64));
            }
        }
    }
    convex_hull_2d(&pts)
}

/// Shortest silhouette edge used by the alignment test, pixels.
pub const MIN_EDGE_PX: f64 = 20.0;
/// Largest distance of a hull vertex from the straight edge it belongs to.
const CHAIN_DEVIATION_PX: f64 = 1.0;

/// Rotation has settled between consecutive refreshes and the projected box
/// edges at the vertex nearest the camera line up with straight edges of the
/// observed silhouette.
pub fn axes_aligned_around_vertex(
    dims: &BoxDims,
    pose: &Pose,
    prev_pose: &Pose,
    obs: &Observation<'_>,
    tol_deg: f64,
) -> bool {
    aligned_on_hull(
        dims,
        pose,
        prev_pose,
        &silhouette_hull(obs),
        obs.camera,
        tol_deg,
    )
}

fn aligned_on_hull(
    dims: &BoxDims,
    pose: &Pose,
    prev_pose: &Pose,
    hull: &[Vector2<f64>],
    camera: &CameraIntrinsics,
    tol_deg: f64,
) -> bool {
    let tol = tol_deg.to_radians();
    if rotation_angle(&pose.rotation, &prev_pose.rotation) >= tol {
        return false;
    }
    let chains: Vec<Vector2<f64>> = hull_chains(hull, CHAIN_DEVIATION_PX)
        .into_iter()
        .filter(|(_, len)| *len >= MIN_EDGE_PX)
        .map(|(d, _)| d)
        .collect();
    let verts = box_vertices(pose, dims);
    let Ok(proj) = verts
        .iter()
        .map(|p| project_point(camera, p))
        .collect::<Result<Vec<_>>>()
    else {
        return false;
    };
    let v0 = nearest_vertex(pose, dims);
    let mut checked = 0;
    for a in 0..3 {
        let edge = proj[v0 ^ (1 << a)] - proj[v0];
        if edge.norm() < 1e-9 {
            continue;
        }
        // Expected length of the observed edge: the template edge shrunk by
        // the observed-to-template extent ratio along its direction.
        let dir = edge / edge.norm();
        let span = |xs: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| {
                (l.min(x), h.max(x))
            });
            hi - lo
        };
        let template = span(&mut proj.iter().map(|p| p.dot(&dir)));
        let observed = span(&mut hull.iter().map(|p| p.dot(&dir)));
        if edge.norm() * (observed / template).min(1.0) < MIN_EDGE_PX {
            continue;
        }
        checked += 1;
        // The four edges parallel to axis a converge under perspective, so
        // any of them may be the one on the silhouette.
        let aligned = (0..8).filter(|i| i & (1 << a) == 0).any(|i| {
            let e = proj[i | (1 << a)] - proj[i];
            e.norm() >= 1e-9
                && chains.iter().any(|c| {
                    let cos = (c.dot(&e) / e.norm()).abs().min(1.0);
                    cos.acos() < tol
                })
        });
        if !aligned {
            return false;
        }
    }
    checked >= 2
}

fn percentile_span(values: &mut [f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len();
    let k = ((p * n as f64).floor() as usize).min(n - 1);
    let (lo, hi) = (k.min(n - 1 - k), k.max(n - 1 - k));
    let (_, &mut top, _) = values.select_nth_unstable_by(hi, f64::total_cmp);
    let (_, &mut bottom, _) = values[..=hi].select_nth_unstable_by(lo, f64::total_cmp);
    (top - bottom).abs()
}

/// Analytic measurement model around one pose. The template grows away from
/// the camera with the nearest vertex fixed, which is where surface
/// registration places a resized box. Depth rows are multiplied by
/// `depth_gain`, the ratio of the trimmed rendered span to the vertex span.
/// Only vertices of camera-facing faces count towards a span.
struct Model<'a> {
    rotation: Matrix3<f64>,
    anchor: Vector3<f64>,
    signs: Vector3<f64>,
    visible: [bool; 8],
    dirs: [Vector2<f64>; 3],
    depth_to_px: f64,
    depth_gain: f64,
    camera: &'a CameraIntrinsics,
}

impl<'a> Model<'a> {
    fn new(
        pose: &Pose,
        dims: &BoxDims,
        dirs: [Vector2<f64>; 3],
        depth_to_px: f64,
        camera: &'a CameraIntrinsics,
    ) -> Self {
        let v0 = nearest_vertex(pose, dims);
        let signs = Vector3::from_fn(|a, _| 2.0 * vertex_sign(v0, a));
        let verts = box_vertices(pose, dims);
        let mut visible = [false; 8];
        for f in box_faces() {
            let s = if f.positive { 1.0 } else { -1.0 };
            let n = pose.axis(f.axis) * s;
            if n.dot(&verts[f.corners[0]]) < 0.0 {
                for c in f.corners {
                    visible[c] = true;
                }
            }
        }
        Self {
            rotation: pose.rotation,
            anchor: verts[v0],
            signs,
            visible,
            dirs,
            depth_to_px,
            depth_gain: 1.0,
            camera,
        }
    }

    fn pose_for(&self, s: &Vector3<f64>) -> Pose {
        let t = self.anchor - self.rotation * (self.signs.component_mul(s) * 0.5);
        Pose::from_parts(self.rotation, t)
    }

    fn vertex_span(&self, verts: &[Vector3<f64>; 8], a: usize) -> f64 {
        let axis: Vector3<f64> = self.rotation.column(a).into();
        let xs = verts
            .iter()
            .zip(self.visible)
            .filter(|(_, v)| *v)
            .map(|(p, _)| p.dot(&axis));
        let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| {
            (l.min(x), h.max(x))
        });
        (hi - lo) * self.depth_to_px
    }

    fn measure(&self, s: &Vector3<f64>, kinds: &[AxisKind; 3]) -> Option<Vector3<f64>> {
        let dims = BoxDims::from_vector(*s).ok()?;
        let verts = box_vertices(&self.pose_for(s), &dims);
        let mut m = Vector3::zeros();
        for a in 0..3 {
            m[a] = match kinds[a] {
                AxisKind::Pixel => {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for p in &verts {
                        let x = project_point(self.camera, p).ok()?.dot(&self.dirs[a]);
                        lo = lo.min(x);
                        hi = hi.max(x);
                    }
                    hi - lo
                }
                AxisKind::DepthSpan => self.depth_gain * self.vertex_span(&verts, a),
                AxisKind::Frozen => s[a],
            };
        }
        Some(m)
    }

    fn jacobian(&self, s: &Vector3<f64>, kinds: &[AxisKind; 3]) -> Option<Matrix3<f64>> {
        let mut j = Matrix3::zeros();
        for b in 0..3 {
            let h = 1e-4 * s[b].max(1e-3);
            let mut sp = *s;
            let mut sm = *s;
            sp[b] += h;
            sm[b] -= h;
            let d = (self.measure(&sp, kinds)? - self.measure(&sm, kinds)?) / (2.0 * h);
            j.set_column(b, &d);
        }
        Some(j)
    }
}

fn condition(m: &Matrix3<f64>) -> f64 {
    let sv = m.singular_values();
    let (mx, mn) = sv
        .iter()
        .fold((0.0f64, f64::INFINITY), |(a, b), v| (a.max(*v), b.min(*v)));
    if mn <= 0.0 {
        f64::INFINITY
    } else {
        mx / mn
    }
}

/// Chooses a measurement per axis for the current pose.
fn axis_kinds(
    pose: &Pose,
    model: &Model<'_>,
    dims: &BoxDims,
    observable: [bool; 3],
    cfg: &SearchConfig,
) -> [AxisKind; 3] {
    let ray = pose.translation.normalize();
    let alignment = |a: usize| pose.axis(a).dot(&ray).abs();
    let mut kinds = [AxisKind::Pixel; 3];
    let mut depth_used = false;
    let mut hidden: Vec<usize> = (0..3).filter(|a| !observable[*a]).collect();
    hidden.sort_by(|a, b| alignment(*b).total_cmp(&alignment(*a)));
    for a in hidden {
        kinds[a] = if depth_used {
            AxisKind::Frozen
        } else {
            depth_used = true;
            AxisKind::DepthSpan
        };
    }
    if kinds.iter().all(|k| *k == AxisKind::Pixel) {
        let ok = model
            .jacobian(dims.as_vector(), &kinds)
            .map(|j| condition(&j) <= cfg.max_extent_condition)
            .unwrap_or(false);
        if !ok {
            let a = (0..3)
                .max_by(|a, b| alignment(*a).total_cmp(&alignment(*b)))
                .expect("three axes");
            kinds[a] = AxisKind::DepthSpan;
        }
    }
    kinds
}

/// Quantities of the observed instance that do not change during a search.
struct Observed<'a> {
    obs: Observation<'a>,
    /// Convex hull of the instance pixels.
    hull: Vec<Vector2<f64>>,
    /// Back-projected instance pixels.
    points: Vec<Vector3<f64>>,
    /// Pixels per meter of depth at the median observed depth.
    depth_to_px: f64,
}

impl<'a> Observed<'a> {
    fn new(obs: Observation<'a>) -> Result<Self> {
        let hull = silhouette_hull(&obs);
        if hull.is_empty() {
            return Err(Error::EmptyMask);
        }
        let points = backproject(obs.depth, obs.mask, obs.instance, obs.camera)?.points;
        let mut z: Vec<f64> = points.iter().map(|p| p.z).collect();
        if z.is_empty() {
            return Err(Error::EmptyMask);
        }
        let mid = z.len() / 2;
        let (_, med, _) = z.select_nth_unstable_by(mid, f64::total_cmp);
        let depth_to_px = 0.5 * (obs.camera.fx + obs.camera.fy) / *med;
        Ok(Self {
            obs,
            hull,
            points,
            depth_to_px,
        })
    }
}

/// Span of `pts` along each direction.
fn extents_of(pts: &[Vector2<f64>], dirs: &[Vector2<f64>; 3]) -> Vector3<f64> {
    Vector3::from_fn(|a, _| {
        let (lo, hi) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| {
                let s = p.x * dirs[a].x + p.y * dirs[a].y;
                (l.min(s), h.max(s))
            });
        hi - lo
    })
}

fn select(kinds: &[AxisKind; 3], px: &Vector3<f64>, spans: &Vector3<f64>) -> Vector3<f64> {
    Vector3::from_fn(|a, _| match kinds[a] {
        AxisKind::Pixel => px[a],
        AxisKind::DepthSpan => spans[a],
        AxisKind::Frozen => 0.0,
    })
}

/// Trimmed extents of `points` along the columns of `rotation`, scaled to
/// pixels.
/// Only the `DepthSpan` axes of `kinds` are measured, the rest are zero.
fn surface_spans(
    points: &[Vector3<f64>],
    rotation: &Matrix3<f64>,
    kinds: &[AxisKind; 3],
    depth_to_px: f64,
    p: f64,
) -> Vector3<f64> {
    Vector3::from_fn(|a, _| {
        if kinds[a] != AxisKind::DepthSpan {
            return 0.0;
        }
        let axis: Vector3<f64> = rotation.column(a).into();
        let mut x: Vec<f64> = points.iter().map(|q| q.dot(&axis)).collect();
        percentile_span(&mut x, p) * depth_to_px
    })
}

/// Silhouette extents along `dirs` and trimmed surface spans of the
/// rendered template.
fn rendered(
    pose: &Pose,
    s: &Vector3<f64>,
    dirs: &[Vector2<f64>; 3],
    kinds: &[AxisKind; 3],
    depth_to_px: f64,
    obs: &Observation<'_>,
    cfg: &SearchConfig,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let raster = rasterize_box(&BoxDims::from_vector(*s)?, pose, obs.camera)?;
    // Row endpoints carry the extremes of any linear function of the pixels.
    let ends = raster.row_bounds().flat_map(|(v, a, b)| [(a, v), (b, v)]);
    let px = extents_along(ends, dirs).unwrap_or_else(Vector3::zeros);
    let k = obs.camera;
    if !kinds.contains(&AxisKind::DepthSpan) {
        return Ok((px, Vector3::zeros()));
    }
    let pts: Vec<Vector3<f64>> = raster
        .covered()
        .map(|(u, v, z)| {
            Vector3::new(
                (u as f64 - k.cx) * z / k.fx,
                (v as f64 - k.cy) * z / k.fy,
                z,
            )
        })
        .collect();
    let spans = surface_spans(
        &pts,
        &pose.rotation,
        kinds,
        depth_to_px,
        cfg.span_percentile,
    );
    Ok((px, spans))
}

struct Measurement {
    kinds: [AxisKind; 3],
    dirs: [Vector2<f64>; 3],
    depth_to_px: f64,
    depth_gain: f64,
    e_cad: Vector3<f64>,
    e_obs: Vector3<f64>,
    /// Decoupled scale residual per axis.
    delta: Vector3<f64>,
}

fn measure(
    pose: &Pose,
    s: &Vector3<f64>,
    seen: &Observed<'_>,
    cfg: &SearchConfig,
) -> Result<Measurement> {
    let obs = &seen.obs;
    let dims = BoxDims::from_vector(*s)?;
    let (dirs, observable) = axis_directions(pose, &dims, obs.camera, cfg.unobservable_angle)?;
    let to_px = seen.depth_to_px;
    let mut model = Model::new(pose, &dims, dirs, to_px, obs.camera);
    let mut kinds = axis_kinds(pose, &model, &dims, observable, cfg);

    let (cad_px, cad_spans) = rendered(pose, s, &dirs, &kinds, to_px, obs, cfg)?;
    let obs_px = extents_of(&seen.hull, &dirs);
    let obs_spans = surface_spans(
        &seen.points,
        &pose.rotation,
        &kinds,
        to_px,
        cfg.span_percentile,
    );
    if let Some(a) = kinds.iter().position(|k| *k == AxisKind::DepthSpan) {
        let vspan = model.vertex_span(&box_vertices(pose, &dims), a);
        if vspan > 0.0 && cad_spans[a] > 0.0 {
            model.depth_gain = cad_spans[a] / vspan;
        }
    }

    let mut j = model.jacobian(s, &kinds);
    if j.is_some_and(|j| j.try_inverse().is_none()) {
        // A face-on box has no depth span to drive its depth axis.
        for k in kinds.iter_mut() {
            if *k == AxisKind::DepthSpan {
                *k = AxisKind::Frozen;
            }
        }
        j = model.jacobian(s, &kinds);
    }
    let inv = j.and_then(|j| j.try_inverse());
    if inv.is_none() {
        kinds = [AxisKind::Frozen; 3];
    }
    let e_cad = select(&kinds, &cad_px, &cad_spans);
    let e_obs = select(&kinds, &obs_px, &obs_spans);
    let delta = inv
        .map(|inv| inv * (e_obs - e_cad))
        .unwrap_or_else(Vector3::zeros);
    Ok(Measurement {
        kinds,
        dirs,
        depth_to_px: to_px,
        depth_gain: model.depth_gain,
        e_cad,
        e_obs,
        delta,
    })
}

/// Rescales the template at the current pose until its rendering matches
/// the observation, starting from one decoupled proportional step. Returns
/// the scale and the pose keeping the nearest vertex in place.
fn rescale(
    pose: &Pose,
    s: &Vector3<f64>,
    m: &Measurement,
    seen: &Observed<'_>,
    cfg: &SearchConfig,
) -> Result<(ScaleVec, Pose)> {
    let obs = &seen.obs;
    let dims = BoxDims::from_vector(*s)?;
    let mut model = Model::new(pose, &dims, m.dirs, m.depth_to_px, obs.camera);
    model.depth_gain = m.depth_gain;
    let observable = [0, 1, 2].map(|a| m.kinds[a] != AxisKind::Frozen);
    let as_extents = |e: Vector3<f64>| crate::render::AxisExtents {
        e,
        observable,
        dirs: m.dirs,
    };
    // Decoupled extents in scale units: the rendered box measures `s`, the
    // observation `s + delta`.
    let mut next = *proportional_update(
        &ScaleVec::from_vector(*s)?,
        &as_extents(s + m.delta),
        &as_extents(*s),
    )?
    .as_vector();
    let (lo, hi) = (cfg.bounds_init.lo, cfg.bounds_init.hi);
    next = next.zip_zip_map(&lo, &hi, |x, l, h| x.clamp(l, h));
    for _ in 0..RESCALE_STEPS {
        let (px, spans) = rendered(
            &model.pose_for(&next),
            &next,
            &m.dirs,
            &m.kinds,
            m.depth_to_px,
            obs,
            cfg,
        )?;
        let r = m.e_obs - select(&m.kinds, &px, &spans);
        if r.amax() <= RESCALE_TOL_PX {
            break;
        }
        let Some(inv) = model
            .jacobian(&next, &m.kinds)
            .and_then(|j| j.try_inverse())
        else {
            break;
        };
        next = (next + inv * r).zip_zip_map(&lo, &hi, |x, l, h| x.clamp(l, h));
    }
    Ok((ScaleVec::from_vector(next)?, model.pose_for(&next)))
}

const RESCALE_STEPS: usize = 6;
const SETTLE_ROUNDS: usize = 3;
const SETTLE_TOL: f64 = 1e-3;

/// Early-stop tail: rescale at the current pose, refresh the pose at the new
/// scale, and repeat while the refresh moves the scale.
fn settle<P: PoseSource + ?Sized>(
    poses: &mut P,
    mut pose: Pose,
    mut s: Vector3<f64>,
    mut m: Measurement,
    seen: &Observed<'_>,
    cfg: &SearchConfig,
) -> Result<(Vector3<f64>, Pose)> {
    for round in 0..SETTLE_ROUNDS {
        let (next, anchored) = rescale(&pose, &s, &m, seen, cfg)?;
        let next = *next.as_vector();
        pose = poses.refresh(&scaled_template(&ScaleVec::from_vector(next)?), &anchored)?;
        let moved = (next - s).amax();
        s = next;
        if moved < SETTLE_TOL || round + 1 == SETTLE_ROUNDS {
            break;
        }
        m = measure(&pose, &s, seen, cfg)?;
    }
    Ok((s, pose))
}
const RESCALE_TOL_PX: f64 = 0.5;

fn fail(error: Error, mut trace: SearchTrace, start: Instant) -> SearchFailure {
    trace.wall_time_s = start.elapsed().as_secs_f64();
    SearchFailure { error, trace }
}

/// Binary search over the template scale, with optional early stopping by a
/// single proportional rescale once the pose is stable and vertex-aligned.
pub fn estimate_dimensions<P: PoseSource + ?Sized>(
    obs: &Observation<'_>,
    poses: &mut P,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchFailure> {
    let start = Instant::now();
    let mut trace = SearchTrace::default();
    if let Err(e) = cfg.validate() {
        return Err(fail(e, trace, start));
    }
    let seen = match Observed::new(*obs) {
        Ok(o) => o,
        Err(e) => return Err(fail(e, trace, start)),
    };
    let mut lo = cfg.bounds_init.lo;
    let mut hi = cfg.bounds_init.hi;
    let mut s = Vector3::<f64>::repeat(1.0).zip_zip_map(&lo, &hi, |x, l, h| x.clamp(l, h));
    let mut prev: Option<Pose> = None;

    for t in 1..=cfg.t_max {
        let dims = scaled_template(&ScaleVec::from_vector(s).expect("positive scale"));
        let pose = match poses.estimate(&dims, prev.as_ref()) {
            Ok(p) => p,
            Err(e) => return Err(fail(e, trace, start)),
        };
        let m = match measure(&pose, &s, &seen, cfg) {
            Ok(m) => m,
            Err(e) => return Err(fail(e, trace, start)),
        };
        let decisions: [Decision; 3] = std::array::from_fn(|a| match m.kinds[a] {
            AxisKind::Frozen => Decision::Hold,
            _ if m.delta[a] > 0.0 => Decision::Grow,
            _ => Decision::Shrink,
        });
        trace.records.push(IterationRecord {
            scale: s,
            pose,
            lo,
            hi,
            e_cad: m.e_cad,
            e_obs: m.e_obs,
            kinds: m.kinds,
            decisions,
        });
        trace.iterations_used = t;
        let finish = |reason, s: Vector3<f64>, pose, mut trace: SearchTrace| {
            trace.reason = Some(reason);
            trace.wall_time_s = start.elapsed().as_secs_f64();
            Ok(SearchOutcome {
                scale: ScaleVec::from_vector(s).expect("positive scale"),
                pose,
                trace,
            })
        };

        let active: Vec<usize> = (0..3).filter(|a| m.kinds[*a] != AxisKind::Frozen).collect();
        if active
            .iter()
            .all(|a| (m.e_obs[*a] - m.e_cad[*a]).abs() <= cfg.tau_px)
        {
            return finish(StopReason::ExtentConverged, s, pose, trace);
        }

        if cfg.early_stop_enabled && t >= cfg.min_search_iters {
            if let Some(p) = &prev {
                if aligned_on_hull(
                    &dims,
                    &pose,
                    p,
                    &seen.hull,
                    obs.camera,
                    cfg.vertex_align_tol,
                ) {
                    return match settle(poses, pose, s, m, &seen, cfg) {
                        Ok((next, refreshed)) => {
                            finish(StopReason::EarlyStopped, next, refreshed, trace)
                        }
                        Err(e) => Err(fail(e, trace, start)),
                    };
                }
            }
        }

        for &a in &active {
            match decisions[a] {
                Decision::Grow => lo[a] = s[a].max(lo[a]),
                Decision::Shrink => hi[a] = s[a].min(hi[a]),
                Decision::Hold => {}
            }
        }
        if active.iter().all(|a| hi[*a] - lo[*a] < cfg.tau_scale) {
            return finish(StopReason::IntervalConverged, s, pose, trace);
        }
        for &a in &active {
            s[a] = 0.5 * (lo[a] + hi[a]);
        }
        prev = Some(pose);
        if t == cfg.t_max {
            let last = trace.records.last().expect("recorded");
            let (s_last, pose_last) = (last.scale, last.pose);
            return finish(StopReason::MaxIters, s_last, pose_last, trace);
        }
    }
    unreachable!("loop returns by t_max")
}

/// Plain binary search: [`estimate_dimensions`] with early stopping off.
pub fn binary_search_dims<P: PoseSource + ?Sized>(
    obs: &Observation<'_>,
    poses: &mut P,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchFailure> {
    let cfg = SearchConfig {
        early_stop_enabled: false,
        ..*cfg
    };
    estimate_dimensions(obs, poses, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{render_view, AxisExtents};
    use crate::types::{CameraIntrinsics, DepthImage, InstanceMask};
    use nalgebra::Rotation3;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 319.5, 239.5, 640, 480).unwrap()
    }

    struct Fixture {
        depth: DepthImage,
        mask: InstanceMask,
        cam: CameraIntrinsics,
        pose: Pose,
    }

    impl Fixture {
        fn new(dims: &BoxDims, pose: Pose) -> Self {
            let cam = k();
            let v = render_view(dims, &pose, &cam).unwrap();
            Self {
                depth: v.depth,
                mask: v.mask,
                cam,
                pose,
            }
        }

        fn obs(&self) -> Observation<'_> {
            Observation {
                depth: &self.depth,
                mask: &self.mask,
                instance: 1,
                camera: &self.cam,
            }
        }
    }

    /// Oracle pose source: exact gt rotation, box placed with its nearest
    /// vertex on the true one, as surface registration would.
    fn oracle(
        gt_pose: Pose,
        gt_dims: BoxDims,
    ) -> impl FnMut(&BoxDims, Option<&Pose>) -> Result<Pose> {
        let v0 = nearest_vertex(&gt_pose, &gt_dims);
        let anchor = box_vertices(&gt_pose, &gt_dims)[v0];
        move |d: &BoxDims, _| {
            let signs = Vector3::from_fn(|a, _| 2.0 * vertex_sign(v0, a));
            let t = anchor - gt_pose.rotation * (signs.component_mul(d.as_vector()) * 0.5);
            Ok(Pose::from_parts(gt_pose.rotation, t))
        }
    }

    fn tilted(z: f64) -> Pose {
        let r = Rotation3::from_euler_angles(0.35, 0.5, 0.1);
        Pose::new(*r.matrix(), Vector3::new(0.02, -0.01, z)).unwrap()
    }

    fn frontal(z: f64) -> Pose {
        Pose::from_translation(Vector3::new(0.0, 0.0, z))
    }

    #[test]
    fn proportional_update_examples() {
        let s = ScaleVec::new(0.5, 1.0, 2.0).unwrap();
        let e = |x: [f64; 3]| AxisExtents {
            e: Vector3::from(x),
            observable: [true, true, false],
            dirs: [Vector2::x(); 3],
        };
        assert_eq!(
            proportional_update(&s, &e([10.0, 20.0, 5.0]), &e([10.0, 20.0, 1.0])).unwrap(),
            s
        );
        let d = proportional_update(&s, &e([20.0, 40.0, 5.0]), &e([10.0, 20.0, 1.0])).unwrap();
        assert_eq!(*d.as_vector(), Vector3::new(1.0, 2.0, 2.0));
        assert!(matches!(
            proportional_update(&s, &e([1.0, 1.0, 1.0]), &e([0.0, 1.0, 1.0])),
            Err(Error::DegenerateExtent { axis: 0 })
        ));
    }

    #[test]
    fn unit_target_converges_immediately() {
        let dims = BoxDims::new(1.0, 1.0, 1.0).unwrap();
        let f = Fixture::new(&dims, tilted(4.0));
        let mut src = oracle(f.pose, dims);
        let out = estimate_dimensions(&f.obs(), &mut src, &SearchConfig::default()).unwrap();
        assert_eq!(out.trace.reason, Some(StopReason::ExtentConverged));
        assert_eq!(out.trace.iterations_used, 1);
    }

    #[test]
    fn frontal_half_scale_binary_search() {
        let dims = BoxDims::new(0.5, 0.5, 0.5).unwrap();
        let f = Fixture::new(
            &dims,
            Pose::new(
                *Rotation3::from_euler_angles(0.3, 0.0, 0.0).matrix(),
                Vector3::new(0.0, 0.0, 2.5),
            )
            .unwrap(),
        );
        let mut src = oracle(f.pose, dims);
        let out = binary_search_dims(&f.obs(), &mut src, &SearchConfig::default()).unwrap();
        assert!(out.trace.iterations_used <= 7, "{:?}", out.trace.reason);
        let last = out.trace.records.last().unwrap();
        for a in 0..3 {
            if last.kinds[a] != AxisKind::Frozen {
                assert!((last.e_obs[a] - last.e_cad[a]).abs() <= 10.0);
            }
        }
        // Bracketing on a noiseless view.
        for r in &out.trace.records {
            for a in 0..3 {
                if r.kinds[a] != AxisKind::Frozen {
                    assert!(r.lo[a] <= 0.5 && 0.5 <= r.hi[a], "{r:?}");
                }
            }
        }
    }

    #[test]
    fn saturates_at_upper_bound() {
        let dims = BoxDims::new(3.0, 3.0, 3.0).unwrap();
        let f = Fixture::new(&dims, tilted(12.0));
        let mut src = oracle(f.pose, dims);
        let out = binary_search_dims(&f.obs(), &mut src, &SearchConfig::default()).unwrap();
        assert_eq!(out.trace.reason, Some(StopReason::IntervalConverged));
        for a in 0..3 {
            assert!(out.scale.get(a) > 1.98, "{:?}", out.scale);
        }
    }

    #[test]
    fn tie_shrinks() {
        let dims = BoxDims::new(0.4, 0.3, 0.2).unwrap();
        let f = Fixture::new(&dims, tilted(2.5));
        let m = measure(
            &f.pose,
            dims.as_vector(),
            &Observed::new(f.obs()).unwrap(),
            &SearchConfig::default(),
        )
        .unwrap();
        for a in 0..3 {
            if m.kinds[a] != AxisKind::Frozen {
                assert!(m.delta[a].abs() < 1e-2, "{:?}", m.delta);
            }
        }
        let mut src = oracle(f.pose, dims);
        let cfg = SearchConfig {
            bounds_init: ScaleInterval::new(dims.as_vector() * 0.999, Vector3::repeat(2.0))
                .unwrap(),
            tau_px: 1e-9,
            early_stop_enabled: false,
            ..SearchConfig::default()
        };
        let out = estimate_dimensions(&f.obs(), &mut src, &cfg).unwrap();
        assert!(out.trace.records[0].decisions.contains(&Decision::Shrink));
    }

    #[test]
    fn early_stop_on_frontal_box() {
        let dims = BoxDims::new(0.4, 0.25, 0.3).unwrap();
        let pose = Pose::new(
            *Rotation3::from_euler_angles(0.4, 0.15, 0.0).matrix(),
            Vector3::new(0.05, 0.0, 2.5),
        )
        .unwrap();
        let f = Fixture::new(&dims, pose);
        let mut src = oracle(f.pose, dims);
        let es = estimate_dimensions(&f.obs(), &mut src, &SearchConfig::default()).unwrap();
        let mut src = oracle(f.pose, dims);
        let bs = binary_search_dims(&f.obs(), &mut src, &SearchConfig::default()).unwrap();
        assert_eq!(es.trace.reason, Some(StopReason::EarlyStopped));
        assert!(
            es.trace.iterations_used * 10 <= bs.trace.iterations_used * 4,
            "{} vs {}",
            es.trace.iterations_used,
            bs.trace.iterations_used
        );
        for a in 0..3 {
            assert!(
                (es.scale.get(a) - dims.get(a)).abs() < 0.02 * dims.get(a),
                "{:?}",
                es.scale
            );
        }
    }

    #[test]
    fn far_frontal_rescale_lands_within_a_pixel() {
        let dims = BoxDims::new(0.6, 0.4, 0.5).unwrap();
        let pose = frontal(40.0);
        let f = Fixture::new(
            &dims,
            Pose::new(
                *Rotation3::from_euler_angles(0.0, 0.0, 0.0).matrix(),
                pose.translation,
            )
            .unwrap(),
        );
        let s = Vector3::new(0.9, 0.3, 0.5);
        let mut src = oracle(f.pose, dims);
        let p = src(&BoxDims::from_vector(s).unwrap(), None).unwrap();
        let cfg = SearchConfig::default();
        let seen = Observed::new(f.obs()).unwrap();
        let m = measure(&p, &s, &seen, &cfg).unwrap();
        let (next, _) = rescale(&p, &s, &m, &seen, &cfg).unwrap();
        let p2 = src(&scaled_template(&next), None).unwrap();
        let m2 = measure(&p2, next.as_vector(), &seen, &cfg).unwrap();
        for a in 0..2 {
            assert!(
                (m2.e_obs[a] - m2.e_cad[a]).abs() <= 1.0,
                "{m2:?}",
                m2 = (m2.e_obs, m2.e_cad)
            );
        }
    }

    #[test]
    fn alignment_predicate() {
        let dims = BoxDims::new(0.4, 0.3, 0.35).unwrap();
        let pose = tilted(2.5);
        let f = Fixture::new(&dims, pose);
        assert!(axes_aligned_around_vertex(
            &dims,
            &pose,
            &pose,
            &f.obs(),
            5.0
        ));
        let turned = Pose::new(
            pose.rotation * Rotation3::from_euler_angles(0.0, 0.0, 30f64.to_radians()).matrix(),
            pose.translation,
        )
        .unwrap();
        assert!(!axes_aligned_around_vertex(
            &dims,
            &turned,
            &pose,
            &f.obs(),
            5.0
        ));
        let wrong = Pose::new(
            pose.rotation * Rotation3::from_euler_angles(0.0, 0.0, 45f64.to_radians()).matrix(),
            pose.translation,
        )
        .unwrap();
        let g = Fixture::new(&dims, wrong);
        assert!(!axes_aligned_around_vertex(
            &dims,
            &pose,
            &pose,
            &g.obs(),
            5.0
        ));
    }

    #[test]
    fn empty_mask_fails_with_trace() {
        let cam = k();
        let depth = DepthImage::zeros(640, 480);
        let mask = InstanceMask::zeros(640, 480);
        let obs = Observation {
            depth: &depth,
            mask: &mask,
            instance: 1,
            camera: &cam,
        };
        let mut src = |_: &BoxDims, _: Option<&Pose>| Ok(Pose::identity());
        let err = estimate_dimensions(&obs, &mut src, &SearchConfig::default()).unwrap_err();
        assert!(matches!(err.error, Error::EmptyMask));
        assert!(err.trace.records.is_empty());
    }

    #[test]
    fn pose_failure_carries_trace() {
        let dims = BoxDims::new(0.4, 0.3, 0.2).unwrap();
        let f = Fixture::new(&dims, tilted(2.5));
        let mut calls = 0;
        let gt = f.pose;
        let mut src = move |_: &BoxDims, _: Option<&Pose>| {
            calls += 1;
            if calls > 1 {
                Err(Error::PoseEstimation("lost".into()))
            } else {
                Ok(gt)
            }
        };
        let err = binary_search_dims(&f.obs(), &mut src, &SearchConfig::default()).unwrap_err();
        assert_eq!(err.trace.records.len(), 1);
        assert!(matches!(err.error, Error::PoseEstimation(_)));
    }

    #[test]
    fn hull_extents_match_pixel_extents() {
        let dims = BoxDims::new(0.3, 0.2, 0.25).unwrap();
        let f = Fixture::new(&dims, tilted(1.5));
        let seen = Observed::new(f.obs()).unwrap();
        let (dirs, _) = axis_directions(&f.pose, &dims, &f.cam, 5.0).unwrap();
        let direct = extents_along(f.mask.pixels(1), &dirs).unwrap();
        assert!((extents_of(&seen.hull, &dirs) - direct).abs().max() < 1e-9);
        assert!(seen.hull.len() < f.mask.pixels(1).count());
        assert_eq!(seen.points.len(), f.mask.pixels(1).count());
        let empty = InstanceMask::zeros(640, 480);
        let obs = Observation {
            mask: &empty,
            ..f.obs()
        };
        assert!(matches!(Observed::new(obs), Err(Error::EmptyMask)));
    }
}
