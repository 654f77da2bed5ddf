//! Projection, a convex-box rasterizer and per-axis silhouette extents.
//!
//! Pixel `(u, v)` is sampled at its center, which sits at integer image
//! coordinates. Faces are back-face culled, clipped against a near plane and
//! filled with edge functions; pixels exactly on an edge belong to the face
//! for which that edge is a "top-left" edge, so a pixel on the edge shared by
//! two visible faces is drawn once. Depth is the exact ray/plane intersection,
//! not an interpolated value.

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{box_faces, box_vertices};
use crate::scalar::Real;
use crate::types::{BoxDims, CameraIntrinsics, DepthImage, InstanceMask, Pose};

const NEAR_PLANE: f64 = 1e-3;

/// Default angle (degrees) between a box axis and the viewing ray below which
/// the axis is considered unobservable in the image.
pub const DEFAULT_UNOBSERVABLE_ANGLE_DEG: f64 = 5.0;

/// Pinhole projection of a camera-frame point to pixel coordinates.
pub fn project_point<T: Real>(k: &CameraIntrinsics<T>, p: &Vector3<T>) -> Result<Vector2<T>> {
    if p.z <= T::zero() {
        return Err(Error::BehindCamera {
            z: p.z.to_f64_lossy(),
        });
    }
    Ok(Vector2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Unnormalized viewing ray through pixel `(u, v)`, with unit z component.
#[inline]
pub fn pixel_ray(k: &CameraIntrinsics, u: f64, v: f64) -> Vector3<f64> {
    Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
}

/// Depth and silhouette of a single box over the full image.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub depth: DepthImage,
    pub mask: InstanceMask,
}

/// Depth of a box restricted to the bounding window of its projection.
/// `0.0` marks uncovered pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRaster {
    pub u0: usize,
    pub v0: usize,
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
}

impl BoxRaster {
    fn empty() -> Self {
        Self {
            u0: 0,
            v0: 0,
            width: 0,
            height: 0,
            depth: Vec::new(),
        }
    }

    /// Depth at an image pixel, `0.0` when not covered.
    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        if u < self.u0 || v < self.v0 {
            return 0.0;
        }
        let (du, dv) = (u - self.u0, v - self.v0);
        if du >= self.width || dv >= self.height {
            return 0.0;
        }
        self.depth[dv * self.width + du]
    }

    /// Covered pixels as `(u, v, depth)` in row-major order.
    pub fn covered(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let (w, u0, v0) = (self.width, self.u0, self.v0);
        self.depth
            .iter()
            .enumerate()
            .filter(|(_, z)| **z > 0.0)
            .map(move |(i, z)| (u0 + i % w, v0 + i / w, *z))
    }

    /// First and last covered column of each row that has coverage, as
    /// `(v, u_first, u_last)` in image coordinates.
    pub fn row_bounds(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.height).filter_map(move |r| {
            let row = &self.depth[r * self.width..(r + 1) * self.width];
            let a = row.iter().position(|z| *z > 0.0)?;
            let b = row.iter().rposition(|z| *z > 0.0)?;
            Some((self.v0 + r, self.u0 + a, self.u0 + b))
        })
    }

    pub fn count(&self) -> usize {
        self.depth.iter().filter(|z| **z > 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Expands to full-image rasters.
    pub fn to_view(&self, k: &CameraIntrinsics) -> RenderedView {
        let mut depth = DepthImage::zeros(k.width, k.height);
        let mut mask = InstanceMask::zeros(k.width, k.height);
        for (u, v, z) in self.covered() {
            let i = v * k.width + u;
            depth.data[i] = z;
            mask.data[i] = 1;
        }
        RenderedView { depth, mask }
    }
}

/// Projected point tagged with the camera-frame point it came from.
#[derive(Clone, Copy)]
struct ClipVertex {
    cam: Vector3<f64>,
}

fn clip_near(poly: &[ClipVertex]) -> Vec<ClipVertex> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let a_in = a.cam.z >= NEAR_PLANE;
        let b_in = b.cam.z >= NEAR_PLANE;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            // Interpolate from a canonical endpoint so a shared edge clips to
            // the same point from both faces.
            let (p, q) = if (a.cam.x, a.cam.y, a.cam.z) < (b.cam.x, b.cam.y, b.cam.z) {
                (a.cam, b.cam)
            } else {
                (b.cam, a.cam)
            };
            let t = (NEAR_PLANE - p.z) / (q.z - p.z);
            let mut c = p + (q - p) * t;
            c.z = NEAR_PLANE;
            out.push(ClipVertex { cam: c });
        }
    }
    out
}

/// Edge function of the directed edge `a -> b` at `q`, evaluated from a
/// canonical endpoint order so that `e(a, b, q) == -e(b, a, q)` exactly.
#[inline]
fn edge_fn(a: &Vector2<f64>, b: &Vector2<f64>, q: (f64, f64)) -> f64 {
    let flip = (a.x, a.y) > (b.x, b.y);
    let (p, r) = if flip { (b, a) } else { (a, b) };
    let e = (r.x - p.x) * (q.1 - p.y) - (r.y - p.y) * (q.0 - p.x);
    if flip {
        -e
    } else {
        e
    }
}

#[inline]
fn owns_edge(a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    dy > 0.0 || (dy == 0.0 && dx < 0.0)
}

struct FacePoly {
    pts: Vec<Vector2<f64>>,
    owns: Vec<bool>,
    normal: Vector3<f64>,
    offset: f64,
    /// Pixel bounds `(u_lo, u_hi, v_lo, v_hi)` of the projection.
    bounds: (f64, f64, f64, f64),
}

impl FacePoly {
    fn inside(&self, q: (f64, f64)) -> bool {
        let n = self.pts.len();
        (0..n).all(|i| {
            let e = edge_fn(&self.pts[i], &self.pts[(i + 1) % n], q);
            e > 0.0 || (e == 0.0 && self.owns[i])
        })
    }

    /// Covered pixel columns of row `v` within `[u_lo, u_hi]`. The face is
    /// convex, so they form one run.
    fn row_span(&self, v: usize, u_lo: usize, u_hi: usize) -> Option<(usize, usize)> {
        let vf = v as f64;
        let (mut lo, mut hi) = (
            self.bounds.0.max(u_lo as f64),
            self.bounds.1.min(u_hi as f64),
        );
        let n = self.pts.len();
        for i in 0..n {
            let e0 = edge_fn(&self.pts[i], &self.pts[(i + 1) % n], (0.0, vf));
            let slope = edge_fn(&self.pts[i], &self.pts[(i + 1) % n], (1.0, vf)) - e0;
            if slope > 0.0 {
                lo = lo.max((-e0 / slope).ceil() - 1.0);
            } else if slope < 0.0 {
                hi = hi.min((-e0 / slope).floor() + 1.0);
            }
        }
        let lo = lo.ceil().max(u_lo as f64);
        let hi = hi.floor().min(u_hi as f64);
        if !(lo <= hi) {
            return None;
        }
        let (mut a, mut b) = (lo as usize, hi as usize);
        while a <= b && !self.inside((a as f64, vf)) {
            a += 1;
        }
        while b > a && !self.inside((b as f64, vf)) {
            b -= 1;
        }
        (a <= b && self.inside((a as f64, vf))).then_some((a, b))
    }

    /// Ray/face depth at a covered pixel.
    fn depth_at(&self, k: &CameraIntrinsics, u: usize, v: usize) -> Option<f64> {
        let denom = self.normal.dot(&pixel_ray(k, u as f64, v as f64));
        if denom >= 0.0 {
            return None;
        }
        let z = self.offset / denom;
        (z > 0.0 && z.is_finite()).then_some(z)
    }
}

/// Visible, near-clipped faces in pixel coordinates, counter-clockwise.
fn face_polys(dims: &BoxDims, pose: &Pose, k: &CameraIntrinsics) -> Result<Vec<FacePoly>> {
    if !dims.as_vector().iter().all(|d| d.is_finite() && *d > 0.0) {
        return Err(Error::invalid("box dimensions must be positive"));
    }
    let verts = box_vertices(pose, dims);
    let mut polys = Vec::with_capacity(3);
    for face in box_faces() {
        let sign = if face.positive { 1.0 } else { -1.0 };
        let normal = pose.axis(face.axis) * sign;
        let offset = normal.dot(&verts[face.corners[0]]);
        // Camera at the origin: the face is visible iff the origin lies on
        // its outer side.
        if offset >= 0.0 {
            continue;
        }
        let poly: Vec<ClipVertex> = face
            .corners
            .iter()
            .map(|&i| ClipVertex { cam: verts[i] })
            .collect();
        let poly = if poly.iter().all(|c| c.cam.z >= NEAR_PLANE) {
            poly
        } else {
            clip_near(&poly)
        };
        if poly.len() < 3 {
            continue;
        }
        let mut pts: Vec<Vector2<f64>> = poly
            .iter()
            .map(|c| project_point(k, &c.cam).expect("clipped to near plane"))
            .collect();
        let area: f64 = (0..pts.len())
            .map(|i| {
                let a = pts[i];
                let b = pts[(i + 1) % pts.len()];
                a.x * b.y - b.x * a.y
            })
            .sum();
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            pts.reverse();
        }
        let n = pts.len();
        let owns = (0..n)
            .map(|i| owns_edge(&pts[i], &pts[(i + 1) % n]))
            .collect();
        let mut bounds = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for p in &pts {
            bounds.0 = bounds.0.min(p.x.ceil());
            bounds.1 = bounds.1.max(p.x.floor());
            bounds.2 = bounds.2.min(p.y.ceil());
            bounds.3 = bounds.3.max(p.y.floor());
        }
        polys.push(FacePoly {
            pts,
            owns,
            normal,
            offset,
            bounds,
        });
    }
    Ok(polys)
}

/// Inclusive pixel window `(u0, v0, u1, v1)`.
pub type Window = (usize, usize, usize, usize);

/// Rasterizes a posed box into the window covering its projection.
pub fn rasterize_box(dims: &BoxDims, pose: &Pose, k: &CameraIntrinsics) -> Result<BoxRaster> {
    let full = (0, 0, k.width.saturating_sub(1), k.height.saturating_sub(1));
    Ok(rasterize_box_in(dims, pose, k, full)?.0)
}

/// Depth of a posed box inside `window`, and the number of covered pixels
/// over the whole image.
pub fn rasterize_box_in(
    dims: &BoxDims,
    pose: &Pose,
    k: &CameraIntrinsics,
    window: Window,
) -> Result<(BoxRaster, usize)> {
    let polys = face_polys(dims, pose, k)?;
    if polys.is_empty() || k.width == 0 || k.height == 0 {
        return Ok((BoxRaster::empty(), 0));
    }
    let (wmax, hmax) = (k.width - 1, k.height - 1);
    let mut b = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for p in &polys {
        b = (
            b.0.min(p.bounds.0),
            b.1.max(p.bounds.1),
            b.2.min(p.bounds.2),
            b.3.max(p.bounds.3),
        );
    }
    let u_lo = b.0.max(0.0);
    let u_hi = b.1.min(wmax as f64);
    let v_lo = b.2.max(0.0);
    let v_hi = b.3.min(hmax as f64);
    if !(u_lo <= u_hi && v_lo <= v_hi) {
        return Ok((BoxRaster::empty(), 0));
    }
    let (u_lo, u_hi, v_lo, v_hi) = (u_lo as usize, u_hi as usize, v_lo as usize, v_hi as usize);
    let (u0, v0) = (u_lo.max(window.0), v_lo.max(window.1));
    let (u1, v1) = (u_hi.min(window.2), v_hi.min(window.3));
    let mut raster = if u0 <= u1 && v0 <= v1 {
        BoxRaster {
            u0,
            v0,
            width: u1 - u0 + 1,
            height: v1 - v0 + 1,
            depth: vec![0.0; (u1 - u0 + 1) * (v1 - v0 + 1)],
        }
    } else {
        BoxRaster::empty()
    };
    let mut count = 0;
    for poly in &polys {
        let pv0 = poly.bounds.2.max(v_lo as f64);
        let pv1 = poly.bounds.3.min(v_hi as f64);
        if !(pv0 <= pv1) {
            continue;
        }
        for v in pv0 as usize..=pv1 as usize {
            let Some((a, b)) = poly.row_span(v, u_lo, u_hi) else {
                continue;
            };
            count += b - a + 1;
            if raster.depth.is_empty() || v < v0 || v > v1 {
                continue;
            }
            for u in a.max(u0)..=b.min(u1) {
                let Some(z) = poly.depth_at(k, u, v) else {
                    continue;
                };
                let slot = &mut raster.depth[(v - v0) * raster.width + (u - u0)];
                if *slot == 0.0 || z < *slot {
                    *slot = z;
                }
            }
        }
    }
    Ok((raster, count))
}

/// Full-image depth and silhouette of a posed box. A box entirely behind the
/// camera or outside the frustum yields an empty view.
pub fn render_view(dims: &BoxDims, pose: &Pose, k: &CameraIntrinsics) -> Result<RenderedView> {
    Ok(rasterize_box(dims, pose, k)?.to_view(k))
}

/// Per-axis pixel extents of a silhouette.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisExtents {
    /// Extent in pixels along each axis direction (0 where undefined).
    pub e: Vector3<f64>,
    pub observable: [bool; 3],
    /// Unit image direction of each box axis (zero where undefined).
    pub dirs: [Vector2<f64>; 3],
}

/// Image directions of the three box axes, measured between the projections
/// of `center ± dims_a / 2 * axis_a`, and whether each axis is observable.
pub fn axis_directions(
    pose: &Pose,
    dims: &BoxDims,
    k: &CameraIntrinsics,
    unobservable_angle_deg: f64,
) -> Result<([Vector2<f64>; 3], [bool; 3])> {
    let c = pose.translation;
    let ray = c.normalize();
    let cos_lim = unobservable_angle_deg.to_radians().cos();
    let mut dirs = [Vector2::zeros(); 3];
    let mut obs = [false; 3];
    for a in 0..3 {
        let axis = pose.axis(a);
        let h = 0.5 * dims.get(a);
        let p = project_point(k, &(c + axis * h))?;
        let q = project_point(k, &(c - axis * h))?;
        let d = p - q;
        let len = d.norm();
        if len > 1e-3 {
            dirs[a] = d / len;
            obs[a] = axis.dot(&ray).abs() < cos_lim;
        }
    }
    Ok((dirs, obs))
}

/// Span of `pixels` along each direction: `max(p·d) - min(p·d)`.
pub fn extents_along<I>(pixels: I, dirs: &[Vector2<f64>; 3]) -> Option<Vector3<f64>>
where
    I: IntoIterator<Item = (usize, usize)>,
{
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut any = false;
    for (u, v) in pixels {
        any = true;
        let (uf, vf) = (u as f64, v as f64);
        for a in 0..3 {
            let s = uf * dirs[a].x + vf * dirs[a].y;
            lo[a] = lo[a].min(s);
            hi[a] = hi[a].max(s);
        }
    }
    any.then(|| Vector3::from_fn(|a, _| hi[a] - lo[a]))
}

/// Extents of the nonzero pixels of `mask` along the image directions of the
/// box axes of `pose`.
pub fn extents(
    mask: &InstanceMask,
    pose: &Pose,
    dims: &BoxDims,
    k: &CameraIntrinsics,
) -> Result<AxisExtents> {
    extents_with(mask, pose, dims, k, DEFAULT_UNOBSERVABLE_ANGLE_DEG)
}

pub fn extents_with(
    mask: &InstanceMask,
    pose: &Pose,
    dims: &BoxDims,
    k: &CameraIntrinsics,
    unobservable_angle_deg: f64,
) -> Result<AxisExtents> {
    let (dirs, observable) = axis_directions(pose, dims, k, unobservable_angle_deg)?;
    let w = mask.width;
    let pixels = mask
        .data
        .iter()
        .enumerate()
        .filter(|(_, l)| **l != 0)
        .map(|(i, _)| (i % w, i / w));
    let e = extents_along(pixels, &dirs).ok_or(Error::EmptyMask)?;
    Ok(AxisExtents {
        e,
        observable,
        dirs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn k640() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn project_optical_axis_and_offset() {
        let k = k640();
        assert_eq!(
            project_point(&k, &Vector3::new(0.0, 0.0, 1.0)).unwrap(),
            Vector2::new(320.0, 240.0)
        );
        assert_eq!(
            project_point(&k, &Vector3::new(0.1, 0.0, 1.0)).unwrap(),
            Vector2::new(370.0, 240.0)
        );
        assert!(matches!(
            project_point(&k, &Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn frontal_cube_front_face_square() {
        let k = k640();
        let dims = BoxDims::new(1.0, 1.0, 1.0).unwrap();
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 2.0));
        let view = render_view(&dims, &pose, &k).unwrap();
        // Front face at z = 1.5 spans ±0.5 m, i.e. ±500·0.5/1.5 px.
        let half = 500.0 * 0.5 / 1.5;
        let cols: Vec<usize> = (0..640).filter(|u| view.mask.get(*u, 240) != 0).collect();
        let width = cols.len() as f64;
        assert!((width - 2.0 * half).abs() <= 1.0, "width {width}");
        for z in view.depth.data.iter().filter(|z| **z > 0.0) {
            assert!(*z >= 1.5 - 1e-12 && *z <= 2.0);
        }
        assert!((view.depth.get(320, 240) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn mask_matches_depth_support() {
        let k = k640();
        let dims = BoxDims::new(0.3, 0.2, 0.4).unwrap();
        let r = nalgebra::Rotation3::from_euler_angles(0.4, -0.3, 0.2);
        let pose = Pose::new(*r.matrix(), Vector3::new(0.1, -0.05, 1.2)).unwrap();
        let view = render_view(&dims, &pose, &k).unwrap();
        for (z, m) in view.depth.data.iter().zip(&view.mask.data) {
            assert_eq!(*z > 0.0, *m != 0);
        }
        assert!(view.mask.count(1) > 1000);
    }

    #[test]
    fn out_of_view_and_behind_are_empty() {
        let k = k640();
        let dims = BoxDims::new(0.3, 0.3, 0.3).unwrap();
        let behind = Pose::from_translation(Vector3::new(0.0, 0.0, -2.0));
        assert_eq!(render_view(&dims, &behind, &k).unwrap().mask.count(1), 0);
        let aside = Pose::from_translation(Vector3::new(50.0, 0.0, 2.0));
        assert_eq!(render_view(&dims, &aside, &k).unwrap().mask.count(1), 0);
    }

    #[test]
    fn adjacent_faces_leave_no_gaps() {
        // A box seen corner-on: three faces meet at the near vertex.
        let k = k640();
        let dims = BoxDims::new(0.5, 0.5, 0.5).unwrap();
        let r = nalgebra::Rotation3::from_euler_angles(0.6155, std::f64::consts::FRAC_PI_4, 0.0);
        let pose = Pose::new(*r.matrix(), Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let view = render_view(&dims, &pose, &k).unwrap();
        // Every row of the silhouette is one contiguous run.
        for v in 0..480 {
            let row: Vec<u8> = (0..640).map(|u| view.mask.get(u, v)).collect();
            let starts = row.windows(2).filter(|w| w[0] == 0 && w[1] != 0).count();
            assert!(starts <= 1, "row {v}");
        }
    }

    #[test]
    fn frontal_extents_are_bbox_sizes() {
        let k = k640();
        let dims = BoxDims::new(0.4, 0.3, 0.2).unwrap();
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let view = render_view(&dims, &pose, &k).unwrap();
        let ext = extents(&view.mask, &pose, &dims, &k).unwrap();
        let us: Vec<usize> = view.mask.pixels(1).map(|p| p.0).collect();
        let vs: Vec<usize> = view.mask.pixels(1).map(|p| p.1).collect();
        let bw = (us.iter().max().unwrap() - us.iter().min().unwrap()) as f64;
        let bh = (vs.iter().max().unwrap() - vs.iter().min().unwrap()) as f64;
        assert!((ext.e.x - bw).abs() < 1e-9);
        assert!((ext.e.y - bh).abs() < 1e-9);
        assert_eq!(ext.observable, [true, true, false]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let k = k640();
        let dims = BoxDims::new(0.4, 0.3, 0.2).unwrap();
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 2.0));
        let mask = InstanceMask::zeros(640, 480);
        assert!(matches!(
            extents(&mask, &pose, &dims, &k),
            Err(Error::EmptyMask)
        ));
        let mut one = mask.clone();
        one.data[100] = 1;
        let e = extents(&one, &pose, &dims, &k).unwrap();
        assert_eq!(e.e, Vector3::zeros());
    }

    #[test]
    fn render_is_deterministic() {
        let k = k640();
        let dims = BoxDims::new(0.3, 0.2, 0.4).unwrap();
        let r = nalgebra::Rotation3::from_euler_angles(0.1, 0.7, -0.2);
        let pose = Pose::new(*r.matrix(), Vector3::new(0.0, 0.1, 1.5)).unwrap();
        let a = render_view(&dims, &pose, &k).unwrap();
        let b = render_view(&dims, &pose, &k).unwrap();
        assert!(a
            .depth
            .data
            .iter()
            .zip(&b.depth.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn window_matches_full_raster() {
        let k = k640();
        let dims = BoxDims::new(0.9, 0.6, 1.2).unwrap();
        let r = nalgebra::Rotation3::from_euler_angles(0.3, -0.5, 0.2);
        let pose = Pose::new(*r.matrix(), Vector3::new(0.1, -0.05, 1.8)).unwrap();
        let full = rasterize_box(&dims, &pose, &k).unwrap();
        let window = (250, 180, 330, 260);
        let (part, count) = rasterize_box_in(&dims, &pose, &k, window).unwrap();
        assert_eq!(count, full.count());
        assert_eq!(
            (part.u0, part.v0, part.width, part.height),
            (250, 180, 81, 81)
        );
        for v in 170..270 {
            for u in 240..340 {
                let inside = (250..=330).contains(&u) && (180..=260).contains(&v);
                let want = if inside { full.get(u, v) } else { 0.0 };
                assert_eq!(part.get(u, v).to_bits(), want.to_bits());
            }
        }
    }
}
