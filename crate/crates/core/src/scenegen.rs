//! Synthetic depth scenes of boxes on a floor, with ground truth.
//!
//! World frame: X right, Y forward, Z up, floor at `Z = 0`. The camera looks
//! along +Y, pitched down, at the center of the placed boxes. A box's local
//! axes are x = width (horizontal), y = height (pointing down) and z = depth
//! (horizontal, away from the camera at zero yaw), so an unpitched, unyawed
//! box is axis aligned with the camera.
//!
//! Every random draw comes from a ChaCha8 stream derived from the seed: one
//! stream for the camera rig, one per instance and one for sensor noise.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{box_vertices, boxes_interpenetrate};
use crate::render::{pixel_ray, rasterize_box};
use crate::types::{BoxDims, CameraIntrinsics, DepthImage, InstanceMask, Pose};

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const RIG_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Boxes standing on the floor, apart from each other.
    Single,
    /// A column of boxes resting face to face.
    Stack,
    /// Boxes on the floor with small random tilts.
    Pile,
}

impl std::str::FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" => Ok(Layout::Single),
            "stack" => Ok(Layout::Stack),
            "pile" => Ok(Layout::Pile),
            _ => Err(format!("unknown layout `{s}` (single|stack|pile)")),
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::Single => "single",
            Layout::Stack => "stack",
            Layout::Pile => "pile",
        })
    }
}

/// Camera placement relative to the boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigConfig {
    /// Range of the distance from the camera to the target point, meters.
    pub distance: (f64, f64),
    /// Downward pitch of the optical axis, degrees.
    pub pitch_deg: (f64, f64),
    /// Yaw of the boxes about the vertical, degrees (0 = facing the camera).
    pub yaw_deg: (f64, f64),
    /// Maximum sideways offset of the target from the optical axis, meters.
    pub lateral: f64,
    /// Per-box yaw jitter within a stack, degrees.
    pub stack_yaw_jitter_deg: f64,
    /// Per-box horizontal jitter within a stack, meters.
    pub stack_offset_jitter: f64,
    /// Maximum tilt of piled boxes, degrees.
    pub max_tilt_deg: f64,
    /// Half-width of the floor area used by single and pile layouts, meters.
    pub spread: f64,
    pub floor: bool,
    /// Floor returns beyond this range are dropped, meters.
    pub max_range: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            distance: (2.0, 3.0),
            pitch_deg: (15.0, 30.0),
            yaw_deg: (-20.0, 20.0),
            lateral: 0.15,
            stack_yaw_jitter_deg: 2.0,
            stack_offset_jitter: 0.01,
            max_tilt_deg: 10.0,
            spread: 0.8,
            floor: true,
            max_range: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub n_boxes: usize,
    pub dims_min: Vector3<f64>,
    pub dims_max: Vector3<f64>,
    pub layout: Layout,
    /// Height of an unlabeled occluding rail in front of the boxes, as a
    /// fraction of the box arrangement's height.
    pub occlusion_level: f64,
    pub depth_noise_sigma: f64,
    /// Fraction of valid pixels dropped to 0 (only when noise is enabled).
    pub dropout_rate: f64,
    /// Depth quantization step, meters (0 disables).
    pub depth_quantum: f64,
    pub camera: CameraIntrinsics,
    pub rig: RigConfig,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_boxes: 1,
            dims_min: Vector3::repeat(0.1),
            dims_max: Vector3::repeat(0.6),
            layout: Layout::Single,
            occlusion_level: 0.0,
            depth_noise_sigma: 0.0,
            dropout_rate: 0.01,
            depth_quantum: 0.001,
            camera: CameraIntrinsics {
                fx: 1400.0,
                fy: 1400.0,
                cx: 639.5,
                cy: 479.5,
                width: 1280,
                height: 960,
            },
            rig: RigConfig::default(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_boxes == 0 || self.n_boxes > 255 {
            return Err(Error::config("scene.n_boxes", "must be in 1..=255"));
        }
        for a in 0..3 {
            if !(self.dims_min[a] > 0.0 && self.dims_min[a] < self.dims_max[a]) {
                return Err(Error::config(
                    "scene.dims_range",
                    "need 0 < min < max on every axis",
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_level) {
            return Err(Error::config("scene.occlusion_level", "must be in [0, 1]"));
        }
        if !(self.depth_noise_sigma >= 0.0 && self.depth_noise_sigma.is_finite()) {
            return Err(Error::config("scene.depth_noise_sigma", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("scene.dropout_rate", "must be in [0, 1)"));
        }
        if !(self.depth_quantum >= 0.0 && self.depth_quantum.is_finite()) {
            return Err(Error::config("scene.depth_quantum", "must be >= 0"));
        }
        self.camera
            .validate()
            .map_err(|e| Error::config("scene.camera", e.to_string()))?;
        let r = &self.rig;
        if !(r.distance.0 > 0.0 && r.distance.0 <= r.distance.1) {
            return Err(Error::config("rig.distance", "need 0 < min <= max"));
        }
        if !(r.pitch_deg.0 <= r.pitch_deg.1 && r.pitch_deg.0 >= 0.0 && r.pitch_deg.1 < 90.0) {
            return Err(Error::config("rig.pitch", "need 0 <= min <= max < 90"));
        }
        if r.yaw_deg.0 > r.yaw_deg.1 {
            return Err(Error::config("rig.yaw", "need min <= max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtInstance {
    pub id: u8,
    pub pose: Pose,
    pub dims: BoxDims,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub depth: DepthImage,
    /// Visible pixels of each instance.
    pub masks: InstanceMask,
    pub gt: Vec<GtInstance>,
    pub camera: CameraIntrinsics,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// World rotation of a box with the given yaw (radians).
fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::from_columns(&[
        Vector3::new(c, s, 0.0),
        Vector3::new(0.0, 0.0, -1.0),
        Vector3::new(-s, c, 0.0),
    ])
}

fn sample_dims(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> BoxDims {
    let v = Vector3::from_fn(|a, _| uniform(rng, (cfg.dims_min[a], cfg.dims_max[a])));
    BoxDims::from_vector(v).expect("validated range")
}

/// Lowest world Z of a posed box.
fn bottom(pose: &Pose, dims: &BoxDims) -> f64 {
    box_vertices(pose, dims)
        .iter()
        .map(|v| v.z)
        .fold(f64::INFINITY, f64::min)
}

const CONTACT_TOL: f64 = 1e-6;

fn place_world(cfg: &SceneConfig) -> Result<Vec<(Pose, BoxDims)>> {
    let mut rig = stream(cfg.seed, RIG_STREAM);
    let base_yaw = uniform(&mut rig, cfg.rig.yaw_deg).to_radians();
    let mut placed: Vec<(Pose, BoxDims)> = Vec::with_capacity(cfg.n_boxes);
    let mut stack_top = 0.0;
    let mut front = 0.0;
    for i in 0..cfg.n_boxes {
        let mut rng = stream(cfg.seed, i as u64 + 1);
        let dims = sample_dims(&mut rng, cfg);
        let mut ok = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let candidate = match cfg.layout {
                Layout::Stack => {
                    let j = cfg.rig.stack_yaw_jitter_deg;
                    let yaw = base_yaw + uniform(&mut rng, (-j, j)).to_radians();
                    let rot = yaw_rotation(yaw);
                    let o = cfg.rig.stack_offset_jitter;
                    let dx = uniform(&mut rng, (-o, o));
                    // Front faces share one vertical plane.
                    let fwd_y = rot[(1, 2)];
                    if i == 0 {
                        front = -0.5 * fwd_y * dims.get(2);
                    }
                    let t = Vector3::new(
                        dx,
                        front + 0.5 * fwd_y * dims.get(2),
                        stack_top + 0.5 * dims.get(1),
                    );
                    Pose::from_parts(rot, t)
                }
                Layout::Single | Layout::Pile => {
                    let s = if i == 0 { 0.0 } else { cfg.rig.spread };
                    let j = if i == 0 { 0.0 } else { 20.0 };
                    let yaw = base_yaw + uniform(&mut rng, (-j, j)).to_radians();
                    let mut rot = yaw_rotation(yaw);
                    if cfg.layout == Layout::Pile {
                        let phi = uniform(&mut rng, (0.0, std::f64::consts::TAU));
                        let tilt = uniform(&mut rng, (0.0, cfg.rig.max_tilt_deg)).to_radians();
                        let axis = Unit::new_normalize(Vector3::new(phi.cos(), phi.sin(), 0.0));
                        rot = Rotation3::from_axis_angle(&axis, tilt).matrix() * rot;
                    }
                    let x = uniform(&mut rng, (-s, s));
                    let y = uniform(&mut rng, (-s, s));
                    let probe = Pose::from_parts(rot, Vector3::new(x, y, 0.0));
                    let lift = -bottom(&probe, &dims);
                    Pose::from_parts(rot, Vector3::new(x, y, lift))
                }
            };
            let clear = placed
                .iter()
                .all(|(p, d)| !boxes_interpenetrate(p, d, &candidate, &dims, CONTACT_TOL));
            if clear {
                ok = Some(candidate);
                break;
            }
        }
        let pose = ok.ok_or(Error::Placement {
            n_boxes: cfg.n_boxes,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        if cfg.layout == Layout::Stack {
            stack_top = pose.translation.z + 0.5 * dims.get(1);
        }
        placed.push((pose, dims));
    }
    Ok(placed)
}

/// Camera pose in the world (columns: camera x, y, z axes; translation:
/// optical center).
fn camera_in_world(cfg: &SceneConfig, boxes: &[(Pose, BoxDims)]) -> Pose {
    let mut rig = stream(cfg.seed, RIG_STREAM);
    let _yaw = uniform(&mut rig, cfg.rig.yaw_deg);
    let dist = uniform(&mut rig, cfg.rig.distance);
    let pitch = uniform(&mut rig, cfg.rig.pitch_deg).to_radians();
    let lateral = uniform(&mut rig, (-cfg.rig.lateral, cfg.rig.lateral));

    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for (p, d) in boxes {
        for v in box_vertices(p, d) {
            lo = lo.inf(&v);
            hi = hi.sup(&v);
        }
    }
    let target = (lo + hi) * 0.5 + Vector3::new(lateral, 0.0, 0.0);
    let (s, c) = pitch.sin_cos();
    let x_c = Vector3::new(1.0, 0.0, 0.0);
    let y_c = Vector3::new(0.0, -s, -c);
    let z_c = Vector3::new(0.0, c, -s);
    Pose::from_parts(Matrix3::from_columns(&[x_c, y_c, z_c]), target - z_c * dist)
}

/// The rail box placed in front of the arrangement, in world coordinates.
fn occluder(cfg: &SceneConfig, boxes: &[(Pose, BoxDims)]) -> Option<(Pose, BoxDims)> {
    if cfg.occlusion_level <= 0.0 {
        return None;
    }
    let mut ymin = f64::INFINITY;
    let mut ztop: f64 = 0.0;
    for (p, d) in boxes {
        for v in box_vertices(p, d) {
            ymin = ymin.min(v.y);
            ztop = ztop.max(v.z);
        }
    }
    let h = cfg.occlusion_level * ztop;
    let thickness = 0.05;
    let dims = BoxDims::new(6.0, h, thickness).ok()?;
    let pose = Pose::from_parts(
        yaw_rotation(0.0),
        Vector3::new(0.0, ymin - 0.15 - 0.5 * thickness, 0.5 * h),
    );
    Some((pose, dims))
}

fn quantize(z: f64, q: f64) -> f64 {
    if q <= 0.0 {
        return z;
    }
    let inv = 1.0 / q;
    let inv_r = inv.round();
    if (inv - inv_r).abs() < 1e-9 * inv {
        (z * inv_r).round() / inv_r
    } else {
        (z / q).round() * q
    }
}

/// Generates a scene. Deterministic in `cfg`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let k = cfg.camera;
    let world = place_world(cfg)?;
    let cam = camera_in_world(cfg, &world);
    let to_cam = cam.inverse();

    let gt: Vec<GtInstance> = world
        .iter()
        .enumerate()
        .map(|(i, (p, d))| GtInstance {
            id: (i + 1) as u8,
            pose: to_cam.compose(p),
            dims: *d,
        })
        .collect();

    let n = k.n_pixels();
    let mut depth = vec![0.0; n];
    let mut label = vec![0u8; n];

    if cfg.rig.floor {
        let h = cam.translation.z;
        for v in 0..k.height {
            for u in 0..k.width {
                let dir = cam.rotation * pixel_ray(&k, u as f64, v as f64);
                if dir.z < -1e-12 {
                    let t = -h / dir.z;
                    if t <= cfg.rig.max_range {
                        depth[v * k.width + u] = t;
                    }
                }
            }
        }
    }

    let mut draw = |pose: &Pose, dims: &BoxDims, id: u8| -> Result<()> {
        let r = rasterize_box(dims, pose, &k)?;
        for (u, v, z) in r.covered() {
            let i = v * k.width + u;
            if depth[i] == 0.0 || z < depth[i] {
                depth[i] = z;
                label[i] = id;
            }
        }
        Ok(())
    };
    if let Some((p, d)) = occluder(cfg, &world) {
        draw(&to_cam.compose(&p), &d, 0)?;
    }
    for g in &gt {
        draw(&g.pose, &g.dims, g.id)?;
    }

    let sigma = cfg.depth_noise_sigma;
    if sigma > 0.0 {
        let mut rng = stream(cfg.seed, NOISE_STREAM);
        let normal = Normal::new(0.0, sigma).expect("sigma > 0");
        for i in 0..n {
            if depth[i] <= 0.0 {
                continue;
            }
            if rng.random::<f64>() < cfg.dropout_rate {
                depth[i] = 0.0;
                label[i] = 0;
                continue;
            }
            let e: f64 = normal.sample(&mut rng);
            depth[i] = (depth[i] + e.clamp(-5.0 * sigma, 5.0 * sigma)).max(0.0);
        }
    }
    for z in depth.iter_mut() {
        if *z > 0.0 {
            *z = quantize(*z, cfg.depth_quantum);
            if *z <= 0.0 {
                *z = 0.0;
            }
        }
    }
    for i in 0..n {
        if depth[i] == 0.0 {
            label[i] = 0;
        }
    }

    Ok(Scene {
        depth: DepthImage::from_data(k.width, k.height, depth)?,
        masks: InstanceMask::from_data(k.width, k.height, label)?,
        gt,
        camera: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::intersection_volume;
    use crate::render::render_view;

    fn small_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(700.0, 700.0, 319.5, 239.5, 640, 480).unwrap()
    }

    fn cfg(layout: Layout, n: usize, seed: u64) -> SceneConfig {
        SceneConfig {
            n_boxes: n,
            layout,
            camera: small_camera(),
            depth_quantum: 0.0,
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn single_box_matches_render_exactly() {
        let c = SceneConfig {
            rig: RigConfig {
                floor: false,
                ..RigConfig::default()
            },
            ..cfg(Layout::Single, 1, 11)
        };
        let s = generate_scene(&c).unwrap();
        let v = render_view(&s.gt[0].dims, &s.gt[0].pose, &s.camera).unwrap();
        assert_eq!(v.depth, s.depth);
        assert_eq!(v.mask, s.masks);
    }

    #[test]
    fn same_seed_same_scene() {
        let c = SceneConfig {
            depth_noise_sigma: 0.002,
            ..cfg(Layout::Pile, 3, 5)
        };
        let a = generate_scene(&c).unwrap();
        let b = generate_scene(&c).unwrap();
        assert!(a
            .depth
            .data
            .iter()
            .zip(&b.depth.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.gt, b.gt);
    }

    #[test]
    fn instance_ids_contiguous_and_boxes_disjoint() {
        for layout in [Layout::Single, Layout::Stack, Layout::Pile] {
            for seed in 0..5 {
                let s = generate_scene(&cfg(layout, 3, seed)).unwrap();
                let ids: Vec<u8> = s.gt.iter().map(|g| g.id).collect();
                assert_eq!(ids, vec![1, 2, 3]);
                for i in 0..3 {
                    for j in i + 1..3 {
                        let v = intersection_volume(
                            &s.gt[i].pose,
                            &s.gt[i].dims,
                            &s.gt[j].pose,
                            &s.gt[j].dims,
                        );
                        assert!(v < 1e-9, "{layout} seed {seed}: overlap {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn stack_compositing_matches_oracle() {
        let c = SceneConfig {
            rig: RigConfig {
                floor: false,
                ..RigConfig::default()
            },
            ..cfg(Layout::Stack, 2, 3)
        };
        let s = generate_scene(&c).unwrap();
        let views: Vec<_> =
            s.gt.iter()
                .map(|g| render_view(&g.dims, &g.pose, &s.camera).unwrap())
                .collect();
        let mut counts = [0usize; 3];
        for i in 0..s.camera.n_pixels() {
            let (za, zb) = (views[0].depth.data[i], views[1].depth.data[i]);
            let want = match (za > 0.0, zb > 0.0) {
                (false, false) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (true, true) => {
                    if zb < za {
                        2
                    } else {
                        1
                    }
                }
            };
            assert_eq!(s.masks.data[i], want);
            counts[want as usize] += 1;
        }
        assert_eq!(counts[1], s.masks.count(1));
        assert_eq!(counts[2], s.masks.count(2));
        // The upper box rests exactly on the lower one.
        let top_of_lower =
            s.gt[0].pose.translation - s.gt[0].pose.axis(1) * (0.5 * s.gt[0].dims.get(1));
        let bottom_of_upper =
            s.gt[1].pose.translation + s.gt[1].pose.axis(1) * (0.5 * s.gt[1].dims.get(1));
        let up = -s.gt[0].pose.axis(1);
        assert!((up.dot(&(bottom_of_upper - top_of_lower))).abs() < 1e-9);
    }

    #[test]
    fn noisy_pixels_stay_near_truth() {
        let sigma = 0.002;
        let c = SceneConfig {
            depth_noise_sigma: sigma,
            ..cfg(Layout::Single, 1, 8)
        };
        let s = generate_scene(&c).unwrap();
        let v = render_view(&s.gt[0].dims, &s.gt[0].pose, &s.camera).unwrap();
        let mut dropped = 0;
        for i in 0..s.camera.n_pixels() {
            if s.masks.data[i] == 1 {
                assert!((s.depth.data[i] - v.depth.data[i]).abs() <= 5.0 * sigma + 1e-12);
            } else if v.mask.data[i] == 1 {
                dropped += 1;
            }
        }
        let n = v.mask.count(1) as f64;
        assert!((dropped as f64) < 0.03 * n && dropped > 0);
    }

    #[test]
    fn occlusion_monotone_in_level() {
        let mut last = usize::MAX;
        for level in [0.0, 0.2, 0.4, 0.6, 0.8] {
            let c = SceneConfig {
                occlusion_level: level,
                ..cfg(Layout::Single, 2, 21)
            };
            let s = generate_scene(&c).unwrap();
            let visible = s.masks.data.iter().filter(|l| **l != 0).count();
            assert!(visible <= last, "level {level}: {visible} > {last}");
            last = visible;
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let mut c = cfg(Layout::Single, 1, 0);
        c.dims_min = Vector3::new(0.5, 0.1, 0.1);
        c.dims_max = Vector3::new(0.4, 0.6, 0.6);
        match generate_scene(&c) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "scene.dims_range"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn quantize_is_exact_millimetres() {
        let z = quantize(1.23456, 0.001);
        assert_eq!(z, 1235.0 / 1000.0);
    }
}
