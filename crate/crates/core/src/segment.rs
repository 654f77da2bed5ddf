//! Depth-only instance segmentation: remove the dominant support plane, then
//! group the remaining pixels into Euclidean connected components.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pose::{covariance, sorted_eigen};
use crate::types::{CameraIntrinsics, DepthImage, InstanceMask};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentConfig {
    /// Largest point-to-plane distance still treated as support plane, meters.
    pub plane_threshold: f64,
    /// Neighbouring pixels closer than this in 3D are joined, meters.
    pub cluster_distance: f64,
    pub min_component: usize,
    pub ransac_iters: usize,
    /// Smallest fraction of valid pixels a plane must hold to be removed.
    pub min_plane_fraction: f64,
    /// Mask IoU above which the smaller of two proposals is dropped.
    pub nms_iou: f64,
    pub seed: u64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            plane_threshold: 0.008,
            cluster_distance: 0.015,
            min_component: 200,
            ransac_iters: 200,
            min_plane_fraction: 0.2,
            nms_iou: 0.5,
            seed: 0,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plane_threshold > 0.0) {
            return Err(Error::config("segment.plane_threshold", "must be positive"));
        }
        if !(self.cluster_distance > 0.0) {
            return Err(Error::config(
                "segment.cluster_distance",
                "must be positive",
            ));
        }
        if self.min_component == 0 {
            return Err(Error::config("segment.min_component", "must be positive"));
        }
        if self.ransac_iters == 0 {
            return Err(Error::config("segment.ransac_iters", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_plane_fraction) {
            return Err(Error::config(
                "segment.min_plane_fraction",
                "must be in [0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::config("segment.nms_iou", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Plane `n·p = d` with unit `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }

    fn through(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<Plane> {
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len < 1e-12 {
            return None;
        }
        let normal = n / len;
        Some(Plane {
            normal,
            offset: normal.dot(a),
        })
    }

    fn fit(points: &[Vector3<f64>]) -> Plane {
        let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
        let (r, _) = sorted_eigen(&covariance(points, &c));
        let normal: Vector3<f64> = r.column(2).into();
        Plane {
            normal,
            offset: normal.dot(&c),
        }
    }
}

const RANSAC_SAMPLE: usize = 4000;
const MIN_BAND: f64 = 0.002;

/// RANSAC on a deterministic subsample followed by a least-squares refit on
/// every inlier.
pub fn fit_dominant_plane(
    points: &[Vector3<f64>],
    threshold: f64,
    iters: usize,
    seed: u64,
) -> Option<(Plane, usize)> {
    if points.len() < 3 {
        return None;
    }
    let stride = points.len().div_ceil(RANSAC_SAMPLE);
    let sample: Vec<Vector3<f64>> = points.iter().step_by(stride).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Plane, usize)> = None;
    for _ in 0..iters {
        let i = rng.random_range(0..sample.len());
        let j = rng.random_range(0..sample.len());
        let k = rng.random_range(0..sample.len());
        let Some(pl) = Plane::through(&sample[i], &sample[j], &sample[k]) else {
            continue;
        };
        let n = sample
            .iter()
            .filter(|p| pl.distance(p).abs() <= threshold)
            .count();
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((pl, n));
        }
    }
    let (pl, _) = best?;
    let inliers: Vec<Vector3<f64>> = points
        .iter()
        .filter(|p| pl.distance(p).abs() <= threshold)
        .copied()
        .collect();
    if inliers.len() < 3 {
        return None;
    }
    let refit = Plane::fit(&inliers);
    let count = points
        .iter()
        .filter(|p| refit.distance(p).abs() <= threshold)
        .count();
    Some((refit, count))
}

struct UnionFind(Vec<u32>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n as u32).collect())
    }

    fn find(&mut self, mut i: u32) -> u32 {
        while self.0[i as usize] != i {
            let p = self.0[self.0[i as usize] as usize];
            self.0[i as usize] = p;
            i = p;
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi as usize] = lo;
        }
    }
}

/// One instance proposal: sorted pixel indices and a confidence in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub pixels: Vec<usize>,
    pub confidence: f64,
}

fn sorted_intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Drops proposals overlapping an already kept, larger one by more than
/// `iou`. Input must be sorted by decreasing size.
pub fn suppress_overlaps(props: Vec<Proposal>, iou: f64) -> Vec<Proposal> {
    let mut kept: Vec<Proposal> = Vec::new();
    for p in props {
        let dup = kept.iter().any(|k| {
            let inter = sorted_intersection(&k.pixels, &p.pixels) as f64;
            let union = (k.pixels.len() + p.pixels.len()) as f64 - inter;
            union > 0.0 && inter / union > iou
        });
        if !dup {
            kept.push(p);
        }
    }
    kept
}

/// Proposals sorted by decreasing size.
pub fn propose_instances(
    depth: &DepthImage,
    k: &CameraIntrinsics,
    cfg: &SegmentConfig,
) -> Result<Vec<Proposal>> {
    cfg.validate()?;
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::invalid("depth size does not match the camera"));
    }
    let (w, h) = (depth.width, depth.height);
    let mut points = vec![None; w * h];
    let mut valid = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let z = depth.data[v * w + u];
            if z > 0.0 && z.is_finite() {
                let p = Vector3::new(
                    (u as f64 - k.cx) / k.fx * z,
                    (v as f64 - k.cy) / k.fy * z,
                    z,
                );
                points[v * w + u] = Some(p);
                valid.push(p);
            }
        }
    }
    if valid.is_empty() {
        return Ok(Vec::new());
    }

    if let Some((plane, count)) =
        fit_dominant_plane(&valid, cfg.plane_threshold, cfg.ransac_iters, cfg.seed)
    {
        if count as f64 >= cfg.min_plane_fraction * valid.len() as f64 {
            let mut d: Vec<f64> = valid
                .iter()
                .map(|p| plane.distance(p).abs())
                .filter(|d| *d <= cfg.plane_threshold)
                .collect();
            let mid = d.len() / 2;
            let (_, med, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
            let sigma = 1.4826 * *med;
            let band = (3.0 * sigma).max(MIN_BAND).min(cfg.plane_threshold);
            for p in points.iter_mut() {
                if p.is_some_and(|q| plane.distance(&q).abs() <= band) {
                    *p = None;
                }
            }
        }
    }

    let mut uf = UnionFind::new(w * h);
    let d2 = cfg.cluster_distance * cfg.cluster_distance;
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let Some(p) = points[i] else { continue };
            let mut link = |j: usize| {
                if let Some(q) = points[j] {
                    if (p - q).norm_squared() <= d2 {
                        uf.union(i as u32, j as u32);
                    }
                }
            };
            if u + 1 < w {
                link(i + 1);
            }
            if v + 1 < h {
                link(i + w);
                if u + 1 < w {
                    link(i + w + 1);
                }
                if u > 0 {
                    link(i + w - 1);
                }
            }
        }
    }

    let mut groups: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, p) in points.iter().enumerate() {
        if p.is_some() {
            groups.entry(uf.find(i as u32)).or_default().push(i);
        }
    }
    let mut comps: Vec<Vec<usize>> = groups
        .into_values()
        .filter(|g| g.len() >= cfg.min_component)
        .collect();
    // Stable on ties: groups are keyed by their smallest pixel index.
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    let Some(largest) = comps.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    let props = comps
        .into_iter()
        .map(|pixels| Proposal {
            confidence: pixels.len() as f64 / largest as f64,
            pixels,
        })
        .collect();
    Ok(suppress_overlaps(props, cfg.nms_iou))
}

/// Labels proposals 1..=k in decreasing size; at most 255 are kept.
pub fn proposals_to_mask(props: &[Proposal], width: usize, height: usize) -> InstanceMask {
    let mut mask = InstanceMask::zeros(width, height);
    for (label, p) in props.iter().take(255).enumerate() {
        for &i in &p.pixels {
            mask.data[i] = label as u8 + 1;
        }
    }
    mask
}

pub fn segment_instances(
    depth: &DepthImage,
    k: &CameraIntrinsics,
    cfg: &SegmentConfig,
) -> Result<InstanceMask> {
    let props = propose_instances(depth, k, cfg)?;
    Ok(proposals_to_mask(&props, depth.width, depth.height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneConfig};

    fn cfg(n: usize, seed: u64) -> SceneConfig {
        SceneConfig {
            n_boxes: n,
            camera: CameraIntrinsics::new(700.0, 700.0, 319.5, 239.5, 640, 480).unwrap(),
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn empty_depth_gives_empty_mask() {
        let k = CameraIntrinsics::new(100.0, 100.0, 15.5, 11.5, 32, 24).unwrap();
        let m =
            segment_instances(&DepthImage::zeros(32, 24), &k, &SegmentConfig::default()).unwrap();
        assert_eq!(m.max_label(), 0);
    }

    #[test]
    fn single_box_matches_gt_mask() {
        for seed in 0..5 {
            let s = generate_scene(&cfg(1, seed)).unwrap();
            let m = segment_instances(&s.depth, &s.camera, &SegmentConfig::default()).unwrap();
            assert_eq!(m.max_label(), 1, "seed {seed}");
            let gt = s.masks.count(1);
            let diff = m
                .data
                .iter()
                .zip(&s.masks.data)
                .filter(|(a, b)| (**a == 1) != (**b == 1))
                .count();
            assert!(
                (diff as f64) < 0.02 * gt as f64,
                "seed {seed}: {diff} of {gt}"
            );
        }
    }

    #[test]
    fn labels_are_contiguous_and_on_valid_depth() {
        let s = generate_scene(&SceneConfig {
            depth_noise_sigma: 0.002,
            ..cfg(3, 7)
        })
        .unwrap();
        let m = segment_instances(&s.depth, &s.camera, &SegmentConfig::default()).unwrap();
        let k = m.max_label();
        for l in 1..=k {
            assert!(m.count(l) > 0);
        }
        for (l, z) in m.data.iter().zip(&s.depth.data) {
            assert!(*l == 0 || *z > 0.0);
        }
        let again = segment_instances(&s.depth, &s.camera, &SegmentConfig::default()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn nms_drops_duplicates() {
        let a = Proposal {
            pixels: (0..100).collect(),
            confidence: 1.0,
        };
        let b = Proposal {
            pixels: (10..100).collect(),
            confidence: 0.9,
        };
        let c = Proposal {
            pixels: (200..250).collect(),
            confidence: 0.5,
        };
        let out = suppress_overlaps(vec![a, b, c], 0.5);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].pixels[0], 200);
    }

    #[test]
    fn plane_fit_recovers_plane() {
        let pts: Vec<Vector3<f64>> = (0..400)
            .map(|i| {
                let (x, y) = ((i % 20) as f64 * 0.1, (i / 20) as f64 * 0.1);
                Vector3::new(x, y, 2.0 + 0.5 * x)
            })
            .collect();
        let (pl, n) = fit_dominant_plane(&pts, 0.001, 50, 3).unwrap();
        assert_eq!(n, 400);
        let expect = Vector3::new(-0.5, 0.0, 1.0).normalize();
        assert!(pl.normal.dot(&expect).abs() > 1.0 - 1e-9);
    }
}
