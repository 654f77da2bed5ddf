//! Render-and-compare rejection of pose hypotheses.
//!
//! Each hypothesis is rendered and compared with the observed depth on the
//! pixels covered by both the rendering and the observed instance. A wrong
//! rotation usually puts a different face where the observed surface is, or
//! places the box in front of it; both show up as large residuals or as
//! rendered depth protruding toward the camera.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::render::{rasterize_box_in, Window};
use crate::types::{BoxDims, CameraIntrinsics, DepthImage, Hypothesis, InstanceMask};

/// Depth agreement of one rendered hypothesis with the observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthStats {
    /// Median of `|rendered - observed|` over the compared pixels, meters.
    /// `f64::INFINITY` when nothing could be compared.
    pub median_abs_residual: f64,
    /// Fraction of compared pixels where the rendering is more than `tau_d`
    /// in front of the observed surface.
    pub protrusion_fraction: f64,
    /// Compared pixels over rendered pixels.
    pub coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub tau_d: f64,
    pub max_median_residual: f64,
    pub max_protrusion: f64,
    pub min_coverage: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            tau_d: 0.015,
            max_median_residual: 0.02,
            max_protrusion: 0.2,
            min_coverage: 0.3,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("filter.{name}"), "must be positive"))
            }
        };
        pos(self.tau_d, "tau_d")?;
        pos(self.max_median_residual, "max_median_residual")?;
        pos(self.max_protrusion, "max_protrusion")?;
        pos(self.min_coverage, "min_coverage")?;
        if self.max_protrusion > 1.0 {
            return Err(Error::config("filter.max_protrusion", "must be <= 1"));
        }
        if self.min_coverage > 1.0 {
            return Err(Error::config("filter.min_coverage", "must be <= 1"));
        }
        Ok(())
    }

    pub fn accepts(&self, s: &DepthStats) -> bool {
        s.median_abs_residual <= self.max_median_residual
            && s.protrusion_fraction <= self.max_protrusion
            && s.coverage >= self.min_coverage
    }
}

/// The observed frame an instance is compared against.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub depth: &'a DepthImage,
    pub mask: &'a InstanceMask,
    pub instance: u8,
    pub camera: &'a CameraIntrinsics,
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Compares one rendered hypothesis with the observed instance.
pub fn depth_stats(
    h: &Hypothesis,
    dims: &BoxDims,
    obs: &Observation<'_>,
    tau_d: f64,
) -> Result<DepthStats> {
    check_sizes(obs)?;
    depth_stats_in(h, dims, obs, tau_d, obs.mask.bbox(obs.instance))
}

fn check_sizes(obs: &Observation<'_>) -> Result<()> {
    if obs.depth.width != obs.camera.width
        || obs.depth.height != obs.camera.height
        || obs.mask.width != obs.camera.width
        || obs.mask.height != obs.camera.height
    {
        return Err(Error::invalid("observation size does not match the camera"));
    }
    Ok(())
}

/// Depth is rendered only inside `window`, the instance's bounding window.
fn depth_stats_in(
    h: &Hypothesis,
    dims: &BoxDims,
    obs: &Observation<'_>,
    tau_d: f64,
    window: Option<Window>,
) -> Result<DepthStats> {
    let Some(window) = window else {
        return Ok(DepthStats {
            median_abs_residual: f64::INFINITY,
            protrusion_fraction: 0.0,
            coverage: 0.0,
        });
    };
    let (raster, rendered) = rasterize_box_in(dims, &h.pose, obs.camera, window)?;
    let mut protruding = 0usize;
    let mut residuals = Vec::new();
    for (u, v, z) in raster.covered() {
        let i = v * obs.camera.width + u;
        if obs.mask.data[i] != obs.instance {
            continue;
        }
        let zo = obs.depth.data[i];
        if zo <= 0.0 {
            continue;
        }
        let r = z - zo;
        if r < -tau_d {
            protruding += 1;
        }
        residuals.push(r.abs());
    }
    if residuals.is_empty() {
        return Ok(DepthStats {
            median_abs_residual: f64::INFINITY,
            protrusion_fraction: 0.0,
            coverage: 0.0,
        });
    }
    let n = residuals.len();
    Ok(DepthStats {
        median_abs_residual: median(&mut residuals),
        protrusion_fraction: protruding as f64 / n as f64,
        coverage: n as f64 / rendered as f64,
    })
}

/// Total order used to make the filter output independent of input order:
/// confidence descending, then rotation and translation entries ascending.
pub fn canonical_cmp(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.confidence.total_cmp(&a.confidence).then_with(|| {
        a.pose
            .rotation
            .iter()
            .chain(a.pose.translation.iter())
            .zip(b.pose.rotation.iter().chain(b.pose.translation.iter()))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Keeps the depth-consistent hypotheses, each annotated with its stats. If
/// none passes, returns only the one with the smallest median residual,
/// flagged as a fallback.
pub fn filter_hypotheses(
    hs: &[Hypothesis],
    dims: &BoxDims,
    obs: &Observation<'_>,
    cfg: &FilterConfig,
) -> Result<Vec<Hypothesis>> {
    if hs.is_empty() {
        return Err(Error::invalid("no hypotheses to filter"));
    }
    check_sizes(obs)?;
    let window = obs.mask.bbox(obs.instance);
    let mut scored = Vec::with_capacity(hs.len());
    for h in hs {
        let stats = depth_stats_in(h, dims, obs, cfg.tau_d, window)?;
        let mut h = h.clone();
        h.depth_stats = Some(stats);
        h.fallback = false;
        scored.push(h);
    }
    scored.sort_by(canonical_cmp);
    let kept: Vec<Hypothesis> = scored
        .iter()
        .filter(|h| cfg.accepts(h.depth_stats.as_ref().expect("stats attached")))
        .cloned()
        .collect();
    if !kept.is_empty() {
        return Ok(kept);
    }
    let best = scored
        .into_iter()
        .min_by(|a, b| {
            let ra = a.depth_stats.expect("stats attached").median_abs_residual;
            let rb = b.depth_stats.expect("stats attached").median_abs_residual;
            ra.total_cmp(&rb)
        })
        .expect("nonempty");
    Ok(vec![Hypothesis {
        fallback: true,
        ..best
    }])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::render_view;
    use crate::types::Pose;
    use nalgebra::Vector3;

    fn setup() -> (CameraIntrinsics, BoxDims, Pose, DepthImage, InstanceMask) {
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let dims = BoxDims::new(0.3, 0.2, 0.4).unwrap();
        let r = nalgebra::Rotation3::from_euler_angles(0.3, 0.4, 0.0);
        let pose = Pose::new(*r.matrix(), Vector3::new(0.0, 0.0, 1.5)).unwrap();
        let view = render_view(&dims, &pose, &k).unwrap();
        (k, dims, pose, view.depth, view.mask)
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn gt_pose_is_self_consistent() {
        let (k, dims, pose, depth, mask) = setup();
        let obs = Observation {
            depth: &depth,
            mask: &mask,
            instance: 1,
            camera: &k,
        };
        let s = depth_stats(&Hypothesis::new(pose, 1.0), &dims, &obs, 0.015).unwrap();
        assert_eq!(s.median_abs_residual, 0.0);
        assert_eq!(s.protrusion_fraction, 0.0);
        assert_eq!(s.coverage, 1.0);
    }

    #[test]
    fn hovering_pose_protrudes() {
        let (k, dims, pose, depth, mask) = setup();
        let obs = Observation {
            depth: &depth,
            mask: &mask,
            instance: 1,
            camera: &k,
        };
        let lifted = Pose::new(
            pose.rotation,
            pose.translation * (1.0 - 0.03 / pose.translation.norm()),
        )
        .unwrap();
        let s = depth_stats(&Hypothesis::new(lifted, 1.0), &dims, &obs, 0.015).unwrap();
        assert!(s.protrusion_fraction > 0.95, "{s:?}");
    }

    #[test]
    fn disjoint_domain_reports_sentinel() {
        let (k, dims, pose, depth, mask) = setup();
        let obs = Observation {
            depth: &depth,
            mask: &mask,
            instance: 1,
            camera: &k,
        };
        let far = Pose::new(pose.rotation, Vector3::new(3.0, 0.0, 1.5)).unwrap();
        let s = depth_stats(&Hypothesis::new(far, 1.0), &dims, &obs, 0.015).unwrap();
        assert_eq!(s.coverage, 0.0);
        assert!(s.median_abs_residual.is_infinite());
    }

    #[test]
    fn fallback_when_everything_fails() {
        let (k, dims, pose, depth, mask) = setup();
        let obs = Observation {
            depth: &depth,
            mask: &mask,
            instance: 1,
            camera: &k,
        };
        let hs: Vec<Hypothesis> = [0.2, 0.3, 0.5]
            .iter()
            .map(|d| {
                let t = pose.translation - Vector3::new(0.0, 0.0, *d);
                Hypothesis::new(Pose::new(pose.rotation, t).unwrap(), 0.5)
            })
            .collect();
        let out = filter_hypotheses(&hs, &dims, &obs, &FilterConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].fallback);
        assert!((out[0].pose.translation.z - (pose.translation.z - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_rejected() {
        let (k, dims, _, depth, mask) = setup();
        let obs = Observation {
            depth: &depth,
            mask: &mask,
            instance: 1,
            camera: &k,
        };
        assert!(matches!(
            filter_hypotheses(&[], &dims, &obs, &FilterConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }
}
