//! Flat `module.field = value` run configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Vector
//! values are comma separated; a single value is repeated on every axis.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::scenegen::SceneConfig;
use crate::types::ScaleInterval;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Config {
    pub scene: SceneConfig,
    /// Scenes written by `generate`.
    pub n_scenes: usize,
    /// Seed of the first generated scene; scene `i` uses `seed + i`.
    pub seed: u64,
    pub pipeline: PipelineConfig,
    /// Repetitions of each arm of an ablation.
    pub runs: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            n_scenes: 10,
            seed: 0,
            pipeline: PipelineConfig::new(),
            runs: 50,
        }
    }
}

/// Every key accepted by [`Config::set`].
pub const KEYS: &[&str] = &[
    "generate.n_scenes",
    "generate.seed",
    "scene.n_boxes",
    "scene.dims_min",
    "scene.dims_max",
    "scene.dims_range",
    "scene.layout",
    "scene.occlusion_level",
    "scene.depth_noise_sigma",
    "scene.dropout_rate",
    "scene.depth_quantum",
    "camera.fx",
    "camera.fy",
    "camera.cx",
    "camera.cy",
    "camera.width",
    "camera.height",
    "rig.distance",
    "rig.pitch_deg",
    "rig.yaw_deg",
    "rig.lateral",
    "rig.stack_yaw_jitter_deg",
    "rig.stack_offset_jitter",
    "rig.max_tilt_deg",
    "rig.spread",
    "rig.floor",
    "rig.max_range",
    "segment.plane_threshold",
    "segment.cluster_distance",
    "segment.min_component",
    "segment.ransac_iters",
    "segment.min_plane_fraction",
    "segment.nms_iou",
    "segment.seed",
    "pose.coarse_points",
    "pose.coarse_iters",
    "pose.final_points",
    "pose.score_delta",
    "pose.tie_margin",
    "icp.max_iters",
    "icp.rot_tol_deg",
    "icp.trans_tol",
    "icp.max_correspondence_dist",
    "filter.enabled",
    "filter.tau_d",
    "filter.max_median_residual",
    "filter.max_protrusion",
    "filter.min_coverage",
    "search.tau_px",
    "search.tau_scale",
    "search.t_max",
    "search.bounds",
    "search.early_stop_enabled",
    "search.vertex_align_tol",
    "search.unobservable_angle",
    "search.max_extent_condition",
    "search.min_search_iters",
    "search.warm_start",
    "search.span_percentile",
    "ablate.runs",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn vec3(key: &str, v: &str) -> Result<Vector3<f64>> {
    match list(key, v)?.as_slice() {
        [x] => Ok(Vector3::repeat(*x)),
        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
        _ => Err(Error::config(key, "expected 1 or 3 comma-separated values")),
    }
}

fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match list(key, v)?.as_slice() {
        [x] => Ok((*x, *x)),
        [x, y] => Ok((*x, *y)),
        _ => Err(Error::config(key, "expected `min,max`")),
    }
}

/// `lo,hi` for every axis, or `lo_x,lo_y,lo_z,hi_x,hi_y,hi_z`.
pub fn parse_bounds(key: &str, v: &str) -> Result<ScaleInterval> {
    let r = match list(key, v)?.as_slice() {
        [lo, hi] => ScaleInterval::uniform(*lo, *hi),
        [a, b, c, d, e, f] => {
            ScaleInterval::new(Vector3::new(*a, *b, *c), Vector3::new(*d, *e, *f))
        }
        _ => return Err(Error::config(key, "expected `lo,hi` or six values")),
    };
    r.map_err(|e| Error::config(key, e.to_string()))
}

impl Config {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let sc = &mut self.scene;
        let p = &mut self.pipeline;
        match key {
            "generate.n_scenes" => self.n_scenes = num(key, v)?,
            "generate.seed" => self.seed = num(key, v)?,
            "scene.n_boxes" => sc.n_boxes = num(key, v)?,
            "scene.dims_min" => sc.dims_min = vec3(key, v)?,
            "scene.dims_max" => sc.dims_max = vec3(key, v)?,
            "scene.dims_range" => {
                let (lo, hi) = pair(key, v)?;
                sc.dims_min = Vector3::repeat(lo);
                sc.dims_max = Vector3::repeat(hi);
            }
            "scene.layout" => sc.layout = v.parse().map_err(|e: String| Error::config(key, e))?,
            "scene.occlusion_level" => sc.occlusion_level = num(key, v)?,
            "scene.depth_noise_sigma" => sc.depth_noise_sigma = num(key, v)?,
            "scene.dropout_rate" => sc.dropout_rate = num(key, v)?,
            "scene.depth_quantum" => sc.depth_quantum = num(key, v)?,
            "camera.fx" => sc.camera.fx = num(key, v)?,
            "camera.fy" => sc.camera.fy = num(key, v)?,
            "camera.cx" => sc.camera.cx = num(key, v)?,
            "camera.cy" => sc.camera.cy = num(key, v)?,
            "camera.width" => sc.camera.width = num(key, v)?,
            "camera.height" => sc.camera.height = num(key, v)?,
            "rig.distance" => sc.rig.distance = pair(key, v)?,
            "rig.pitch_deg" => sc.rig.pitch_deg = pair(key, v)?,
            "rig.yaw_deg" => sc.rig.yaw_deg = pair(key, v)?,
            "rig.lateral" => sc.rig.lateral = num(key, v)?,
            "rig.stack_yaw_jitter_deg" => sc.rig.stack_yaw_jitter_deg = num(key, v)?,
            "rig.stack_offset_jitter" => sc.rig.stack_offset_jitter = num(key, v)?,
            "rig.max_tilt_deg" => sc.rig.max_tilt_deg = num(key, v)?,
            "rig.spread" => sc.rig.spread = num(key, v)?,
            "rig.floor" => sc.rig.floor = flag(key, v)?,
            "rig.max_range" => sc.rig.max_range = num(key, v)?,
            "segment.plane_threshold" => p.segment.plane_threshold = num(key, v)?,
            "segment.cluster_distance" => p.segment.cluster_distance = num(key, v)?,
            "segment.min_component" => p.segment.min_component = num(key, v)?,
            "segment.ransac_iters" => p.segment.ransac_iters = num(key, v)?,
            "segment.min_plane_fraction" => p.segment.min_plane_fraction = num(key, v)?,
            "segment.nms_iou" => p.segment.nms_iou = num(key, v)?,
            "segment.seed" => p.segment.seed = num(key, v)?,
            "pose.coarse_points" => p.pose.coarse_points = num(key, v)?,
            "pose.coarse_iters" => p.pose.coarse_iters = num(key, v)?,
            "pose.final_points" => p.pose.final_points = num(key, v)?,
            "pose.score_delta" => p.pose.score_delta = num(key, v)?,
            "pose.tie_margin" => p.pose.tie_margin = num(key, v)?,
            "icp.max_iters" => p.pose.icp.max_iters = num(key, v)?,
            "icp.rot_tol_deg" => p.pose.icp.rot_tol_deg = num(key, v)?,
            "icp.trans_tol" => p.pose.icp.trans_tol = num(key, v)?,
            "icp.max_correspondence_dist" => p.pose.icp.max_correspondence_dist = num(key, v)?,
            "filter.enabled" => p.filter_enabled = flag(key, v)?,
            "filter.tau_d" => p.filter.tau_d = num(key, v)?,
            "filter.max_median_residual" => p.filter.max_median_residual = num(key, v)?,
            "filter.max_protrusion" => p.filter.max_protrusion = num(key, v)?,
            "filter.min_coverage" => p.filter.min_coverage = num(key, v)?,
            "search.tau_px" => p.search.tau_px = num(key, v)?,
            "search.tau_scale" => p.search.tau_scale = num(key, v)?,
            "search.t_max" => p.search.t_max = num(key, v)?,
            "search.bounds" => p.search.bounds_init = parse_bounds(key, v)?,
            "search.early_stop_enabled" => p.search.early_stop_enabled = flag(key, v)?,
            "search.vertex_align_tol" => p.search.vertex_align_tol = num(key, v)?,
            "search.unobservable_angle" => p.search.unobservable_angle = num(key, v)?,
            "search.max_extent_condition" => p.search.max_extent_condition = num(key, v)?,
            "search.min_search_iters" => p.search.min_search_iters = num(key, v)?,
            "search.warm_start" => p.search.warm_start = flag(key, v)?,
            "search.span_percentile" => p.search.span_percentile = num(key, v)?,
            "ablate.runs" => self.runs = num(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies every setting of a config text on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", i + 1), "expected `key = value`")
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.pipeline.validate()?;
        if self.runs == 0 {
            return Err(Error::config("ablate.runs", "must be positive"));
        }
        Ok(())
    }

    /// Scene configuration of generated scene `i`.
    pub fn scene_config(&self, i: usize) -> SceneConfig {
        SceneConfig {
            seed: self.seed.wrapping_add(i as u64),
            ..self.scene
        }
    }

    /// The config as text that [`Config::parse`] reads back to `self`.
    pub fn to_text(&self) -> String {
        let sc = &self.scene;
        let p = &self.pipeline;
        let v3 = |v: &Vector3<f64>| format!("{},{},{}", v.x, v.y, v.z);
        let pr = |(a, b): (f64, f64)| format!("{a},{b}");
        let b = &p.search.bounds_init;
        let lines = [
            ("generate.n_scenes", self.n_scenes.to_string()),
            ("generate.seed", self.seed.to_string()),
            ("scene.n_boxes", sc.n_boxes.to_string()),
            ("scene.dims_min", v3(&sc.dims_min)),
            ("scene.dims_max", v3(&sc.dims_max)),
            ("scene.layout", sc.layout.to_string()),
            ("scene.occlusion_level", sc.occlusion_level.to_string()),
            ("scene.depth_noise_sigma", sc.depth_noise_sigma.to_string()),
            ("scene.dropout_rate", sc.dropout_rate.to_string()),
            ("scene.depth_quantum", sc.depth_quantum.to_string()),
            ("camera.fx", sc.camera.fx.to_string()),
            ("camera.fy", sc.camera.fy.to_string()),
            ("camera.cx", sc.camera.cx.to_string()),
            ("camera.cy", sc.camera.cy.to_string()),
            ("camera.width", sc.camera.width.to_string()),
            ("camera.height", sc.camera.height.to_string()),
            ("rig.distance", pr(sc.rig.distance)),
            ("rig.pitch_deg", pr(sc.rig.pitch_deg)),
            ("rig.yaw_deg", pr(sc.rig.yaw_deg)),
            ("rig.lateral", sc.rig.lateral.to_string()),
            (
                "rig.stack_yaw_jitter_deg",
                sc.rig.stack_yaw_jitter_deg.to_string(),
            ),
            (
                "rig.stack_offset_jitter",
                sc.rig.stack_offset_jitter.to_string(),
            ),
            ("rig.max_tilt_deg", sc.rig.max_tilt_deg.to_string()),
            ("rig.spread", sc.rig.spread.to_string()),
            ("rig.floor", sc.rig.floor.to_string()),
            ("rig.max_range", sc.rig.max_range.to_string()),
            (
                "segment.plane_threshold",
                p.segment.plane_threshold.to_string(),
            ),
            (
                "segment.cluster_distance",
                p.segment.cluster_distance.to_string(),
            ),
            ("segment.min_component", p.segment.min_component.to_string()),
            ("segment.ransac_iters", p.segment.ransac_iters.to_string()),
            (
                "segment.min_plane_fraction",
                p.segment.min_plane_fraction.to_string(),
            ),
            ("segment.nms_iou", p.segment.nms_iou.to_string()),
            ("segment.seed", p.segment.seed.to_string()),
            ("pose.coarse_points", p.pose.coarse_points.to_string()),
            ("pose.coarse_iters", p.pose.coarse_iters.to_string()),
            ("pose.final_points", p.pose.final_points.to_string()),
            ("pose.score_delta", p.pose.score_delta.to_string()),
            ("pose.tie_margin", p.pose.tie_margin.to_string()),
            ("icp.max_iters", p.pose.icp.max_iters.to_string()),
            ("icp.rot_tol_deg", p.pose.icp.rot_tol_deg.to_string()),
            ("icp.trans_tol", p.pose.icp.trans_tol.to_string()),
            (
                "icp.max_correspondence_dist",
                p.pose.icp.max_correspondence_dist.to_string(),
            ),
            ("filter.enabled", p.filter_enabled.to_string()),
            ("filter.tau_d", p.filter.tau_d.to_string()),
            (
                "filter.max_median_residual",
                p.filter.max_median_residual.to_string(),
            ),
            ("filter.max_protrusion", p.filter.max_protrusion.to_string()),
            ("filter.min_coverage", p.filter.min_coverage.to_string()),
            ("search.tau_px", p.search.tau_px.to_string()),
            ("search.tau_scale", p.search.tau_scale.to_string()),
            ("search.t_max", p.search.t_max.to_string()),
            ("search.bounds", format!("{},{}", v3(&b.lo), v3(&b.hi))),
            (
                "search.early_stop_enabled",
                p.search.early_stop_enabled.to_string(),
            ),
            (
                "search.vertex_align_tol",
                p.search.vertex_align_tol.to_string(),
            ),
            (
                "search.unobservable_angle",
                p.search.unobservable_angle.to_string(),
            ),
            (
                "search.max_extent_condition",
                p.search.max_extent_condition.to_string(),
            ),
            (
                "search.min_search_iters",
                p.search.min_search_iters.to_string(),
            ),
            ("search.warm_start", p.search.warm_start.to_string()),
            (
                "search.span_percentile",
                p.search.span_percentile.to_string(),
            ),
            ("ablate.runs", self.runs.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::Layout;

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn parses_comments_and_vectors() {
        let c = Config::parse(
            "# suite\n\nscene.layout = stack  # column\nscene.dims_min = 0.1,0.2,0.3\nscene.dims_max=0.9\nsearch.bounds = 0.1, 3\nfilter.enabled = false\n",
        )
        .unwrap();
        assert_eq!(c.scene.layout, Layout::Stack);
        assert_eq!(c.scene.dims_min, Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(c.scene.dims_max, Vector3::repeat(0.9));
        assert_eq!(c.pipeline.search.bounds_init.hi, Vector3::repeat(3.0));
        assert!(!c.pipeline.filter_enabled);
    }

    #[test]
    fn unknown_key_names_the_field() {
        assert_eq!(
            field_of(Config::parse("search.tau = 3").unwrap_err()),
            "search.tau"
        );
    }

    #[test]
    fn invalid_dims_range_names_the_field() {
        let e = Config::parse("scene.dims_min = 0.5\nscene.dims_max = 0.4").unwrap_err();
        assert_eq!(field_of(e), "scene.dims_range");
    }

    #[test]
    fn bad_value_and_missing_equals() {
        assert_eq!(
            field_of(Config::parse("search.t_max = many").unwrap_err()),
            "search.t_max"
        );
        assert_eq!(
            field_of(Config::parse("\nsearch.t_max").unwrap_err()),
            "line 2"
        );
    }

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut c = Config::default();
        c.apply(
            "scene.dims_min = 0.11,0.12,0.13\nsearch.bounds = 0.1,0.2,0.3,1,2,3\nrig.floor = false",
        )
        .unwrap();
        let text = c.to_text();
        assert_eq!(Config::parse(&text).unwrap(), c);
        let keys: Vec<&str> = text
            .lines()
            .map(|l| l.split(" = ").next().unwrap())
            .collect();
        let expected: Vec<&str> = KEYS
            .iter()
            .copied()
            .filter(|k| *k != "scene.dims_range")
            .collect();
        assert_eq!(keys, expected);
    }
}
