//! Per-scene estimation: masks → point cloud → pose hypotheses → scale
//! search, and evaluation against ground truth.

use std::fmt::Write as _;
use std::time::Instant;

use crate::depthfilter::{FilterConfig, Observation};
use crate::dimsearch::{estimate_dimensions, PoseSource, SearchConfig, SearchTrace};
use crate::error::{Error, Result};
use crate::metrics::{
    align_box_axes, iou3d, match_predictions, rotation_error_sym, translation_error_cm,
    InstanceResult, Prediction, ResultRow,
};
use crate::pose::{
    backproject, estimate_pose, icp_refine, obb_init, seat, side_of, PointCloud, PoseConfig,
    PoseEstimate,
};
use crate::scenegen::{GtInstance, Scene};
use crate::segment::{proposals_to_mask, propose_instances, SegmentConfig};
use crate::types::{scaled_template, BoxDims, CameraIntrinsics, DepthImage, InstanceMask, Pose};

/// Instances with fewer valid points are skipped.
pub const MIN_INSTANCE_POINTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PipelineConfig {
    pub segment: SegmentConfig,
    pub pose: PoseConfig,
    pub filter: FilterConfig,
    pub filter_enabled: bool,
    pub search: SearchConfig,
}

impl PipelineConfig {
    pub fn new() -> Self {
        Self {
            filter_enabled: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.segment.validate()?;
        self.filter.validate()?;
        self.search.validate()
    }

    fn filter(&self) -> Option<&FilterConfig> {
        self.filter_enabled.then_some(&self.filter)
    }
}

/// Pose provider of the scale search for one instance.
pub struct InstancePoses<'a> {
    pub cloud: &'a PointCloud,
    pub frame: Pose,
    pub obs: Observation<'a>,
    pub cfg: &'a PipelineConfig,
}

impl PoseSource for InstancePoses<'_> {
    fn estimate(&mut self, dims: &BoxDims, prev: Option<&Pose>) -> Result<Pose> {
        if let (true, Some(p)) = (self.cfg.search.warm_start, prev) {
            return self.refresh(dims, p);
        }
        let est = estimate_pose(
            self.cloud,
            &self.frame,
            dims,
            prev,
            &self.obs,
            self.cfg.filter(),
            &self.cfg.pose,
        )?;
        Ok(est.pose)
    }

    fn refresh(&mut self, dims: &BoxDims, pose: &Pose) -> Result<Pose> {
        let fine = self.cloud.subsample(self.cfg.pose.final_points);
        let seated = seat(self.cloud, &pose.rotation, dims, side_of(self.cloud, pose));
        Ok(icp_refine(&fine, dims, &seated, &self.cfg.pose.icp)?.pose)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceEstimate {
    pub label: u8,
    pub confidence: f64,
    pub outcome: std::result::Result<(Pose, BoxDims), String>,
    pub trace: SearchTrace,
    pub wall_time_s: f64,
}

impl InstanceEstimate {
    pub fn prediction(&self) -> Option<Prediction> {
        self.outcome.as_ref().ok().map(|(pose, dims)| Prediction {
            pose: *pose,
            dims: *dims,
            confidence: self.confidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneEstimate {
    pub mask: InstanceMask,
    pub instances: Vec<InstanceEstimate>,
    /// Masks came from the segmenter.
    pub segmented: bool,
}

/// Labels present in `mask` with their relative size as confidence.
fn labels_with_confidence(mask: &InstanceMask) -> Vec<(u8, f64)> {
    let mut counts = [0usize; 256];
    for l in &mask.data {
        counts[*l as usize] += 1;
    }
    let largest = counts[1..].iter().copied().max().unwrap_or(0).max(1);
    (1..=255u8)
        .filter(|l| counts[*l as usize] > 0)
        .map(|l| (l, counts[l as usize] as f64 / largest as f64))
        .collect()
}

pub fn estimate_instance(
    depth: &DepthImage,
    mask: &InstanceMask,
    label: u8,
    camera: &CameraIntrinsics,
    cfg: &PipelineConfig,
) -> std::result::Result<(Pose, BoxDims, SearchTrace), (Error, SearchTrace)> {
    let fail = |e| (e, SearchTrace::default());
    let cloud = backproject(depth, mask, label, camera).map_err(fail)?;
    if cloud.len() < MIN_INSTANCE_POINTS {
        return Err(fail(Error::DegenerateCloud(format!(
            "{} points",
            cloud.len()
        ))));
    }
    let (frame, _) = obb_init(&cloud).map_err(fail)?;
    let obs = Observation {
        depth,
        mask,
        instance: label,
        camera,
    };
    let mut poses = InstancePoses {
        cloud: &cloud,
        frame,
        obs,
        cfg,
    };
    match estimate_dimensions(&obs, &mut poses, &cfg.search) {
        Ok(out) => Ok((out.pose, scaled_template(&out.scale), out.trace)),
        Err(f) => Err((f.error, f.trace)),
    }
}

/// Runs the pipeline on one frame. With `masks` the segmenter is skipped.
pub fn estimate_scene(
    depth: &DepthImage,
    camera: &CameraIntrinsics,
    masks: Option<&InstanceMask>,
    cfg: &PipelineConfig,
) -> Result<SceneEstimate> {
    cfg.validate()?;
    let (mask, segmented) = match masks {
        Some(m) => {
            if m.width != depth.width || m.height != depth.height {
                return Err(Error::invalid("mask size does not match depth"));
            }
            (m.clone(), false)
        }
        None => {
            let props = propose_instances(depth, camera, &cfg.segment)?;
            (proposals_to_mask(&props, depth.width, depth.height), true)
        }
    };
    let mut instances = Vec::new();
    for (label, confidence) in labels_with_confidence(&mask) {
        let start = Instant::now();
        let (outcome, trace) = match estimate_instance(depth, &mask, label, camera, cfg) {
            Ok((pose, dims, trace)) => (Ok((pose, dims)), trace),
            Err((e, trace)) => {
                log::warn!("instance {label}: {e}");
                (Err(e.to_string()), trace)
            }
        };
        instances.push(InstanceEstimate {
            label,
            confidence,
            outcome,
            trace,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(SceneEstimate {
        mask,
        instances,
        segmented,
    })
}

/// Pose of one gt-masked instance with its true dimensions, i.e. the pose
/// stage alone.
pub fn estimate_pose_known_dims(
    depth: &DepthImage,
    mask: &InstanceMask,
    label: u8,
    camera: &CameraIntrinsics,
    dims: &BoxDims,
    cfg: &PipelineConfig,
) -> Result<PoseEstimate> {
    let cloud = backproject(depth, mask, label, camera)?;
    let (frame, _) = obb_init(&cloud)?;
    let obs = Observation {
        depth,
        mask,
        instance: label,
        camera,
    };
    estimate_pose(&cloud, &frame, dims, None, &obs, cfg.filter(), &cfg.pose)
}

/// Matches estimates to ground truth and builds one row per gt instance.
pub fn evaluate_scene(
    scene_id: &str,
    gt: &[GtInstance],
    est: &SceneEstimate,
) -> (Vec<ResultRow>, Vec<InstanceResult>) {
    let ok: Vec<&InstanceEstimate> = est.instances.iter().filter(|i| i.outcome.is_ok()).collect();
    let preds: Vec<Prediction> = ok.iter().filter_map(|i| i.prediction()).collect();
    let gts: Vec<(Pose, BoxDims)> = gt.iter().map(|g| (g.pose, g.dims)).collect();
    let assigned = match_predictions(&gts, &preds);
    let mut rows = Vec::with_capacity(gt.len());
    let mut results = Vec::with_capacity(gt.len());
    for (g, a) in gt.iter().zip(assigned) {
        let row = match a {
            Some(pi) => {
                let p = &preds[pi];
                let inst = ok[pi];
                ResultRow {
                    scene_id: scene_id.to_string(),
                    instance_id: g.id as u32,
                    iou3d: iou3d(&p.pose, &p.dims, &g.pose, &g.dims),
                    rot_err_deg: {
                        let (ap, _) = align_box_axes(&p.pose, &p.dims, &g.dims, &g.pose.rotation);
                        rotation_error_sym(&ap.rotation, &g.pose.rotation, &g.dims)
                    },
                    trans_err_cm: translation_error_cm(&p.pose, &g.pose),
                    iterations: inst.trace.iterations_used,
                    wall_time_s: inst.wall_time_s,
                    trace_reason: inst.trace.reason.map(|r| r.to_string()).unwrap_or_default(),
                }
            }
            None => ResultRow {
                scene_id: scene_id.to_string(),
                instance_id: g.id as u32,
                iou3d: 0.0,
                rot_err_deg: f64::NAN,
                trans_err_cm: f64::NAN,
                iterations: 0,
                wall_time_s: 0.0,
                trace_reason: "unmatched".into(),
            },
        };
        rows.push(row);
        results.push(InstanceResult {
            gt_pose: g.pose,
            gt_dims: g.dims,
            pred: a.map(|pi| (preds[pi].pose, preds[pi].dims)),
        });
    }
    (rows, results)
}

pub fn run_scene(
    scene_id: &str,
    scene: &Scene,
    masks: Option<&InstanceMask>,
    cfg: &PipelineConfig,
) -> Result<(SceneEstimate, Vec<ResultRow>, Vec<InstanceResult>)> {
    let est = estimate_scene(&scene.depth, &scene.camera, masks, cfg)?;
    let (rows, results) = evaluate_scene(scene_id, &scene.gt, &est);
    Ok((est, rows, results))
}

pub const TRACE_HEADER: &str = "scene_id,label,iter,sx,sy,sz,lo_x,lo_y,lo_z,hi_x,hi_y,hi_z,\
ecad_x,ecad_y,ecad_z,eobs_x,eobs_y,eobs_z,kind_x,kind_y,kind_z,dec_x,dec_y,dec_z,reason,mask_source";

/// Per-iteration trace rows of one scene; free of timing.
pub fn trace_rows(scene_id: &str, est: &SceneEstimate) -> Vec<String> {
    let source = if est.segmented {
        "segmenter"
    } else {
        "provided"
    };
    let mut out = Vec::new();
    for inst in &est.instances {
        let reason = match (&inst.outcome, inst.trace.reason) {
            (Err(e), _) => format!("failed: {}", e.replace(',', ";")),
            (Ok(_), Some(r)) => r.to_string(),
            (Ok(_), None) => String::new(),
        };
        for (i, r) in inst.trace.records.iter().enumerate() {
            let mut s = format!("{scene_id},{},{}", inst.label, i + 1);
            for v in [&r.scale, &r.lo, &r.hi, &r.e_cad, &r.e_obs] {
                for x in v.iter() {
                    let _ = write!(s, ",{x:.6}");
                }
            }
            for k in r.kinds {
                let _ = write!(s, ",{}", k.as_str());
            }
            for d in r.decisions {
                let _ = write!(s, ",{}", d.as_str());
            }
            let _ = write!(s, ",{reason},{source}");
            out.push(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneConfig};

    fn scene(seed: u64) -> Scene {
        generate_scene(&SceneConfig {
            n_boxes: 1,
            camera: CameraIntrinsics::new(700.0, 700.0, 319.5, 239.5, 640, 480).unwrap(),
            seed,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn clean_single_box_end_to_end() {
        let s = scene(3);
        let cfg = PipelineConfig::new();
        let (est, rows, _) = run_scene("s", &s, None, &cfg).unwrap();
        assert!(est.segmented);
        assert_eq!(rows.len(), 1);
        let p = est.instances[0].prediction().unwrap();
        let (_, d) = align_box_axes(&p.pose, &p.dims, &s.gt[0].dims, &s.gt[0].pose.rotation);
        assert!((d.as_vector() - s.gt[0].dims.as_vector()).abs().max() < 0.02);
        assert!(rows[0].iou3d >= 0.9, "{:?}", rows[0]);
    }

    #[test]
    fn provided_masks_skip_segmentation() {
        let s = scene(4);
        let cfg = PipelineConfig::new();
        let (est, _, _) = run_scene("s", &s, Some(&s.masks), &cfg).unwrap();
        assert!(!est.segmented);
        assert_eq!(est.mask, s.masks);
        assert!(trace_rows("s", &est)
            .iter()
            .all(|r| r.ends_with(",provided")));
    }

    #[test]
    fn unmatched_gt_row() {
        let s = scene(5);
        let est = SceneEstimate {
            mask: InstanceMask::zeros(640, 480),
            instances: vec![],
            segmented: true,
        };
        let (rows, results) = evaluate_scene("x", &s.gt, &est);
        assert_eq!(rows[0].trace_reason, "unmatched");
        assert!(results[0].pred.is_none());
    }
}
