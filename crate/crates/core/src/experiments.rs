//! Paired ablation runs over a set of scenes.
//!
//! Both ablations use the scenes' stored instance masks so that only the
//! ablated stage differs between the two arms.

use std::time::Instant;

use crate::error::Result;
use crate::metrics::{average_precision, Criterion, InstanceResult};
use crate::pipeline::{estimate_pose_known_dims, estimate_scene, evaluate_scene, PipelineConfig};
use crate::scenegen::Scene;

/// Summary of one arm of an ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmSummary {
    pub instances: usize,
    pub precision: f64,
    pub mean_iterations: f64,
    pub std_iterations: f64,
    pub mean_wall_s: f64,
    pub std_wall_s: f64,
}

/// Feature enabled versus disabled, at one IoU threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ablation {
    pub iou: f64,
    pub with: ArmSummary,
    pub without: ArmSummary,
}

impl Ablation {
    /// Relative reduction of the mean iterations from `without` to `with`.
    pub fn iteration_reduction(&self) -> f64 {
        1.0 - self.with.mean_iterations / self.without.mean_iterations
    }

    pub fn wall_time_reduction(&self) -> f64 {
        1.0 - self.with.mean_wall_s / self.without.mean_wall_s
    }

    pub fn to_table(&self, feature: &str) -> String {
        let mut s = format!(
            "{feature},instances,precision@{:.2},iterations_mean,iterations_std,wall_s_mean,wall_s_std\n",
            self.iou
        );
        for (name, a) in [("on", &self.with), ("off", &self.without)] {
            s += &format!(
                "{name},{},{:.4},{:.3},{:.3},{:.4},{:.4}\n",
                a.instances,
                a.precision,
                a.mean_iterations,
                a.std_iterations,
                a.mean_wall_s,
                a.std_wall_s
            );
        }
        s
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Default)]
struct Arm {
    results: Vec<InstanceResult>,
    iterations: Vec<f64>,
    wall: Vec<f64>,
}

impl Arm {
    fn summary(&self, iou: f64) -> Result<ArmSummary> {
        let (mean_iterations, std_iterations) = mean_std(&self.iterations);
        let (mean_wall_s, std_wall_s) = mean_std(&self.wall);
        Ok(ArmSummary {
            instances: self.results.len(),
            precision: average_precision(&self.results, Criterion::Iou(iou))?,
            mean_iterations,
            std_iterations,
            mean_wall_s,
            std_wall_s,
        })
    }
}

/// Pose stage with and without the depth-consistency filter, given the true
/// masks and dimensions.
pub fn ablate_depth_filter(scenes: &[Scene], cfg: &PipelineConfig, iou: f64) -> Result<Ablation> {
    let mut arms = [Arm::default(), Arm::default()];
    for scene in scenes {
        for g in &scene.gt {
            for (arm, on) in arms.iter_mut().zip([true, false]) {
                let c = PipelineConfig {
                    filter_enabled: on,
                    ..*cfg
                };
                let t = Instant::now();
                let est = estimate_pose_known_dims(
                    &scene.depth,
                    &scene.masks,
                    g.id,
                    &scene.camera,
                    &g.dims,
                    &c,
                );
                arm.wall.push(t.elapsed().as_secs_f64());
                arm.iterations.push(0.0);
                arm.results.push(InstanceResult {
                    gt_pose: g.pose,
                    gt_dims: g.dims,
                    pred: est.ok().map(|e| (e.pose, g.dims)),
                });
            }
        }
    }
    let [with, without] = arms;
    Ok(Ablation {
        iou,
        with: with.summary(iou)?,
        without: without.summary(iou)?,
    })
}

/// `runs` paired runs of the full estimator with and without early
/// stopping; run `k` uses scene `k mod scenes.len()`.
pub fn ablate_early_stop(
    scenes: &[Scene],
    cfg: &PipelineConfig,
    runs: usize,
    iou: f64,
) -> Result<Ablation> {
    let mut arms = [Arm::default(), Arm::default()];
    for k in 0..runs {
        let Some(scene) = scenes.get(k % scenes.len().max(1)) else {
            break;
        };
        for (arm, on) in arms.iter_mut().zip([true, false]) {
            let mut c = *cfg;
            c.search.early_stop_enabled = on;
            let est = estimate_scene(&scene.depth, &scene.camera, Some(&scene.masks), &c)?;
            let (rows, results) = evaluate_scene("", &scene.gt, &est);
            for r in rows.iter().filter(|r| r.trace_reason != "unmatched") {
                arm.iterations.push(r.iterations as f64);
                arm.wall.push(r.wall_time_s);
            }
            arm.results.extend(results);
        }
    }
    let [with, without] = arms;
    Ok(Ablation {
        iou,
        with: with.summary(iou)?,
        without: without.summary(iou)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn empty_scene_set_is_undefined() {
        let cfg = PipelineConfig::new();
        assert!(ablate_early_stop(&[], &cfg, 3, 0.9).is_err());
        assert!(ablate_depth_filter(&[], &cfg, 0.8).is_err());
    }
}
