//! Benchmark scene suites.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;

use crate::config::Config;
use crate::error::Result;
use crate::scenegen::{generate_scene, Layout, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Single boxes, noiseless depth.
    Clean,
    /// Single boxes, 2 mm depth noise with dropout.
    Noisy,
    /// Columns of three elongated boxes seen end-on from nearly straight
    /// ahead: each box shows only its front face, so several hypotheses
    /// explain the visible points equally.
    Stacked,
    /// Single boxes seen nearly head-on, 2 mm depth noise.
    Frontal,
}

pub const ALL: [Suite; 4] = [Suite::Clean, Suite::Noisy, Suite::Stacked, Suite::Frontal];

impl Suite {
    pub fn name(&self) -> &'static str {
        match self {
            Suite::Clean => "clean",
            Suite::Noisy => "noisy",
            Suite::Stacked => "stacked",
            Suite::Frontal => "frontal",
        }
    }

    pub fn config(&self) -> Config {
        let mut c = Config::default();
        let s = &mut c.scene;
        match self {
            Suite::Clean => {
                c.n_scenes = 100;
                c.seed = 1000;
            }
            Suite::Noisy => {
                c.n_scenes = 100;
                c.seed = 1000;
                s.depth_noise_sigma = 0.002;
            }
            Suite::Stacked => {
                c.n_scenes = 50;
                c.seed = 2000;
                s.layout = Layout::Stack;
                s.n_boxes = 3;
                s.dims_min = Vector3::new(0.2, 0.12, 0.85);
                s.dims_max = Vector3::new(0.22, 0.14, 0.95);
                s.rig.distance = (2.0, 2.6);
                s.rig.pitch_deg = (0.0, 4.0);
                s.rig.yaw_deg = (-1.5, 1.5);
                s.rig.lateral = 0.01;
                s.rig.stack_yaw_jitter_deg = 0.5;
                s.rig.stack_offset_jitter = 0.005;
                s.depth_noise_sigma = 0.002;
            }
            Suite::Frontal => {
                c.n_scenes = 50;
                c.seed = 3000;
                s.dims_max = Vector3::repeat(0.5);
                s.rig.pitch_deg = (10.0, 20.0);
                s.rig.yaw_deg = (-5.0, 5.0);
                s.depth_noise_sigma = 0.002;
            }
        }
        c
    }

    /// The suite's scenes in order.
    pub fn scenes(&self) -> impl Iterator<Item = Result<Scene>> {
        scenes_of(self.config())
    }

    /// The suite's scenes without sensor noise.
    pub fn noiseless_scenes(&self) -> impl Iterator<Item = Result<Scene>> {
        let mut c = self.config();
        c.scene.depth_noise_sigma = 0.0;
        scenes_of(c)
    }
}

fn scenes_of(c: Config) -> impl Iterator<Item = Result<Scene>> {
    (0..c.n_scenes).map(move |i| generate_scene(&c.scene_config(i)))
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ALL.into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite `{s}` (clean|noisy|stacked|frontal)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_parse() {
        for s in ALL {
            s.config().validate().unwrap();
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
            assert_eq!(Config::parse(&s.config().to_text()).unwrap(), s.config());
        }
        assert!("x".parse::<Suite>().is_err());
    }
}
