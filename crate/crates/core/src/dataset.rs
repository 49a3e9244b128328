//! Synthetic constant-flow training windows.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::events::{
    encode_histograms, generate_synthetic_scene, Event, FlowMap, Pattern, PolarityMode, SceneSpec, SensorDims,
};
use crate::training::Sample;

/// Recipe for a set of single-window scenes, each a texture translating in a
/// random direction at a fixed speed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSuite {
    pub dims: SensorDims,
    pub windows: usize,
    /// Displacement magnitude per ground-truth interval, in pixels.
    pub flow_magnitude: f64,
    pub gt_interval_us: u64,
    pub num_frames: usize,
    pub frame_duration_us: u64,
    pub polarity_mode: PolarityMode,
    pub seed: u64,
    /// Prefix of the per-window sequence names.
    pub name: String,
}

impl Default for SyntheticSuite {
    fn default() -> Self {
        Self {
            dims: SensorDims::new(64, 64),
            windows: 200,
            flow_magnitude: 10.0,
            gt_interval_us: 100_000,
            num_frames: 21,
            frame_duration_us: 9000,
            polarity_mode: PolarityMode::Separate,
            seed: 0,
            name: "synthetic".into(),
        }
    }
}

impl SyntheticSuite {
    /// Scene of window `index`; deterministic in `(seed, index)`.
    pub fn scene(&self, index: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let angle = rng.gen_range(0.0..TAU);
        let pattern = if rng.gen_bool(0.5) {
            Pattern::RandomDots {
                density: rng.gen_range(0.03..0.08),
                size: rng.gen_range(2.0..4.0),
                seed: rng.gen(),
            }
        } else {
            Pattern::Checkerboard {
                cell: rng.gen_range(4.0..9.0),
            }
        };
        let speed = self.flow_magnitude * 1e6 / self.gt_interval_us as f64;
        let duration = self.num_frames as u64 * self.frame_duration_us;
        let mut spec = SceneSpec::new(pattern, (speed * angle.cos(), speed * angle.sin()), duration, self.dims);
        spec.gt_interval_us = self.gt_interval_us;
        spec
    }

    /// Events of window `index` that fall inside its frames, with the ground truth.
    pub fn recording(&self, index: usize) -> Result<(Vec<Event>, FlowMap)> {
        let spec = self.scene(index);
        let (mut events, target) = generate_synthetic_scene(&spec)?;
        events.retain(|e| e.t < spec.duration_us);
        Ok((events, target))
    }

    pub fn sample(&self, index: usize) -> Result<Sample> {
        let (events, target) = self.recording(index)?;
        let input = encode_histograms(
            &events,
            0,
            self.frame_duration_us,
            self.num_frames,
            self.dims,
            self.polarity_mode,
        )?;
        Ok(Sample {
            input,
            target,
            sequence: format!("{}-{index:04}", self.name),
        })
    }

    pub fn samples(&self) -> Result<Vec<Sample>> {
        (0..self.windows).map(|i| self.sample(i)).collect()
    }
}
