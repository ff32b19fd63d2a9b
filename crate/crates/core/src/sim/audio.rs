use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AgentPose, GridWorld, SimError};
use crate::tensor::Tensor;

pub const NUM_SOUNDS: usize = 16;
pub const UNHEARD_SOUNDS: [usize; 4] = [2, 6, 10, 14];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Heard,
    Unheard,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Heard => "heard",
            Split::Unheard => "unheard",
        }
    }

    pub fn parse(s: &str) -> Result<Self, SimError> {
        match s {
            "heard" => Ok(Split::Heard),
            "unheard" => Ok(Split::Unheard),
            other => Err(SimError::Config(format!("unknown split `{other}` (expected heard or unheard)"))),
        }
    }
}

/// Synthetic band-pass magnitude templates, each with unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SoundLibrary {
    bins: usize,
    profiles: Vec<Vec<f32>>,
}

impl SoundLibrary {
    pub fn new(bins: usize) -> Result<Self, SimError> {
        if bins < 4 {
            return Err(SimError::Config(format!("{bins} audio bins is too few")));
        }
        let f = bins as f64;
        let profiles = (0..NUM_SOUNDS)
            .map(|k| {
                let center = (k as f64 + 0.5) * f / NUM_SOUNDS as f64;
                let width = (0.04 + 0.03 * (k % 3) as f64) * f;
                let raw: Vec<f64> = (0..bins)
                    .map(|i| {
                        let z = (i as f64 - center) / width;
                        (-0.5 * z * z).exp() + 0.05
                    })
                    .collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                raw.iter().map(|v| (v / norm) as f32).collect()
            })
            .collect();
        Ok(Self { bins, profiles })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn profile(&self, id: usize) -> &[f32] {
        &self.profiles[id]
    }

    pub fn split_of(id: usize) -> Split {
        if UNHEARD_SOUNDS.contains(&id) {
            Split::Unheard
        } else {
            Split::Heard
        }
    }

    pub fn ids(split: Split) -> Vec<usize> {
        (0..NUM_SOUNDS).filter(|&i| Self::split_of(i) == split).collect()
    }
}

/// Per-ear gains `(left, right)` before noise.
pub(crate) fn ear_gains(world: &GridWorld, pose: AgentPose, ild: f32) -> (f32, f32) {
    let d = world.geodesic(pose.cell);
    if d == 0 {
        return (1.0, 1.0);
    }
    let g = 1.0 / (1.0 + d as f32);
    let Some(dir) = world.first_step_direction(pose.cell) else {
        return (0.0, 0.0);
    };
    let near = g * (1.0 + ild) / 2.0;
    let far = g * (1.0 - ild) / 2.0;
    match (dir.index() + 4 - pose.heading.index()) % 4 {
        0 => (g / 2.0, g / 2.0),
        3 => (near, far),
        // right and behind both favor the right ear
        _ => (far, near),
    }
}

/// Binaural spectrum `[2, F]`, row 0 left ear. `noise_std == 0` draws nothing
/// from `rng`.
pub fn render_audio(
    world: &GridWorld,
    pose: AgentPose,
    library: &SoundLibrary,
    ild: f32,
    noise_std: f32,
    rng: &mut impl Rng,
) -> Tensor {
    let (l, r) = ear_gains(world, pose, ild);
    let profile = library.profile(world.sound_id);
    let noise = (noise_std > 0.0).then(|| Normal::new(0.0f32, noise_std).expect("positive std"));
    let mut data = Vec::with_capacity(2 * library.bins());
    for gain in [l, r] {
        for &p in profile {
            let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
            data.push((p * gain + n).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![2, library.bins()], data).expect("shape matches data")
}
