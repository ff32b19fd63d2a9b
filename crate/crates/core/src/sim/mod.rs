//! Grid-world audio-visual navigation.
//!
//! Worlds are square grids with random walls and one static sound source.
//! The agent sees an egocentric occupancy window and hears a binaural
//! spectrum attenuated by walkable (geodesic) distance, lateralized by the
//! direction of the first step of a shortest path.

mod audio;
mod env;
mod log;
mod vision;
mod world;

pub use audio::{render_audio, SoundLibrary, Split, NUM_SOUNDS, UNHEARD_SOUNDS};
pub use env::{Action, AgentPose, NavEnv, Outcome, SimConfig, StepResult, EVAL_WORLD_SEED_BASE};
pub use log::{parse_trajectory_log, write_trajectory_log, EpisodeTrace, StepRecord, TrajectoryRecord};
pub use vision::render_vision;
pub use world::{world_generate, Cell, GridWorld, Heading, UNREACHABLE};

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
}

/// One time step's egocentric view `[H, W, 2]` and binaural spectrum `[2, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityObservation {
    pub visual: Tensor,
    pub audio: Tensor,
}
