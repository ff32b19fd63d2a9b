use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::audio::render_audio;
use super::vision::render_vision;
use super::{world_generate, Cell, GridWorld, Heading, ModalityObservation, SimError, SoundLibrary, Split};

/// Evaluation episodes use world seeds at or above this value; training
/// seeds are drawn below it.
pub const EVAL_WORLD_SEED_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Forward, Action::TurnLeft, Action::TurnRight, Action::Stop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AgentPose {
    pub cell: Cell,
    pub heading: Heading,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub world_size: usize,
    pub wall_density: f32,
    pub view_height: usize,
    pub view_width: usize,
    pub audio_bins: usize,
    pub ild: f32,
    pub noise_std: f32,
    pub max_steps: usize,
    pub step_penalty: f32,
    pub shaping_coef: f32,
    pub success_bonus: f32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            world_size: 8,
            wall_density: 0.25,
            view_height: 6,
            view_width: 6,
            audio_bins: 32,
            ild: 0.4,
            noise_std: 0.01,
            max_steps: 500,
            step_penalty: 0.01,
            shaping_coef: 0.25,
            success_bonus: 10.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.world_size < 4 {
            return Err(SimError::Config(format!("world_size {} is below 4", self.world_size)));
        }
        if !(0.0..=0.4).contains(&self.wall_density) {
            return Err(SimError::Config(format!("wall_density {} outside [0, 0.4]", self.wall_density)));
        }
        if self.view_height == 0 || self.view_width == 0 {
            return Err(SimError::Config("view window must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.ild) {
            return Err(SimError::Config(format!("ild {} outside [0, 1]", self.ild)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(SimError::Config(format!("noise_std {} must be finite and non-negative", self.noise_std)));
        }
        if self.max_steps == 0 {
            return Err(SimError::Config("max_steps must be positive".into()));
        }
        SoundLibrary::new(self.audio_bins).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: ModalityObservation,
    pub reward: f32,
    pub done: bool,
    pub outcome: Option<Outcome>,
}

/// One navigation episode at a time. Everything is determined by the episode
/// seed passed to [`NavEnv::reset`] and the actions taken.
#[derive(Debug, Clone)]
pub struct NavEnv {
    cfg: SimConfig,
    library: SoundLibrary,
    world: GridWorld,
    pose: AgentPose,
    start: AgentPose,
    rng: ChaCha8Rng,
    steps: usize,
    done: bool,
}

impl NavEnv {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let library = SoundLibrary::new(cfg.audio_bins)?;
        let world = world_generate(0, cfg.world_size, cfg.wall_density)?;
        let pose = AgentPose { cell: world.source(), heading: Heading::N };
        Ok(Self { cfg, library, world, pose, start: pose, rng: ChaCha8Rng::seed_from_u64(0), steps: 0, done: true })
    }

    /// Starts an episode in the world generated from `seed`, with a sound
    /// drawn from `split` and a random start at least one step from the source.
    pub fn reset(&mut self, seed: u64, split: Split) -> ModalityObservation {
        let mut world =
            world_generate(seed, self.cfg.world_size, self.cfg.wall_density).expect("config validated at construction");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let ids = SoundLibrary::ids(split);
        world.sound_id = ids[rng.random_range(0..ids.len())];
        let starts: Vec<Cell> = world.free_cells().into_iter().filter(|&c| world.geodesic(c) >= 1).collect();
        let cell = starts[rng.random_range(0..starts.len())];
        let heading = Heading::from_index(rng.random_range(0..4));
        self.reset_to(world, AgentPose { cell, heading }, rng)
    }

    /// Starts an episode at an explicit world and pose.
    pub fn reset_to(&mut self, world: GridWorld, pose: AgentPose, rng: ChaCha8Rng) -> ModalityObservation {
        assert!(world.is_free(pose.cell), "start pose must be on a free cell");
        self.world = world;
        self.pose = pose;
        self.start = pose;
        self.rng = rng;
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn library(&self) -> &SoundLibrary {
        &self.library
    }

    pub fn world(&self) -> &GridWorld {
        &self.world
    }

    pub fn pose(&self) -> AgentPose {
        self.pose
    }

    pub fn start_pose(&self) -> AgentPose {
        self.start
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observe(&mut self) -> ModalityObservation {
        let visual = render_vision(&self.world, self.pose, self.cfg.view_height, self.cfg.view_width);
        let audio =
            render_audio(&self.world, self.pose, &self.library, self.cfg.ild, self.cfg.noise_std, &mut self.rng);
        ModalityObservation { visual, audio }
    }

    pub fn step(&mut self, action: Action) -> StepResult {
        assert!(!self.done, "step called on a finished episode");
        let before = self.world.geodesic(self.pose.cell);
        match action {
            Action::Forward => {
                if let Some(next) = self.world.step_from(self.pose.cell, self.pose.heading) {
                    self.pose.cell = next;
                }
            }
            Action::TurnLeft => self.pose.heading = self.pose.heading.left(),
            Action::TurnRight => self.pose.heading = self.pose.heading.right(),
            Action::Stop => {}
        }
        self.steps += 1;
        let after = self.world.geodesic(self.pose.cell);
        let mut reward = -self.cfg.step_penalty + self.cfg.shaping_coef * (before as f32 - after as f32);
        let outcome = if action == Action::Stop {
            if after == 0 {
                reward += self.cfg.success_bonus;
                Some(Outcome::Success)
            } else {
                Some(Outcome::Failure)
            }
        } else if self.steps >= self.cfg.max_steps {
            Some(Outcome::Failure)
        } else {
            None
        };
        self.done = outcome.is_some();
        StepResult { observation: self.observe(), reward, done: self.done, outcome }
    }
}
