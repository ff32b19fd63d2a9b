//! PPO with generalized advantage estimation, driving the IRCAM policy in
//! the grid simulator. Everything runs on one thread, so a fixed seed gives a
//! bitwise reproducible run.

mod gae;
mod ppo;
mod rollout;

pub use gae::{gae, normalize};
pub use ppo::{ppo_loss, ppo_update, PpoLoss, UpdateStats};
pub use rollout::{collect_rollouts, log_prob, EnvPool, EpisodeStats, RolloutBuffer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate, EvalConfig, EvalError, IrcamAgent};
use crate::net::{IrcamConfig, IrcamNet, NetError, PolicyOutput};
use crate::sim::{ModalityObservation, SimConfig, SimError, Split};
use crate::tensor::{AdamConfig, AdamState, TensorError};

/// Learning rate used for the smaller-scene preset.
pub const LR_REPLICA: f32 = 1e-4;
/// Learning rate used for the larger-scene preset.
pub const LR_MATTERPORT: f32 = 4e-5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {term} loss (at {op})")]
    NonFinite { term: &'static str, op: &'static str },
    #[error("training diverged after {agent_steps} agent steps: {source}")]
    Diverged {
        agent_steps: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub gamma: f32,
    pub gae_lambda: f32,
    pub clip_ratio: f32,
    pub epochs_per_update: usize,
    pub minibatch_size: usize,
    pub horizon: usize,
    pub n_envs: usize,
    pub total_steps: usize,
    pub entropy_coef: f32,
    pub value_coef: f32,
    pub max_grad_norm: f32,
    pub seed: u64,
    /// Evaluate every this many updates (0: never during training).
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Write a checkpoint whenever this many more agent steps have passed
    /// (0: only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: LR_REPLICA,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            epochs_per_update: 4,
            minibatch_size: 256,
            horizon: 128,
            n_envs: 8,
            total_steps: 300_000,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            seed: 0,
            eval_every: 0,
            eval_episodes: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda {} outside [0, 1]", self.gae_lambda));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio.is_finite()) {
            return bad(format!("clip_ratio {} must be positive", self.clip_ratio));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.max_grad_norm > 0.0 && self.max_grad_norm.is_finite()) {
            return bad(format!("max_grad_norm {} must be positive", self.max_grad_norm));
        }
        for (name, v) in [
            ("epochs_per_update", self.epochs_per_update),
            ("minibatch_size", self.minibatch_size),
            ("horizon", self.horizon),
            ("n_envs", self.n_envs),
            ("total_steps", self.total_steps),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return bad("eval_episodes must be positive when eval_every is set".into());
        }
        Ok(())
    }

    pub fn steps_per_update(&self) -> usize {
        self.horizon * self.n_envs
    }

    /// Update cycles needed to consume `total_steps`.
    pub fn updates(&self) -> usize {
        self.total_steps.div_ceil(self.steps_per_update())
    }
}

/// Anything that maps observations to action logits and values.
pub trait Policy {
    fn evaluate(&self, obs: &[&ModalityObservation]) -> Result<Vec<PolicyOutput>, NetError>;
}

impl Policy for IrcamNet {
    fn evaluate(&self, obs: &[&ModalityObservation]) -> Result<Vec<PolicyOutput>, NetError> {
        self.policy(obs)
    }
}

/// Equal logits and zero value everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn evaluate(&self, obs: &[&ModalityObservation]) -> Result<Vec<PolicyOutput>, NetError> {
        Ok(vec![PolicyOutput { action_logits: [0.0; 4], state_value: 0.0 }; obs.len()])
    }
}

/// Inverse-CDF draw from `probs` with a uniform `u` in `[0, 1)`.
pub fn sample_categorical(probs: &[f32], u: f32) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update_index: usize,
    pub agent_steps: usize,
    /// Mean per-step reward over the rollout.
    pub mean_reward: f64,
    pub episodes: usize,
    pub train_success_rate: Option<f64>,
    pub sr_heard: Option<f64>,
    pub sr_unheard: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Periodic,
    Final,
    Crash,
}

/// Receives metrics and checkpoints as training proceeds.
pub trait TrainObserver {
    fn on_update(&mut self, _record: &MetricsRecord) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _kind: CheckpointKind, _agent_steps: usize, _net: &IrcamNet) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects every metrics record in memory.
#[derive(Debug, Default)]
pub struct MetricsSink(pub Vec<MetricsRecord>);

impl TrainObserver for MetricsSink {
    fn on_update(&mut self, record: &MetricsRecord) -> Result<(), TrainError> {
        self.0.push(record.clone());
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: IrcamNet,
    pub agent_steps: usize,
    pub updates: usize,
    pub last: Option<MetricsRecord>,
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSetup {
    pub network: IrcamConfig,
    pub sim: SimConfig,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.network.validate()?;
        self.sim.validate()?;
        self.train.validate()?;
        if self.network.view_height != self.sim.view_height
            || self.network.view_width != self.sim.view_width
            || self.network.audio_bins != self.sim.audio_bins
        {
            return Err(TrainError::Config(format!(
                "network expects a {}x{} view and {} audio bins, simulator renders {}x{} and {}",
                self.network.view_height,
                self.network.view_width,
                self.network.audio_bins,
                self.sim.view_height,
                self.sim.view_width,
                self.sim.audio_bins
            )));
        }
        Ok(())
    }
}

/// Alternates rollout collection and PPO updates until `total_steps` agent
/// steps are consumed. Training only ever sees heard sounds.
pub fn train_loop(setup: &TrainSetup, observer: &mut dyn TrainObserver) -> Result<TrainOutcome, TrainError> {
    setup.validate()?;
    let cfg = &setup.train;
    let mut net = IrcamNet::new(setup.network.clone())?;
    let mut adam = AdamState::new(net.params(), AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() });
    let mut pool = EnvPool::new(&setup.sim, cfg.n_envs, cfg.seed, Split::Heard)?;
    let mut act_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));

    let mut agent_steps = 0;
    let mut last = None;
    let updates = cfg.updates();
    for update_index in 0..updates {
        let (buf, episodes) = collect_rollouts(&net, &mut pool, cfg.horizon, &mut act_rng)?;
        let before = agent_steps;
        agent_steps += buf.len();
        let stats = match ppo_update(&mut net, &mut adam, &buf, cfg, &mut shuffle_rng) {
            Ok(s) => s,
            Err(e) => {
                observer.on_checkpoint(CheckpointKind::Crash, agent_steps, &net)?;
                return Err(TrainError::Diverged { agent_steps, source: Box::new(e) });
            }
        };
        let is_last = update_index + 1 == updates;
        let (sr_heard, sr_unheard) = if cfg.eval_every > 0 && ((update_index + 1) % cfg.eval_every == 0 || is_last) {
            let ecfg = EvalConfig { episodes: cfg.eval_episodes, seed: 1_000 + cfg.seed, lanes: 32 };
            let h = evaluate(&mut IrcamAgent::greedy(&net), &setup.sim, Split::Heard, &ecfg)?;
            let u = evaluate(&mut IrcamAgent::greedy(&net), &setup.sim, Split::Unheard, &ecfg)?;
            (Some(h.sr), Some(u.sr))
        } else {
            (None, None)
        };
        let record = MetricsRecord {
            update_index,
            agent_steps,
            mean_reward: buf.rewards.iter().map(|&r| f64::from(r)).sum::<f64>() / buf.len() as f64,
            episodes: episodes.episodes(),
            train_success_rate: (episodes.episodes() > 0)
                .then(|| episodes.successes as f64 / episodes.episodes() as f64),
            sr_heard,
            sr_unheard,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            kl: stats.kl,
            clip_frac: stats.clip_frac,
        };
        observer.on_update(&record)?;
        last = Some(record);
        if cfg.checkpoint_every > 0 && !is_last && agent_steps / cfg.checkpoint_every > before / cfg.checkpoint_every {
            observer.on_checkpoint(CheckpointKind::Periodic, agent_steps, &net)?;
        }
    }
    observer.on_checkpoint(CheckpointKind::Final, agent_steps, &net)?;
    Ok(TrainOutcome { net, agent_steps, updates, last })
}
