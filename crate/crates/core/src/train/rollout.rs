use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gae, sample_categorical, Policy, TrainError};
use crate::sim::{Action, ModalityObservation, NavEnv, Outcome, SimConfig, Split, EVAL_WORLD_SEED_BASE};

/// Steps of `n_envs` environments for `horizon` time steps, stored
/// time-major: entry `t * n_envs + e`.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub observations: Vec<ModalityObservation>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f32>,
    pub values: Vec<f32>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    /// Value of each environment's state after the last step.
    pub bootstrap: Vec<f32>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.len().checked_div(self.n_envs).unwrap_or(0)
    }

    /// Per-environment GAE, laid out like the buffer.
    pub fn advantages(&self, gamma: f32, lambda: f32) -> (Vec<f32>, Vec<f32>) {
        let (n, h) = (self.n_envs, self.horizon());
        let mut adv = vec![0.0; self.len()];
        let mut ret = vec![0.0; self.len()];
        for e in 0..n {
            let pick = |xs: &[f32]| (0..h).map(|t| xs[t * n + e]).collect::<Vec<_>>();
            let dones: Vec<bool> = (0..h).map(|t| self.dones[t * n + e]).collect();
            let (a, r) = gae(&pick(&self.rewards), &pick(&self.values), &dones, self.bootstrap[e], gamma, lambda);
            for t in 0..h {
                adv[t * n + e] = a[t];
                ret[t * n + e] = r[t];
            }
        }
        (adv, ret)
    }
}

/// Finished-episode statistics gathered while collecting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeStats {
    pub returns: Vec<f32>,
    pub successes: usize,
}

impl EpisodeStats {
    pub fn episodes(&self) -> usize {
        self.returns.len()
    }
}

/// Training environments. Every episode is drawn from a fresh world whose
/// seed comes from the pool's own generator, below the evaluation range.
#[derive(Debug, Clone)]
pub struct EnvPool {
    envs: Vec<NavEnv>,
    obs: Vec<ModalityObservation>,
    episode_return: Vec<f32>,
    rng: ChaCha8Rng,
    split: Split,
}

impl EnvPool {
    pub fn new(sim: &SimConfig, n_envs: usize, seed: u64, split: Split) -> Result<Self, TrainError> {
        let template = NavEnv::new(sim.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut envs = vec![template; n_envs];
        let obs = envs.iter_mut().map(|e| e.reset(rng.random_range(0..EVAL_WORLD_SEED_BASE), split)).collect();
        Ok(Self { envs, obs, episode_return: vec![0.0; n_envs], rng, split })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[NavEnv] {
        &self.envs
    }
}

/// Samples `horizon` steps from every environment of `pool`.
pub fn collect_rollouts(
    policy: &dyn Policy,
    pool: &mut EnvPool,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(RolloutBuffer, EpisodeStats), TrainError> {
    let n = pool.len();
    let mut buf = RolloutBuffer { n_envs: n, ..Default::default() };
    let mut stats = EpisodeStats::default();
    for _ in 0..horizon {
        let obs: Vec<&ModalityObservation> = pool.obs.iter().collect();
        let out = policy.evaluate(&obs)?;
        for (e, p) in out.iter().enumerate() {
            let probs = p.probabilities();
            let a = sample_categorical(&probs, rng.random::<f32>());
            let logp = log_prob(&p.action_logits, a);
            let step = pool.envs[e].step(Action::ALL[a]);
            pool.episode_return[e] += step.reward;
            buf.observations.push(std::mem::replace(&mut pool.obs[e], step.observation));
            buf.actions.push(a);
            buf.log_probs.push(logp);
            buf.values.push(p.state_value);
            buf.rewards.push(step.reward);
            buf.dones.push(step.done);
            if step.done {
                stats.returns.push(std::mem::take(&mut pool.episode_return[e]));
                if step.outcome == Some(Outcome::Success) {
                    stats.successes += 1;
                }
                let seed = pool.rng.random_range(0..EVAL_WORLD_SEED_BASE);
                pool.obs[e] = pool.envs[e].reset(seed, pool.split);
            }
        }
    }
    let obs: Vec<&ModalityObservation> = pool.obs.iter().collect();
    buf.bootstrap = policy.evaluate(&obs)?.iter().map(|p| p.state_value).collect();
    Ok((buf, stats))
}

/// Log-probability of action `a` under softmax `logits`.
pub fn log_prob(logits: &[f32], a: usize) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f32>().ln() + max;
    logits[a] - lse
}
