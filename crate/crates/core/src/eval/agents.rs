use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::ActionOracle;
use super::EvalError;
use crate::net::IrcamNet;
use crate::sim::{Action, ModalityObservation, NavEnv};

/// One running episode as seen by an agent.
pub struct Lane<'a> {
    pub slot: usize,
    pub env: &'a NavEnv,
    pub obs: &'a ModalityObservation,
}

/// Chooses actions for several concurrently running episodes. Each slot
/// holds at most one episode at a time; `begin_episode` marks a new one.
pub trait Agent {
    fn name(&self) -> &str;

    fn begin_episode(&mut self, _slot: usize, _env: &NavEnv) {}

    fn act(&mut self, lanes: &[Lane<'_>]) -> Result<Vec<Action>, EvalError>;
}

/// Uniformly random actions.
pub struct RandomAgent {
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Agent for RandomAgent {
    fn name(&self) -> &str {
        "random"
    }

    fn act(&mut self, lanes: &[Lane<'_>]) -> Result<Vec<Action>, EvalError> {
        Ok(lanes.iter().map(|_| Action::ALL[self.rng.random_range(0..4)]).collect())
    }
}

/// Replays a minimal action sequence computed from the true world.
#[derive(Default)]
pub struct OracleAgent {
    plans: Vec<Option<ActionOracle>>,
}

impl Agent for OracleAgent {
    fn name(&self) -> &str {
        "oracle"
    }

    fn begin_episode(&mut self, slot: usize, env: &NavEnv) {
        if self.plans.len() <= slot {
            self.plans.resize(slot + 1, None);
        }
        self.plans[slot] = Some(ActionOracle::new(env.world()));
    }

    fn act(&mut self, lanes: &[Lane<'_>]) -> Result<Vec<Action>, EvalError> {
        Ok(lanes
            .iter()
            .map(|l| self.plans[l.slot].as_ref().expect("episode started").next_action(l.env.world(), l.env.pose()))
            .collect())
    }
}

#[derive(Default, Clone)]
struct FollowerState {
    queue: Vec<Action>,
    last_loudness: Option<f32>,
    last_action: Option<Action>,
}

/// Turns toward the louder ear, walks forward while loudness rises and stops
/// at a local loudness maximum. Uses only the observation.
#[derive(Default)]
pub struct GreedyAudioAgent {
    lanes: Vec<FollowerState>,
}

/// Normalized ear asymmetry above which the follower turns.
const ASYMMETRY: f32 = 0.2;

impl GreedyAudioAgent {
    fn decide(state: &mut FollowerState, obs: &ModalityObservation) -> Action {
        let bins = obs.audio.shape()[1];
        let (left, right) = obs.audio.data().split_at(bins);
        let (l, r): (f32, f32) = (left.iter().sum(), right.iter().sum());
        let loud = l + r;
        let fell = state.last_action == Some(Action::Forward) && state.last_loudness.is_some_and(|p| loud < p);
        state.last_loudness = Some(loud);
        if let Some(a) = state.queue.pop() {
            return a;
        }
        if fell {
            // stepped past the peak: turn around, step back, stop
            state.queue = vec![Action::Stop, Action::Forward, Action::TurnRight];
            return Action::TurnRight;
        }
        let asym = (l - r) / loud.max(1e-6);
        if asym > ASYMMETRY {
            return Action::TurnLeft;
        }
        if asym < -ASYMMETRY {
            return Action::TurnRight;
        }
        let (h, w) = (obs.visual.shape()[0], obs.visual.shape()[1]);
        let ahead = ((h - 2) * w + w / 2) * 2;
        if h < 2 || obs.visual.data()[ahead] > 0.5 {
            Action::Stop
        } else {
            Action::Forward
        }
    }
}

impl Agent for GreedyAudioAgent {
    fn name(&self) -> &str {
        "greedy-audio"
    }

    fn begin_episode(&mut self, slot: usize, _env: &NavEnv) {
        if self.lanes.len() <= slot {
            self.lanes.resize(slot + 1, FollowerState::default());
        }
        self.lanes[slot] = FollowerState::default();
    }

    fn act(&mut self, lanes: &[Lane<'_>]) -> Result<Vec<Action>, EvalError> {
        Ok(lanes
            .iter()
            .map(|l| {
                let s = &mut self.lanes[l.slot];
                let a = Self::decide(s, l.obs);
                s.last_action = Some(a);
                a
            })
            .collect())
    }
}

/// The trained policy. Greedy (argmax) by default; sampling when built with
/// [`IrcamAgent::sampling`].
pub struct IrcamAgent<'a> {
    net: &'a IrcamNet,
    rng: Option<ChaCha8Rng>,
}

impl<'a> IrcamAgent<'a> {
    pub fn greedy(net: &'a IrcamNet) -> Self {
        Self { net, rng: None }
    }

    pub fn sampling(net: &'a IrcamNet, seed: u64) -> Self {
        Self { net, rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }
}

impl Agent for IrcamAgent<'_> {
    fn name(&self) -> &str {
        "ircam"
    }

    fn act(&mut self, lanes: &[Lane<'_>]) -> Result<Vec<Action>, EvalError> {
        let obs: Vec<&ModalityObservation> = lanes.iter().map(|l| l.obs).collect();
        let out = self.net.policy(&obs)?;
        Ok(out
            .iter()
            .map(|p| {
                let i = match &mut self.rng {
                    None => p.argmax(),
                    Some(rng) => crate::train::sample_categorical(&p.probabilities(), rng.random::<f32>()),
                };
                Action::ALL[i]
            })
            .collect())
    }
}
