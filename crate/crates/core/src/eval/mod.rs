//! Navigation metrics, the shortest-action oracle, baseline agents and the
//! heard / unheard evaluation protocol.

mod agents;
mod metrics;
mod oracle;

pub use agents::{Agent, GreedyAudioAgent, IrcamAgent, Lane, OracleAgent, RandomAgent};
pub use metrics::{sna, spl, success_rate, EpisodeResult};
pub use oracle::{action_cost_table, min_action_count, ActionOracle};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::NetError;
use crate::sim::{EpisodeTrace, ModalityObservation, NavEnv, SimConfig, SimError, Split, EVAL_WORLD_SEED_BASE};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics need at least one episode")]
    EmptyResults,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Episodes run side by side; the policy sees them as one batch.
    pub lanes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 200, seed: 0, lanes: 32 }
    }
}

/// World seed of evaluation episode `index` in evaluation set `seed`;
/// always disjoint from training seeds.
pub fn eval_world_seed(seed: u64, index: usize) -> u64 {
    EVAL_WORLD_SEED_BASE + seed.wrapping_mul(1_000_000) + index as u64
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub method: String,
    pub split: Split,
    pub results: Vec<EpisodeResult>,
    pub traces: Vec<EpisodeTrace>,
    pub sound_ids: Vec<usize>,
    pub sr: f64,
    pub spl: f64,
    pub sna: f64,
}

impl EvalReport {
    pub fn row(&self) -> TableRow {
        TableRow { method: self.method.clone(), split: self.split, sna: self.sna, sr: self.sr, spl: self.spl }
    }
}

struct Running {
    index: usize,
    env: NavEnv,
    obs: ModalityObservation,
    trace: EpisodeTrace,
}

/// Runs `cfg.episodes` held-out episodes of `split` with `agent`.
pub fn evaluate(
    agent: &mut dyn Agent,
    sim: &SimConfig,
    split: Split,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if cfg.episodes == 0 {
        return Err(EvalError::EmptyResults);
    }
    let template = NavEnv::new(sim.clone())?;
    let start = |index: usize, slot: usize, agent: &mut dyn Agent| {
        let mut env = template.clone();
        let obs = env.reset(eval_world_seed(cfg.seed, index), split);
        let pose = env.pose();
        let trace = EpisodeTrace::new(index as u64, pose, env.world().geodesic(pose.cell));
        agent.begin_episode(slot, &env);
        Running { index, env, obs, trace }
    };
    let n_lanes = cfg.lanes.clamp(1, cfg.episodes);
    let mut lanes: Vec<Option<Running>> = (0..n_lanes).map(|s| Some(start(s, s, agent))).collect();
    let mut next = n_lanes;
    let mut finished: Vec<Option<(EpisodeResult, EpisodeTrace, usize)>> = vec![None; cfg.episodes];

    while lanes.iter().any(Option::is_some) {
        let active: Vec<usize> = (0..n_lanes).filter(|&s| lanes[s].is_some()).collect();
        let actions = {
            let views: Vec<Lane<'_>> = active
                .iter()
                .map(|&s| {
                    let r = lanes[s].as_ref().expect("active lane");
                    Lane { slot: s, env: &r.env, obs: &r.obs }
                })
                .collect();
            agent.act(&views)?
        };
        for (&s, action) in active.iter().zip(actions) {
            let r = lanes[s].as_mut().expect("active lane");
            let step = r.env.step(action);
            let pose = r.env.pose();
            r.trace.push(pose, action, r.env.world().geodesic(pose.cell), &step);
            r.obs = step.observation;
            if step.done {
                let done = lanes[s].take().expect("active lane");
                let result = EpisodeResult::from_trace(&done.trace, done.env.world());
                finished[done.index] = Some((result, done.trace, done.env.world().sound_id));
                if next < cfg.episodes {
                    lanes[s] = Some(start(next, s, agent));
                    next += 1;
                }
            }
        }
    }

    let mut results = Vec::with_capacity(cfg.episodes);
    let mut traces = Vec::with_capacity(cfg.episodes);
    let mut sound_ids = Vec::with_capacity(cfg.episodes);
    for (r, t, s) in finished.into_iter().map(|f| f.expect("every episode finished")) {
        results.push(r);
        traces.push(t);
        sound_ids.push(s);
    }
    Ok(EvalReport {
        method: agent.name().to_string(),
        split,
        sr: success_rate(&results)?,
        spl: spl(&results)?,
        sna: sna(&results)?,
        results,
        traces,
        sound_ids,
    })
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub split: Split,
    pub sna: f64,
    pub sr: f64,
    pub spl: f64,
}

pub fn results_table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("method,split,SNA,SR,SPL\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.4},{:.4},{:.4}", r.method, r.split.as_str(), r.sna, r.sr, r.spl);
    }
    out
}
