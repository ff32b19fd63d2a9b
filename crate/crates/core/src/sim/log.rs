use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Action, AgentPose, Cell, Heading, Outcome, SimError, StepResult};

/// Pose, action and result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step_index: usize,
    /// Pose after the action.
    pub pose: AgentPose,
    pub action: Action,
    pub reward: f32,
    pub geodesic: u32,
    pub done: bool,
    pub outcome: Option<Outcome>,
}

/// Everything needed to score one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub episode_id: u64,
    pub start: AgentPose,
    pub start_geodesic: u32,
    pub steps: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn new(episode_id: u64, start: AgentPose, start_geodesic: u32) -> Self {
        Self { episode_id, start, start_geodesic, steps: Vec::new() }
    }

    pub fn push(&mut self, pose: AgentPose, action: Action, geodesic: u32, r: &StepResult) {
        self.steps.push(StepRecord {
            step_index: self.steps.len(),
            pose,
            action,
            reward: r.reward,
            geodesic,
            done: r.done,
            outcome: r.outcome,
        });
    }

    pub fn success(&self) -> bool {
        self.steps.last().is_some_and(|s| s.outcome == Some(Outcome::Success))
    }

    /// Cell-to-cell moves; turns and blocked moves excluded.
    pub fn path_length(&self) -> usize {
        let mut prev = self.start.cell;
        let mut moves = 0;
        for s in &self.steps {
            if s.pose.cell != prev {
                moves += 1;
                prev = s.pose.cell;
            }
        }
        moves
    }

    pub fn action_count(&self) -> usize {
        self.steps.len()
    }

    pub fn total_reward(&self) -> f32 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub episode_id: u64,
    pub step_index: usize,
    /// `[row, col]`
    pub cell: [usize; 2],
    pub heading: Heading,
    pub action: Action,
    pub reward: f32,
    pub geodesic: u32,
    pub done: bool,
    pub outcome: Option<Outcome>,
}

pub fn write_trajectory_log<'a>(traces: impl IntoIterator<Item = &'a EpisodeTrace>) -> String {
    let mut out = String::new();
    for t in traces {
        for s in &t.steps {
            let rec = TrajectoryRecord {
                episode_id: t.episode_id,
                step_index: s.step_index,
                cell: [s.pose.cell.row, s.pose.cell.col],
                heading: s.pose.heading,
                action: s.action,
                reward: s.reward,
                geodesic: s.geodesic,
                done: s.done,
                outcome: s.outcome,
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("plain record serializes"));
        }
    }
    out
}

/// Parses and checks a line-delimited trajectory log: step indices count up
/// from 0 within each episode, `outcome` is set exactly on `done` steps, and
/// nothing follows a `done` step of the same episode.
pub fn parse_trajectory_log(text: &str) -> Result<Vec<TrajectoryRecord>, SimError> {
    let mut out: Vec<TrajectoryRecord> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord =
            serde_json::from_str(line).map_err(|e| SimError::Parse(format!("line {}: {e}", n + 1)))?;
        if !rec.reward.is_finite() {
            return Err(SimError::Parse(format!("line {}: non-finite reward", n + 1)));
        }
        if rec.done != rec.outcome.is_some() {
            return Err(SimError::Parse(format!("line {}: outcome must be set exactly when done", n + 1)));
        }
        let expected = match out.last() {
            Some(p) if p.episode_id == rec.episode_id => {
                if p.done {
                    return Err(SimError::Parse(format!("line {}: step after episode end", n + 1)));
                }
                p.step_index + 1
            }
            _ => 0,
        };
        if rec.step_index != expected {
            return Err(SimError::Parse(format!(
                "line {}: step_index {} where {expected} was expected",
                n + 1,
                rec.step_index
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

impl TrajectoryRecord {
    pub fn cell(&self) -> Cell {
        Cell::new(self.cell[0], self.cell[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace() -> EpisodeTrace {
        let start = AgentPose { cell: Cell::new(2, 2), heading: Heading::N };
        let mut t = EpisodeTrace::new(7, start, 2);
        let moved = AgentPose { cell: Cell::new(1, 2), heading: Heading::N };
        let obs = crate::sim::ModalityObservation {
            visual: crate::tensor::Tensor::zeros(vec![1]),
            audio: crate::tensor::Tensor::zeros(vec![1]),
        };
        let r = |reward, done, outcome| StepResult { observation: obs.clone(), reward, done, outcome };
        t.push(moved, Action::Forward, 1, &r(0.24, false, None));
        t.push(moved, Action::TurnLeft, 1, &r(-0.01, false, None));
        t.push(moved, Action::Stop, 1, &r(-0.01, true, Some(Outcome::Failure)));
        t
    }

    #[test]
    fn log_round_trip() {
        let t = trace();
        let text = write_trajectory_log([&t]);
        assert!(text.lines().next().unwrap().contains("\"action\":\"forward\""));
        let recs = parse_trajectory_log(&text).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].outcome, Some(Outcome::Failure));
        assert_eq!(recs[0].cell(), Cell::new(1, 2));
        assert_eq!(t.path_length(), 1);
        assert!(!t.success());
    }

    #[test]
    fn rejects_broken_sequences() {
        let text = write_trajectory_log([&trace()]);
        let lines: Vec<&str> = text.lines().collect();
        assert!(parse_trajectory_log(lines[1]).is_err());
        let doubled = format!("{}\n{}", lines[2].replace("\"step_index\":2", "\"step_index\":0"), lines[1]);
        assert!(parse_trajectory_log(&doubled).is_err());
        assert!(parse_trajectory_log("{\"episode_id\":1}").is_err());
        assert!(parse_trajectory_log(&lines[0].replace("}", ",\"extra\":1}")).is_err());
    }
}
