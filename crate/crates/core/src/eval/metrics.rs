use super::EvalError;
use crate::sim::{EpisodeTrace, GridWorld};

/// Scored outcome of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeResult {
    pub success: bool,
    /// Cell-to-cell moves actually made.
    pub path_length: u32,
    /// Geodesic distance from the start cell.
    pub shortest_path: u32,
    /// Actions issued, including turns and the final stop.
    pub action_count: u32,
    /// Fewest actions that reach the source and stop.
    pub min_action_count: u32,
}

impl EpisodeResult {
    pub fn from_trace(trace: &EpisodeTrace, world: &GridWorld) -> Self {
        let r = Self {
            success: trace.success(),
            path_length: trace.path_length() as u32,
            shortest_path: trace.start_geodesic,
            action_count: trace.action_count() as u32,
            min_action_count: super::min_action_count(world, trace.start),
        };
        if r.success {
            assert!(r.path_length >= r.shortest_path, "successful path shorter than the geodesic");
            assert!(r.action_count >= r.min_action_count, "successful episode beat the action oracle");
        }
        r
    }

    fn weighted(&self, optimal: u32, actual: u32) -> f64 {
        if !self.success {
            0.0
        } else if optimal == 0 {
            1.0
        } else {
            optimal as f64 / actual.max(optimal) as f64
        }
    }
}

fn nonempty(results: &[EpisodeResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        Err(EvalError::EmptyResults)
    } else {
        Ok(results.len() as f64)
    }
}

pub fn success_rate(results: &[EpisodeResult]) -> Result<f64, EvalError> {
    let n = nonempty(results)?;
    Ok(results.iter().filter(|r| r.success).count() as f64 / n)
}

/// Success weighted by path length: mean of `S · l / max(p, l)`
/// (Anderson et al., "On Evaluation of Embodied Navigation Agents", 2018).
pub fn spl(results: &[EpisodeResult]) -> Result<f64, EvalError> {
    let n = nonempty(results)?;
    Ok(results.iter().map(|r| r.weighted(r.shortest_path, r.path_length)).sum::<f64>() / n)
}

/// Success weighted by number of actions: mean of `S · a* / max(a, a*)`
/// (Chen et al., "Semantic Audio-Visual Navigation", 2021).
pub fn sna(results: &[EpisodeResult]) -> Result<f64, EvalError> {
    let n = nonempty(results)?;
    Ok(results.iter().map(|r| r.weighted(r.min_action_count, r.action_count)).sum::<f64>() / n)
}
