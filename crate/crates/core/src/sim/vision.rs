use super::{AgentPose, GridWorld};
use crate::tensor::Tensor;

/// Egocentric window `[h, w, 2]` ahead of the agent, forward is up.
///
/// The agent sits at row `h - 1`, column `w / 2`. Channel 0 is occupancy
/// (out of bounds reads as wall). Channel 1 holds, for every cell of a
/// column, `k / h` where `k` is the forward offset of the first wall in that
/// column, or 1 when the column is clear.
pub fn render_vision(world: &GridWorld, pose: AgentPose, h: usize, w: usize) -> Tensor {
    let (fr, fc) = pose.heading.delta();
    let (rr, rc) = pose.heading.right().delta();
    let (ar, ac) = (pose.cell.row as isize, pose.cell.col as isize);
    let center = (w / 2) as isize;
    let mut data = vec![0.0f32; h * w * 2];
    for j in 0..w {
        let lateral = j as isize - center;
        let mut first_wall = None;
        for k in 0..h {
            let fwd = k as isize;
            let (r, c) = (ar + fwd * fr + lateral * rr, ac + fwd * fc + lateral * rc);
            let wall = world.is_wall(r, c);
            let i = h - 1 - k;
            data[(i * w + j) * 2] = if wall { 1.0 } else { 0.0 };
            if wall && first_wall.is_none() {
                first_wall = Some(k);
            }
        }
        let dist = first_wall.map_or(1.0, |k| k as f32 / h as f32);
        for i in 0..h {
            data[(i * w + j) * 2 + 1] = dist;
        }
    }
    Tensor::new(vec![h, w, 2], data).expect("shape matches data")
}
