use std::collections::VecDeque;

use crate::sim::{Action, AgentPose, Cell, GridWorld, Heading, UNREACHABLE};

fn state(world: &GridWorld, pose: AgentPose) -> usize {
    (pose.cell.row * world.size() + pose.cell.col) * 4 + pose.heading.index()
}

/// Fewest actions (moves, turns and the final stop) from every
/// `(cell, heading)` state, indexed `(row * size + col) * 4 + heading`.
/// Walls hold [`UNREACHABLE`].
pub fn action_cost_table(world: &GridWorld) -> Vec<u32> {
    let mut cost = vec![UNREACHABLE; world.size() * world.size() * 4];
    let mut queue = VecDeque::new();
    for h in Heading::ALL {
        let s = AgentPose { cell: world.source(), heading: h };
        cost[state(world, s)] = 1;
        queue.push_back(s);
    }
    // search backwards over the reversed transitions
    while let Some(p) = queue.pop_front() {
        let c = cost[state(world, p)];
        let mut preds = vec![
            AgentPose { cell: p.cell, heading: p.heading.right() },
            AgentPose { cell: p.cell, heading: p.heading.left() },
        ];
        let (dr, dc) = p.heading.delta();
        let (r, k) = (p.cell.row as isize - dr, p.cell.col as isize - dc);
        if !world.is_wall(r, k) {
            preds.push(AgentPose { cell: Cell::new(r as usize, k as usize), heading: p.heading });
        }
        for q in preds {
            let slot = &mut cost[state(world, q)];
            if *slot == UNREACHABLE {
                *slot = c + 1;
                queue.push_back(q);
            }
        }
    }
    cost
}

pub fn min_action_count(world: &GridWorld, start: AgentPose) -> u32 {
    action_cost_table(world)[state(world, start)]
}

/// Minimal action sequences, tie-broken toward the fewest cell moves, so
/// that the replayed path is also geodesic whenever some action-minimal
/// sequence is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionOracle {
    cost: Vec<u32>,
    moves: Vec<u32>,
}

impl ActionOracle {
    pub fn new(world: &GridWorld) -> Self {
        let cost = action_cost_table(world);
        let mut order: Vec<usize> = (0..cost.len()).filter(|&i| cost[i] != UNREACHABLE).collect();
        order.sort_by_key(|&i| cost[i]);
        let mut moves = vec![UNREACHABLE; cost.len()];
        for i in order {
            if cost[i] == 1 {
                moves[i] = 0;
                continue;
            }
            let pose = pose_of(world, i);
            moves[i] = successors(world, pose)
                .into_iter()
                .filter_map(|(_, next, moved)| {
                    let j = state(world, next);
                    (cost[j] + 1 == cost[i]).then(|| moves[j] + u32::from(moved))
                })
                .min()
                .expect("cost table is consistent");
        }
        Self { cost, moves }
    }

    pub fn min_actions(&self, world: &GridWorld, pose: AgentPose) -> u32 {
        self.cost[state(world, pose)]
    }

    /// Cell moves along the chosen minimal sequence.
    pub fn path_moves(&self, world: &GridWorld, pose: AgentPose) -> u32 {
        self.moves[state(world, pose)]
    }

    /// First action of the chosen minimal sequence from `pose`.
    pub fn next_action(&self, world: &GridWorld, pose: AgentPose) -> Action {
        let i = state(world, pose);
        if self.cost[i] <= 1 {
            return Action::Stop;
        }
        successors(world, pose)
            .into_iter()
            .find(|&(_, next, moved)| {
                let j = state(world, next);
                self.cost[j] + 1 == self.cost[i] && self.moves[j] + u32::from(moved) == self.moves[i]
            })
            .map(|(a, _, _)| a)
            .expect("cost table is consistent")
    }
}

fn pose_of(world: &GridWorld, i: usize) -> AgentPose {
    let cell = i / 4;
    AgentPose { cell: Cell::new(cell / world.size(), cell % world.size()), heading: Heading::from_index(i % 4) }
}

fn successors(world: &GridWorld, pose: AgentPose) -> Vec<(Action, AgentPose, bool)> {
    let mut out = vec![
        (Action::TurnLeft, AgentPose { heading: pose.heading.left(), ..pose }, false),
        (Action::TurnRight, AgentPose { heading: pose.heading.right(), ..pose }, false),
    ];
    if let Some(cell) = world.step_from(pose.cell, pose.heading) {
        out.insert(0, (Action::Forward, AgentPose { cell, ..pose }, true));
    }
    out
}
