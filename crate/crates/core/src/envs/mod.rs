//! Dec-POMDP environment abstraction and the concrete environments: the
//! two-agent lava-path gridworld, a Spread-like coverage task, and random
//! tabular MDPs for the operator oracles.

mod lava;
mod spread;
mod tabular;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use lava::{LavaPath, LavaPathConfig, LAVA_ACTIONS, LAVA_EPISODE_LIMIT};
pub use spread::{Spread, SpreadConfig};
pub use tabular::{random_tabular_mdp, TabularMdp};

/// Static description of a cooperative Dec-POMDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecPomdpSpec {
    pub n_agents: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub max_episode_len: usize,
    pub gamma: f64,
}

/// Result of a reset or a joint step. The reward is shared by all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub next_state: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub reward: f64,
    pub terminated: bool,
    pub available_actions: Vec<Vec<bool>>,
}

/// Common interface of the multi-agent environments.
pub trait MultiAgentEnv: Send {
    fn spec(&self) -> &DecPomdpSpec;

    /// Start a new episode; the returned step carries zero reward.
    fn reset(&mut self, seed: u64) -> EnvStep;

    fn step(&mut self, joint_action: &[usize]) -> Result<EnvStep>;

    /// Whether the current configuration counts as solving the task.
    fn succeeded(&self) -> bool;
}

/// Grid move encoding shared by the grid environments.
pub const STAY: usize = 0;
pub const UP: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;
pub const RIGHT: usize = 4;

pub(crate) fn apply_move(pos: (i64, i64), action: usize, size: i64) -> (i64, i64) {
    let (r, c) = pos;
    let next = match action {
        UP => (r - 1, c),
        DOWN => (r + 1, c),
        LEFT => (r, c - 1),
        RIGHT => (r, c + 1),
        _ => (r, c),
    };
    if next.0 < 0 || next.1 < 0 || next.0 >= size || next.1 >= size {
        pos
    } else {
        next
    }
}

pub(crate) fn manhattan(a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}
