use serde::{Deserialize, Serialize};

use super::{apply_move, manhattan, DecPomdpSpec, EnvStep, MultiAgentEnv};
use crate::error::{Error, Result};

pub const LAVA_EPISODE_LIMIT: usize = 60;
/// Four moves plus stay.
pub const LAVA_ACTIONS: usize = 5;

const SIZE: i64 = 7;
const LAVA_COL: i64 = 3;
const CORRIDORS: [i64; 2] = [1, 5];
const GOAL_REWARD: f64 = 40.0;
const LAVA_REWARD: f64 = -10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LavaPathConfig {
    /// Hide the other agent's position from each observation.
    pub partial_obs: bool,
    pub gamma: f64,
}

impl Default for LavaPathConfig {
    fn default() -> Self {
        Self {
            partial_obs: false,
            gamma: 0.99,
        }
    }
}

/// Two agents on a 7×7 grid must swap sides across a vertical lava band
/// that is open only at rows 1 and 5.
///
/// ```text
/// . . . L . . .
/// . . . . . . .    <- corridor
/// . . . L . . .
/// 0 . . L . . 1    agent 0 starts left and heads right, agent 1 the reverse
/// . . . L . . .
/// . . . . . . .    <- corridor
/// . . . L . . .
/// ```
///
/// Rewards: +40 when both agents stand on their goals, −10 on entering lava,
/// 0 on other steps, and `−min(40, d₀ + d₁)` (Manhattan distances to goals)
/// when the 60-step limit expires. Moves into the same cell, or swaps, are
/// cancelled for both agents.
#[derive(Debug, Clone)]
pub struct LavaPath {
    cfg: LavaPathConfig,
    spec: DecPomdpSpec,
    pos: [(i64, i64); 2],
    t: usize,
    done: bool,
}

const STARTS: [(i64, i64); 2] = [(3, 0), (3, 6)];
const GOALS: [(i64, i64); 2] = [(3, 6), (3, 0)];

impl LavaPath {
    pub fn new(cfg: LavaPathConfig) -> Self {
        let spec = DecPomdpSpec {
            n_agents: 2,
            state_dim: 5,
            obs_dim: 6,
            n_actions: LAVA_ACTIONS,
            max_episode_len: LAVA_EPISODE_LIMIT,
            gamma: cfg.gamma,
        };
        Self {
            cfg,
            spec,
            pos: STARTS,
            t: 0,
            done: false,
        }
    }

    pub fn is_lava(cell: (i64, i64)) -> bool {
        cell.1 == LAVA_COL && !CORRIDORS.contains(&cell.0)
    }

    pub fn positions(&self) -> [(i64, i64); 2] {
        self.pos
    }

    /// Place agents directly; used by tests to stage scenarios.
    pub fn set_positions(&mut self, pos: [(i64, i64); 2], t: usize) {
        self.pos = pos;
        self.t = t;
        self.done = false;
    }

    pub fn goal_distance_sum(&self) -> i64 {
        manhattan(self.pos[0], GOALS[0]) + manhattan(self.pos[1], GOALS[1])
    }

    fn norm(v: i64) -> f64 {
        v as f64 / (SIZE - 1) as f64
    }

    fn observe(&self) -> EnvStep {
        let state = vec![
            Self::norm(self.pos[0].0),
            Self::norm(self.pos[0].1),
            Self::norm(self.pos[1].0),
            Self::norm(self.pos[1].1),
            self.t as f64 / LAVA_EPISODE_LIMIT as f64,
        ];
        let observations = (0..2)
            .map(|i| {
                let me = self.pos[i];
                let other = self.pos[1 - i];
                let (or, oc) = if self.cfg.partial_obs {
                    (0.0, 0.0)
                } else {
                    (Self::norm(other.0), Self::norm(other.1))
                };
                vec![
                    Self::norm(me.0),
                    Self::norm(me.1),
                    or,
                    oc,
                    Self::norm(GOALS[i].0 - me.0),
                    Self::norm(GOALS[i].1 - me.1),
                ]
            })
            .collect();
        EnvStep {
            next_state: state,
            observations,
            reward: 0.0,
            terminated: self.done,
            available_actions: vec![vec![true; LAVA_ACTIONS]; 2],
        }
    }
}

impl MultiAgentEnv for LavaPath {
    fn spec(&self) -> &DecPomdpSpec {
        &self.spec
    }

    /// Start cells are fixed; the seed is accepted for interface uniformity.
    fn reset(&mut self, _seed: u64) -> EnvStep {
        self.pos = STARTS;
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<EnvStep> {
        if self.done {
            return Err(Error::Contract("step after episode end".into()));
        }
        if joint_action.len() != 2 || joint_action.iter().any(|&a| a >= LAVA_ACTIONS) {
            return Err(Error::Contract(format!(
                "invalid lava-path joint action {joint_action:?}"
            )));
        }
        let mut next = [
            apply_move(self.pos[0], joint_action[0], SIZE),
            apply_move(self.pos[1], joint_action[1], SIZE),
        ];
        let same_cell = next[0] == next[1];
        let swap = next[0] == self.pos[1] && next[1] == self.pos[0];
        if same_cell || swap {
            next = self.pos;
        }
        self.pos = next;
        self.t += 1;

        let (reward, terminated) = if next.iter().any(|&p| Self::is_lava(p)) {
            (LAVA_REWARD, true)
        } else if next[0] == GOALS[0] && next[1] == GOALS[1] {
            (GOAL_REWARD, true)
        } else if self.t >= LAVA_EPISODE_LIMIT {
            (-(self.goal_distance_sum() as f64).min(GOAL_REWARD), true)
        } else {
            (0.0, false)
        };
        self.done = terminated;
        let mut out = self.observe();
        out.reward = reward;
        out.terminated = terminated;
        Ok(out)
    }

    fn succeeded(&self) -> bool {
        self.pos == GOALS
    }
}
