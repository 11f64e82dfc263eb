use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_move, manhattan, DecPomdpSpec, EnvStep, MultiAgentEnv};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadConfig {
    pub n_agents: usize,
    pub n_targets: usize,
    pub grid_size: usize,
    pub episode_limit: usize,
    pub gamma: f64,
}

impl Default for SpreadConfig {
    fn default() -> Self {
        Self {
            n_agents: 2,
            n_targets: 2,
            grid_size: 5,
            episode_limit: 25,
            gamma: 0.99,
        }
    }
}

/// Grid coverage task: every step pays minus the sum, over targets, of the
/// Manhattan distance to the nearest agent. Agents may share cells.
#[derive(Debug, Clone)]
pub struct Spread {
    cfg: SpreadConfig,
    spec: DecPomdpSpec,
    agents: Vec<(i64, i64)>,
    targets: Vec<(i64, i64)>,
    t: usize,
    done: bool,
}

impl Spread {
    pub fn new(cfg: SpreadConfig) -> Result<Self> {
        if cfg.n_agents == 0 || cfg.n_targets == 0 || cfg.grid_size < 2 || cfg.episode_limit == 0 {
            return Err(Error::Contract(format!("invalid spread config {cfg:?}")));
        }
        let n = cfg.n_agents;
        let m = cfg.n_targets;
        let spec = DecPomdpSpec {
            n_agents: n,
            state_dim: 2 * (n + m) + 1,
            obs_dim: 2 + 2 * m + 2 * (n - 1),
            n_actions: 5,
            max_episode_len: cfg.episode_limit,
            gamma: cfg.gamma,
        };
        Ok(Self {
            agents: vec![(0, 0); n],
            targets: vec![(0, 0); m],
            cfg,
            spec,
            t: 0,
            done: false,
        })
    }

    pub fn set_layout(&mut self, agents: Vec<(i64, i64)>, targets: Vec<(i64, i64)>) {
        assert_eq!(agents.len(), self.cfg.n_agents);
        assert_eq!(targets.len(), self.cfg.n_targets);
        self.agents = agents;
        self.targets = targets;
        self.t = 0;
        self.done = false;
    }

    pub fn coverage_reward(&self) -> f64 {
        -self
            .targets
            .iter()
            .map(|&tg| {
                self.agents
                    .iter()
                    .map(|&a| manhattan(a, tg))
                    .min()
                    .unwrap_or(0)
            })
            .sum::<i64>() as f64
    }

    fn norm(&self, v: i64) -> f64 {
        v as f64 / (self.cfg.grid_size - 1) as f64
    }

    fn observe(&self) -> EnvStep {
        let mut state = Vec::with_capacity(self.spec.state_dim);
        for &(r, c) in self.agents.iter().chain(&self.targets) {
            state.push(self.norm(r));
            state.push(self.norm(c));
        }
        state.push(self.t as f64 / self.cfg.episode_limit as f64);
        let observations = (0..self.cfg.n_agents)
            .map(|i| {
                let me = self.agents[i];
                let mut o = vec![self.norm(me.0), self.norm(me.1)];
                for &(r, c) in &self.targets {
                    o.push(self.norm(r - me.0));
                    o.push(self.norm(c - me.1));
                }
                for (j, &(r, c)) in self.agents.iter().enumerate() {
                    if j != i {
                        o.push(self.norm(r - me.0));
                        o.push(self.norm(c - me.1));
                    }
                }
                o
            })
            .collect();
        EnvStep {
            next_state: state,
            observations,
            reward: 0.0,
            terminated: self.done,
            available_actions: vec![vec![true; 5]; self.cfg.n_agents],
        }
    }
}

impl MultiAgentEnv for Spread {
    fn spec(&self) -> &DecPomdpSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> EnvStep {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = self.cfg.grid_size as i64;
        let mut cell = || (rng.random_range(0..g), rng.random_range(0..g));
        self.agents = (0..self.cfg.n_agents).map(|_| cell()).collect();
        self.targets = (0..self.cfg.n_targets).map(|_| cell()).collect();
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<EnvStep> {
        if self.done {
            return Err(Error::Contract("step after episode end".into()));
        }
        if joint_action.len() != self.cfg.n_agents || joint_action.iter().any(|&a| a >= 5) {
            return Err(Error::Contract(format!(
                "invalid spread joint action {joint_action:?}"
            )));
        }
        let g = self.cfg.grid_size as i64;
        for (p, &a) in self.agents.iter_mut().zip(joint_action) {
            *p = apply_move(*p, a, g);
        }
        self.t += 1;
        self.done = self.t >= self.cfg.episode_limit;
        let mut out = self.observe();
        out.reward = self.coverage_reward();
        out.terminated = self.done;
        Ok(out)
    }

    /// Every target covered.
    fn succeeded(&self) -> bool {
        self.coverage_reward() == 0.0
    }
}
