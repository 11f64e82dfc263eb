//! Experiment configuration shared by the learners and the harness.

use serde::{Deserialize, Serialize};

use crate::buffers::{CacheMode, InsertionMode};
use crate::envs::{LavaPath, LavaPathConfig, MultiAgentEnv, Spread, SpreadConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    LavaPath,
    Spread,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    ValueMix,
    ActorCritic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Vdn,
    Qmix,
}

/// Source of the per-transition trace parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// λ from the density-ratio discriminator.
    Adaptive,
    Fixed(f64),
    /// `c = λ·min(1, π/μ)` against the greedy target policy.
    Retrace(f64),
    /// `c = min(clip, π/μ)`.
    ImportanceSampling(f64),
}

impl LambdaMode {
    pub fn label(&self) -> String {
        match self {
            LambdaMode::Adaptive => "adaptive".into(),
            LambdaMode::Fixed(l) => format!("fixed({l})"),
            LambdaMode::Retrace(l) => format!("retrace({l})"),
            LambdaMode::ImportanceSampling(c) => format!("importance_sampling({c})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    // environment
    pub env: EnvKind,
    pub partial_obs: bool,
    pub spread_agents: usize,
    pub spread_targets: usize,
    pub spread_grid: usize,
    pub spread_episode_limit: usize,
    pub gamma: f64,

    // learner
    pub learner: LearnerKind,
    pub mixer: MixerKind,
    pub recurrent: bool,
    pub hidden_dim: usize,
    pub mixing_embed_dim: usize,
    pub hypernet_embed: usize,
    pub lr: f64,
    pub optim_alpha: f64,
    pub optim_eps: f64,
    pub grad_norm_clip: f64,
    pub batch_size: usize,
    /// In training episodes.
    pub target_update_interval: usize,
    pub epsilon_start: f64,
    pub epsilon_finish: f64,
    pub epsilon_anneal_time: u64,

    // actor-critic
    pub critic_lr: f64,
    pub ppo_clip: f64,
    pub gae_lambda: f64,
    pub ppo_epochs: usize,
    pub rollout_episodes: usize,
    pub entropy_coef: f64,

    // trace parameter and discriminator
    pub lambda_mode: LambdaMode,
    pub ratio_lr: f64,
    pub ratio_batch: usize,
    pub ratio_hidden: usize,
    /// Discriminator gradient steps per target update.
    pub ratio_update_sync: usize,

    // replay
    /// `C_off`, in episodes.
    pub buffer_size: usize,
    pub buffer_ratio: usize,
    pub insertion_mode: InsertionMode,
    pub cache_mode: CacheMode,
    /// λ-cache refreshes per target update.
    pub cache_frequency: f64,

    // run protocol
    pub total_env_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::LavaPath,
            partial_obs: false,
            spread_agents: 2,
            spread_targets: 2,
            spread_grid: 5,
            spread_episode_limit: 25,
            gamma: 0.99,
            learner: LearnerKind::ValueMix,
            mixer: MixerKind::Qmix,
            recurrent: true,
            hidden_dim: 64,
            mixing_embed_dim: 32,
            hypernet_embed: 64,
            lr: 0.001,
            optim_alpha: 0.99,
            optim_eps: 1e-5,
            grad_norm_clip: 10.0,
            batch_size: 32,
            target_update_interval: 200,
            epsilon_start: 1.0,
            epsilon_finish: 0.05,
            epsilon_anneal_time: 50_000,
            critic_lr: 0.0005,
            ppo_clip: 0.2,
            gae_lambda: 0.95,
            ppo_epochs: 4,
            rollout_episodes: 8,
            entropy_coef: 0.01,
            lambda_mode: LambdaMode::Adaptive,
            ratio_lr: 0.001,
            ratio_batch: 32,
            ratio_hidden: 64,
            ratio_update_sync: 20,
            buffer_size: 500,
            buffer_ratio: 50,
            insertion_mode: InsertionMode::DualInsert,
            cache_mode: CacheMode::Clear,
            cache_frequency: 1.0,
            total_env_steps: 200_000,
            eval_interval: 10_000,
            eval_episodes: 32,
            seeds: vec![0],
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!("config: {what}")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check((0.0..1.0).contains(&self.gamma), "gamma must lie in [0, 1)")?;
        check(self.spread_agents >= 1, "spread_agents must be ≥ 1")?;
        check(self.spread_targets >= 1, "spread_targets must be ≥ 1")?;
        check(self.spread_grid >= 2, "spread_grid must be ≥ 2")?;
        check(self.spread_episode_limit >= 1, "spread_episode_limit must be ≥ 1")?;
        for (v, name) in [
            (self.hidden_dim, "hidden_dim"),
            (self.mixing_embed_dim, "mixing_embed_dim"),
            (self.hypernet_embed, "hypernet_embed"),
            (self.batch_size, "batch_size"),
            (self.target_update_interval, "target_update_interval"),
            (self.ppo_epochs, "ppo_epochs"),
            (self.rollout_episodes, "rollout_episodes"),
            (self.ratio_batch, "ratio_batch"),
            (self.ratio_hidden, "ratio_hidden"),
            (self.buffer_size, "buffer_size"),
            (self.buffer_ratio, "buffer_ratio"),
            (self.eval_episodes, "eval_episodes"),
        ] {
            check(v >= 1, &format!("{name} must be ≥ 1"))?;
        }
        for (v, name) in [
            (self.lr, "lr"),
            (self.critic_lr, "critic_lr"),
            (self.ratio_lr, "ratio_lr"),
            (self.optim_eps, "optim_eps"),
            (self.grad_norm_clip, "grad_norm_clip"),
            (self.cache_frequency, "cache_frequency"),
        ] {
            check(v.is_finite() && v > 0.0, &format!("{name} must be > 0"))?;
        }
        check(self.optim_alpha > 0.0 && self.optim_alpha < 1.0, "optim_alpha must lie in (0, 1)")?;
        check(self.ppo_clip > 0.0 && self.ppo_clip < 1.0, "ppo_clip must lie in (0, 1)")?;
        check((0.0..=1.0).contains(&self.gae_lambda), "gae_lambda must lie in [0, 1]")?;
        check(self.entropy_coef >= 0.0, "entropy_coef must be ≥ 0")?;
        check(
            (0.0..=1.0).contains(&self.epsilon_start) && (0.0..=1.0).contains(&self.epsilon_finish),
            "epsilon values must lie in [0, 1]",
        )?;
        match self.lambda_mode {
            LambdaMode::Fixed(l) | LambdaMode::Retrace(l) => {
                check((0.0..=1.0).contains(&l), "lambda must lie in [0, 1]")?
            }
            LambdaMode::ImportanceSampling(c) => check(c.is_finite() && c > 0.0, "is_clip must be > 0")?,
            LambdaMode::Adaptive => {}
        }
        if self.learner == LearnerKind::ActorCritic {
            check(
                matches!(self.lambda_mode, LambdaMode::Adaptive | LambdaMode::Fixed(_)),
                "actor_critic supports lambda_mode adaptive or fixed",
            )?;
        }
        check(self.total_env_steps >= 1, "total_env_steps must be ≥ 1")?;
        check(self.eval_interval >= 1, "eval_interval must be ≥ 1")?;
        check(!self.seeds.is_empty(), "seed list must not be empty")?;
        Ok(())
    }

    pub fn make_env(&self) -> Result<Box<dyn MultiAgentEnv>> {
        Ok(match self.env {
            EnvKind::LavaPath => Box::new(LavaPath::new(LavaPathConfig {
                partial_obs: self.partial_obs,
                gamma: self.gamma,
            })),
            EnvKind::Spread => Box::new(Spread::new(SpreadConfig {
                n_agents: self.spread_agents,
                n_targets: self.spread_targets,
                grid_size: self.spread_grid,
                episode_limit: self.spread_episode_limit,
                gamma: self.gamma,
            })?),
        })
    }

    /// Episodes between λ-cache refreshes.
    pub fn cache_clear_interval(&self) -> usize {
        ((self.target_update_interval as f64 / self.cache_frequency).round() as usize).max(1)
    }

    /// `C_on = max(1, C_off / ratio)`.
    pub fn on_capacity(&self) -> usize {
        (self.buffer_size / self.buffer_ratio).max(1)
    }
}
