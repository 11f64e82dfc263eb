use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::actor_critic::AcLearner;
use super::value_mix::{AgentMemory, PaddedBatch, ValueMixLearner};
use crate::buffers::{DualBuffer, StoreKind, Trajectory, Transition};
use crate::config::{ExperimentConfig, LambdaMode, LearnerKind};
use crate::envs::{DecPomdpSpec, MultiAgentEnv};
use crate::error::Result;

/// One evaluation point of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub env_step: u64,
    pub eval_return: f64,
    pub success_rate: f64,
    /// Mean TD (or critic) loss since the previous record; 0 before training starts.
    pub td_loss: f64,
    /// Latest discriminator loss; 0 when none has been trained.
    pub ratio_loss: f64,
    /// Mean λ over the last training batch; 0 before training starts.
    pub mean_lambda: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub enum Learner {
    ValueMix(Box<ValueMixLearner>),
    ActorCritic(Box<AcLearner>),
}

impl Learner {
    pub fn new(cfg: &ExperimentConfig, spec: &DecPomdpSpec, rng: &mut impl Rng) -> Self {
        match cfg.learner {
            LearnerKind::ValueMix => Learner::ValueMix(Box::new(ValueMixLearner::new(cfg, spec, rng))),
            LearnerKind::ActorCritic => Learner::ActorCritic(Box::new(AcLearner::new(cfg, spec, rng))),
        }
    }

    pub fn select_actions(
        &self,
        mem: &mut AgentMemory,
        observations: &[Vec<f64>],
        available: &[Vec<bool>],
        rng: &mut impl Rng,
        evaluate: bool,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        match self {
            Learner::ValueMix(l) => l.select_actions(mem, observations, available, rng, evaluate),
            Learner::ActorCritic(l) => l.select_actions(mem, observations, available, rng, evaluate),
        }
    }

    pub fn env_steps(&self) -> u64 {
        match self {
            Learner::ValueMix(l) => l.env_steps,
            Learner::ActorCritic(l) => l.env_steps,
        }
    }

    fn add_env_steps(&mut self, n: u64) {
        match self {
            Learner::ValueMix(l) => l.env_steps += n,
            Learner::ActorCritic(l) => l.env_steps += n,
        }
    }

    /// Exploration rate in effect; 0 for the stochastic-policy learner.
    pub fn epsilon(&self) -> f64 {
        match self {
            Learner::ValueMix(l) => l.epsilon(),
            Learner::ActorCritic(_) => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub trajectory: Trajectory,
    /// Undiscounted sum of rewards.
    pub total_reward: f64,
    pub success: bool,
}

/// Roll out one episode. Stops on termination or after the environment's episode
/// limit, whichever comes first.
pub fn run_episode(
    env: &mut dyn MultiAgentEnv,
    learner: &Learner,
    reset_seed: u64,
    rng: &mut impl Rng,
    evaluate: bool,
    episode_id: u64,
    birth_step: u64,
) -> Result<EpisodeOutcome> {
    let limit = env.spec().max_episode_len;
    let mut cur = env.reset(reset_seed);
    let mut mem = AgentMemory::default();
    let mut transitions = Vec::new();
    let mut total = 0.0;
    loop {
        let (actions, probs) = learner.select_actions(&mut mem, &cur.observations, &cur.available_actions, rng, evaluate)?;
        let next = env.step(&actions)?;
        total += next.reward;
        transitions.push(Transition {
            state: std::mem::take(&mut cur.next_state),
            observations: std::mem::take(&mut cur.observations),
            actions,
            reward: next.reward,
            terminated: next.terminated,
            available_actions: std::mem::take(&mut cur.available_actions),
            behavior_probs: probs,
        });
        cur = next;
        if cur.terminated || transitions.len() >= limit {
            break;
        }
    }
    Ok(EpisodeOutcome {
        trajectory: Trajectory {
            transitions,
            episode_id,
            birth_step,
            final_state: cur.next_state,
            final_observations: cur.observations,
            final_available: cur.available_actions,
        },
        total_reward: total,
        success: env.succeeded(),
    })
}

/// Greedy evaluation: mean undiscounted return and success rate.
pub fn evaluate(env: &mut dyn MultiAgentEnv, learner: &Learner, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ret, mut wins) = (0.0, 0usize);
    for k in 0..episodes {
        let reset_seed = rng.random();
        let out = run_episode(env, learner, reset_seed, &mut rng, true, k as u64, 0)?;
        ret += out.total_reward;
        wins += usize::from(out.success);
    }
    Ok((ret / episodes as f64, wins as f64 / episodes as f64))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricRecord>,
    pub learner: Learner,
    pub episodes: u64,
}

/// Accumulates the per-record training statistics.
#[derive(Debug, Default)]
struct Tally {
    loss_sum: f64,
    loss_n: usize,
    ratio_loss: f64,
    mean_lambda: f64,
}

impl Tally {
    fn loss(&mut self, l: f64) {
        self.loss_sum += l;
        self.loss_n += 1;
    }

    fn take_loss(&mut self) -> f64 {
        let m = if self.loss_n > 0 { self.loss_sum / self.loss_n as f64 } else { 0.0 };
        self.loss_sum = 0.0;
        self.loss_n = 0;
        m
    }
}

struct Runner<'a, F: FnMut(&MetricRecord)> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    eval_env: Box<dyn MultiAgentEnv>,
    next_eval: u64,
    records: Vec<MetricRecord>,
    tally: Tally,
    sink: F,
}

impl<F: FnMut(&MetricRecord)> Runner<'_, F> {
    fn maybe_eval(&mut self, learner: &Learner, force: bool) -> Result<()> {
        let step = learner.env_steps();
        let due = step >= self.next_eval || (force && self.records.last().is_none_or(|r| r.env_step < step));
        if !due {
            return Ok(());
        }
        let eval_seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xE7A1;
        let (ret, succ) = evaluate(self.eval_env.as_mut(), learner, self.cfg.eval_episodes, eval_seed)?;
        let rec = MetricRecord {
            env_step: step,
            eval_return: ret,
            success_rate: succ,
            td_loss: self.tally.take_loss(),
            ratio_loss: self.tally.ratio_loss,
            mean_lambda: self.tally.mean_lambda,
            epsilon: learner.epsilon(),
        };
        (self.sink)(&rec);
        self.records.push(rec);
        while self.next_eval <= step {
            self.next_eval += self.cfg.eval_interval;
        }
        Ok(())
    }
}

/// Full training loop for one seed. Calls `sink` on every metric record as
/// it is produced. Bit-identical for identical `(cfg, seed)`.
pub fn train_run(cfg: &ExperimentConfig, seed: u64, sink: impl FnMut(&MetricRecord)) -> Result<RunOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = cfg.make_env()?;
    let spec = env.spec().clone();
    let mut learner = Learner::new(cfg, &spec, &mut rng);
    let mut runner = Runner {
        cfg,
        seed,
        eval_env: cfg.make_env()?,
        next_eval: 0,
        records: Vec::new(),
        tally: Tally::default(),
        sink,
    };
    if let LambdaMode::Fixed(l) = cfg.lambda_mode {
        runner.tally.mean_lambda = l;
    }
    let episodes = match &mut learner {
        Learner::ValueMix(_) => value_mix_loop(cfg, env.as_mut(), &mut learner, &mut runner, &mut rng)?,
        Learner::ActorCritic(_) => actor_critic_loop(cfg, env.as_mut(), &mut learner, &mut runner, &mut rng)?,
    };
    runner.maybe_eval(&learner, true)?;
    Ok(RunOutput {
        records: runner.records,
        learner,
        episodes,
    })
}

fn value_mix_loop<F: FnMut(&MetricRecord)>(
    cfg: &ExperimentConfig,
    env: &mut dyn MultiAgentEnv,
    learner: &mut Learner,
    runner: &mut Runner<'_, F>,
    rng: &mut ChaCha8Rng,
) -> Result<u64> {
    let mut buf = DualBuffer::new(cfg.buffer_size, cfg.buffer_ratio, cfg.insertion_mode, cfg.cache_mode);
    let clear_every = cfg.cache_clear_interval() as u64;
    let mut episodes = 0u64;
    while learner.env_steps() < cfg.total_env_steps {
        runner.maybe_eval(learner, false)?;
        let reset_seed = rng.random();
        let out = run_episode(env, learner, reset_seed, rng, false, episodes, learner.env_steps())?;
        learner.add_env_steps(out.trajectory.len() as u64);
        buf.insert(out.trajectory)?;
        episodes += 1;
        let Learner::ValueMix(vm) = learner else { unreachable!() };

        if buf.store(StoreKind::Off).len() >= cfg.batch_size {
            let sample = buf.sample_batch(StoreKind::Off, cfg.batch_size, rng)?;
            let batch = PaddedBatch::new(&vm.utility, &vm.spec, sample)?;
            let targets = vm.compute_targets(&mut buf, &batch)?;
            runner.tally.mean_lambda = targets.mean_lambda;
            let loss = vm.td_train_step(&batch, &targets)?;
            runner.tally.loss(loss);
        }
        if episodes.is_multiple_of(clear_every) {
            buf.clear_cache();
        }
        if episodes.is_multiple_of(cfg.target_update_interval as u64) {
            if let Some(l) = vm.target_update(&buf, rng)? {
                runner.tally.ratio_loss = l;
            }
        }
    }
    Ok(episodes)
}

fn actor_critic_loop<F: FnMut(&MetricRecord)>(
    cfg: &ExperimentConfig,
    env: &mut dyn MultiAgentEnv,
    learner: &mut Learner,
    runner: &mut Runner<'_, F>,
    rng: &mut ChaCha8Rng,
) -> Result<u64> {
    let mut buf = DualBuffer::with_capacities(
        cfg.rollout_episodes,
        cfg.rollout_episodes * cfg.buffer_ratio,
        cfg.insertion_mode,
        cfg.cache_mode,
    );
    let mut episodes = 0u64;
    while learner.env_steps() < cfg.total_env_steps {
        let mut rollout = Vec::with_capacity(cfg.rollout_episodes);
        for _ in 0..cfg.rollout_episodes {
            runner.maybe_eval(learner, false)?;
            let reset_seed = rng.random();
            let out = run_episode(env, learner, reset_seed, rng, false, episodes, learner.env_steps())?;
            learner.add_env_steps(out.trajectory.len() as u64);
            let traj = out.trajectory;
            rollout.push(Arc::new(traj.clone()));
            buf.insert(traj)?;
            episodes += 1;
        }
        let Learner::ActorCritic(ac) = learner else { unreachable!() };
        let stats = ac.train_iteration(&rollout, &buf, rng)?;
        runner.tally.loss(stats.critic_loss);
        runner.tally.mean_lambda = stats.mean_lambda;
        if let Some(l) = stats.ratio_loss {
            runner.tally.ratio_loss = l;
        }
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EnvKind, MixerKind};
    use crate::learners::checkpoint::{read_checkpoint, write_checkpoint};

    fn small(mode: LambdaMode) -> ExperimentConfig {
        ExperimentConfig {
            recurrent: false,
            hidden_dim: 8,
            mixing_embed_dim: 4,
            hypernet_embed: 8,
            ratio_hidden: 8,
            batch_size: 4,
            buffer_size: 20,
            buffer_ratio: 5,
            target_update_interval: 5,
            total_env_steps: 1500,
            eval_interval: 500,
            eval_episodes: 2,
            lambda_mode: mode,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let cfg = small(LambdaMode::Adaptive);
        let a = train_run(&cfg, 3, |_| {}).unwrap();
        let b = train_run(&cfg, 3, |_| {}).unwrap();
        assert_eq!(a.records, b.records);
        let c = train_run(&cfg, 4, |_| {}).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn records_are_strictly_increasing_and_streamed() {
        let mut streamed = Vec::new();
        let out = train_run(&small(LambdaMode::Fixed(0.4)), 0, |r| streamed.push(*r)).unwrap();
        assert_eq!(streamed, out.records);
        assert_eq!(out.records[0].env_step, 0);
        assert!(out.records.windows(2).all(|w| w[0].env_step < w[1].env_step));
        let last = out.records.last().unwrap();
        assert!(last.env_step >= 1500);
        assert!((last.mean_lambda - 0.4).abs() < 1e-12);
        assert!(out.records.iter().all(|r| r.ratio_loss == 0.0));
        assert!(out.records.len() >= 4);
    }

    #[test]
    fn every_lambda_mode_and_learner_runs() {
        for mode in [
            LambdaMode::Retrace(0.8),
            LambdaMode::ImportanceSampling(1.0),
            LambdaMode::Adaptive,
        ] {
            let out = train_run(&small(mode), 1, |_| {}).unwrap();
            assert!(out.records.iter().all(|r| r.eval_return.is_finite()));
        }
        for mode in [LambdaMode::Adaptive, LambdaMode::Fixed(0.9)] {
            let cfg = ExperimentConfig {
                learner: LearnerKind::ActorCritic,
                rollout_episodes: 2,
                ..small(mode)
            };
            let out = train_run(&cfg, 1, |_| {}).unwrap();
            assert!(out.records.last().unwrap().td_loss > 0.0);
        }
    }

    #[test]
    fn single_agent_vdn_runs() {
        let cfg = ExperimentConfig {
            env: EnvKind::Spread,
            spread_agents: 1,
            spread_targets: 1,
            mixer: MixerKind::Vdn,
            recurrent: true,
            ..small(LambdaMode::Adaptive)
        };
        let out = train_run(&cfg, 0, |_| {}).unwrap();
        let Learner::ValueMix(vm) = &out.learner else { panic!() };
        assert_eq!(vm.spec.n_agents, 1);
        assert!(vm.train_steps > 0 && vm.target_updates > 0);
    }

    #[test]
    fn checkpoint_round_trip_preserves_behaviour() {
        for learner in [LearnerKind::ValueMix, LearnerKind::ActorCritic] {
            let cfg = ExperimentConfig {
                learner,
                rollout_episodes: 2,
                total_env_steps: 400,
                ..small(LambdaMode::Adaptive)
            };
            let out = train_run(&cfg, 2, |_| {}).unwrap();
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, &cfg, &out.learner).unwrap();
            assert_eq!(&bytes[..8], b"ATDCKPT1");
            let (cfg2, restored) = read_checkpoint(&mut bytes.as_slice()).unwrap();
            assert_eq!(cfg2, cfg);
            let mut again = Vec::new();
            write_checkpoint(&mut again, &cfg2, &restored).unwrap();
            assert_eq!(bytes, again);
            let mut e1 = cfg.make_env().unwrap();
            let mut e2 = cfg.make_env().unwrap();
            assert_eq!(
                evaluate(e1.as_mut(), &out.learner, 3, 5).unwrap(),
                evaluate(e2.as_mut(), &restored, 3, 5).unwrap()
            );
            bytes[3] ^= 1;
            assert!(read_checkpoint(&mut bytes.as_slice()).is_err());
        }
    }
}
