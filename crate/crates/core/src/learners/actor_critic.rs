use std::sync::Arc;

use rand::Rng;

use super::utility::masked_argmax;
use super::value_mix::AgentMemory;
use crate::buffers::{DualBuffer, StoreKind, Trajectory};
use crate::config::{ExperimentConfig, LambdaMode};
use crate::envs::DecPomdpSpec;
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Dense, Matrix, OptimizerState, ParamSet, Tape, Var};
use crate::ratio::{train_ratio_step, RatioInput, RatioNet};
use crate::returns::lambda_targets;

const MASKED_LOGIT: f64 = -1e9;

/// Shared-weight per-agent policy over `obs ⊕ agent id`.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    n_agents: usize,
    obs_dim: usize,
    layers: [Dense; 3],
}

impl PolicyNet {
    fn new(params: &mut ParamSet, spec: &DecPomdpSpec, hidden: usize, rng: &mut impl Rng) -> Self {
        let input = spec.obs_dim + spec.n_agents;
        Self {
            n_agents: spec.n_agents,
            obs_dim: spec.obs_dim,
            layers: [
                Dense::new(params, "actor.fc1", input, hidden, Activation::Relu, rng),
                Dense::new(params, "actor.fc2", hidden, hidden, Activation::Relu, rng),
                Dense::new(params, "actor.head", hidden, spec.n_actions, Activation::Identity, rng),
            ],
        }
    }

    fn input_row(&self, agent: usize, obs: &[f64]) -> Vec<f64> {
        let mut row = vec![0.0; self.obs_dim + self.n_agents];
        row[..self.obs_dim].copy_from_slice(obs);
        row[self.obs_dim + agent] = 1.0;
        row
    }

    /// Masked log-probabilities, one row per input row.
    fn log_probs(&self, tape: &mut Tape, bound: &Bound, x: &Matrix, avail: &Matrix) -> Result<Var> {
        let mut h = tape.constant(x.clone());
        for l in &self.layers {
            h = l.forward(tape, bound, h)?;
        }
        let m = tape.constant(avail.map(|ok| if ok > 0.5 { 0.0 } else { MASKED_LOGIT }));
        let z = tape.add(h, m)?;
        tape.log_softmax(z)
    }
}

/// Centralized state-value critic.
#[derive(Debug, Clone)]
pub struct CriticNet {
    layers: [Dense; 3],
}

impl CriticNet {
    fn new(params: &mut ParamSet, state_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            layers: [
                Dense::new(params, "critic.fc1", state_dim, hidden, Activation::Relu, rng),
                Dense::new(params, "critic.fc2", hidden, hidden, Activation::Relu, rng),
                Dense::new(params, "critic.head", hidden, 1, Activation::Identity, rng),
            ],
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, states: &Matrix) -> Result<Var> {
        let mut h = tape.constant(states.clone());
        for l in &self.layers {
            h = l.forward(tape, bound, h)?;
        }
        Ok(h)
    }
}

/// Rows of one or more episodes flattened step-major per episode.
struct Flat {
    /// `Σ L · n` policy input rows, ordered (episode, step, agent).
    obs: Matrix,
    avail: Matrix,
    actions: Vec<usize>,
    old_logp: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AcStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub ratio_loss: Option<f64>,
    pub mean_lambda: f64,
}

/// Clipped-surrogate actor-critic with a critic trained on λ-returns that
/// bootstrap from `V(s')`.
#[derive(Debug, Clone)]
pub struct AcLearner {
    pub spec: DecPomdpSpec,
    pub actor: PolicyNet,
    pub critic: CriticNet,
    pub actor_params: ParamSet,
    pub critic_params: ParamSet,
    pub actor_opt: OptimizerState,
    pub critic_opt: OptimizerState,
    pub ratio: Option<RatioNet>,
    pub ratio_opt: Option<OptimizerState>,
    pub lambda_mode: LambdaMode,
    pub clip: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub entropy_coef: f64,
    pub ratio_batch: usize,
    pub ratio_steps: usize,
    pub env_steps: u64,
    pub iterations: u64,
}

impl AcLearner {
    pub fn new(cfg: &ExperimentConfig, spec: &DecPomdpSpec, rng: &mut impl Rng) -> Self {
        let mut actor_params = ParamSet::new();
        let actor = PolicyNet::new(&mut actor_params, spec, cfg.hidden_dim, rng);
        let mut critic_params = ParamSet::new();
        let critic = CriticNet::new(&mut critic_params, spec.state_dim, cfg.hidden_dim, rng);
        let ratio = (cfg.lambda_mode == LambdaMode::Adaptive).then(|| {
            RatioNet::new(
                RatioInput::Centralized {
                    state_dim: spec.state_dim,
                    n_agents: spec.n_agents,
                    n_actions: spec.n_actions,
                },
                cfg.ratio_hidden,
                rng,
            )
        });
        Self {
            spec: spec.clone(),
            actor_opt: OptimizerState::adam(&actor_params, cfg.lr, 1e-8),
            critic_opt: OptimizerState::adam(&critic_params, cfg.critic_lr, 1e-8),
            actor,
            critic,
            actor_params,
            critic_params,
            ratio_opt: ratio.as_ref().map(|r| r.optimizer(cfg.ratio_lr)),
            ratio,
            lambda_mode: cfg.lambda_mode,
            clip: cfg.ppo_clip,
            gae_lambda: cfg.gae_lambda,
            epochs: cfg.ppo_epochs,
            entropy_coef: cfg.entropy_coef,
            ratio_batch: cfg.ratio_batch,
            ratio_steps: cfg.ratio_update_sync,
            env_steps: 0,
            iterations: 0,
        }
    }

    /// Sample (or, when evaluating, take the mode of) each agent's policy.
    pub fn select_actions(
        &self,
        _mem: &mut AgentMemory,
        observations: &[Vec<f64>],
        available: &[Vec<bool>],
        rng: &mut impl Rng,
        evaluate: bool,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let n = observations.len();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| self.actor.input_row(i, &observations[i])).collect();
        let avail = mask_matrix(available)?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.actor_params);
        let lp = self.actor.log_probs(&mut tape, &bound, &Matrix::from_rows(&rows)?, &avail)?;
        let lp = tape.value(lp);
        let mut actions = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        for (i, avail) in available.iter().enumerate().take(n) {
            let p: Vec<f64> = lp.row_slice(i).iter().map(|l| l.exp()).collect();
            let a = if evaluate {
                masked_argmax(&p, avail)
                    .ok_or_else(|| Error::Contract(format!("agent {i} has no available action")))?
            } else {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = None;
                for (a, &pa) in p.iter().enumerate() {
                    if !avail[a] {
                        continue;
                    }
                    acc += pa;
                    pick = Some(a);
                    if u < acc {
                        break;
                    }
                }
                pick.ok_or_else(|| Error::Contract(format!("agent {i} has no available action")))?
            };
            actions.push(a);
            probs.push(p[a]);
        }
        Ok((actions, probs))
    }

    fn flatten(&self, trajs: &[Arc<Trajectory>]) -> Result<Flat> {
        let mut rows = Vec::new();
        let mut masks = Vec::new();
        let mut actions = Vec::new();
        let mut old_logp = Vec::new();
        for traj in trajs {
            for tr in &traj.transitions {
                for i in 0..self.spec.n_agents {
                    rows.push(self.actor.input_row(i, &tr.observations[i]));
                    masks.push(tr.available_actions[i].clone());
                    actions.push(tr.actions[i]);
                    old_logp.push(tr.behavior_probs[i].max(1e-12).ln());
                }
            }
        }
        Ok(Flat {
            obs: Matrix::from_rows(&rows)?,
            avail: mask_matrix(&masks)?,
            actions,
            old_logp,
        })
    }

    /// Negative clipped surrogate (minus an entropy bonus) with one
    /// advantage per row.
    pub fn actor_loss(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        trajs: &[Arc<Trajectory>],
        advantages: &[f64],
    ) -> Result<Var> {
        let flat = self.flatten(trajs)?;
        if advantages.len() != flat.actions.len() {
            return Err(Error::Contract("one advantage per agent step".into()));
        }
        let bound = tape.bind(params);
        let lp_all = self.actor.log_probs(tape, &bound, &flat.obs, &flat.avail)?;
        let lp = tape.gather(lp_all, &flat.actions)?;
        let old = tape.constant(Matrix::from_vec(flat.old_logp.len(), 1, flat.old_logp)?);
        let diff = tape.sub(lp, old)?;
        let rho = tape.exp(diff)?;
        let adv = tape.constant(Matrix::from_vec(advantages.len(), 1, advantages.to_vec())?);
        let s1 = tape.mul(rho, adv)?;
        let clipped = tape.clamp(rho, 1.0 - self.clip, 1.0 + self.clip)?;
        let s2 = tape.mul(clipped, adv)?;
        let surr = tape.min(s1, s2)?;
        let obj = tape.mean(surr)?;
        let p = tape.exp(lp_all)?;
        let plogp = tape.mul(p, lp_all)?;
        let neg_ent = tape.row_sum(plogp)?;
        let neg_ent_mean = tape.mean(neg_ent)?;
        let bonus = tape.scale(neg_ent_mean, self.entropy_coef)?;
        let neg_obj = tape.scale(obj, -1.0)?;
        tape.add(neg_obj, bonus)
    }

    /// `V(s_t)` for `t = 0..=L` of one episode (the last entry is the final state).
    pub fn values(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> = traj.transitions.iter().map(|t| t.state.clone()).collect();
        rows.push(traj.final_state.clone());
        let mut tape = Tape::new();
        let bound = tape.bind(&self.critic_params);
        let v = self.critic.forward(&mut tape, &bound, &Matrix::from_rows(&rows)?)?;
        Ok(tape.value(v).as_slice().to_vec())
    }

    /// Critic targets for one episode: λ-returns bootstrapping from `V(s')`.
    pub fn critic_targets(&self, traj: &Trajectory, lambdas: &[f64]) -> Result<Vec<f64>> {
        let v = self.values(traj)?;
        lambda_targets(&traj.rewards(), traj.terminated(), lambdas, &v[1..], self.spec.gamma)
    }

    pub fn critic_loss(&self, tape: &mut Tape, params: &ParamSet, trajs: &[Arc<Trajectory>], targets: &[Vec<f64>]) -> Result<Var> {
        let rows: Vec<Vec<f64>> = trajs
            .iter()
            .flat_map(|t| t.transitions.iter().map(|tr| tr.state.clone()))
            .collect();
        let y: Vec<f64> = targets.iter().flatten().copied().collect();
        if y.len() != rows.len() {
            return Err(Error::Contract("critic targets not aligned".into()));
        }
        let bound = tape.bind(params);
        let v = self.critic.forward(tape, &bound, &Matrix::from_rows(&rows)?)?;
        let yv = tape.constant(Matrix::from_vec(y.len(), 1, y)?);
        let d = tape.sub(v, yv)?;
        let sq = tape.mul(d, d)?;
        tape.mean(sq)
    }

    fn lambdas_for(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        match self.lambda_mode {
            LambdaMode::Fixed(l) => Ok(vec![l; traj.len()]),
            LambdaMode::Adaptive => self
                .ratio
                .as_ref()
                .ok_or_else(|| Error::Contract("adaptive λ needs a discriminator".into()))?
                .trajectory_lambdas(traj),
            other => Err(Error::Contract(format!(
                "actor-critic does not support {}",
                other.label()
            ))),
        }
    }

    /// Generalized advantage estimates per step of one episode.
    pub fn gae(&self, traj: &Trajectory, values: &[f64]) -> Vec<f64> {
        let g = self.spec.gamma;
        let len = traj.len();
        let mut adv = vec![0.0; len];
        let mut next = 0.0;
        for t in (0..len).rev() {
            let tr = &traj.transitions[t];
            let boot = if tr.terminated { 0.0 } else { values[t + 1] };
            let delta = tr.reward + g * boot - values[t];
            let carry = if t + 1 < len { g * self.gae_lambda * next } else { 0.0 };
            adv[t] = delta + carry;
            next = adv[t];
        }
        adv
    }

    /// One iteration on a freshly collected rollout that has already been
    /// inserted into `buf`: discriminator steps, critic regression on
    /// λ-returns over the rollout plus an equal-sized off-policy sample,
    /// then clipped-surrogate actor epochs.
    pub fn train_iteration(&mut self, rollout: &[Arc<Trajectory>], buf: &DualBuffer, rng: &mut impl Rng) -> Result<AcStats> {
        let mut stats = AcStats::default();
        if let (Some(ratio), Some(opt)) = (self.ratio.as_mut(), self.ratio_opt.as_mut()) {
            let mut total = 0.0;
            let mut steps = 0;
            for _ in 0..self.ratio_steps {
                match train_ratio_step(ratio, buf, self.ratio_batch, opt, rng) {
                    Ok(l) => {
                        total += l;
                        steps += 1;
                    }
                    Err(Error::NotReady(_)) => break,
                    Err(e) => return Err(e),
                }
            }
            stats.ratio_loss = (steps > 0).then(|| total / steps as f64);
        }

        // advantages from the pre-update critic
        let mut advantages = Vec::new();
        for traj in rollout {
            let v = self.values(traj)?;
            for a in self.gae(traj, &v) {
                advantages.extend(std::iter::repeat_n(a, self.spec.n_agents));
            }
        }
        let n = advantages.len() as f64;
        let mean = advantages.iter().sum::<f64>() / n;
        let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        if var > 1e-12 {
            let sd = var.sqrt();
            for a in &mut advantages {
                *a = (*a - mean) / sd;
            }
        }

        let mut critic_batch: Vec<Arc<Trajectory>> = rollout.to_vec();
        if !buf.store(StoreKind::Off).is_empty() {
            critic_batch.extend(buf.sample_batch(StoreKind::Off, rollout.len(), rng)?);
        }
        let mut targets = Vec::with_capacity(critic_batch.len());
        let (mut lam_sum, mut lam_n) = (0.0, 0usize);
        for traj in &critic_batch {
            let lam = self.lambdas_for(traj)?;
            lam_sum += lam.iter().sum::<f64>();
            lam_n += lam.len();
            targets.push(self.critic_targets(traj, &lam)?);
        }
        stats.mean_lambda = lam_sum / lam_n.max(1) as f64;

        for _ in 0..self.epochs {
            let mut tape = Tape::new();
            let loss = self.critic_loss(&mut tape, &self.critic_params, &critic_batch, &targets)?;
            stats.critic_loss = finite(tape.scalar(loss), "critic loss")?;
            let g = tape.backward(loss, &self.critic_params)?;
            self.critic_opt.step(&mut self.critic_params, &g)?;

            let mut tape = Tape::new();
            let loss = self.actor_loss(&mut tape, &self.actor_params, rollout, &advantages)?;
            stats.actor_loss = finite(tape.scalar(loss), "actor loss")?;
            let g = tape.backward(loss, &self.actor_params)?;
            self.actor_opt.step(&mut self.actor_params, &g)?;
        }
        self.iterations += 1;
        Ok(stats)
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} {v}")))
    }
}

fn mask_matrix(masks: &[Vec<bool>]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| m.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect())
        .collect();
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffers::{CacheMode, InsertionMode};
    use crate::config::LearnerKind;
    use crate::learners::{run_episode, Learner};
    use crate::nn::grad_check;
    use crate::returns::mc_return;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(mode: LambdaMode) -> (AcLearner, Vec<Arc<Trajectory>>, DualBuffer, ChaCha8Rng) {
        let cfg = ExperimentConfig {
            learner: LearnerKind::ActorCritic,
            hidden_dim: 8,
            ratio_hidden: 8,
            entropy_coef: 0.0,
            lambda_mode: mode,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut env = cfg.make_env().unwrap();
        let spec = env.spec().clone();
        let learner = Learner::ActorCritic(Box::new(AcLearner::new(&cfg, &spec, &mut rng)));
        let mut buf = DualBuffer::with_capacities(4, 40, InsertionMode::DualInsert, CacheMode::Clear);
        let mut rollout = Vec::new();
        for id in 0..4 {
            let mut ep = run_episode(env.as_mut(), &learner, id, &mut rng, false, id, 0).unwrap();
            ep.trajectory.transitions.truncate(12);
            rollout.push(Arc::new(ep.trajectory.clone()));
            buf.insert(ep.trajectory).unwrap();
        }
        let Learner::ActorCritic(ac) = learner else { unreachable!() };
        (*ac, rollout, buf, rng)
    }

    #[test]
    fn unit_ratio_surrogate_matches_policy_gradient() {
        let (ac, rollout, _, mut rng) = setup(LambdaMode::Fixed(0.5));
        let rows: usize = rollout.iter().map(|t| t.len()).sum::<usize>() * ac.spec.n_agents;
        let adv: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let loss = ac.actor_loss(&mut tape, &ac.actor_params, &rollout, &adv).unwrap();
        let surrogate = tape.backward(loss, &ac.actor_params).unwrap();

        let flat = ac.flatten(&rollout).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&ac.actor_params);
        let lp_all = ac.actor.log_probs(&mut tape, &bound, &flat.obs, &flat.avail).unwrap();
        let lp = tape.gather(lp_all, &flat.actions).unwrap();
        let a = tape.constant(Matrix::from_vec(rows, 1, adv.clone()).unwrap());
        let weighted = tape.mul(lp, a).unwrap();
        let mean = tape.mean(weighted).unwrap();
        let vanilla = tape.scale(mean, -1.0).unwrap();
        let pg = tape.backward(vanilla, &ac.actor_params).unwrap();

        for (x, y) in surrogate.tensors().iter().zip(pg.tensors()) {
            for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
                assert!((p - q).abs() < 1e-10, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn unit_lambda_critic_target_is_monte_carlo() {
        let (ac, _, _, _) = setup(LambdaMode::Fixed(1.0));
        let cfg = ExperimentConfig::default();
        let mut env = cfg.make_env().unwrap();
        let learner = Learner::ActorCritic(Box::new(ac.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ep = run_episode(env.as_mut(), &learner, 0, &mut rng, false, 0, 0).unwrap();
        let traj = ep.trajectory;
        assert!(traj.terminated());
        let got = ac.critic_targets(&traj, &vec![1.0; traj.len()]).unwrap();
        let want = mc_return(&traj.rewards(), true, ac.spec.gamma).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn critic_and_actor_gradients_check() {
        let (ac, rollout, _, mut rng) = setup(LambdaMode::Fixed(0.7));
        let targets: Vec<Vec<f64>> = rollout
            .iter()
            .map(|t| ac.critic_targets(t, &vec![0.7; t.len()]).unwrap())
            .collect();
        let err = grad_check(&ac.critic_params, 1e-6, |tape, p| ac.critic_loss(tape, p, &rollout, &targets)).unwrap();
        assert!(err < 1e-4, "critic {err}");

        let rows: usize = rollout.iter().map(|t| t.len()).sum::<usize>() * ac.spec.n_agents;
        let adv: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut ac = ac;
        ac.entropy_coef = 0.05;
        let err = grad_check(&ac.actor_params, 1e-6, |tape, p| ac.actor_loss(tape, p, &rollout, &adv)).unwrap();
        assert!(err < 1e-4, "actor {err}");
    }

    #[test]
    fn gae_with_unit_lambda_and_zero_values_is_return() {
        let (mut ac, rollout, _, _) = setup(LambdaMode::Fixed(0.5));
        ac.gae_lambda = 1.0;
        let traj = &rollout[0];
        let zeros = vec![0.0; traj.len() + 1];
        let adv = ac.gae(traj, &zeros);
        let mut g = 0.0;
        for t in (0..traj.len()).rev() {
            g = traj.transitions[t].reward + ac.spec.gamma * g;
            assert!((adv[t] - g).abs() < 1e-12);
        }
    }

    #[test]
    fn iteration_updates_both_networks() {
        for mode in [LambdaMode::Fixed(0.5), LambdaMode::Adaptive] {
            let (mut ac, rollout, buf, mut rng) = setup(mode);
            let (a0, c0) = (ac.actor_params.clone(), ac.critic_params.clone());
            let stats = ac.train_iteration(&rollout, &buf, &mut rng).unwrap();
            assert_ne!(ac.actor_params, a0);
            assert_ne!(ac.critic_params, c0);
            assert!(stats.critic_loss.is_finite() && stats.actor_loss.is_finite());
            assert!(stats.mean_lambda > 0.0 && stats.mean_lambda < 1.0);
            assert_eq!(stats.ratio_loss.is_some(), mode == LambdaMode::Adaptive);
        }
    }

    #[test]
    fn sampled_actions_respect_masks() {
        let (ac, _, _, mut rng) = setup(LambdaMode::Fixed(0.5));
        let obs = vec![vec![0.2; ac.spec.obs_dim]; 2];
        let avail = vec![vec![false, true, false, true, false], vec![true, false, false, false, false]];
        for evaluate in [false, true] {
            for _ in 0..100 {
                let (a, p) = ac
                    .select_actions(&mut AgentMemory::default(), &obs, &avail, &mut rng, evaluate)
                    .unwrap();
                assert!(avail[0][a[0]] && avail[1][a[1]]);
                assert_eq!(a[1], 0);
                assert!((p[1] - 1.0).abs() < 1e-12);
            }
        }
    }
}
