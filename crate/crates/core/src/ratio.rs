//! Density-ratio discriminator `ω_φ(s, a) ∈ (0, 1)` whose output is used as
//! the per-transition λ. On-policy samples are labelled 1, so a high output
//! means "looks like the current policy".

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffers::{DualBuffer, StoreKind, Trajectory};
use crate::error::{shape_err, Error, Result};
use crate::nn::{sigmoid, Activation, Bound, Dense, Gru, Matrix, OptimizerState, ParamSet, Tape, Var};

/// Output clamp used before every logarithm.
pub const OMEGA_EPS: f64 = 1e-7;

/// Jensen-Shannon generator `f(x) = x ln x + (1−x) ln(1−x)`.
pub fn js_f(x: f64) -> f64 {
    x * x.ln() + (1.0 - x) * (1.0 - x).ln()
}

/// `f'(x) = ln(x/(1−x))`.
pub fn js_f_prime(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

/// Convex conjugate `f*(y) = σ(y)·y − f(σ(y))`, evaluated at the maximiser.
/// `1 − σ(y)` is taken as `σ(−y)` to keep precision near 1.
pub fn js_conjugate(y: f64) -> f64 {
    let s = sigmoid(y);
    let sc = sigmoid(-y);
    s * y - (s * s.ln() + sc * sc.ln())
}

/// Pointwise optimum of the balanced BCE objective.
pub fn closed_form_discriminator(p_on: f64, p_off: f64) -> Result<f64> {
    if !(p_on >= 0.0 && p_off >= 0.0) || p_on + p_off <= 0.0 {
        return Err(Error::Contract(format!(
            "discriminator optimum undefined for p_on = {p_on}, p_off = {p_off}"
        )));
    }
    Ok(p_on / (p_on + p_off))
}

/// Input layout of the discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatioInput {
    /// Global state ⊕ one-hot joint action, no recurrence.
    Centralized {
        state_dim: usize,
        n_agents: usize,
        n_actions: usize,
    },
    /// Per-agent observation ⊕ one-hot action through a GRU over the
    /// episode; the joint λ is the mean over agents.
    PerAgent {
        obs_dim: usize,
        n_agents: usize,
        n_actions: usize,
    },
    /// Arbitrary feature rows (synthetic data).
    Features { dim: usize },
}

impl RatioInput {
    fn width(&self) -> usize {
        match *self {
            RatioInput::Centralized {
                state_dim,
                n_agents,
                n_actions,
            } => state_dim + n_agents * n_actions,
            RatioInput::PerAgent { obs_dim, n_actions, .. } => obs_dim + n_actions,
            RatioInput::Features { dim } => dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioNet {
    pub input: RatioInput,
    pub params: ParamSet,
    encoder: Dense,
    gru: Option<Gru>,
    head: Dense,
}

fn one_hot_into(out: &mut Vec<f64>, a: usize, n: usize) {
    let start = out.len();
    out.resize(start + n, 0.0);
    out[start + a] = 1.0;
}

impl RatioNet {
    pub fn new(input: RatioInput, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let encoder = Dense::new(&mut params, "ratio.enc", input.width(), hidden, Activation::Relu, rng);
        let gru = matches!(input, RatioInput::PerAgent { .. })
            .then(|| Gru::new(&mut params, "ratio.gru", hidden, hidden, rng));
        let head = Dense::new(&mut params, "ratio.head", hidden, 1, Activation::Identity, rng);
        Self {
            input,
            params,
            encoder,
            gru,
            head,
        }
    }

    /// Adam with the default discriminator settings.
    pub fn optimizer(&self, lr: f64) -> OptimizerState {
        OptimizerState::adam(&self.params, lr, 1e-8)
    }

    /// Zero the output layer so that ω ≡ 0.5.
    pub fn zero_head(&mut self) {
        self.head.zero(&mut self.params);
    }

    /// Centralized feature row for one joint transition.
    pub fn centralized_features(&self, state: &[f64], actions: &[usize]) -> Result<Vec<f64>> {
        let RatioInput::Centralized {
            state_dim,
            n_agents,
            n_actions,
        } = self.input
        else {
            return Err(Error::Contract("centralized features on a non-centralized net".into()));
        };
        if state.len() != state_dim {
            return Err(shape_err("ratio state", state_dim, state.len()));
        }
        if actions.len() != n_agents {
            return Err(shape_err("ratio joint action", n_agents, actions.len()));
        }
        let mut row = Vec::with_capacity(self.input.width());
        row.extend_from_slice(state);
        for &a in actions {
            if a >= n_actions {
                return Err(Error::Contract(format!("action {a} out of range")));
            }
            one_hot_into(&mut row, a, n_actions);
        }
        Ok(row)
    }

    fn logits_rows(&self, tape: &mut Tape, bound: &Bound, x: &Matrix) -> Result<Var> {
        if !x.is_finite() {
            return Err(Error::Numeric("non-finite discriminator input".into()));
        }
        if x.cols() != self.input.width() {
            return Err(shape_err("ratio input", self.input.width(), x.cols()));
        }
        let xv = tape.constant(x.clone());
        let h = self.encoder.forward(tape, bound, xv)?;
        self.head.forward(tape, bound, h)
    }

    /// Per-agent logits over a padded batch of episodes: a
    /// `(B·n_agents) × T_max` matrix and its validity mask.
    fn logits_per_agent(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        trajs: &[Arc<Trajectory>],
    ) -> Result<(Var, Matrix)> {
        let RatioInput::PerAgent {
            obs_dim,
            n_agents,
            n_actions,
        } = self.input
        else {
            return Err(Error::Contract("per-agent logits on a non-recurrent net".into()));
        };
        let gru = self.gru.as_ref().expect("per-agent net has a GRU");
        let t_max = trajs.iter().map(|t| t.len()).max().unwrap_or(0);
        let rows = trajs.len() * n_agents;
        if rows == 0 || t_max == 0 {
            return Err(Error::Contract("empty discriminator batch".into()));
        }
        let width = obs_dim + n_actions;
        let mut mask = Matrix::zeros(rows, t_max);
        let mut h = tape.constant(Matrix::zeros(rows, gru.hidden_dim));
        let mut cols = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let mut x = Matrix::zeros(rows, width);
            for (b, traj) in trajs.iter().enumerate() {
                let Some(tr) = traj.transitions.get(t) else { continue };
                for i in 0..n_agents {
                    let r = b * n_agents + i;
                    let obs = &tr.observations[i];
                    if obs.len() != obs_dim {
                        return Err(shape_err("ratio observation", obs_dim, obs.len()));
                    }
                    let row = x.row_slice_mut(r);
                    row[..obs_dim].copy_from_slice(obs);
                    row[obs_dim + tr.actions[i]] = 1.0;
                    mask.set(r, t, 1.0);
                }
            }
            if !x.is_finite() {
                return Err(Error::Numeric("non-finite discriminator input".into()));
            }
            let xv = tape.constant(x);
            let e = self.encoder.forward(tape, bound, xv)?;
            h = gru.step(tape, bound, e, h)?;
            cols.push(self.head.forward(tape, bound, h)?);
        }
        Ok((tape.concat_cols(&cols)?, mask))
    }

    /// `ω` for each feature row.
    pub fn omega_rows(&self, x: &Matrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let z = self.logits_rows(&mut tape, &bound, x)?;
        Ok(tape.value(z).as_slice().iter().map(|&z| squash(z)).collect())
    }

    /// `ω(s, a)` for one joint transition under the centralized input.
    pub fn omega(&self, state: &[f64], actions: &[usize]) -> Result<f64> {
        let row = self.centralized_features(state, actions)?;
        Ok(self.omega_rows(&Matrix::row(&row))?[0])
    }

    /// Per-step λ for every transition of an episode.
    pub fn trajectory_lambdas(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        match self.input {
            RatioInput::Centralized { .. } => {
                let rows = traj
                    .transitions
                    .iter()
                    .map(|tr| self.centralized_features(&tr.state, &tr.actions))
                    .collect::<Result<Vec<_>>>()?;
                self.omega_rows(&Matrix::from_rows(&rows)?)
            }
            RatioInput::PerAgent { n_agents, .. } => {
                let mut tape = Tape::new();
                let bound = tape.bind(&self.params);
                let one = [Arc::new(traj.clone())];
                let (z, _) = self.logits_per_agent(&mut tape, &bound, &one)?;
                let zv = tape.value(z);
                Ok((0..traj.len())
                    .map(|t| (0..n_agents).map(|i| squash(zv.get(i, t))).sum::<f64>() / n_agents as f64)
                    .collect())
            }
            RatioInput::Features { .. } => Err(Error::Contract(
                "feature-row discriminator cannot read trajectories".into(),
            )),
        }
    }

    fn centralized_matrix(&self, trajs: &[Arc<Trajectory>]) -> Result<Matrix> {
        let rows = trajs
            .iter()
            .flat_map(|t| t.transitions.iter())
            .map(|tr| self.centralized_features(&tr.state, &tr.actions))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    /// Sigmoid outputs on the tape with their validity mask (`None` when all
    /// entries are valid).
    fn omega_vars(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &RatioBatch,
    ) -> Result<(Var, Option<Matrix>)> {
        let z = match batch {
            RatioBatch::Rows(x) => return Ok((self.sig(tape, bound, x)?, None)),
            RatioBatch::Episodes(trajs) => match self.input {
                RatioInput::PerAgent { .. } => {
                    let (z, mask) = self.logits_per_agent(tape, bound, trajs)?;
                    (z, Some(mask))
                }
                _ => {
                    let x = self.centralized_matrix(trajs)?;
                    return Ok((self.sig(tape, bound, &x)?, None));
                }
            },
        };
        Ok((tape.act(z.0, Activation::Sigmoid)?, z.1))
    }

    fn sig(&self, tape: &mut Tape, bound: &Bound, x: &Matrix) -> Result<Var> {
        let z = self.logits_rows(tape, bound, x)?;
        tape.act(z, Activation::Sigmoid)
    }

    /// Balanced BCE: `E_on[−ln ω] + E_off[−ln(1−ω)]`.
    pub fn bce_loss(&self, tape: &mut Tape, bound: &Bound, on: &RatioBatch, off: &RatioBatch) -> Result<Var> {
        let (w_on, m_on) = self.omega_vars(tape, bound, on)?;
        let (w_off, m_off) = self.omega_vars(tape, bound, off)?;
        let l_on = tape.log_clamped(w_on, OMEGA_EPS, 1.0 - OMEGA_EPS)?;
        let c_off = tape.one_minus(w_off)?;
        let l_off = tape.log_clamped(c_off, OMEGA_EPS, 1.0 - OMEGA_EPS)?;
        let e_on = masked_mean(tape, l_on, m_on)?;
        let e_off = masked_mean(tape, l_off, m_off)?;
        let s = tape.add(e_on, e_off)?;
        tape.scale(s, -1.0)
    }

    /// Variational JS loss `E_on[f*(f'(ω))] − E_off[f'(ω)]`
    /// = `E_on[−ln(1−ω)] − E_off[ln ω − ln(1−ω)]`.
    pub fn fdiv_loss(&self, tape: &mut Tape, bound: &Bound, on: &RatioBatch, off: &RatioBatch) -> Result<Var> {
        let (w_on, m_on) = self.omega_vars(tape, bound, on)?;
        let (w_off, m_off) = self.omega_vars(tape, bound, off)?;
        let c_on = tape.one_minus(w_on)?;
        let l1_on = tape.log_clamped(c_on, OMEGA_EPS, 1.0 - OMEGA_EPS)?;
        let conj = tape.scale(l1_on, -1.0)?;
        let l_off = tape.log_clamped(w_off, OMEGA_EPS, 1.0 - OMEGA_EPS)?;
        let c_off = tape.one_minus(w_off)?;
        let l1_off = tape.log_clamped(c_off, OMEGA_EPS, 1.0 - OMEGA_EPS)?;
        let fp = tape.sub(l_off, l1_off)?;
        let e_on = masked_mean(tape, conj, m_on)?;
        let e_off = masked_mean(tape, fp, m_off)?;
        tape.sub(e_on, e_off)
    }

    /// Scalar loss value without a gradient step.
    pub fn loss_value(&self, kind: RatioLoss, on: &RatioBatch, off: &RatioBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let l = match kind {
            RatioLoss::Bce => self.bce_loss(&mut tape, &bound, on, off)?,
            RatioLoss::FDivJs => self.fdiv_loss(&mut tape, &bound, on, off)?,
        };
        Ok(tape.scalar(l))
    }

    /// One optimizer step on the BCE loss; returns the pre-step loss.
    pub fn train_step(&mut self, opt: &mut OptimizerState, on: &RatioBatch, off: &RatioBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let loss = self.bce_loss(&mut tape, &bound, on, off)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("discriminator loss {value}")));
        }
        let grads = tape.backward(loss, &self.params)?;
        opt.step(&mut self.params, &grads)?;
        Ok(value)
    }
}

fn squash(z: f64) -> f64 {
    sigmoid(z).clamp(OMEGA_EPS, 1.0 - OMEGA_EPS)
}

fn masked_mean(tape: &mut Tape, v: Var, mask: Option<Matrix>) -> Result<Var> {
    match mask {
        None => tape.mean(v),
        Some(m) => {
            let count = m.sum();
            if count <= 0.0 {
                return Err(Error::Contract("empty discriminator batch".into()));
            }
            let mv = tape.constant(m);
            let masked = tape.mul(v, mv)?;
            let s = tape.sum(masked)?;
            tape.scale(s, 1.0 / count)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatioLoss {
    Bce,
    FDivJs,
}

/// One side (on- or off-policy) of a discriminator batch.
#[derive(Debug, Clone)]
pub enum RatioBatch {
    Rows(Matrix),
    Episodes(Vec<Arc<Trajectory>>),
}

/// Sample `batch_size` episodes from each store and take one BCE step.
/// Returns [`Error::NotReady`] while either store is empty.
pub fn train_ratio_step(
    net: &mut RatioNet,
    buf: &DualBuffer,
    batch_size: usize,
    opt: &mut OptimizerState,
    rng: &mut impl Rng,
) -> Result<f64> {
    let on = buf.sample_batch(StoreKind::On, batch_size, rng)?;
    let off = buf.sample_batch(StoreKind::Off, batch_size, rng)?;
    net.train_step(opt, &RatioBatch::Episodes(on), &RatioBatch::Episodes(off))
}

/// Discriminator fitted to two categorical distributions over one-hot
/// support points, next to the pointwise optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFit {
    pub omega: Vec<f64>,
    pub optimum: Vec<f64>,
    /// Largest `|ω_i − optimum_i|` over the support.
    pub max_error: f64,
    /// Mean of ω over the support points.
    pub mean_output: f64,
    pub final_loss: f64,
}

/// Train a fresh feature-input discriminator on stratified batches: support
/// point `i` appears `on_counts[i]` times in every on-policy batch and
/// `off_counts[i]` times in every off-policy batch, so each step follows the
/// exact expected BCE gradient. Both count vectors must have the same total.
pub fn fit_categorical(
    on_counts: &[usize],
    off_counts: &[usize],
    hidden: usize,
    lr: f64,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<CategoricalFit> {
    let k = on_counts.len();
    if k == 0 || off_counts.len() != k {
        return Err(Error::Contract("count vectors must be non-empty and aligned".into()));
    }
    let (n_on, n_off): (usize, usize) = (on_counts.iter().sum(), off_counts.iter().sum());
    if n_on == 0 || n_on != n_off {
        return Err(Error::Contract(format!("unbalanced totals {n_on} vs {n_off}")));
    }
    let one_hot = |i: usize| {
        let mut r = vec![0.0; k];
        r[i] = 1.0;
        r
    };
    let expand = |counts: &[usize]| -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| std::iter::repeat_n(one_hot(i), c))
            .collect();
        Matrix::from_rows(&rows)
    };
    let on = RatioBatch::Rows(expand(on_counts)?);
    let off = RatioBatch::Rows(expand(off_counts)?);
    let mut net = RatioNet::new(RatioInput::Features { dim: k }, hidden, rng);
    let mut opt = net.optimizer(lr);
    let mut final_loss = f64::NAN;
    for _ in 0..steps {
        final_loss = net.train_step(&mut opt, &on, &off)?;
    }
    let support = Matrix::from_rows(&(0..k).map(one_hot).collect::<Vec<_>>())?;
    let omega = net.omega_rows(&support)?;
    let optimum = on_counts
        .iter()
        .zip(off_counts)
        .map(|(&a, &b)| closed_form_discriminator(a as f64 / n_on as f64, b as f64 / n_off as f64))
        .collect::<Result<Vec<_>>>()?;
    let max_error = omega
        .iter()
        .zip(&optimum)
        .map(|(w, o)| (w - o).abs())
        .fold(0.0, f64::max);
    let mean_output = omega.iter().sum::<f64>() / k as f64;
    Ok(CategoricalFit {
        omega,
        optimum,
        max_error,
        mean_output,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffers::{CacheMode, InsertionMode, Transition};
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(v: &[&[f64]]) -> RatioBatch {
        RatioBatch::Rows(Matrix::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap())
    }

    fn feature_net(dim: usize, seed: u64) -> RatioNet {
        RatioNet::new(RatioInput::Features { dim }, 8, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_head_gives_half() {
        let mut net = RatioNet::new(
            RatioInput::Centralized {
                state_dim: 3,
                n_agents: 2,
                n_actions: 4,
            },
            16,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        net.zero_head();
        assert_eq!(net.omega(&[0.1, -2.0, 5.0], &[0, 3]).unwrap(), 0.5);
        assert_eq!(net.omega(&[9.0, 9.0, 9.0], &[1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn omega_deterministic_and_in_open_interval() {
        let net = RatioNet::new(
            RatioInput::Centralized {
                state_dim: 2,
                n_agents: 2,
                n_actions: 3,
            },
            8,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let a = net.omega(&[1e6, -1e6], &[0, 2]).unwrap();
        assert_eq!(a, net.omega(&[1e6, -1e6], &[0, 2]).unwrap());
        assert!((OMEGA_EPS..=1.0 - OMEGA_EPS).contains(&a));
        assert!(matches!(net.omega(&[f64::NAN, 0.0], &[0, 0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn losses_at_half() {
        let mut net = feature_net(2, 0);
        net.zero_head();
        let on = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let off = rows(&[&[0.5, 0.5]]);
        let bce = net.loss_value(RatioLoss::Bce, &on, &off).unwrap();
        assert!((bce - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let fd = net.loss_value(RatioLoss::FDivJs, &on, &off).unwrap();
        assert!((fd - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_hand_value() {
        // ω = 0.8 on the off-policy point, ω = 0.6 on the on-policy point
        let mut net = feature_net(1, 0);
        net.zero_head();
        let head_b = net.head.bias;
        let head_w = net.head.weight;
        // route the raw input straight through: enc = relu(x), head = logit
        net.encoder.zero(&mut net.params);
        let enc_w = net.encoder.weight;
        net.params.get_mut(enc_w).set(0, 0, 1.0);
        net.params.get_mut(head_w).set(0, 0, 1.0);
        net.params.get_mut(head_b).set(0, 0, 0.0);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let loss = net
            .loss_value(RatioLoss::Bce, &rows(&[&[logit(0.6)]]), &rows(&[&[logit(0.8)]]))
            .unwrap();
        let want = -(0.2f64).ln() - (0.6f64).ln();
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 2.1202).abs() < 1e-4);
    }

    #[test]
    fn js_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let x: f64 = rng.random_range(OMEGA_EPS..1.0 - OMEGA_EPS);
            let deriv = (x.ln() + 1.0) + (-(1.0 - x).ln() - 1.0);
            assert!((js_f_prime(x) - deriv).abs() < 1e-12);
            assert!((js_conjugate(js_f_prime(x)) + (1.0 - x).ln()).abs() < 1e-12);
        }
        let x = 0.3;
        let fd = (js_f(x + 1e-6) - js_f(x - 1e-6)) / 2e-6;
        assert!((fd - js_f_prime(x)).abs() < 1e-8);
    }

    #[test]
    fn closed_form_cases() {
        assert_eq!(closed_form_discriminator(0.2, 0.2).unwrap(), 0.5);
        assert!((closed_form_discriminator(0.3, 0.1).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(closed_form_discriminator(0.0, 0.4).unwrap(), 0.0);
        assert!(closed_form_discriminator(0.0, 0.0).is_err());
    }

    #[test]
    fn bce_gradient_checks() {
        let net = feature_net(3, 7);
        let on = rows(&[&[0.1, 0.5, -0.3], &[1.0, -1.0, 0.2]]);
        let off = rows(&[&[-0.4, 0.3, 0.9]]);
        let err = grad_check(&net.params, 1e-6, |tape, p| {
            let b = tape.bind(p);
            net.bce_loss(tape, &b, &on, &off)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn episode(id: u64, len: usize, obs_shift: f64, action: usize) -> Trajectory {
        let transitions = (0..len)
            .map(|t| Transition {
                state: vec![t as f64 / len as f64, obs_shift],
                observations: vec![vec![obs_shift, t as f64 * 0.1]; 2],
                actions: vec![action, (action + 1) % 3],
                reward: 0.0,
                terminated: t + 1 == len,
                available_actions: vec![vec![true; 3]; 2],
                behavior_probs: vec![1.0 / 3.0; 2],
            })
            .collect();
        Trajectory {
            transitions,
            episode_id: id,
            birth_step: 0,
            final_state: vec![1.0, obs_shift],
            final_observations: vec![vec![obs_shift, 0.0]; 2],
            final_available: vec![vec![true; 3]; 2],
        }
    }

    #[test]
    fn per_agent_gradient_checks_with_padding() {
        let net = RatioNet::new(
            RatioInput::PerAgent {
                obs_dim: 2,
                n_agents: 2,
                n_actions: 3,
            },
            5,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        let on = RatioBatch::Episodes(vec![Arc::new(episode(0, 3, 0.5, 0)), Arc::new(episode(1, 1, -0.5, 2))]);
        let off = RatioBatch::Episodes(vec![Arc::new(episode(2, 2, 0.1, 1))]);
        let err = grad_check(&net.params, 1e-6, |tape, p| {
            let b = tape.bind(p);
            net.bce_loss(tape, &b, &on, &off)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let lam = net.trajectory_lambdas(&episode(0, 3, 0.5, 0)).unwrap();
        assert_eq!(lam.len(), 3);
        assert!(lam.iter().all(|l| *l > 0.0 && *l < 1.0));
    }

    #[test]
    fn separable_buffers_train_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut buf = DualBuffer::with_capacities(4, 40, InsertionMode::Cascade, CacheMode::Clear);
        for id in 0..44 {
            // recent episodes take action 2, older ones action 0
            let a = if id >= 40 { 2 } else { 0 };
            buf.insert(episode(id, 4, 0.0, a)).unwrap();
        }
        let mut net = RatioNet::new(
            RatioInput::Centralized {
                state_dim: 2,
                n_agents: 2,
                n_actions: 3,
            },
            16,
            &mut rng,
        );
        let mut opt = net.optimizer(0.01);
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(train_ratio_step(&mut net, &buf, 8, &mut opt, &mut rng).unwrap());
        }
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(tail < head * 0.2, "{head} -> {tail}");
        let on = net.trajectory_lambdas(&episode(99, 4, 0.0, 2)).unwrap();
        let off = net.trajectory_lambdas(&episode(98, 4, 0.0, 0)).unwrap();
        assert!(on.iter().all(|l| *l > 0.9), "{on:?}");
        assert!(off.iter().all(|l| *l < 0.1), "{off:?}");
    }

    #[test]
    fn categorical_fit_reaches_pointwise_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let on = [1, 2, 3, 5, 8, 13, 16, 16];
        let off = [16, 13, 10, 8, 6, 5, 4, 2];
        let fit = fit_categorical(&on, &off, 16, 0.01, 1500, &mut rng).unwrap();
        assert!(fit.max_error <= 0.05, "{fit:?}");
        let same = fit_categorical(&on, &on, 16, 0.01, 1500, &mut rng).unwrap();
        assert!((same.mean_output - 0.5).abs() <= 0.05, "{same:?}");
        assert!(fit_categorical(&on, &[1; 8], 16, 0.01, 1, &mut rng).is_err());
    }

    #[test]
    fn empty_store_is_not_ready() {
        let buf = DualBuffer::new(10, 2, InsertionMode::DualInsert, CacheMode::Clear);
        let mut net = feature_net(2, 0);
        let mut opt = net.optimizer(0.001);
        let r = train_ratio_step(&mut net, &buf, 4, &mut opt, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::NotReady(_))));
    }
}
