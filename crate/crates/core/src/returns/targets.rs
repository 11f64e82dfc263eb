use serde::{Deserialize, Serialize};

use super::operator::PolicyPair;
use crate::error::{Error, Result};

/// One-step target `r + γ q_next_max`; `r` alone at a terminal step.
pub fn td0_target(reward: f64, terminated: bool, q_next_max: f64, gamma: f64) -> f64 {
    if terminated {
        reward
    } else {
        reward + gamma * q_next_max
    }
}

/// Discounted reward-to-go of a terminated episode.
pub fn mc_return(rewards: &[f64], terminated: bool, gamma: f64) -> Result<Vec<f64>> {
    if !terminated {
        return Err(Error::Contract(
            "Monte-Carlo return needs a terminated trajectory".into(),
        ));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// λ-return targets by backward recursion
/// `T_t = r_t + γ [λ_t T_{t+1} + (1 − λ_t) b_t]`, where `b_t` is the
/// bootstrap value `max_a Q⁻(s_{t+1}, a)` (`bootstrap[t]`).
///
/// A terminated episode ends with `T = r`; a truncated one bootstraps its
/// tail with `b` for every λ. Constant λ gives classic TD(λ); per-step
/// `λ_t = ω(s_t, a_t)` gives the adaptive target.
pub fn lambda_targets(
    rewards: &[f64],
    terminated: bool,
    lambdas: &[f64],
    bootstrap: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Contract("empty trajectory".into()));
    }
    if lambdas.len() != n || bootstrap.len() != n {
        return Err(Error::Contract(format!(
            "lambda_targets lengths: rewards {n}, lambdas {}, bootstrap {}",
            lambdas.len(),
            bootstrap.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Contract(format!("λ = {l} outside [0,1]")));
    }
    let mut out = vec![0.0; n];
    let last = n - 1;
    out[last] = td0_target(rewards[last], terminated, bootstrap[last], gamma);
    for t in (0..last).rev() {
        let l = lambdas[t];
        out[t] = rewards[t] + gamma * (l * out[t + 1] + (1.0 - l) * bootstrap[t]);
    }
    Ok(out)
}

/// λ-return as an explicit mixture of n-step returns:
/// `(1−λ) Σ_{n≥1} λ^{n−1} G_t^{(n)}` with the longest available return
/// taking the leftover weight. Independent of [`lambda_targets`].
pub fn nstep_mixture_oracle(
    rewards: &[f64],
    terminated: bool,
    lambda: f64,
    bootstrap: &[f64],
    gamma: f64,
) -> Vec<f64> {
    let len = rewards.len();
    let tail = |k: usize| -> f64 {
        if k + 1 == len && terminated {
            0.0
        } else {
            bootstrap[k]
        }
    };
    (0..len)
        .map(|t| {
            let horizon = len - t;
            let mut total = 0.0;
            let mut discounted = 0.0;
            for n in 1..=horizon {
                discounted += gamma.powi(n as i32 - 1) * rewards[t + n - 1];
                let g_n = discounted + gamma.powi(n as i32) * tail(t + n - 1);
                let w = if n < horizon {
                    (1.0 - lambda) * lambda.powi(n as i32 - 1)
                } else {
                    lambda.powi(n as i32 - 1)
                };
                total += w * g_n;
            }
            total
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceKind {
    FixedLambda,
    Atd,
    Retrace,
    ImportanceSampling,
}

/// Per-step trace coefficients; `coeffs[0]` is 1 by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCoeffs {
    pub kind: TraceKind,
    pub coeffs: Vec<f64>,
}

/// Index pair of a tabular step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TabularStep {
    pub state: usize,
    pub action: usize,
}

fn ratio(pair: &PolicyPair, step: TabularStep) -> Result<f64> {
    let mu = pair.behavior[step.state][step.action];
    if mu <= 0.0 {
        return Err(Error::Contract(format!(
            "behaviour probability 0 on taken action {} in state {}",
            step.action, step.state
        )));
    }
    Ok(pair.target[step.state][step.action] / mu)
}

/// `c_t = λ · min(1, π/μ)` for `t ≥ 1`.
pub fn retrace_coeffs(pair: &PolicyPair, steps: &[TabularStep], lambda: f64) -> Result<TraceCoeffs> {
    let mut coeffs = Vec::with_capacity(steps.len());
    for (t, &s) in steps.iter().enumerate() {
        let r = ratio(pair, s)?;
        coeffs.push(if t == 0 { 1.0 } else { lambda * r.min(1.0) });
    }
    Ok(TraceCoeffs {
        kind: TraceKind::Retrace,
        coeffs,
    })
}

/// `c_t = min(clip, π/μ)` for `t ≥ 1`.
pub fn is_coeffs(pair: &PolicyPair, steps: &[TabularStep], clip: f64) -> Result<TraceCoeffs> {
    let mut coeffs = Vec::with_capacity(steps.len());
    for (t, &s) in steps.iter().enumerate() {
        let r = ratio(pair, s)?;
        coeffs.push(if t == 0 { 1.0 } else { r.min(clip) });
    }
    Ok(TraceCoeffs {
        kind: TraceKind::ImportanceSampling,
        coeffs,
    })
}

/// Off-policy trace targets
/// `T_t = r_t + γ [b_t + c_{t+1} (T_{t+1} − q_{t+1})]`, where `b_t` is the
/// greedy bootstrap at `s_{t+1}` and `q_taken[t]` is `Q⁻(s_{t+1}, a_{t+1})`.
/// With greedy target actions and `c = λ` this equals [`lambda_targets`].
pub fn trace_targets(
    rewards: &[f64],
    terminated: bool,
    coeffs: &[f64],
    bootstrap: &[f64],
    q_taken_next: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n == 0 || coeffs.len() != n || bootstrap.len() != n || q_taken_next.len() != n {
        return Err(Error::Contract("trace_targets length mismatch".into()));
    }
    if coeffs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::Contract("trace coefficients must be finite and ≥ 0".into()));
    }
    let mut out = vec![0.0; n];
    out[n - 1] = td0_target(rewards[n - 1], terminated, bootstrap[n - 1], gamma);
    for t in (0..n - 1).rev() {
        out[t] = rewards[t] + gamma * (bootstrap[t] + coeffs[t + 1] * (out[t + 1] - q_taken_next[t]));
    }
    Ok(out)
}
