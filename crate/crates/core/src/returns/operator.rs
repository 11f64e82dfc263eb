use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::envs::TabularMdp;
use crate::error::{Error, Result};

/// Target policy π and behaviour policy μ over a tabular MDP, rows `[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPair {
    pub target: Vec<Vec<f64>>,
    pub behavior: Vec<Vec<f64>>,
}

impl PolicyPair {
    pub fn new(target: Vec<Vec<f64>>, behavior: Vec<Vec<f64>>) -> Result<Self> {
        let pair = Self { target, behavior };
        pair.validate()?;
        Ok(pair)
    }

    /// Rows stochastic and μ > 0 wherever π > 0.
    pub fn validate(&self) -> Result<()> {
        if self.target.len() != self.behavior.len() {
            return Err(Error::Contract("policy state counts differ".into()));
        }
        for (s, (pi, mu)) in self.target.iter().zip(&self.behavior).enumerate() {
            if pi.len() != mu.len() {
                return Err(Error::Contract(format!("policy action counts differ in state {s}")));
            }
            for row in [pi, mu] {
                if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Contract(format!("policy row {s} not stochastic")));
                }
            }
            if pi.iter().zip(mu).any(|(&p, &m)| p > 0.0 && m <= 0.0) {
                return Err(Error::Contract(format!(
                    "target not absolutely continuous w.r.t. behaviour in state {s}"
                )));
            }
        }
        Ok(())
    }

    fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.target.len() != mdp.n_states
            || self.target.iter().any(|r| r.len() != mdp.n_actions)
        {
            return Err(Error::Contract("policy shape does not match MDP".into()));
        }
        Ok(())
    }
}

fn check_coeffs(mdp: &TabularMdp, pair: &PolicyPair, c: &[f64]) -> Result<()> {
    pair.check_shape(mdp)?;
    if c.len() != mdp.n_pairs() {
        return Err(Error::Contract("coefficient table size".into()));
    }
    let na = mdp.n_actions;
    for (sa, &cv) in c.iter().enumerate() {
        let (s, a) = (sa / na, sa % na);
        let mu = pair.behavior[s][a];
        if !cv.is_finite() || cv < 0.0 {
            return Err(Error::Contract(format!("c({s},{a}) = {cv} is negative")));
        }
        // actions μ never takes do not enter the expectation
        if mu > 0.0 && cv > pair.target[s][a] / mu + 1e-12 {
            return Err(Error::Contract(format!(
                "c({s},{a}) = {cv} exceeds π/μ = {}",
                pair.target[s][a] / mu
            )));
        }
    }
    Ok(())
}

/// Exact evaluation of the general return operator
///
/// `ℛQ(s,a) = Q(s,a) + E_μ[Σ_{t≥0} γ^t (Π_{i=1}^t c_i)(r_t + γ E_π Q(s_{t+1},·) − Q(s_t,a_t))]`
///
/// with state-action coefficients `c` (flattened `[s][a]`), by propagating
/// the expected TD error backwards through the MDP until `γ^N < 1e-12`.
pub fn apply_r_operator(
    mdp: &TabularMdp,
    pair: &PolicyPair,
    c: &[f64],
    q: &[f64],
) -> Result<Vec<f64>> {
    check_coeffs(mdp, pair, c)?;
    if q.len() != mdp.n_pairs() {
        return Err(Error::Contract("Q table size".into()));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let tq = mdp.bellman_pi(&pair.target, q);
    let delta: Vec<f64> = tq.iter().zip(q).map(|(t, q)| t - q).collect();

    let mut term = delta.clone();
    let mut total = delta;
    let mut discount = 1.0;
    while discount >= 1e-12 && mdp.gamma > 0.0 {
        // weighted continuation value per next state: Σ_a' μ(a'|s') c(s',a') u(s',a')
        let carry: Vec<f64> = (0..ns)
            .map(|s2| {
                (0..na)
                    .map(|a2| pair.behavior[s2][a2] * c[s2 * na + a2] * term[s2 * na + a2])
                    .sum()
            })
            .collect();
        let next: Vec<f64> = (0..ns * na)
            .map(|sa| {
                let (s, a) = (sa / na, sa % na);
                mdp.gamma * (0..ns).map(|s2| mdp.p(s, a, s2) * carry[s2]).sum::<f64>()
            })
            .collect();
        for (t, n) in total.iter_mut().zip(&next) {
            *t += n;
        }
        term = next;
        discount *= mdp.gamma;
    }
    Ok(q.iter().zip(&total).map(|(q, d)| q + d).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub holds: bool,
    /// Largest `‖ℛQ − Q^π‖∞ / ‖Q − Q^π‖∞` over trials (0 when `Q = Q^π`).
    pub worst_ratio: f64,
    /// `‖ℛQ^π − Q^π‖∞`.
    pub fixed_point_error: f64,
    pub trials: usize,
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Check `‖ℛQ − Q^π‖∞ ≤ γ ‖Q − Q^π‖∞ + 1e-9` on `trials` random Q tables.
pub fn contraction_certificate(
    mdp: &TabularMdp,
    pair: &PolicyPair,
    c: &[f64],
    trials: usize,
    rng: &mut impl Rng,
) -> Result<Certificate> {
    check_coeffs(mdp, pair, c)?;
    let q_pi = mdp.q_pi(&pair.target)?;
    let fixed = apply_r_operator(mdp, pair, c, &q_pi)?;
    let fixed_point_error = sup_dist(&fixed, &q_pi);
    let mut holds = fixed_point_error <= 1e-8;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..trials {
        let scale = rng.random_range(0.1..10.0);
        let q: Vec<f64> = q_pi
            .iter()
            .map(|v| v + scale * rng.random_range(-1.0..1.0))
            .collect();
        let rq = apply_r_operator(mdp, pair, c, &q)?;
        let before = sup_dist(&q, &q_pi);
        let after = sup_dist(&rq, &q_pi);
        if after > mdp.gamma * before + 1e-9 {
            holds = false;
        }
        if before > 0.0 {
            worst_ratio = worst_ratio.max(after / before);
        }
    }
    Ok(Certificate {
        holds,
        worst_ratio,
        fixed_point_error,
        trials,
    })
}

/// Random MDP-compatible policies and coefficients with `0 ≤ c ≤ min(1, π/μ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyInstance {
    pub pair: PolicyPair,
    pub coeffs: Vec<f64>,
}

fn dirichlet_row(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1) + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

pub fn random_policy_instance(mdp: &TabularMdp, rng: &mut impl Rng) -> PolicyInstance {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let target: Vec<Vec<f64>> = (0..ns).map(|_| dirichlet_row(na, rng)).collect();
    let behavior: Vec<Vec<f64>> = (0..ns).map(|_| dirichlet_row(na, rng)).collect();
    let coeffs = (0..ns * na)
        .map(|sa| {
            let (s, a) = (sa / na, sa % na);
            rng.random_range(0.0..=1.0) * (target[s][a] / behavior[s][a]).min(1.0)
        })
        .collect();
    PolicyInstance {
        pair: PolicyPair { target, behavior },
        coeffs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::random_tabular_mdp;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Closed form `ℛQ = Q + (I − γ P C_μ)^{-1} δ`, independent of the
    /// iterative propagation.
    fn r_operator_linear_solve(mdp: &TabularMdp, pair: &PolicyPair, c: &[f64], q: &[f64]) -> Vec<f64> {
        let (ns, na) = (mdp.n_states, mdp.n_actions);
        let n = ns * na;
        let mut m = DMatrix::zeros(n, n);
        for s in 0..ns {
            for a in 0..na {
                for s2 in 0..ns {
                    for a2 in 0..na {
                        m[(s * na + a, s2 * na + a2)] = mdp.gamma
                            * mdp.p(s, a, s2)
                            * pair.behavior[s2][a2]
                            * c[s2 * na + a2];
                    }
                }
            }
        }
        let tq = mdp.bellman_pi(&pair.target, q);
        let delta = DVector::from_iterator(n, tq.iter().zip(q).map(|(t, q)| t - q));
        let sol = (DMatrix::identity(n, n) - m).lu().solve(&delta).unwrap();
        q.iter().zip(sol.iter()).map(|(a, b)| a + b).collect()
    }

    #[test]
    fn zero_traces_give_bellman_operator() {
        let mdp = random_tabular_mdp(3, 4, 3, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inst = random_policy_instance(&mdp, &mut rng);
        let q: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let rq = apply_r_operator(&mdp, &inst.pair, &[0.0; 12], &q).unwrap();
        let tq = mdp.bellman_pi(&inst.pair.target, &q);
        assert!(sup_dist(&rq, &tq) < 1e-14);
    }

    #[test]
    fn q_pi_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..10 {
            let mdp = random_tabular_mdp(seed, 3, 2, 0.99).unwrap();
            let inst = random_policy_instance(&mdp, &mut rng);
            let q_pi = mdp.q_pi(&inst.pair.target).unwrap();
            let rq = apply_r_operator(&mdp, &inst.pair, &inst.coeffs, &q_pi).unwrap();
            assert!(sup_dist(&rq, &q_pi) < 1e-8);
        }
    }

    #[test]
    fn matches_linear_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..10 {
            let mdp = random_tabular_mdp(seed, 4, 3, 0.9).unwrap();
            let inst = random_policy_instance(&mdp, &mut rng);
            let q: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
            let a = apply_r_operator(&mdp, &inst.pair, &inst.coeffs, &q).unwrap();
            let b = r_operator_linear_solve(&mdp, &inst.pair, &inst.coeffs, &q);
            assert!(sup_dist(&a, &b) < 1e-9, "{}", sup_dist(&a, &b));
        }
    }

    #[test]
    fn contraction_holds_on_random_three_state_mdps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..10 {
            let mdp = random_tabular_mdp(seed, 3, 2, 0.9).unwrap();
            let inst = random_policy_instance(&mdp, &mut rng);
            let cert = contraction_certificate(&mdp, &inst.pair, &inst.coeffs, 100, &mut rng).unwrap();
            assert!(cert.holds);
            assert!(cert.worst_ratio <= 0.9 + 1e-9);
        }
    }

    #[test]
    fn certificate_refuses_coefficients_above_ratio() {
        let mdp = random_tabular_mdp(0, 3, 2, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut inst = random_policy_instance(&mdp, &mut rng);
        inst.coeffs[0] = 2.0 * inst.pair.target[0][0] / inst.pair.behavior[0][0] + 0.1;
        assert!(matches!(
            contraction_certificate(&mdp, &inst.pair, &inst.coeffs, 5, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fixed_point_trial_ratio_is_zero() {
        let mdp = random_tabular_mdp(0, 3, 2, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = random_policy_instance(&mdp, &mut rng);
        let cert = contraction_certificate(&mdp, &inst.pair, &inst.coeffs, 0, &mut rng).unwrap();
        assert_eq!(cert.worst_ratio, 0.0);
        assert!(cert.holds);
    }

    #[test]
    fn policy_pair_validation() {
        assert!(PolicyPair::new(vec![vec![0.5, 0.5]], vec![vec![1.0, 0.0]]).is_err());
        assert!(PolicyPair::new(vec![vec![0.5, 0.6]], vec![vec![0.5, 0.5]]).is_err());
        assert!(PolicyPair::new(vec![vec![1.0, 0.0]], vec![vec![0.5, 0.5]]).is_ok());
    }
}
