use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite MDP over joint actions with row-stochastic `P[s][a][s']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Flattened `[s][a][s']`.
    pub transitions: Vec<f64>,
    /// Flattened `[s][a]`.
    pub rewards: Vec<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let mdp = Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states, self.n_actions);
        if self.transitions.len() != s * a * s || self.rewards.len() != s * a {
            return Err(Error::Contract("tabular MDP table sizes".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Contract(format!("discount {} not in [0,1)", self.gamma)));
        }
        for row in self.transitions.chunks(s) {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| p.is_nan() || p < 0.0) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::Contract("transition row not stochastic".into()));
            }
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Contract("non-finite reward".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + s2]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// State-action transition matrix under `policy` (`[s][a]` rows):
    /// `M[(s,a),(s',a')] = P(s'|s,a) π(a'|s')`.
    pub fn pair_transition(&self, policy: &[Vec<f64>]) -> DMatrix<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut m = DMatrix::zeros(ns * na, ns * na);
        for s in 0..ns {
            for a in 0..na {
                for s2 in 0..ns {
                    let p = self.p(s, a, s2);
                    for a2 in 0..na {
                        m[(s * na + a, s2 * na + a2)] = p * policy[s2][a2];
                    }
                }
            }
        }
        m
    }

    /// State transition matrix `P_π[s][s'] = Σ_a π(a|s) P(s'|s,a)`.
    pub fn state_transition(&self, policy: &[Vec<f64>]) -> DMatrix<f64> {
        let ns = self.n_states;
        let mut m = DMatrix::zeros(ns, ns);
        for s in 0..ns {
            for (a, &pa) in policy[s].iter().enumerate().take(self.n_actions) {
                for s2 in 0..ns {
                    m[(s, s2)] += pa * self.p(s, a, s2);
                }
            }
        }
        m
    }

    /// Exact `Q^π` from `(I − γ P^π) Q = r`, flattened `[s][a]`.
    pub fn q_pi(&self, policy: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = self.n_pairs();
        let a = DMatrix::identity(n, n) - self.pair_transition(policy) * self.gamma;
        let b = DVector::from_column_slice(&self.rewards);
        let q = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Numeric("singular policy-evaluation system".into()))?;
        Ok(q.iter().copied().collect())
    }

    /// `(𝒯^π Q)(s,a) = r(s,a) + γ Σ_{s'} P(s'|s,a) Σ_{a'} π(a'|s') Q(s',a')`.
    pub fn bellman_pi(&self, policy: &[Vec<f64>], q: &[f64]) -> Vec<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let v: Vec<f64> = (0..ns)
            .map(|s| (0..na).map(|a| policy[s][a] * q[s * na + a]).sum())
            .collect();
        (0..ns * na)
            .map(|sa| {
                let (s, a) = (sa / na, sa % na);
                self.r(s, a) + self.gamma * (0..ns).map(|s2| self.p(s, a, s2) * v[s2]).sum::<f64>()
            })
            .collect()
    }
}

/// Random MDP: each `P[s][a]` row is a normalized exponential sample
/// (a flat Dirichlet draw) and rewards are uniform in `[−1, 1]`.
pub fn random_tabular_mdp(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
) -> Result<TabularMdp> {
    if n_states < 2 || n_actions < 2 {
        return Err(Error::Contract(
            "random tabular MDP needs at least 2 states and 2 actions".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let row: Vec<f64> = (0..n_states)
            .map(|_| rng.sample::<f64, _>(Exp1) + 1e-6)
            .collect();
        let total: f64 = row.iter().sum();
        let mut row: Vec<f64> = row.iter().map(|x| x / total).collect();
        // put rounding residue on the largest entry so the row sums to 1
        let resid = 1.0 - row.iter().sum::<f64>();
        let imax = (0..n_states)
            .max_by(|&i, &j| row[i].total_cmp(&row[j]))
            .unwrap_or(0);
        row[imax] += resid;
        transitions.extend(row);
    }
    let rewards = (0..n_states * n_actions)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    TabularMdp::new(n_states, n_actions, transitions, rewards, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_policy(mdp: &TabularMdp) -> Vec<Vec<f64>> {
        vec![vec![1.0 / mdp.n_actions as f64; mdp.n_actions]; mdp.n_states]
    }

    #[test]
    fn rows_are_stochastic() {
        for seed in 0..20 {
            let mdp = random_tabular_mdp(seed, 5, 3, 0.9).unwrap();
            for row in mdp.transitions.chunks(mdp.n_states) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            assert!(mdp.rewards.iter().all(|r| (-1.0..=1.0).contains(r)));
        }
    }

    #[test]
    fn same_seed_same_mdp() {
        assert_eq!(
            random_tabular_mdp(9, 4, 2, 0.5).unwrap(),
            random_tabular_mdp(9, 4, 2, 0.5).unwrap()
        );
        assert_ne!(
            random_tabular_mdp(9, 4, 2, 0.5).unwrap(),
            random_tabular_mdp(10, 4, 2, 0.5).unwrap()
        );
    }

    #[test]
    fn exact_q_pi_has_tiny_bellman_residual() {
        for seed in 0..10 {
            let mdp = random_tabular_mdp(seed, 6, 3, 0.99).unwrap();
            let pi = uniform_policy(&mdp);
            let q = mdp.q_pi(&pi).unwrap();
            let tq = mdp.bellman_pi(&pi, &q);
            let resid = q.iter().zip(&tq).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(resid < 1e-10, "{resid}");
        }
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(random_tabular_mdp(0, 1, 3, 0.9).is_err());
        assert!(random_tabular_mdp(0, 3, 1, 0.9).is_err());
    }
}
