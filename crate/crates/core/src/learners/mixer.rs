use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::MixerKind;
use crate::error::{shape_err, Result};
use crate::nn::{Activation, Bound, Dense, ParamSet, Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Hyper {
    w1_in: Dense,
    w1_out: Dense,
    b1: Dense,
    wf_in: Dense,
    wf_out: Dense,
    v_in: Dense,
    v_out: Dense,
}

/// Combines per-agent utilities into `Q_tot`. VDN sums them; QMIX mixes
/// them through state-conditioned non-negative weights:
/// `Q_tot = |W_f(s)|ᵀ elu(|W_1(s)|ᵀ q + b_1(s)) + V(s)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mixer {
    pub kind: MixerKind,
    pub n_agents: usize,
    pub state_dim: usize,
    pub embed: usize,
    hyper: Option<Hyper>,
}

impl Mixer {
    pub fn new(
        params: &mut ParamSet,
        kind: MixerKind,
        n_agents: usize,
        state_dim: usize,
        embed: usize,
        hyper_embed: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hyper = (kind == MixerKind::Qmix).then(|| {
            let relu = Activation::Relu;
            let id = Activation::Identity;
            Hyper {
                w1_in: Dense::new(params, "mix.w1.0", state_dim, hyper_embed, relu, rng),
                w1_out: Dense::new(params, "mix.w1.1", hyper_embed, n_agents * embed, id, rng),
                b1: Dense::new(params, "mix.b1", state_dim, embed, id, rng),
                wf_in: Dense::new(params, "mix.wf.0", state_dim, hyper_embed, relu, rng),
                wf_out: Dense::new(params, "mix.wf.1", hyper_embed, embed, id, rng),
                v_in: Dense::new(params, "mix.v.0", state_dim, embed, relu, rng),
                v_out: Dense::new(params, "mix.v.1", embed, 1, id, rng),
            }
        });
        Self {
            kind,
            n_agents,
            state_dim,
            embed,
            hyper,
        }
    }

    /// `q: R × n_agents`, `states: R × state_dim` → `R × 1`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, q: Var, states: Var) -> Result<Var> {
        let qw = tape.value(q).cols();
        if qw != self.n_agents {
            return Err(shape_err("mixer utilities", self.n_agents, qw));
        }
        let Some(h) = &self.hyper else {
            return tape.row_sum(q);
        };
        let sw = tape.value(states).cols();
        if sw != self.state_dim {
            return Err(shape_err("mixer state", self.state_dim, sw));
        }
        let a = h.w1_in.forward(tape, bound, states)?;
        let w1_raw = h.w1_out.forward(tape, bound, a)?;
        let w1 = tape.act(w1_raw, Activation::Abs)?;
        let b1 = h.b1.forward(tape, bound, states)?;
        let mixed = tape.row_matvec(q, w1)?;
        let pre = tape.add(mixed, b1)?;
        let hidden = tape.act(pre, Activation::Elu)?;
        let f = h.wf_in.forward(tape, bound, states)?;
        let wf_raw = h.wf_out.forward(tape, bound, f)?;
        let wf = tape.act(wf_raw, Activation::Abs)?;
        let y = tape.row_dot(hidden, wf)?;
        let vh = h.v_in.forward(tape, bound, states)?;
        let v = h.v_out.forward(tape, bound, vh)?;
        tape.add(y, v)
    }

    /// Force the hypernetwork outputs to constants: first-layer weights
    /// `w1` (row-major `n × e`), zero first-layer bias, final weights `wf`,
    /// and zero state value.
    pub fn force_outputs(&self, params: &mut ParamSet, w1: &[f64], wf: &[f64]) {
        let Some(h) = &self.hyper else { return };
        for layer in [&h.w1_out, &h.b1, &h.wf_out, &h.v_out] {
            layer.zero(params);
        }
        params.get_mut(h.w1_out.bias).as_mut_slice().copy_from_slice(w1);
        params.get_mut(h.wf_out.bias).as_mut_slice().copy_from_slice(wf);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qtot(m: &Mixer, p: &ParamSet, q: &[f64], s: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let b = tape.bind(p);
        let qv = tape.constant(Matrix::row(q));
        let sv = tape.constant(Matrix::row(s));
        let y = m.forward(&mut tape, &b, qv, sv).unwrap();
        tape.scalar(y)
    }

    #[test]
    fn vdn_sums() {
        let mut p = ParamSet::new();
        let m = Mixer::new(&mut p, MixerKind::Vdn, 3, 2, 4, 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(qtot(&m, &p, &[1.0, 2.0, 3.0], &[0.0, 0.0]), 6.0);
    }

    #[test]
    fn forced_identity_reduces_to_sum() {
        let mut p = ParamSet::new();
        let m = Mixer::new(&mut p, MixerKind::Qmix, 3, 2, 3, 8, &mut ChaCha8Rng::seed_from_u64(1));
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        m.force_outputs(&mut p, &eye, &[1.0; 3]);
        // elu is the identity on non-negative inputs
        assert!((qtot(&m, &p, &[1.0, 2.0, 3.0], &[0.3, -0.7]) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn qmix_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let mut p = ParamSet::new();
            let m = Mixer::new(&mut p, MixerKind::Qmix, 3, 4, 5, 6, &mut rng);
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            for i in 0..3 {
                let (mut hi, mut lo) = (q.clone(), q.clone());
                hi[i] += 1e-6;
                lo[i] -= 1e-6;
                let d = (qtot(&m, &p, &hi, &s) - qtot(&m, &p, &lo, &s)) / 2e-6;
                assert!(d >= 0.0, "{d}");
            }
        }
    }

    #[test]
    fn joint_argmax_matches_per_agent_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut p = ParamSet::new();
            let m = Mixer::new(&mut p, MixerKind::Qmix, 2, 3, 4, 6, &mut rng);
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let mut best = (f64::NEG_INFINITY, (0, 0));
            for a in 0..5 {
                for b in 0..5 {
                    let v = qtot(&m, &p, &[u[0][a], u[1][b]], &s);
                    if v > best.0 {
                        best = (v, (a, b));
                    }
                }
            }
            let greedy = |q: &[f64]| (0..5).max_by(|&x, &y| q[x].total_cmp(&q[y])).unwrap();
            assert_eq!(best.1, (greedy(&u[0]), greedy(&u[1])));
        }
    }

    #[test]
    fn qmix_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        let m = Mixer::new(&mut p, MixerKind::Qmix, 2, 3, 4, 5, &mut rng);
        let q = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.1]]).unwrap();
        let s = Matrix::from_rows(&[vec![0.1, 0.2, -0.3], vec![-1.0, 0.4, 0.9]]).unwrap();
        let err = grad_check(&p, 1e-6, |tape, params| {
            let b = tape.bind(params);
            let qv = tape.constant(q.clone());
            let sv = tape.constant(s.clone());
            let y = m.forward(tape, &b, qv, sv)?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
