use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::DecPomdpSpec;
use crate::error::{shape_err, Result};
use crate::nn::{Activation, Bound, Dense, Gru, Matrix, ParamSet, Tape, Var};

/// Per-agent utility network with shared weights: input is the agent's
/// observation, its previous action (one-hot) and its id (one-hot).
/// `fc1 (relu) → GRU | dense (relu) → head`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityNet {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub hidden: usize,
    fc1: Dense,
    gru: Option<Gru>,
    mid: Option<Dense>,
    head: Dense,
}

impl UtilityNet {
    pub fn new(
        params: &mut ParamSet,
        spec: &DecPomdpSpec,
        hidden: usize,
        recurrent: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let input = spec.obs_dim + spec.n_actions + spec.n_agents;
        let fc1 = Dense::new(params, "agent.fc1", input, hidden, Activation::Relu, rng);
        let (gru, mid) = if recurrent {
            (Some(Gru::new(params, "agent.gru", hidden, hidden, rng)), None)
        } else {
            (
                None,
                Some(Dense::new(params, "agent.fc2", hidden, hidden, Activation::Relu, rng)),
            )
        };
        let head = Dense::new(params, "agent.head", hidden, spec.n_actions, Activation::Identity, rng);
        Self {
            n_agents: spec.n_agents,
            obs_dim: spec.obs_dim,
            n_actions: spec.n_actions,
            hidden,
            fc1,
            gru,
            mid,
            head,
        }
    }

    pub fn recurrent(&self) -> bool {
        self.gru.is_some()
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }

    /// Write one agent's input row into `row` (length [`Self::input_dim`]).
    pub fn fill_input(&self, row: &mut [f64], agent: usize, obs: &[f64], last_action: Option<usize>) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(shape_err("utility observation", self.obs_dim, obs.len()));
        }
        row.fill(0.0);
        row[..self.obs_dim].copy_from_slice(obs);
        if let Some(a) = last_action {
            row[self.obs_dim + a] = 1.0;
        }
        row[self.obs_dim + self.n_actions + agent] = 1.0;
        Ok(())
    }

    /// Inputs for all agents at one step: `n_agents × input_dim`.
    pub fn inputs(&self, observations: &[Vec<f64>], last_actions: Option<&[usize]>) -> Result<Matrix> {
        let mut m = Matrix::zeros(self.n_agents, self.input_dim());
        for (i, obs) in observations.iter().enumerate() {
            self.fill_input(m.row_slice_mut(i), i, obs, last_actions.map(|a| a[i]))?;
        }
        Ok(m)
    }

    /// One step over `m` rows; `h` is required iff the net is recurrent.
    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Option<Var>) -> Result<(Var, Option<Var>)> {
        let e = self.fc1.forward(tape, bound, x)?;
        let (z, h2) = match (&self.gru, &self.mid) {
            (Some(gru), _) => {
                let rows = tape.value(x).rows();
                let h = match h {
                    Some(h) => h,
                    None => tape.constant(Matrix::zeros(rows, self.hidden)),
                };
                let h2 = gru.step(tape, bound, e, h)?;
                (h2, Some(h2))
            }
            (None, Some(mid)) => (mid.forward(tape, bound, e)?, None),
            (None, None) => unreachable!("utility net has a middle layer"),
        };
        Ok((self.head.forward(tape, bound, z)?, h2))
    }

    /// Utilities over a sequence of per-step input blocks (each `m ×
    /// input_dim`, same `m`), stacked step-major: `(steps·m) × n_actions`.
    pub fn forward_sequence(&self, tape: &mut Tape, bound: &Bound, inputs: &[Matrix]) -> Result<Var> {
        if self.recurrent() {
            let mut h = None;
            let mut outs = Vec::with_capacity(inputs.len());
            for x in inputs {
                let xv = tape.constant(x.clone());
                let (q, h2) = self.step(tape, bound, xv, h)?;
                h = h2;
                outs.push(q);
            }
            tape.concat_rows(&outs)
        } else {
            let cols = self.input_dim();
            let mut data = Vec::with_capacity(inputs.iter().map(Matrix::len).sum());
            for x in inputs {
                if x.cols() != cols {
                    return Err(shape_err("utility input", cols, x.cols()));
                }
                data.extend_from_slice(x.as_slice());
            }
            let stacked = Matrix::from_vec(data.len() / cols, cols, data)?;
            let xv = tape.constant(stacked);
            Ok(self.step(tape, bound, xv, None)?.0)
        }
    }
}

/// Index of the largest available value; first index on ties.
pub fn masked_argmax(values: &[f64], available: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (a, (&v, &ok)) in values.iter().zip(available).enumerate() {
        if ok && best.is_none_or(|(_, b)| v > b) {
            best = Some((a, v));
        }
    }
    best.map(|(a, _)| a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> DecPomdpSpec {
        DecPomdpSpec {
            n_agents: 2,
            state_dim: 3,
            obs_dim: 4,
            n_actions: 3,
            max_episode_len: 5,
            gamma: 0.9,
        }
    }

    fn random_inputs(net: &UtilityNet, steps: usize, rng: &mut impl Rng) -> Vec<Matrix> {
        (0..steps)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..2)
                    .map(|i| {
                        let obs: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let mut row = vec![0.0; net.input_dim()];
                        net.fill_input(&mut row, i, &obs, Some(rng.random_range(0..3))).unwrap();
                        row
                    })
                    .collect();
                Matrix::from_rows(&rows).unwrap()
            })
            .collect()
    }

    #[test]
    fn gradient_checks_both_variants() {
        for recurrent in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(recurrent as u64);
            let mut params = ParamSet::new();
            let net = UtilityNet::new(&mut params, &spec(), 6, recurrent, &mut rng);
            let inputs = random_inputs(&net, 3, &mut rng);
            let err = grad_check(&params, 1e-6, |tape, p| {
                let b = tape.bind(p);
                let q = net.forward_sequence(tape, &b, &inputs)?;
                let sq = tape.mul(q, q)?;
                tape.mean(sq)
            })
            .unwrap();
            assert!(err < 1e-4, "recurrent={recurrent}: {err}");
        }
    }

    #[test]
    fn output_width_is_action_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let net = UtilityNet::new(&mut params, &spec(), 8, true, &mut rng);
        let inputs = random_inputs(&net, 4, &mut rng);
        let mut tape = Tape::new();
        let b = tape.bind(&params);
        let q = net.forward_sequence(&mut tape, &b, &inputs).unwrap();
        assert_eq!(tape.value(q).shape(), (8, 3));
    }

    #[test]
    fn masked_argmax_skips_masked_best() {
        assert_eq!(masked_argmax(&[5.0, 1.0, 2.0], &[false, true, true]), Some(2));
        assert_eq!(masked_argmax(&[1.0, 1.0], &[true, true]), Some(0));
        assert_eq!(masked_argmax(&[1.0, 1.0], &[false, false]), None);
    }
}
