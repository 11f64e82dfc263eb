use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{Activation, Bound, ParamId, ParamSet, Tape, Var};
use crate::error::{shape_err, Result};

/// Uniform `±1/√fan_in` initialization.
pub fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Fully connected layer `act(W x + b)`; `W` is stored `out × in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
}

impl Dense {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            init_uniform(out_dim, in_dim, in_dim, rng),
        );
        let bias = params.add(format!("{name}.bias"), init_uniform(1, out_dim, in_dim, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            act,
        }
    }

    /// Forward over a batch `x: m × in`, recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let got = tape.value(x).cols();
        if got != self.in_dim {
            return Err(shape_err("dense_forward", self.in_dim, got));
        }
        let z = tape.linear(x, bound.var(self.weight), Some(bound.var(self.bias)))?;
        tape.act(z, self.act)
    }

    /// Zero the layer's weights and biases.
    pub fn zero(&self, params: &mut ParamSet) {
        params.get_mut(self.weight).as_mut_slice().fill(0.0);
        params.get_mut(self.bias).as_mut_slice().fill(0.0);
    }
}

/// Gated recurrent unit. Gate blocks are stacked `[reset, update, candidate]`
/// and the reset gate scales the hidden-path candidate pre-activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let h3 = 3 * hidden_dim;
        Self {
            w_ih: params.add(format!("{name}.w_ih"), init_uniform(h3, in_dim, hidden_dim, rng)),
            w_hh: params.add(
                format!("{name}.w_hh"),
                init_uniform(h3, hidden_dim, hidden_dim, rng),
            ),
            b_ih: params.add(format!("{name}.b_ih"), init_uniform(1, h3, hidden_dim, rng)),
            b_hh: params.add(format!("{name}.b_hh"), init_uniform(1, h3, hidden_dim, rng)),
            in_dim,
            hidden_dim,
        }
    }

    /// One recurrence step over a batch: `x: m × in`, `h: m × hidden`.
    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var) -> Result<Var> {
        let (xw, hw) = (tape.value(x).cols(), tape.value(h).cols());
        if xw != self.in_dim {
            return Err(shape_err("gru_step input", self.in_dim, xw));
        }
        if hw != self.hidden_dim {
            return Err(shape_err("gru_step hidden", self.hidden_dim, hw));
        }
        let hd = self.hidden_dim;
        let gi = tape.linear(x, bound.var(self.w_ih), Some(bound.var(self.b_ih)))?;
        let gh = tape.linear(h, bound.var(self.w_hh), Some(bound.var(self.b_hh)))?;
        let (i_r, h_r) = (tape.slice_cols(gi, 0, hd)?, tape.slice_cols(gh, 0, hd)?);
        let (i_z, h_z) = (tape.slice_cols(gi, hd, hd)?, tape.slice_cols(gh, hd, hd)?);
        let (i_n, h_n) = (
            tape.slice_cols(gi, 2 * hd, hd)?,
            tape.slice_cols(gh, 2 * hd, hd)?,
        );
        let r_pre = tape.add(i_r, h_r)?;
        let r = tape.act(r_pre, Activation::Sigmoid)?;
        let z_pre = tape.add(i_z, h_z)?;
        let z = tape.act(z_pre, Activation::Sigmoid)?;
        let gated = tape.mul(r, h_n)?;
        let n_pre = tape.add(i_n, gated)?;
        let n = tape.act(n_pre, Activation::Tanh)?;
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_with(w: Matrix, b: Matrix, act: Activation) -> (ParamSet, Dense) {
        let mut params = ParamSet::new();
        let (o, i) = w.shape();
        let weight = params.add("w", w);
        let bias = params.add("b", b);
        (
            params,
            Dense {
                weight,
                bias,
                in_dim: i,
                out_dim: o,
                act,
            },
        )
    }

    fn run(params: &ParamSet, layer: &Dense, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = tape.bind(params);
        let xv = tape.constant(Matrix::row(x));
        let y = layer.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(y).as_slice().to_vec())
    }

    #[test]
    fn dense_identity_case() {
        let (p, l) = dense_with(Matrix::identity(2), Matrix::zeros(1, 2), Activation::Identity);
        assert_eq!(run(&p, &l, &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn dense_sigmoid_at_origin() {
        let (p, l) = dense_with(
            Matrix::row(&[1.0, 1.0]),
            Matrix::zeros(1, 1),
            Activation::Sigmoid,
        );
        assert_eq!(run(&p, &l, &[0.0, 0.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn dense_relu_hand_evaluated() {
        let w = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let (p, l) = dense_with(w, Matrix::row(&[1.0, 1.0]), Activation::Relu);
        assert_eq!(run(&p, &l, &[-1.0, 1.0]).unwrap(), vec![0.0, 3.0]);
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let (p, l) = dense_with(Matrix::identity(2), Matrix::zeros(1, 2), Activation::Identity);
        assert!(run(&p, &l, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn dense_abs_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let l = Dense::new(&mut params, "l", 4, 6, Activation::Abs, &mut rng);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(run(&params, &l, &x).unwrap().iter().all(|&v| v >= 0.0));
        }
    }

    fn gru_eval(params: &ParamSet, gru: &Gru, x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind(params);
        let xv = tape.constant(Matrix::row(x));
        let hv = tape.constant(Matrix::row(h));
        let out = gru.step(&mut tape, &bound, xv, hv).unwrap();
        tape.value(out).as_slice().to_vec()
    }

    /// Scalar-loop GRU written independently of the tape path.
    fn reference_gru(params: &ParamSet, gru: &Gru, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = gru.hidden_dim;
        let (wi, wh) = (params.get(gru.w_ih), params.get(gru.w_hh));
        let (bi, bh) = (params.get(gru.b_ih), params.get(gru.b_hh));
        let affine = |w: &Matrix, b: &Matrix, v: &[f64], row: usize| -> f64 {
            b.get(0, row) + (0..v.len()).map(|k| w.get(row, k) * v[k]).sum::<f64>()
        };
        (0..hd)
            .map(|j| {
                let r = sigmoid(affine(wi, bi, x, j) + affine(wh, bh, h, j));
                let z = sigmoid(affine(wi, bi, x, hd + j) + affine(wh, bh, h, hd + j));
                let n = (affine(wi, bi, x, 2 * hd + j) + r * affine(wh, bh, h, 2 * hd + j)).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect()
    }

    #[test]
    fn gru_zero_parameters_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let gru = Gru::new(&mut params, "g", 3, 4, &mut rng);
        for t in params.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        let out = gru_eval(&params, &gru, &[0.7, -2.0, 5.0], &[0.0; 4]);
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn gru_matches_reference_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let gru = Gru::new(&mut params, "g", 3, 5, &mut rng);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = gru_eval(&params, &gru, &x, &h);
            let b = gru_eval(&params, &gru, &x, &h);
            assert_eq!(a, b);
            let want = reference_gru(&params, &gru, &x, &h);
            for (u, v) in a.iter().zip(&want) {
                assert!((u - v).abs() < 1e-14, "{u} vs {v}");
                assert!(u.abs() < 1.0);
            }
        }
    }

    #[test]
    fn gru_rejects_bad_hidden_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let gru = Gru::new(&mut params, "g", 2, 3, &mut rng);
        let mut tape = Tape::new();
        let bound = tape.bind(&params);
        let x = tape.constant(Matrix::row(&[0.0, 0.0]));
        let h = tape.constant(Matrix::row(&[0.0, 0.0]));
        assert!(gru.step(&mut tape, &bound, x, h).is_err());
    }
}
