use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{Gradients, ParamSet};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

/// RMSprop or Adam state for one [`ParamSet`].
///
/// RMSprop keeps `v ← α v + (1-α) g²` and steps `-lr · g / √(v + ε)`.
/// Adam uses bias-corrected moments with `β = (0.9, 0.999)` and steps
/// `-lr · m̂ / (√v̂ + ε)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step_size: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// RMSprop square average, or Adam second moment.
    pub second: Vec<Matrix>,
    /// Adam first moment; empty for RMSprop.
    pub first: Vec<Matrix>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn rmsprop(params: &ParamSet, step_size: f64, alpha: f64, epsilon: f64) -> Self {
        Self {
            kind: OptimizerKind::RmsProp,
            step_size,
            alpha,
            epsilon,
            beta1: 0.0,
            beta2: 0.0,
            second: zeros(params),
            first: Vec::new(),
            steps: 0,
        }
    }

    pub fn adam(params: &ParamSet, step_size: f64, epsilon: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            step_size,
            alpha: 0.0,
            epsilon,
            beta1: 0.9,
            beta2: 0.999,
            second: zeros(params),
            first: zeros(params),
            steps: 0,
        }
    }

    /// Apply one update. A non-finite gradient leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        if grads.tensors().len() != params.len() || self.second.len() != params.len() {
            return Err(shape_err(
                "optimizer_step",
                params.len(),
                grads.tensors().len(),
            ));
        }
        for (p, g) in params.tensors().iter().zip(grads.tensors()) {
            if p.shape() != g.shape() {
                return Err(shape_err(
                    "optimizer_step tensor",
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::RmsProp => {
                let (a, lr, eps) = (self.alpha, self.step_size, self.epsilon);
                for ((p, g), v) in params
                    .tensors_mut()
                    .iter_mut()
                    .zip(grads.tensors())
                    .zip(&mut self.second)
                {
                    for ((pp, &gg), vv) in p
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(v.as_mut_slice())
                    {
                        *vv = a * *vv + (1.0 - a) * gg * gg;
                        *pp -= lr * gg / (*vv + eps).sqrt();
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.step_size, self.epsilon);
                let t = self.steps as i32;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .iter_mut()
                    .zip(grads.tensors())
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pp, &gg), mm), vv) in p
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(m.as_mut_slice())
                        .zip(v.as_mut_slice())
                    {
                        *mm = b1 * *mm + (1.0 - b1) * gg;
                        *vv = b2 * *vv + (1.0 - b2) * gg * gg;
                        *pp -= lr * (*mm / c1) / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

fn zeros(params: &ParamSet) -> Vec<Matrix> {
    params
        .tensors()
        .iter()
        .map(|t| Matrix::zeros(t.rows(), t.cols()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("p", Matrix::row(&[v]));
        p
    }

    fn grad(p: &ParamSet, g: f64) -> Gradients {
        let mut gr = p.zeros_like();
        gr.tensors_mut()[0].as_mut_slice()[0] = g;
        gr
    }

    #[test]
    fn rmsprop_first_step_hand_value() {
        let mut p = scalar(0.0);
        let mut opt = OptimizerState::rmsprop(&p, 0.001, 0.99, 1e-5);
        { let g = grad(&p, 1.0); opt.step(&mut p, &g) }.unwrap();
        let want = -0.001 / (0.01f64 + 1e-5).sqrt();
        assert!((p.tensors()[0].get(0, 0) - want).abs() < 1e-15);
        assert!((want + 0.009995).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = scalar(0.0);
        let mut opt = OptimizerState::adam(&p, 0.001, 1e-8);
        { let g = grad(&p, 1.0); opt.step(&mut p, &g) }.unwrap();
        assert!((p.tensors()[0].get(0, 0) + 0.001).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_is_a_noop_and_decays_accumulators() {
        let mut p = scalar(0.5);
        let mut opt = OptimizerState::rmsprop(&p, 0.01, 0.9, 1e-5);
        { let g = grad(&p, 2.0); opt.step(&mut p, &g) }.unwrap();
        let before = p.clone();
        let v0 = opt.second[0].get(0, 0);
        { let g = grad(&p, 0.0); opt.step(&mut p, &g) }.unwrap();
        assert_eq!(p, before);
        assert!((opt.second[0].get(0, 0) - 0.9 * v0).abs() < 1e-15);

        let mut q = scalar(0.5);
        let mut adam = OptimizerState::adam(&q, 0.01, 1e-8);
        { let g = grad(&q, 0.0); adam.step(&mut q, &g) }.unwrap();
        assert_eq!(q, scalar(0.5));
    }

    #[test]
    fn nan_gradient_leaves_parameters_untouched() {
        let mut p = scalar(1.0);
        let mut opt = OptimizerState::adam(&p, 0.01, 1e-8);
        let err = { let g = grad(&p, f64::NAN); opt.step(&mut p, &g) }.unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p, scalar(1.0));
        assert_eq!(opt.steps, 0);
    }
}
