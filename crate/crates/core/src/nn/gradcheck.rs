use super::tape::{ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Compares tape gradients with central differences of step `eps`.
///
/// `build` records a scalar loss for the given parameters. Returns the
/// maximum over scalar parameters of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(params: &ParamSet, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, p)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    let analytic = tape.backward(loss, params)?;

    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for k in 0..params.numel() {
        let orig = *work.scalar_mut(k);
        *work.scalar_mut(k) = orig + eps;
        let up = eval(&work)?;
        *work.scalar_mut(k) = orig - eps;
        let down = eval(&work)?;
        *work.scalar_mut(k) = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic.flat(k) - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Dense;
    use crate::nn::matrix::Matrix;
    use crate::nn::tape::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut params = ParamSet::new();
        let id = params.add("p", Matrix::row(&[3.0]));
        let err = grad_check(&params, 1e-5, |t, p| {
            let v = t.param(p, id);
            t.mul(v, v)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut params = ParamSet::new();
        params.add("p", Matrix::row(&[1.0, 2.0]));
        let err = grad_check(&params, 1e-5, |t, _| Ok(t.constant(Matrix::filled(1, 1, 4.2)))).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let mut params = ParamSet::new();
        let id = params.add("p", Matrix::row(&[0.0]));
        let res = grad_check(&params, 1e-5, |t, p| {
            let v = t.param(p, id);
            t.log_clamped(v, f64::NEG_INFINITY, f64::INFINITY)
        });
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut params = ParamSet::new();
        let l1 = Dense::new(&mut params, "l1", 4, 8, Activation::Tanh, &mut rng);
        let l2 = Dense::new(&mut params, "l2", 8, 3, Activation::Sigmoid, &mut rng);
        let x: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let x = Matrix::from_rows(&x).unwrap();
        let err = grad_check(&params, 1e-5, |t, p| {
            let b = t.bind(p);
            let xv = t.constant(x.clone());
            let h = l1.forward(t, &b, xv)?;
            let y = l2.forward(t, &b, h)?;
            let sq = t.mul(y, y)?;
            t.mean(sq)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
