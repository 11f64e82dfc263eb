use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::envs::TabularMdp;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `A = Ψᵀ D (I − γ P_π) Ψ`, row-major `k × k`.
    pub a: Vec<Vec<f64>>,
    /// Eigenvalues of `(A + Aᵀ)/2`, ascending.
    pub sym_eigenvalues: Vec<f64>,
    pub positive_definite: bool,
}

impl StabilityReport {
    pub fn min_eigenvalue(&self) -> f64 {
        self.sym_eigenvalues.first().copied().unwrap_or(f64::NAN)
    }
}

/// Stationary distribution of a row-stochastic matrix: solves `Pᵀd = d`,
/// `Σd = 1` with one balance equation replaced by the normalisation.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = p.nrows();
    if n == 0 || p.ncols() != n {
        return Err(Error::Contract("transition matrix must be square".into()));
    }
    let mut m = p.transpose() - DMatrix::identity(n, n);
    for j in 0..n {
        m[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let d = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("chain has no unique stationary distribution".into()))?;
    if d.iter().any(|v| !v.is_finite() || *v < -1e-9) {
        return Err(Error::Numeric("stationary solve produced an invalid distribution".into()));
    }
    Ok(d.iter().map(|v| v.max(0.0)).collect())
}

/// Linear-TD stability matrix for state features `Ψ` (`n_states × k`),
/// state weighting `d` and target policy `π`.
pub fn stability_matrix(
    mdp: &TabularMdp,
    features: &DMatrix<f64>,
    d: &[f64],
    target: &[Vec<f64>],
) -> Result<StabilityReport> {
    let n = mdp.n_states;
    if features.nrows() != n || features.ncols() == 0 {
        return Err(Error::Contract(format!(
            "features must be {n} × k, got {} × {}",
            features.nrows(),
            features.ncols()
        )));
    }
    if d.len() != n || d.iter().any(|&x| x < 0.0) || (d.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract("d must be a probability vector over states".into()));
    }
    if target.len() != n || target.iter().any(|r| r.len() != mdp.n_actions) {
        return Err(Error::Contract("policy shape does not match MDP".into()));
    }
    let k = features.ncols();
    let svd = features.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * smax.max(1.0))
        .count();
    if rank < k {
        return Err(Error::Contract(format!("features have rank {rank} < {k}")));
    }
    let p = mdp.state_transition(target);
    let dm = DMatrix::from_diagonal(&DVector::from_column_slice(d));
    let a = features.transpose() * dm * (DMatrix::identity(n, n) - p * mdp.gamma) * features;
    let sym = (&a + a.transpose()) * 0.5;
    let mut eig: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    Ok(StabilityReport {
        a: (0..k).map(|i| (0..k).map(|j| a[(i, j)]).collect()).collect(),
        positive_definite: eig[0] > 0.0,
        sym_eigenvalues: eig,
    })
}

/// Off-policy configuration whose stability matrix is not positive definite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndefiniteInstance {
    pub mdp: TabularMdp,
    pub features: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    pub behavior: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub report: StabilityReport,
    pub tries: usize,
}

fn simplex(n: usize, peak: f64, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(Exp1).powf(peak) + 1e-3)
        .collect();
    let t: f64 = raw.iter().sum();
    raw.iter().map(|x| x / t).collect()
}

/// Random search over small MDPs, single-feature approximators and
/// mismatched policies for an instance where `d` (stationary under μ)
/// makes the stability matrix for π indefinite.
pub fn find_indefinite_instance(seed: u64, max_tries: usize) -> Result<IndefiniteInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for tries in 1..=max_tries {
        let ns = rng.random_range(2..=3);
        let na = 2;
        let gamma = rng.random_range(0.9..0.99);
        let transitions: Vec<f64> = (0..ns * na).flat_map(|_| simplex(ns, 3.0, &mut rng)).collect();
        let rewards = vec![0.0; ns * na];
        let mdp = TabularMdp::new(ns, na, transitions, rewards, gamma)?;
        let target: Vec<Vec<f64>> = (0..ns).map(|_| simplex(na, 4.0, &mut rng)).collect();
        let behavior: Vec<Vec<f64>> = (0..ns).map(|_| simplex(na, 4.0, &mut rng)).collect();
        let d = match stationary_distribution(&mdp.state_transition(&behavior)) {
            Ok(d) => d,
            Err(_) => continue,
        };
        let psi: Vec<f64> = (0..ns).map(|_| rng.random_range(0.1..3.0)).collect();
        let features = DMatrix::from_column_slice(ns, 1, &psi);
        let report = match stability_matrix(&mdp, &features, &d, &target) {
            Ok(r) => r,
            Err(_) => continue,
        };
        if !report.positive_definite {
            return Ok(IndefiniteInstance {
                mdp,
                features: psi.iter().map(|&v| vec![v]).collect(),
                target,
                behavior,
                d,
                report,
                tries,
            });
        }
    }
    Err(Error::Numeric(format!(
        "no indefinite instance within {max_tries} tries"
    )))
}
