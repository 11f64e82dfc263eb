//! Certificate suites on freshly generated random instances.

use std::time::Instant;

use atd_core::envs::{random_tabular_mdp, TabularMdp};
use atd_core::ratio::fit_categorical;
use atd_core::returns::{
    apply_r_operator, contraction_certificate, find_indefinite_instance, lambda_targets, mc_return,
    nstep_mixture_oracle, random_policy_instance, stability_matrix, stationary_distribution, td0_target,
};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::LabResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Suite {
    Contraction,
    FixedPoint,
    Stability,
    LambdaEquivalence,
    RatioOptimum,
}

pub const GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];
pub const LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 0.9, 1.0];

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Contraction,
        Suite::FixedPoint,
        Suite::Stability,
        Suite::LambdaEquivalence,
        Suite::RatioOptimum,
    ];

    pub fn default_trials(self) -> usize {
        match self {
            Suite::LambdaEquivalence => 1000,
            Suite::RatioOptimum => 3,
            _ => 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub suite: Suite,
    pub seed: u64,
    pub trials: usize,
    pub passed: bool,
    pub elapsed_secs: f64,
    pub details: Value,
}

fn random_mdp(rng: &mut ChaCha8Rng) -> LabResult<TabularMdp> {
    let ns = rng.random_range(2..=5);
    let na = rng.random_range(2..=3);
    let gamma = GAMMAS[rng.random_range(0..GAMMAS.len())];
    Ok(random_tabular_mdp(rng.random(), ns, na, gamma)?)
}

/// ‖ℛQ − Q^π‖∞ ≤ γ‖Q − Q^π‖∞ + 1e-9 for 100 random Q per instance.
fn contraction(rng: &mut ChaCha8Rng, trials: usize) -> LabResult<(bool, Value)> {
    let mut passed = true;
    let (mut worst_excess, mut worst_fp): (f64, f64) = (f64::NEG_INFINITY, 0.0);
    let mut rows = Vec::new();
    for _ in 0..trials {
        let mdp = random_mdp(rng)?;
        let inst = random_policy_instance(&mdp, rng);
        let cert = contraction_certificate(&mdp, &inst.pair, &inst.coeffs, 100, rng)?;
        passed &= cert.holds && cert.worst_ratio <= mdp.gamma + 1e-9;
        worst_excess = worst_excess.max(cert.worst_ratio - mdp.gamma);
        worst_fp = worst_fp.max(cert.fixed_point_error);
        rows.push(json!({
            "states": mdp.n_states, "actions": mdp.n_actions, "gamma": mdp.gamma,
            "worst_ratio": cert.worst_ratio, "fixed_point_error": cert.fixed_point_error, "holds": cert.holds,
        }));
    }
    Ok((
        passed,
        json!({ "max_worst_ratio_minus_gamma": worst_excess, "max_fixed_point_error": worst_fp, "instances": rows }),
    ))
}

/// ℛQ^π = Q^π for random, zero and Retrace(1) coefficients.
fn fixed_point(rng: &mut ChaCha8Rng, trials: usize) -> LabResult<(bool, Value)> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mdp = random_mdp(rng)?;
        let inst = random_policy_instance(&mdp, rng);
        let na = mdp.n_actions;
        let q_pi = mdp.q_pi(&inst.pair.target)?;
        let retrace: Vec<f64> = (0..mdp.n_pairs())
            .map(|sa| (inst.pair.target[sa / na][sa % na] / inst.pair.behavior[sa / na][sa % na]).min(1.0))
            .collect();
        for c in [inst.coeffs.clone(), vec![0.0; mdp.n_pairs()], retrace] {
            let rq = apply_r_operator(&mdp, &inst.pair, &c, &q_pi)?;
            let err = rq.iter().zip(&q_pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
        }
    }
    Ok((worst <= 1e-8, json!({ "max_fixed_point_error": worst, "tolerance": 1e-8 })))
}

fn random_policy(ns: usize, na: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..ns)
        .map(|_| {
            let raw: Vec<f64> = (0..na).map(|_| rng.random_range(0.05..1.0)).collect();
            let t: f64 = raw.iter().sum();
            raw.iter().map(|x| x / t).collect()
        })
        .collect()
}

/// On-policy weighting gives a positive definite matrix; off-policy can fail.
fn stability(rng: &mut ChaCha8Rng, trials: usize, seed: u64) -> LabResult<(bool, Value)> {
    let mut min_eig = f64::INFINITY;
    let mut all_pd = true;
    let mut done = 0;
    while done < trials {
        let mdp = random_mdp(rng)?;
        let ns = mdp.n_states;
        let pi = random_policy(ns, mdp.n_actions, rng);
        let d = stationary_distribution(&mdp.state_transition(&pi))?;
        let k = rng.random_range(1..=ns.min(3));
        let psi = DMatrix::from_fn(ns, k, |_, _| rng.random_range(-1.0..1.0));
        // a rank-deficient draw is rejected by the matrix builder; redraw
        let Ok(rep) = stability_matrix(&mdp, &psi, &d, &pi) else { continue };
        all_pd &= rep.positive_definite;
        min_eig = min_eig.min(rep.min_eigenvalue());
        done += 1;
    }
    let found = find_indefinite_instance(seed, 20_000);
    let counter = match &found {
        Ok(inst) => json!({
            "found": true, "tries": inst.tries, "min_eigenvalue": inst.report.min_eigenvalue(),
            "states": inst.mdp.n_states, "gamma": inst.mdp.gamma,
        }),
        Err(e) => json!({ "found": false, "error": e.to_string() }),
    };
    Ok((
        all_pd && found.is_ok(),
        json!({ "on_policy_all_positive_definite": all_pd, "on_policy_min_eigenvalue": min_eig, "off_policy_counterexample": counter }),
    ))
}

/// Backward recursion against the explicit n-step mixture, plus the λ = 0
/// and λ = 1 endpoints checked for exact equality.
fn lambda_equivalence(rng: &mut ChaCha8Rng, trials: usize) -> LabResult<(bool, Value)> {
    let mut max_err: f64 = 0.0;
    let (mut td0_mismatch, mut mc_mismatch) = (0usize, 0usize);
    for _ in 0..trials {
        let n = rng.random_range(1..=30);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let boot: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gamma = rng.random_range(0.0..1.0);
        let terminated = rng.random_bool(0.5);
        for lambda in LAMBDAS {
            let fast = lambda_targets(&rewards, terminated, &vec![lambda; n], &boot, gamma)?;
            let slow = nstep_mixture_oracle(&rewards, terminated, lambda, &boot, gamma);
            for (a, b) in fast.iter().zip(&slow) {
                max_err = max_err.max((a - b).abs());
            }
            if lambda == 0.0 {
                td0_mismatch += (0..n)
                    .filter(|&t| fast[t] != td0_target(rewards[t], terminated && t + 1 == n, boot[t], gamma))
                    .count();
            }
            if lambda == 1.0 && terminated {
                mc_mismatch += usize::from(fast != mc_return(&rewards, true, gamma)?);
            }
        }
    }
    Ok((
        max_err < 1e-12 && td0_mismatch == 0 && mc_mismatch == 0,
        json!({
            "max_abs_error": max_err, "tolerance": 1e-12, "lambdas": LAMBDAS,
            "td0_mismatched_steps": td0_mismatch, "mc_mismatched_trajectories": mc_mismatch,
        }),
    ))
}

pub const SUPPORT: usize = 8;
pub const COUNT_TOTAL: usize = 64;

/// Random counts over the support, each at least 1, summing to [`COUNT_TOTAL`].
fn random_counts(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut c = vec![1usize; SUPPORT];
    for _ in SUPPORT..COUNT_TOTAL {
        c[rng.random_range(0..SUPPORT)] += 1;
    }
    c
}

/// Trained discriminator against `p_on / (p_on + p_off)` per support point,
/// then identical buffers against 0.5.
fn ratio_optimum(rng: &mut ChaCha8Rng, trials: usize) -> LabResult<(bool, Value)> {
    let mut passed = true;
    let mut fits = Vec::new();
    for _ in 0..trials {
        let (on, off) = (random_counts(rng), random_counts(rng));
        let fit = fit_categorical(&on, &off, 16, 0.01, 1500, rng)?;
        passed &= fit.max_error <= 0.05;
        fits.push(json!({ "on": on, "off": off, "max_error": fit.max_error, "omega": fit.omega, "optimum": fit.optimum }));
    }
    let same = random_counts(rng);
    let fit = fit_categorical(&same, &same, 16, 0.01, 1500, rng)?;
    let mean_ok = (fit.mean_output - 0.5).abs() <= 0.05;
    Ok((
        passed && mean_ok,
        json!({ "tolerance": 0.05, "fits": fits, "identical_mean_output": fit.mean_output }),
    ))
}

pub fn oracle_check(suite: Suite, seed: u64, trials: usize) -> LabResult<OracleReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (passed, details) = match suite {
        Suite::Contraction => contraction(&mut rng, trials)?,
        Suite::FixedPoint => fixed_point(&mut rng, trials)?,
        Suite::Stability => stability(&mut rng, trials, seed)?,
        Suite::LambdaEquivalence => lambda_equivalence(&mut rng, trials)?,
        Suite::RatioOptimum => ratio_optimum(&mut rng, trials)?,
    };
    Ok(OracleReport {
        suite,
        seed,
        trials,
        passed,
        elapsed_secs: start.elapsed().as_secs_f64(),
        details,
    })
}
