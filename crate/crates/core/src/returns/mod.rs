//! Return targets (TD(0), Monte-Carlo, λ-returns with constant or per-step
//! λ, trace-coefficient targets) and the exact tabular oracles for the
//! general return operator: fixed point, γ-contraction and the linear-TD
//! stability matrix.

mod operator;
mod stability;
mod targets;

pub use operator::{
    apply_r_operator, contraction_certificate, random_policy_instance, Certificate, PolicyInstance,
    PolicyPair,
};
pub use stability::{
    find_indefinite_instance, stability_matrix, stationary_distribution, IndefiniteInstance,
    StabilityReport,
};
pub use targets::{
    is_coeffs, lambda_targets, mc_return, nstep_mixture_oracle, retrace_coeffs, td0_target,
    trace_targets, TabularStep, TraceCoeffs, TraceKind,
};
