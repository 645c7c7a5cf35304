use crate::econ::ConvergenceClass;
use thiserror::Error;

/// Errors shared by the closed-form and quadrature backends.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{}", divergence_message(.class, .denominator, .sigma_c, .sigma_boundary_lower))]
    Divergent {
        class: ConvergenceClass,
        /// Decay rate of the discounted integrand (non-positive here).
        denominator: f64,
        /// Critical volatility for the power-negative family.
        sigma_c: Option<f64>,
        /// Lower divergence boundary for the power-positive family.
        sigma_boundary_lower: Option<f64>,
    },
    #[error(
        "integrand grows over the tail of the time grid (tail ratio {tail_ratio:.3e}); \
         the wealth integral appears divergent"
    )]
    DivergenceDetected { tail_ratio: f64 },
    #[error(
        "fixed quadrature rule ({fixed:.9e}) and adaptive check ({check:.9e}) disagree \
         beyond rel_tol (relative difference {rel_diff:.3e})"
    )]
    ToleranceNotMet { fixed: f64, check: f64, rel_diff: f64 },
    #[error("invalid quadrature configuration: {0}")]
    InvalidConfig(String),
}

fn divergence_message(
    class: &ConvergenceClass,
    denominator: &f64,
    sigma_c: &Option<f64>,
    sigma_boundary_lower: &Option<f64>,
) -> String {
    let mut msg = format!(
        "value function diverges ({class}): integrand decay rate {denominator:.6e} <= 0"
    );
    if let Some(sc) = sigma_c {
        msg.push_str(&format!("; critical volatility sigma_c = {sc:.17}"));
    }
    if let Some(lo) = sigma_boundary_lower {
        msg.push_str(&format!(
            "; converges only above the divergence boundary sigma = {lo:.17}"
        ));
    }
    msg
}
