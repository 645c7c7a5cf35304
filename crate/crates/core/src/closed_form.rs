//! Exact formulas for the three constant-elasticity families: the value
//! function, accounting price, second capital derivative, volatility
//! derivative, critical volatility, and the optimal consumption rate.

use crate::econ::{
    convergence_info, ConvergenceClass, EconomyParams, Utility, ValueReport,
};
use crate::error::EvalError;

/// Closed-form evaluation at one parameter point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormResult {
    pub report: ValueReport,
    /// Critical volatility; present for the power-negative family only.
    pub sigma_c: Option<f64>,
    /// Optimal consumption rate for this family.
    pub nu_star: f64,
    /// The parameter point sits inside the near-boundary warning band.
    pub near_boundary: bool,
}

fn check_convergent(params: &EconomyParams, utility: &Utility) -> Result<(f64, bool), EvalError> {
    let info = convergence_info(params, utility);
    if info.class != ConvergenceClass::Convergent {
        return Err(EvalError::Divergent {
            class: info.class,
            denominator: info.denominator,
            sigma_c: info.sigma_c,
            sigma_boundary_lower: info.sigma_boundary_lower,
        });
    }
    Ok((info.denominator, info.near_boundary))
}

/// u(c) = -c^-gamma. V = -(nu k0)^-gamma / D with
/// D = delta + gamma(mu-nu) - gamma(1+gamma) sigma^2/2.
pub fn value_power_neg(params: &EconomyParams, gamma: f64) -> Result<ClosedFormResult, EvalError> {
    let utility = Utility::PowerNeg { gamma };
    let (d, near_boundary) = check_convergent(params, &utility)?;
    let a = (params.nu * params.k0).powf(-gamma);
    let value = -a / d;
    let accounting_price = gamma * a / (params.k0 * d); // = -gamma V / k0
    let second_derivative = gamma * (1.0 + gamma) * value / (params.k0 * params.k0);
    let dv_dsigma = -gamma * (1.0 + gamma) * params.sigma * a / (d * d);
    let nu_star =
        (params.delta + gamma * params.mu) / (1.0 + gamma) - 0.5 * gamma * params.sigma * params.sigma;
    Ok(ClosedFormResult {
        report: ValueReport::from_parts(value, accounting_price, second_derivative, dv_dsigma, params),
        sigma_c: crate::econ::sigma_critical(params, gamma),
        nu_star,
        near_boundary,
    })
}

/// u(c) = c^beta. V = (nu k0)^beta / D with
/// D = delta - beta(mu-nu) + beta(1-beta) sigma^2/2.
pub fn value_power_pos(params: &EconomyParams, beta: f64) -> Result<ClosedFormResult, EvalError> {
    let utility = Utility::PowerPos { beta };
    let (d, near_boundary) = check_convergent(params, &utility)?;
    let b = (params.nu * params.k0).powf(beta);
    let value = b / d;
    let accounting_price = beta * value / params.k0;
    let second_derivative = beta * (beta - 1.0) * value / (params.k0 * params.k0);
    let dv_dsigma = -beta * (1.0 - beta) * params.sigma * b / (d * d);
    let nu_star =
        (params.delta - beta * params.mu) / (1.0 - beta) + 0.5 * beta * params.sigma * params.sigma;
    Ok(ClosedFormResult {
        report: ValueReport::from_parts(value, accounting_price, second_derivative, dv_dsigma, params),
        sigma_c: None,
        nu_star,
        near_boundary,
    })
}

/// u(c) = ln c. V = ln(nu k0)/delta + (mu - nu - sigma^2/2)/delta^2; always
/// convergent.
pub fn value_log(params: &EconomyParams) -> Result<ClosedFormResult, EvalError> {
    let (_, near_boundary) = check_convergent(params, &Utility::Log)?;
    let delta = params.delta;
    let value = (params.nu * params.k0).ln() / delta + params.log_drift() / (delta * delta);
    let accounting_price = 1.0 / (delta * params.k0);
    let second_derivative = -1.0 / (delta * params.k0 * params.k0);
    let dv_dsigma = -params.sigma / (delta * delta);
    Ok(ClosedFormResult {
        report: ValueReport::from_parts(value, accounting_price, second_derivative, dv_dsigma, params),
        sigma_c: None,
        nu_star: delta,
        near_boundary,
    })
}

/// Dispatch on the family.
pub fn evaluate(params: &EconomyParams, utility: &Utility) -> Result<ClosedFormResult, EvalError> {
    match *utility {
        Utility::PowerNeg { gamma } => value_power_neg(params, gamma),
        Utility::PowerPos { beta } => value_power_pos(params, beta),
        Utility::Log => value_log(params),
    }
}

/// Analytic dV/dsigma for the family; strictly negative for sigma > 0.
pub fn dv_dsigma(params: &EconomyParams, utility: &Utility) -> Result<f64, EvalError> {
    Ok(evaluate(params, utility)?.report.dv_dsigma)
}

/// Closed-form optimal consumption rate (independent of params.nu except
/// through no channel at all for these families).
pub fn nu_star(params: &EconomyParams, utility: &Utility) -> f64 {
    match *utility {
        Utility::PowerNeg { gamma } => {
            (params.delta + gamma * params.mu) / (1.0 + gamma)
                - 0.5 * gamma * params.sigma * params.sigma
        }
        Utility::PowerPos { beta } => {
            (params.delta - beta * params.mu) / (1.0 - beta)
                + 0.5 * beta * params.sigma * params.sigma
        }
        Utility::Log => params.delta,
    }
}
