//! Domain types shared by every backend: the economy parameters, the CRRA
//! utility families with their first three derivatives, and the
//! convergence/divergence classification of the wealth integral.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative width of the band around a zero denominator in which results are
/// flagged as numerically unreliable.
pub const BOUNDARY_BAND: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("{name} must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("gamma must be positive for -c^-gamma utility, got {0}")]
    InvalidGamma(f64),
    #[error("beta must lie in the open interval (0, 1) for concavity, got {0}")]
    InvalidBeta(f64),
    #[error("depreciation rate must be non-negative and finite, got {0}")]
    InvalidDepreciation(f64),
    #[error("consumption must be positive, got {0}")]
    NonPositiveConsumption(f64),
}

/// The tuple (mu, sigma, nu, delta, k0) defining the economy: expected
/// production rate, volatility, consumption rate, discount rate, and the
/// initial capital stock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct EconomyParams {
    pub mu: f64,
    pub sigma: f64,
    pub nu: f64,
    pub delta: f64,
    pub k0: f64,
}

#[derive(Deserialize)]
struct RawParams {
    mu: f64,
    sigma: f64,
    nu: f64,
    delta: f64,
    k0: f64,
}

impl TryFrom<RawParams> for EconomyParams {
    type Error = ParamError;
    fn try_from(raw: RawParams) -> Result<Self, ParamError> {
        EconomyParams::new(raw.mu, raw.sigma, raw.nu, raw.delta, raw.k0)
    }
}

impl EconomyParams {
    pub fn new(mu: f64, sigma: f64, nu: f64, delta: f64, k0: f64) -> Result<Self, ParamError> {
        for (name, value) in [
            ("mu", mu),
            ("sigma", sigma),
            ("nu", nu),
            ("delta", delta),
            ("k0", k0),
        ] {
            if !value.is_finite() {
                return Err(ParamError::NonFinite { name, value });
            }
        }
        if sigma < 0.0 {
            return Err(ParamError::NegativeSigma(sigma));
        }
        for (name, value) in [("nu", nu), ("delta", delta), ("k0", k0)] {
            if value <= 0.0 {
                return Err(ParamError::NonPositive { name, value });
            }
        }
        Ok(Self {
            mu,
            sigma,
            nu,
            delta,
            k0,
        })
    }

    /// Drift of the log-capital process, mu - nu - sigma^2/2.
    pub fn log_drift(&self) -> f64 {
        self.mu - self.nu - 0.5 * self.sigma * self.sigma
    }

    /// Copy with a different consumption rate.
    pub fn with_nu(&self, nu: f64) -> Result<Self, ParamError> {
        Self::new(self.mu, self.sigma, nu, self.delta, self.k0)
    }

    /// Copy with a different volatility.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self, ParamError> {
        Self::new(self.mu, sigma, self.nu, self.delta, self.k0)
    }

    /// Copy with a different discount rate.
    pub fn with_delta(&self, delta: f64) -> Result<Self, ParamError> {
        Self::new(self.mu, self.sigma, self.nu, delta, self.k0)
    }

    /// Copy with a different initial capital stock.
    pub fn with_k0(&self, k0: f64) -> Result<Self, ParamError> {
        Self::new(self.mu, self.sigma, self.nu, self.delta, k0)
    }
}

/// A utility of consumption together with its first three derivatives.
///
/// The quadrature and Monte Carlo backends accept any implementor with
/// u''(c) < 0; the closed-form backend works on [`Utility`] only.
pub trait UtilityFn: Sync {
    fn value(&self, c: f64) -> f64;
    fn deriv1(&self, c: f64) -> f64;
    fn deriv2(&self, c: f64) -> f64;
    fn deriv3(&self, c: f64) -> f64;
}

/// The three constant-elasticity families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Utility {
    /// u(c) = -c^-gamma with gamma > 0.
    PowerNeg { gamma: f64 },
    /// u(c) = c^beta with 0 < beta < 1.
    PowerPos { beta: f64 },
    /// u(c) = ln c.
    Log,
}

impl Utility {
    pub fn power_neg(gamma: f64) -> Result<Self, ParamError> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(ParamError::InvalidGamma(gamma));
        }
        Ok(Utility::PowerNeg { gamma })
    }

    pub fn power_pos(beta: f64) -> Result<Self, ParamError> {
        if !(beta.is_finite() && beta > 0.0 && beta < 1.0) {
            return Err(ParamError::InvalidBeta(beta));
        }
        Ok(Utility::PowerPos { beta })
    }

    pub fn log() -> Self {
        Utility::Log
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Utility::PowerNeg { .. } => "power_neg",
            Utility::PowerPos { .. } => "power_pos",
            Utility::Log => "log",
        }
    }
}

impl UtilityFn for Utility {
    fn value(&self, c: f64) -> f64 {
        debug_assert!(c > 0.0);
        match *self {
            Utility::PowerNeg { gamma } => -c.powf(-gamma),
            Utility::PowerPos { beta } => c.powf(beta),
            Utility::Log => c.ln(),
        }
    }

    fn deriv1(&self, c: f64) -> f64 {
        debug_assert!(c > 0.0);
        match *self {
            Utility::PowerNeg { gamma } => gamma * c.powf(-gamma - 1.0),
            Utility::PowerPos { beta } => beta * c.powf(beta - 1.0),
            Utility::Log => 1.0 / c,
        }
    }

    fn deriv2(&self, c: f64) -> f64 {
        debug_assert!(c > 0.0);
        match *self {
            Utility::PowerNeg { gamma } => -gamma * (gamma + 1.0) * c.powf(-gamma - 2.0),
            Utility::PowerPos { beta } => beta * (beta - 1.0) * c.powf(beta - 2.0),
            Utility::Log => -1.0 / (c * c),
        }
    }

    fn deriv3(&self, c: f64) -> f64 {
        debug_assert!(c > 0.0);
        match *self {
            Utility::PowerNeg { gamma } => {
                gamma * (gamma + 1.0) * (gamma + 2.0) * c.powf(-gamma - 3.0)
            }
            Utility::PowerPos { beta } => beta * (beta - 1.0) * (beta - 2.0) * c.powf(beta - 3.0),
            Utility::Log => 2.0 / (c * c * c),
        }
    }
}

/// Utility with pre-scaled consumption, u_eff(x) = u(s * x). Derivatives come
/// from the chain rule, so the wrapper composes with every backend.
#[derive(Debug, Clone, Copy)]
pub struct ScaledUtility<U> {
    pub inner: U,
    pub scale: f64,
}

impl<U: UtilityFn> UtilityFn for ScaledUtility<U> {
    fn value(&self, c: f64) -> f64 {
        self.inner.value(self.scale * c)
    }
    fn deriv1(&self, c: f64) -> f64 {
        self.scale * self.inner.deriv1(self.scale * c)
    }
    fn deriv2(&self, c: f64) -> f64 {
        self.scale * self.scale * self.inner.deriv2(self.scale * c)
    }
    fn deriv3(&self, c: f64) -> f64 {
        self.scale.powi(3) * self.inner.deriv3(self.scale * c)
    }
}

/// u(c), u'(c), u''(c), u'''(c) at a single consumption level.
pub fn utility_derivatives<U: UtilityFn>(u: &U, c: f64) -> Result<(f64, f64, f64, f64), ParamError> {
    if !(c > 0.0) {
        return Err(ParamError::NonPositiveConsumption(c));
    }
    Ok((u.value(c), u.deriv1(c), u.deriv2(c), u.deriv3(c)))
}

/// Fold a depreciation rate into the economy: nu -> nu + rate, and consumption
/// entering utility is rescaled by (1 + rate/nu).
pub fn apply_depreciation<U: UtilityFn>(
    params: &EconomyParams,
    utility: U,
    rate: f64,
) -> Result<(EconomyParams, ScaledUtility<U>), ParamError> {
    if !(rate.is_finite() && rate >= 0.0) {
        return Err(ParamError::InvalidDepreciation(rate));
    }
    let adjusted = params.with_nu(params.nu + rate)?;
    let scale = 1.0 + rate / params.nu;
    Ok((
        adjusted,
        ScaledUtility {
            inner: utility,
            scale,
        },
    ))
}

/// Whether the wealth integral converges, and if not, in which direction it
/// diverges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceClass {
    Convergent,
    /// V -> -infinity: the integral is dominated by near-bankrupt paths.
    DivergentNegative,
    /// V -> +infinity: the integral is dominated by runaway growth.
    DivergentPositive,
}

impl std::fmt::Display for ConvergenceClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConvergenceClass::Convergent => write!(f, "convergent"),
            ConvergenceClass::DivergentNegative => write!(f, "divergent_negative"),
            ConvergenceClass::DivergentPositive => write!(f, "divergent_positive"),
        }
    }
}

/// Convergence classification plus the diagnostics the other modules need:
/// the decay rate of the discounted integrand and the distance to the
/// divergence boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceInfo {
    pub class: ConvergenceClass,
    /// Decay rate D of the discounted expected-utility integrand; the wealth
    /// integral converges iff D > 0. For the log family this is delta itself.
    pub denominator: f64,
    /// True when |D| is within [`BOUNDARY_BAND`] * (delta + |mu| + nu) of
    /// zero; quadrature loses accuracy there.
    pub near_boundary: bool,
    /// Critical volatility for the power-negative family (the sigma at which
    /// V -> -infinity), when the family has one.
    pub sigma_c: Option<f64>,
    /// For the power-positive family with delta < beta(mu - nu): the
    /// volatility below which V -> +infinity ("volatility smooths the
    /// divergence").
    pub sigma_boundary_lower: Option<f64>,
}

/// Decay rate of e^{-delta tau} E[u-type moment of C(tau)] for a family.
///
/// PowerNeg: D = delta + gamma(mu-nu) - gamma(1+gamma) sigma^2/2.
/// PowerPos: D = delta - beta(mu-nu) + beta(1-beta) sigma^2/2.
/// Log:      D = delta (always positive).
pub fn decay_rate(params: &EconomyParams, utility: &Utility) -> f64 {
    let spread = params.mu - params.nu;
    let half_var = 0.5 * params.sigma * params.sigma;
    match *utility {
        Utility::PowerNeg { gamma } => {
            params.delta + gamma * spread - gamma * (1.0 + gamma) * half_var
        }
        Utility::PowerPos { beta } => params.delta - beta * spread + beta * (1.0 - beta) * half_var,
        Utility::Log => params.delta,
    }
}

/// Critical volatility sigma_c for u = -c^-gamma; `None` when the family has
/// no finite boundary (delta + gamma(mu-nu) <= 0 means divergence at every
/// sigma, which cannot happen for valid nu > 0... it can when mu < nu).
pub fn sigma_critical(params: &EconomyParams, gamma: f64) -> Option<f64> {
    let num = 2.0 * (params.delta + gamma * (params.mu - params.nu));
    let den = gamma * (1.0 + gamma);
    if num > 0.0 {
        Some((num / den).sqrt())
    } else {
        None
    }
}

pub fn convergence_info(params: &EconomyParams, utility: &Utility) -> ConvergenceInfo {
    let d = decay_rate(params, utility);
    let scale = params.delta + params.mu.abs() + params.nu;
    let near_boundary = d.abs() < BOUNDARY_BAND * scale;
    let (class, sigma_c, sigma_boundary_lower) = match *utility {
        Utility::PowerNeg { gamma } => {
            let class = if d <= 0.0 {
                ConvergenceClass::DivergentNegative
            } else {
                ConvergenceClass::Convergent
            };
            (class, sigma_critical(params, gamma), None)
        }
        Utility::PowerPos { beta } => {
            let class = if d <= 0.0 {
                ConvergenceClass::DivergentPositive
            } else {
                ConvergenceClass::Convergent
            };
            let num = 2.0 * (beta * (params.mu - params.nu) - params.delta);
            let lower = if num > 0.0 {
                Some((num / (beta * (1.0 - beta))).sqrt())
            } else {
                None
            };
            (class, None, lower)
        }
        Utility::Log => (ConvergenceClass::Convergent, None, None),
    };
    ConvergenceInfo {
        class,
        denominator: d,
        near_boundary,
        sigma_c,
        sigma_boundary_lower,
    }
}

/// Convergence class of the wealth integral for a known family.
pub fn validate(params: &EconomyParams, utility: &Utility) -> ConvergenceClass {
    convergence_info(params, utility).class
}

/// Everything the model says about a single parameter point: the value
/// function, its capital derivatives, and the split of dV/dt into the
/// accounting-price term and the volatility correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValueReport {
    /// V, discounted expected utility of the consumption flow.
    pub value: f64,
    /// p = dV/dk0.
    pub accounting_price: f64,
    /// d^2 V / dk0^2.
    pub second_derivative: f64,
    /// (sigma^2/2) k0^2 d^2V/dk0^2; non-positive under concave utility.
    pub ito_term: f64,
    /// (mu - nu) k0 p, the deterministic accounting estimate of dV/dt.
    pub price_term: f64,
    /// price_term + ito_term.
    pub dv_dt: f64,
    /// dV/dsigma at fixed consumption rate; non-positive under concave
    /// utility.
    pub dv_dsigma: f64,
}

impl ValueReport {
    /// Assemble from the independent pieces; dv_dt is the decomposition by
    /// definition.
    pub fn from_parts(
        value: f64,
        accounting_price: f64,
        second_derivative: f64,
        dv_dsigma: f64,
        params: &EconomyParams,
    ) -> Self {
        let ito_term =
            0.5 * params.sigma * params.sigma * params.k0 * params.k0 * second_derivative;
        let price_term = (params.mu - params.nu) * params.k0 * accounting_price;
        ValueReport {
            value,
            accounting_price,
            second_derivative,
            ito_term,
            price_term,
            dv_dt: price_term + ito_term,
            dv_dsigma,
        }
    }
}
