//! Genuine wealth for an economy with multiplicative stochastic capital
//! accumulation: the value function, accounting prices, and the volatility
//! correction to wealth changes, evaluated by three mutually cross-validating
//! backends (closed form, Gaussian quadrature, Monte Carlo).

pub mod closed_form;
pub mod econ;
mod error;
pub mod monte_carlo;
pub mod policy;
pub mod quadrature;

pub mod cli;

pub use econ::{
    apply_depreciation, utility_derivatives, validate, ConvergenceClass, ConvergenceInfo,
    EconomyParams, ParamError, ScaledUtility, Utility, UtilityFn, ValueReport,
};
pub use error::EvalError;
