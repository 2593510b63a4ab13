//! Gravity-style regression engine: PPML and OLS with high-dimensional
//! fixed effects, plus the tax-elasticity estimators built on it.

// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity, clippy::too_many_arguments)]

pub mod absorb;
pub mod dataset;
pub mod error;
pub mod fit;
pub mod spec;

pub use dataset::Dataset;
pub use error::{EstimationError, Result};
pub use fit::{fit, FeEstimates, FitResult};
pub use spec::{Family, FixedEffect, RegressionSpec, INTERCEPT};
pub mod elasticities;
