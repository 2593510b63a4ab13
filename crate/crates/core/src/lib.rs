//! Multinational production and profit-shifting equilibrium model.

// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity, clippy::too_many_arguments)]

pub mod calibrate;
pub mod choice;
pub mod country;
pub mod equilibrium;
pub mod frictions;
pub mod error;
pub mod hat;
pub mod io;
pub mod numerics;
pub mod regime;
pub mod scenarios;
pub mod serde_inf;
pub mod synthetic;
pub mod tensor;
pub mod triangulation;
pub mod world;

pub use country::CountrySet;
pub use error::{ModelError, Result};
pub use regime::{CarveOut, MinTax, RateCell, RateTable, Scope, TaxRegime, TaxingRights};
pub use tensor::Tensor3;
pub use world::{Elasticities, Violation, WorldCalibration};
