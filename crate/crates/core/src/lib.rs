//! Multinomial-logit assortment planning primitives.
//!
//! [`choice`] holds the catalog and the MNL model, [`optimizer`] solves the
//! expected-revenue maximization exactly under cardinality, inclusion and
//! exclusion constraints, and [`estimation`] turns purchase data into MNL
//! parameters.

pub mod choice;
pub mod estimation;
pub mod optimizer;

pub use choice::{
    choice_probability, expected_revenue, Assortment, Catalog, ChoiceError, MnlParameters, Product,
    ProductId,
};
pub use estimation::{
    estimate_frequency, estimate_mle, simulate_choices, EstimationError, MleFit, MleOptions,
    OfferSetObservation, TransactionRecord,
};
pub use optimizer::{
    brute_force_optimal, optimize_constrained, optimize_unconstrained, whatif_revenue, Algorithm,
    ConstraintSet, OptimizationResult, OptimizeError,
};

/// Absolute tolerance used for floating point equality throughout the crate.
pub const EPS: f64 = 1e-12;
