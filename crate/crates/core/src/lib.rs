//! Federated learning with frozen hyperbolic class prototypes.
//!
//! Clients embed inputs into the Poincaré ball and pull them toward fixed,
//! uniformly spread class prototypes with a triplet hinge. The server
//! combines client updates either by data-weighted averaging or by the
//! min-norm consistent update over client deviations.

pub mod aggregation;
pub mod data;
pub mod error;
pub mod federation;
pub mod learner;
pub mod poincare;
pub mod prototypes;

pub use error::{Error, Result};
