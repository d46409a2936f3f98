//! Particle simulation and ergodicity diagnostics for reflecting
//! McKean-Vlasov SDEs on convex domains.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod particle;
pub mod pde;
pub mod rates;
pub mod rng;

pub use error::{Error, Result};
pub use geometry::{Domain, HalfSpace};
pub use metrics::EmpiricalMeasure;
pub use model::{BuiltinModel, ModelSpec};
