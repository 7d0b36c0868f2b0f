//! Membership-invariant subspace training (MIST) together with the
//! membership inference attacks and low-FPR metrics used to evaluate it.
//!
//! Everything runs on a small dense MLP engine in `f64`.

pub mod attacks;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod shadow;
pub mod train;

pub use error::{MistError, Result};
