//! Input autocorrelation recovery, autoregressive input modeling and
//! state estimation for linear systems driven by unknown colored inputs.

pub mod armodel;
pub mod autocorr;
pub mod bench;
pub mod error;
pub mod filtering;
pub mod linalg;
pub mod lti;
pub mod realization;
pub mod recovery;
pub mod rng;
pub mod serial;

pub use error::{Error, Result};
