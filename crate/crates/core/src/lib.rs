//! Continuous-time trajectory estimation with Gaussian-process motion priors
//! expressed as factor graphs.
//!
//! The crate covers linear priors on vector spaces (exact discretization, chain
//! solves, queries at arbitrary times) and white-noise-on-acceleration priors on
//! SE(2)/SE(3), together with interpolation factors that let a graph carry only a
//! subset of the states it has measurements for.

pub mod chain;
pub mod datasets;
pub mod error;
pub mod gaussian;
pub mod interp;
pub mod lie;
pub mod lie_ct;
pub mod linalg;
pub mod lti;
pub mod metrics;
pub mod par;
pub mod query;

pub use error::{Error, Result};
pub use gaussian::Key;
