//! Numerical tools for stationary integral varifolds.

pub mod approx;
pub mod error;
pub mod excess;
pub mod grassmann;
pub mod models;
pub mod numerics;
pub mod qvalued;
pub mod regularity;
pub mod testfn;
pub mod varifold;

pub use error::{Error, Result};
