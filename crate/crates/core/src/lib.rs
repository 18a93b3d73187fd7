pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod features;
pub mod inference;
pub mod linalg;
pub mod outcome;
pub mod policy;
pub mod propensity;
pub mod quadrature;
pub mod simlab;

pub use error::{Error, ErrorClass, Result};
