//! Gain selection and the numerical certificate behind it.

use thiserror::Error;

use crate::control_law::ControlError;
use crate::normal_form::ModelError;

mod bounded_real;
mod bounds;
mod certificate;
mod thresholds;
mod linear;

pub use bounded_real::*;
pub use bounds::*;
pub use certificate::*;
pub use thresholds::*;
pub use linear::*;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("invalid design input: {0}")]
    Invalid(String),
    #[error("matrix is not Hurwitz (max real part {0:e})")]
    NotHurwitz(f64),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("gain overflow: {0}")]
    Overflow(String),
    #[error("bounded-real certificate failed: {0}")]
    BoundedReal(String),
    #[error("certificate check failed: {0}")]
    Certificate(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Model(#[from] ModelError),
}
