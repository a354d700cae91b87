//! Speaker-verification back-end: two-covariance PLDA with unsupervised
//! domain adaptation (CORAL, CORAL+, APLDA), Gaussian back-end fusion with
//! countermeasure scores, and EER evaluation.

mod binio;
pub mod adaptation;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod linalg;
pub mod plda;
pub mod protocol;
pub mod synth;

pub use error::{Error, Result};
