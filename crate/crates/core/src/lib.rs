//! One-shot entropies, measurement compression and distributed purity
//! distillation on small finite-dimensional systems.

pub mod error;
pub mod linalg;
pub mod random;
pub mod states;
pub mod entropy;
pub mod povm;
pub mod protocols;
pub mod bounds;

pub use error::{Error, Result};
