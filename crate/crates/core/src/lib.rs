pub mod benchmark;
pub mod error;
pub mod features;
pub mod gtilde;
pub mod integrals;
pub mod laplace;
pub mod lattice;
pub mod predict;
pub mod quadrature;
pub mod simulation;
pub mod training;
pub mod window;

pub use error::{Error, Result};
