//! Finite element discretization, solvers and stability analysis for stationary
//! discounted mean field games on the flat torus.

pub mod analyze;
pub mod error;
pub mod fem;
pub mod manufactured;
pub mod mesh;
pub mod mfg;
pub mod solve;
pub mod sparse;

pub use error::{Error, Result};
