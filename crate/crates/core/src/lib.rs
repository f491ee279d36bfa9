//! Solver and verifier for open-loop equilibrium controls of time-inconsistent
//! conditional mean-field stochastic linear-quadratic problems.

pub mod cli;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod simulate;
pub mod oracle;
pub mod verify;

pub use error::{Error, Result};
