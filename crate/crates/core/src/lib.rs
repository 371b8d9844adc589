//! Space-time interpolation with SPDE-driven Gaussian Markov random field
//! priors.

pub mod error;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod operator;
pub mod parallel;
pub mod precision;
pub mod rng;
pub mod sparse;
pub mod state_space;

pub use error::{Error, Result};
pub use grid::{Field, SpaceTimeGrid, Trajectory};
pub mod dense;
pub mod estimation;
pub mod experiment;
pub mod oi;
pub mod optim;
pub mod solver;
pub mod uncertainty;
