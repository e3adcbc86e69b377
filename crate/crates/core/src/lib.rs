//! Numerical laboratory for global solutions of the thin obstacle problem
//! for `L_a = div(|z|^a grad)`: grid discretization, a-harmonic polynomial
//! algebra, projected relaxation, Riesz potentials, and the map
//! `p -> p + v_p` with its inverse.

pub mod apoly;
pub mod error;
pub mod io;
pub mod obstacle_solver;
pub mod potential;
pub mod smap;
pub mod verify;
pub mod weighted_grid;

pub use error::{Error, Result};
