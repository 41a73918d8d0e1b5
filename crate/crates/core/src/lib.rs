//! Numerical laboratory for layer potentials of elliptic operators
//! `L_eps = -div(A(x/eps) grad)` with periodic, Holder continuous coefficients.
//!
//! The crate is organized bottom-up:
//!
//! * [`coeff`] periodic coefficient fields and the family `A^s = sA + (1-s)I`;
//! * [`cell`] spectral correctors and the homogenized matrix;
//! * [`kernel`] constant-coefficient fundamental solutions and the two-scale
//!   approximation of the oscillating fundamental solution;
//! * [`geom`] panelized boundaries, graph patches and nontangential sampling;
//! * [`layer`] layer potentials and Nystrom boundary operators;
//! * [`bvp`] Dirichlet, Neumann and regularity solvers and the estimate harness;
//! * [`fem`] an independent finite element oracle.

pub mod bvp;
pub mod cell;
pub mod coeff;
pub mod error;
pub mod fem;
pub mod field;
pub mod geom;
pub mod io;
pub mod kernel;
pub mod layer;
pub mod linalg;
pub mod quad;
pub mod small;

pub use error::{Error, Result};
pub use small::{Mat, Point, Vector};
