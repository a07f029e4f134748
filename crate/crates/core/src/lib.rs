//! Monotone finite-difference laboratory for fully nonlinear elliptic
//! equations `ω(x) F(D²u, x) = f` whose weight `ω` vanishes on a
//! hypersurface.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod envelopes;
pub mod error;
pub mod estimates;
pub mod expr;
pub mod lattice;
pub mod operators;
pub mod regularity;
pub mod scenario;
pub mod solver;

pub use error::{Error, Result};
pub use expr::Expr;
pub use lattice::{build_grid, sample_field, Field, Grid, Interface, Monomial, WeightSpec};
