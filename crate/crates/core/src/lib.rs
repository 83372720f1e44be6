//! Proximal-gradient solvers for mean-field planning, dynamic optimal
//! transport and potential mean-field games on staggered grids.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod costs;
pub mod grid;
pub mod multiscale;
pub mod poisson;
pub mod solver;
