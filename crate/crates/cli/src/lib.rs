//! Config-driven front end for the mean-field planning solvers: problem
//! assembly from density sources, solver runs with on-disk artifacts, the
//! 1D refinement study and variant benchmarks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod run;
pub mod sources;
pub mod study;
