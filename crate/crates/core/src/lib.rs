//! Equilibrium-matching action decoding.
//!
//! A time-free conditional vector field `f(A; c)` is trained so that
//! demonstration action chunks are its equilibria. Decoding solves
//! `f(A; c) = 0` with a Nesterov-accelerated iteration that stops on a
//! normalized residual threshold and can be warm-started from the previous
//! control cycle. A time-conditioned flow-matching field with an Euler
//! sampler serves as the fixed-budget baseline.
//!
//! Modules, bottom up:
//! - [`chunk`]: action chunks, conditions, interpolant, normalized residual
//! - [`field`]: MLP field with exact parameter gradients, analytic test fields
//! - [`training`]: objectives, dataset normalization, training loop
//! - [`solver`]: equilibrium solver, warm/cold starts, Euler sampler
//! - [`analysis`]: local convergence bounds checked on analytic fields
//! - [`envs`] and [`policy`]: toy tasks, scripted experts, closed-loop runner
//! - [`formats`]: checkpoint and dataset files

// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod chunk;
pub mod envs;
pub mod error;
pub mod field;
pub mod formats;
pub mod policy;
pub mod solver;
pub mod training;

pub use chunk::{make_interpolant, normalized_residual, ActionChunk, Condition, Interpolant};
pub use error::{Error, Result};
pub use field::{field_forward, init_params, AnalyticField, FieldConfig, FieldParams, TimeVectorField, VectorField};
pub use solver::{solve_equilibrium, SolverConfig, SolverTrace, StopReason};
