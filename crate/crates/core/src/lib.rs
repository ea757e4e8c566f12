//! Monte Carlo solvers for backward stochastic Volterra integral equations
//! with jumps, their closed-form linear case, and the dynamic convex risk
//! measures they induce.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common `f64` instantiations.

pub mod dsl;
pub mod scalar;

pub mod quadrature;
pub mod regression;
pub mod stochastic;

pub mod estimate;
pub mod girsanov;
pub mod linear;
pub mod resolvent;
pub mod terminal;

pub mod driver;
pub mod oracle;
pub mod solver;

pub mod comparison;
pub mod risk;
pub mod semimartingale;

pub use scalar::Scalar;

pub type TimeGrid64 = stochastic::TimeGrid<f64>;
pub type PathBundle64 = stochastic::PathBundle<f64>;
pub type SolutionSurface64 = solver::SolutionSurface<f64>;
pub type NodeEstimate64 = estimate::NodeEstimate<f64>;
pub type LinearSolution64 = linear::LinearSolution<f64>;
pub type ResolventTable64 = resolvent::ResolventTable<f64>;

pub type TimeGrid32 = stochastic::TimeGrid<f32>;
pub type PathBundle32 = stochastic::PathBundle<f32>;
pub type SolutionSurface32 = solver::SolutionSurface<f32>;
