//! Per-node Monte Carlo estimates shared by the solvers.

use serde::Serialize;

use crate::regression::RegressionFit;
use crate::scalar::Scalar;

/// A conditional expectation at one grid node: per-path values of the
/// regression function, the function itself, and the P-mean with its error.
#[derive(Clone, Debug)]
pub struct NodeEstimate<T> {
    pub t: T,
    pub values: Vec<T>,
    /// `None` where the values are used as simulated (at the horizon).
    pub fit: Option<RegressionFit<T>>,
    pub mean: T,
    pub stderr: T,
}

impl<T: Scalar> NodeEstimate<T> {
    pub fn summary(&self) -> NodeSummary {
        NodeSummary {
            t: self.t.to_f64_lossy(),
            mean: self.mean.to_f64_lossy(),
            stderr: self.stderr.to_f64_lossy(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct NodeSummary {
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
}
