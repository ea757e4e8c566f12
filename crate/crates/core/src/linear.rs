//! Linear BSVIEs with jumps,
//! `Y(t) = ±ψ(t) + ∫_t^T (α(t,s) Y(s) + β(s) Z(t,s) + ∫ θ(s,ζ) K(t,s,ζ) ν(dζ)) ds - ...`,
//! evaluated by the closed formula
//! `Y(t) = E[M(T) {ψ(t) + ∫_t^T Φ(t,r) ψ(r) dr} | F_t] / E[M(T) | F_t]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::NodeEstimate;
use crate::girsanov::{
    q_conditional_ratio, stochastic_exponential, DenominatorMode, DensityPath, GirsanovCoefficients, GirsanovError,
};
use crate::regression::{RegressionBasis, RegressionError};
use crate::resolvent::{convolve, resolvent, Kernel, ResolventError, ResolventSummary};
use crate::scalar::{mean_and_stderr, Scalar};
use crate::stochastic::PathBundle;
use crate::terminal::{TerminalError, TerminalProcess};

#[derive(Debug, Error)]
pub enum LinearError {
    #[error(transparent)]
    Resolvent(#[from] ResolventError),
    #[error(transparent)]
    Girsanov(#[from] GirsanovError),
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error("regression at node {node}: {source}")]
    Regression {
        node: usize,
        #[source]
        source: RegressionError,
    },
}

/// Whether the terminal process enters as `+ψ` or `-ψ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalSign {
    #[default]
    Plus,
    Minus,
}

impl TerminalSign {
    pub fn value(self) -> f64 {
        match self {
            TerminalSign::Plus => 1.0,
            TerminalSign::Minus => -1.0,
        }
    }

    pub fn from_integer(v: i64) -> Option<Self> {
        match v {
            1 => Some(TerminalSign::Plus),
            -1 => Some(TerminalSign::Minus),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearBSVIE {
    pub kernel: Kernel,
    pub girsanov: GirsanovCoefficients,
    pub terminal: TerminalProcess,
    pub sign: TerminalSign,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearOptions {
    pub basis: RegressionBasis,
    pub mode: DenominatorMode,
    /// Truncation tolerance of the resolvent series.
    pub tol: f64,
}

impl Default for LinearOptions {
    fn default() -> Self {
        LinearOptions {
            basis: RegressionBasis::default(),
            mode: DenominatorMode::default(),
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearSolution<T> {
    pub nodes: Vec<NodeEstimate<T>>,
    /// Absent when `α = 0` and the resolvent was skipped.
    pub resolvent: Option<ResolventSummary>,
    /// Fits of `E[M(T) | state]` (estimated-denominator mode only).
    pub denominators: Vec<Option<crate::regression::RegressionFit<T>>>,
}

pub fn solve_linear<T: Scalar>(
    prob: &LinearBSVIE,
    bundle: &PathBundle<T>,
    opts: &LinearOptions,
) -> Result<LinearSolution<T>, LinearError> {
    let grid = bundle.grid();
    let n = grid.steps();
    let sign = T::lit(prob.sign.value());
    let psi = prob.terminal.values(bundle)?;

    let (payoffs, summary) = if prob.kernel.is_zero() {
        (psi, None)
    } else {
        let phi = resolvent(&prob.kernel, grid, opts.tol)?;
        let conv = convolve(&phi, &psi);
        let total = psi
            .iter()
            .zip(&conv)
            .map(|(a, b)| a.iter().zip(b).map(|(&u, &v)| u + v).collect())
            .collect::<Vec<Vec<T>>>();
        (total, Some(phi.summary()))
    };

    let density = if prob.girsanov.is_trivial() {
        DensityPath::ones(n, bundle.n_paths())
    } else {
        stochastic_exponential(&prob.girsanov, bundle)?
    };

    let results: Vec<Result<(NodeEstimate<T>, Option<_>), LinearError>> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let payoff: Vec<T> = payoffs[i].iter().map(|&v| sign * v).collect();
            let t = grid.node(i);
            if i == n {
                let (mean, stderr) = mean_and_stderr(&payoff);
                return Ok((
                    NodeEstimate {
                        t,
                        values: payoff,
                        fit: None,
                        mean,
                        stderr,
                    },
                    None,
                ));
            }
            // X(t) is a sufficient state: given F_t, M(T)/M(t) and the payoff
            // depend on the past only through X(t), and the factor M(t)
            // cancels between numerator and denominator
            let r = q_conditional_ratio(&payoff, &density, i, &[bundle.x(i)], opts.basis, opts.mode).map_err(|e| match e {
                GirsanovError::Regression(source) => LinearError::Regression { node: i, source },
                other => LinearError::Girsanov(other),
            })?;
            Ok((
                NodeEstimate {
                    t,
                    values: r.values,
                    fit: r.numerator,
                    mean: r.mean,
                    stderr: r.stderr,
                },
                r.denominator,
            ))
        })
        .collect();
    let mut nodes = Vec::with_capacity(n + 1);
    let mut denominators = Vec::with_capacity(n + 1);
    for r in results {
        let (node, den) = r?;
        nodes.push(node);
        denominators.push(den);
    }
    Ok(LinearSolution {
        nodes,
        resolvent: summary,
        denominators,
    })
}
