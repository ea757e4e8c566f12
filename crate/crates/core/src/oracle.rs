//! Brute-force nested Monte Carlo for `Y(0)` on very coarse grids.
//!
//! Conditional expectations are sample means over freshly simulated sub-trees
//! instead of regressions, so this estimator shares no approximation with the
//! regression solver beyond the time discretization. Every tree node carries
//! the row values `V_i = E[±ψ(t_i) + Σ_{j ≥ l} g(t_i, t_j, ...) Δ | node]` for
//! all rows `i ≤ l`; `Z` and `u` come from covariances of the children's
//! values with their increments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::driver::Driver;
use crate::dsl::{Env, EvalError, Var};
use crate::linear::TerminalSign;
use crate::scalar::{mean_and_stderr, Scalar};
use crate::stochastic::{DiffusionModel, JumpModel, StochasticError, TimeGrid};
use crate::terminal::TerminalProcess;

/// Largest grid the oracle accepts.
pub const MAX_STEPS: usize = 4;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle grids have at most {MAX_STEPS} steps, got {0}")]
    Steps(usize),
    #[error("branching must be at least 2, got {0}")]
    Branching(usize),
    #[error("need at least 2 replications, got {0}")]
    Replications(usize),
    #[error("{required} leaves exceed the cap of {cap}")]
    Capacity { required: f64, cap: u64 },
    #[error("evaluation failed at level {level}: {source}")]
    Evaluation {
        level: usize,
        #[source]
        source: EvalError,
    },
    #[error(transparent)]
    Stochastic(#[from] StochasticError),
    #[error("diagonal fixed point did not converge at level {0}")]
    FixedPoint(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct OracleOptions {
    pub branching: usize,
    pub replications: usize,
    pub seed: u64,
    /// Cap on `branching^N · replications`.
    pub max_leaves: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            branching: 10,
            replications: 200,
            seed: 0,
            max_leaves: 50_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct OracleEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub replications: usize,
    pub leaves: u64,
}

struct Tree<'a, T> {
    driver: &'a Driver,
    psi: &'a TerminalProcess,
    sign: T,
    grid: TimeGrid<T>,
    diffusion: &'a DiffusionModel,
    jumps: &'a JumpModel,
    poisson: Option<Poisson<f64>>,
    /// `∫ w_m dν`
    weight_means: Vec<T>,
    branching: usize,
}

struct Child<T> {
    db: T,
    dn: Vec<T>,
    values: Vec<T>,
}

impl<T: Scalar> Tree<'_, T> {
    fn eval_err(level: usize) -> impl Fn(EvalError) -> OracleError {
        move |source| OracleError::Evaluation { level, source }
    }

    /// Row values `V_0..=V_l` at a node whose state history is `xs = X_0..=X_l`.
    fn visit(&self, xs: &mut Vec<T>, rng: &mut ChaCha8Rng) -> Result<Vec<T>, OracleError> {
        let level = xs.len() - 1;
        let n = self.grid.steps();
        if level == n {
            let xe = xs[n];
            return (0..=n)
                .map(|i| {
                    self.psi
                        .eval(self.grid.node(i), xe, xs[i])
                        .map(|v| self.sign * v)
                        .map_err(Self::eval_err(level))
                })
                .collect();
        }

        let dt = self.grid.dt();
        let t_l = self.grid.node(level);
        let x_l = xs[level];
        let (drift, vol) = self.diffusion.coefficients(t_l, x_l).map_err(Self::eval_err(level))?;
        let m = self.driver.weight_count();
        let mut children = Vec::with_capacity(self.branching);
        for _ in 0..self.branching {
            let z: f64 = StandardNormal.sample(rng);
            let db = dt.sqrt() * T::lit(z);
            let mut dn: Vec<T> = self.weight_means.iter().map(|&mu| -mu * dt).collect();
            if let Some(poisson) = &self.poisson {
                let count = poisson.sample(rng) as usize;
                for _ in 0..count {
                    let mark = self.jumps.marks.sample(rng);
                    let env = Env::new().with(Var::Zeta, T::lit(mark));
                    for (slot, w) in dn.iter_mut().zip(&self.driver.jump_weights) {
                        *slot += w.eval(&env).map_err(Self::eval_err(level))?;
                    }
                }
            }
            let next = x_l + drift * dt + vol * db;
            if !next.is_finite() {
                return Err(OracleError::Evaluation {
                    level,
                    source: EvalError::NonFinite { op: "euler step" },
                });
            }
            xs.push(next);
            let values = self.visit(xs, rng)?;
            xs.pop();
            children.push(Child { db, dn, values });
        }

        let bf = T::from_usize_lossy(self.branching);
        let correction = bf / (bf - T::one()) / dt;
        let estimates = |i: usize| {
            let mean = children.iter().map(|c| c.values[i]).sum::<T>() / bf;
            let z = children.iter().map(|c| (c.values[i] - mean) * c.db).sum::<T>() / bf * correction;
            let u: Vec<T> = (0..m)
                .map(|k| children.iter().map(|c| (c.values[i] - mean) * c.dn[k]).sum::<T>() / bf * correction)
                .collect();
            (mean, z, u)
        };

        // the diagonal first: Y(t_l) solves y = mean + g(t_l, t_l, y, ...) Δ
        let (mean_l, z_l, u_l) = estimates(level);
        let g_at = |y: T| self.driver.eval(t_l, t_l, y, z_l, &u_l, x_l, x_l).map_err(Self::eval_err(level));
        let mut y = mean_l + g_at(mean_l)? * dt;
        if self.driver.depends_on_y() {
            let mut converged = false;
            for _ in 0..500 {
                let next = mean_l + g_at(y)? * dt;
                let done = (next - y).abs() <= T::lit(1e-13) * (T::one() + y.abs());
                y = next;
                if done {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(OracleError::FixedPoint(level));
            }
        }

        let mut out = Vec::with_capacity(level + 1);
        for i in 0..level {
            let (mean, z, u) = estimates(i);
            let g = self
                .driver
                .eval(self.grid.node(i), t_l, y, z, &u, x_l, xs[i])
                .map_err(Self::eval_err(level))?;
            out.push(mean + g * dt);
        }
        out.push(y);
        Ok(out)
    }
}

/// Estimate of `Y(0)` with its standard error over independent trees.
pub fn nested_mc_oracle<T: Scalar>(
    driver: &Driver,
    psi: &TerminalProcess,
    sign: TerminalSign,
    grid: TimeGrid<T>,
    jumps: &JumpModel,
    diffusion: &DiffusionModel,
    opts: &OracleOptions,
) -> Result<OracleEstimate, OracleError> {
    let n = grid.steps();
    if n > MAX_STEPS {
        return Err(OracleError::Steps(n));
    }
    if opts.branching < 2 {
        return Err(OracleError::Branching(opts.branching));
    }
    if opts.replications < 2 {
        return Err(OracleError::Replications(opts.replications));
    }
    let required = (opts.branching as f64).powi(n as i32) * opts.replications as f64;
    if required > opts.max_leaves as f64 {
        return Err(OracleError::Capacity {
            required,
            cap: opts.max_leaves,
        });
    }
    let lambda_dt = jumps.intensity * grid.dt().to_f64_lossy();
    let poisson = if lambda_dt > 0.0 && driver.weight_count() > 0 {
        Some(Poisson::new(lambda_dt).map_err(|e| StochasticError::Jump(e.to_string()))?)
    } else {
        None
    };
    let weight_means = if poisson.is_some() {
        driver
            .jump_weights
            .iter()
            .map(|w| jumps.integrate_weight(w).map(T::lit))
            .collect::<Result<Vec<T>, _>>()?
    } else {
        vec![T::zero(); driver.weight_count()]
    };
    let tree = Tree {
        driver,
        psi,
        sign: T::lit(sign.value()),
        grid,
        diffusion,
        jumps,
        poisson,
        weight_means,
        branching: opts.branching,
    };
    let samples: Vec<T> = (0..opts.replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64);
            let mut xs = vec![T::lit(diffusion.x0)];
            tree.visit(&mut xs, &mut rng).map(|v| v[0])
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_, _>>()?;
    let (mean, stderr) = mean_and_stderr(&samples);
    Ok(OracleEstimate {
        mean: mean.to_f64_lossy(),
        stderr: stderr.to_f64_lossy(),
        replications: opts.replications,
        leaves: required as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::MarkDistribution;

    fn grid(n: usize) -> TimeGrid<f64> {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn zero_driver_is_plain_expectation() {
        let diff = DiffusionModel::parse(1.0, "0", "0.3*x").unwrap();
        let psi = TerminalProcess::parse("x^2").unwrap();
        let opts = OracleOptions {
            branching: 6,
            replications: 400,
            seed: 1,
            ..Default::default()
        };
        let est = nested_mc_oracle(&Driver::zero(), &psi, TerminalSign::Plus, grid(3), &JumpModel::none(), &diff, &opts).unwrap();
        // Euler: E[X_T^2] = (1 + 0.09/3)^3
        let exact = (1.0 + 0.09 / 3.0f64).powi(3);
        assert!((est.mean - exact).abs() <= 3.0 * est.stderr, "{est:?} vs {exact}");
    }

    #[test]
    fn constant_driver_adds_horizon() {
        let d = Driver::parse("0.4", &[], 0.0).unwrap();
        let psi = TerminalProcess::parse("x").unwrap();
        let opts = OracleOptions {
            branching: 4,
            replications: 300,
            seed: 2,
            ..Default::default()
        };
        let est = nested_mc_oracle(&d, &psi, TerminalSign::Plus, grid(2), &JumpModel::none(), &DiffusionModel::brownian(0.5), &opts)
            .unwrap();
        assert!((est.mean - 0.9).abs() <= 3.0 * est.stderr + 1e-12, "{est:?}");
    }

    #[test]
    fn linear_z_driver_matches_discrete_girsanov() {
        let d = Driver::parse("0.5*z + 0.3*u1", &["1"], 0.5).unwrap();
        let psi = TerminalProcess::parse("x").unwrap();
        let jumps = JumpModel::new(1.0, MarkDistribution::Point { value: 1.0 }).unwrap();
        let opts = OracleOptions {
            branching: 8,
            replications: 400,
            seed: 3,
            ..Default::default()
        };
        let est = nested_mc_oracle(&d, &psi, TerminalSign::Plus, grid(2), &jumps, &DiffusionModel::brownian(0.0), &opts).unwrap();
        assert!((est.mean - 0.5).abs() <= 3.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn guards() {
        let psi = TerminalProcess::constant(1.0);
        let none = JumpModel::none();
        let bm = DiffusionModel::brownian(0.0);
        let z = Driver::zero();
        let opts = OracleOptions::default();
        assert!(matches!(
            nested_mc_oracle(&z, &psi, TerminalSign::Plus, grid(5), &none, &bm, &opts),
            Err(OracleError::Steps(5))
        ));
        let big = OracleOptions {
            branching: 1000,
            ..opts
        };
        assert!(matches!(
            nested_mc_oracle(&z, &psi, TerminalSign::Plus, grid(4), &none, &bm, &big),
            Err(OracleError::Capacity { .. })
        ));
    }
}
