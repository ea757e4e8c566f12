//! Equations whose solutions are semimartingales by construction, no jumps
//! and a driver free of `z`:
//!
//! * type 1: `ψ(t) = F₁(X(t)) F₂(X(T))`, `g = 0`, so `Y(t) = F₁(X(t)) Ỹ(t)`
//!   with `Ỹ` the BSDE value of `F₂(X(T))`;
//! * type 2: `ψ(t) = F(X(t), X(T))`, `g = 0`, so `Y(t) = Ỹ(t, X(t))` for the
//!   family of BSDEs with the first argument frozen;
//! * type 3: as type 2 with a driver `g(X(t), X(s), Y(s))`, where the family
//!   is driven by the general solver's diagonal.
//!
//! Each construction is checked node-wise against the general solver on the
//! same paths. The frozen-argument family lives on Chebyshev points over the
//! bulk of the simulated states and is read off by cubic interpolation.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::driver::Driver;
use crate::dsl::{Env, EvalError, Expr, Var};
use crate::estimate::{NodeEstimate, NodeSummary};
use crate::linear::TerminalSign;
use crate::regression::{Projector, RegressionBasis, RegressionError};
use crate::scalar::{combined_stderr, mean_and_stderr, Scalar};
use crate::solver::{solve, SolutionSurface, SolverError, SolverOptions};
use crate::stochastic::PathBundle;
use crate::terminal::{TerminalError, TerminalProcess};

pub const DEFAULT_GRID_POINTS: usize = 21;

#[derive(Debug, Error)]
pub enum SemimartingaleError {
    #[error("these constructions exclude jumps, but the bundle has intensity {0}")]
    Jumps(f64),
    #[error("{role} may only use {allowed}, found `{var}`")]
    Variable {
        role: &'static str,
        allowed: &'static str,
        var: Var,
    },
    #[error("{role} has a non-finite second difference in `{var}` at {at}")]
    NotSmooth { role: &'static str, var: Var, at: f64 },
    #[error("interpolation needs at least 4 grid points, got {0}")]
    GridSize(usize),
    #[error("refinement needs at least 2 grids, got {0}")]
    Levels(usize),
    #[error("evaluation failed at node {node}, path {path}: {source}")]
    Evaluation {
        node: usize,
        path: usize,
        #[source]
        source: EvalError,
    },
    #[error("regression at node {node}: {source}")]
    Regression {
        node: usize,
        #[source]
        source: RegressionError,
    },
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

fn only(e: &Expr, role: &'static str, allowed_vars: &[Var], allowed: &'static str) -> Result<(), SemimartingaleError> {
    match e.variables().into_iter().find(|v| !allowed_vars.contains(v)) {
        Some(var) => Err(SemimartingaleError::Variable { role, allowed, var }),
        None => Ok(()),
    }
}

/// `F₁(x) F₂(y)`, both written in `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedTerminal {
    pub current: Expr,
    pub terminal: Expr,
}

impl FactorizedTerminal {
    pub fn new(current: Expr, terminal: Expr) -> Result<Self, SemimartingaleError> {
        only(&current, "F1", &[Var::X], "x")?;
        only(&terminal, "F2", &[Var::X], "x")?;
        Ok(FactorizedTerminal { current, terminal })
    }

    /// `ψ(t) = F₁(X(t)) F₂(X(T))`.
    pub fn process(&self) -> TerminalProcess {
        let first = self.current.substitute(Var::X, &Expr::var(Var::Xt));
        TerminalProcess::new(Expr::mul(first, self.terminal.clone())).expect("only x and xt")
    }
}

fn smoothness(e: &Expr, role: &'static str, vars: &[Var], range: (f64, f64)) -> Result<(), SemimartingaleError> {
    let (lo, hi) = range;
    let mid = 0.5 * (lo + hi);
    let h = 1e-3 * (hi - lo).max(1e-6);
    for &var in vars {
        for q in 0..=100 {
            let at = lo + (hi - lo) * q as f64 / 100.0;
            let f = |v: f64| {
                let mut env = Env::new();
                for &w in vars {
                    env.set(w, if w == var { v } else { mid });
                }
                e.eval(&env)
            };
            let second = match (f(at - h), f(at), f(at + h)) {
                (Ok(a), Ok(b), Ok(c)) => (a - 2.0 * b + c) / (h * h),
                _ => f64::NAN,
            };
            if !second.is_finite() {
                return Err(SemimartingaleError::NotSmooth { role, var, at });
            }
        }
    }
    Ok(())
}

/// Chebyshev points for the frozen argument.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct XGrid {
    pub points: Vec<f64>,
}

impl XGrid {
    pub fn chebyshev(lo: f64, hi: f64, count: usize) -> Result<Self, SemimartingaleError> {
        if count < 4 {
            return Err(SemimartingaleError::GridSize(count));
        }
        let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        let mut points: Vec<f64> = (0..count)
            .map(|k| mid - half * ((2 * k + 1) as f64 * std::f64::consts::PI / (2 * count) as f64).cos())
            .collect();
        points.sort_by(f64::total_cmp);
        Ok(XGrid { points })
    }

    /// Spans the 0.1% to 99.9% quantiles of the states at all nodes.
    pub fn from_bundle<T: Scalar>(bundle: &PathBundle<T>, count: usize) -> Result<Self, SemimartingaleError> {
        let mut pooled: Vec<f64> = (0..=bundle.grid().steps())
            .flat_map(|i| bundle.x(i).iter().map(|v| v.to_f64_lossy()))
            .collect();
        let quantile = |pooled: &mut Vec<f64>, q: f64| {
            let k = ((pooled.len() - 1) as f64 * q).round() as usize;
            *pooled.select_nth_unstable_by(k, f64::total_cmp).1
        };
        let lo = quantile(&mut pooled, 0.001);
        let hi = quantile(&mut pooled, 0.999);
        let (lo, hi) = if hi - lo > 1e-9 * (1.0 + lo.abs()) {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        };
        Self::chebyshev(lo, hi, count)
    }

    pub fn hull(&self) -> (f64, f64) {
        (self.points[0], self.points[self.points.len() - 1])
    }

    /// First index and weights of the four-point Lagrange stencil at `x`.
    pub fn stencil<T: Scalar>(&self, x: T) -> (usize, [T; 4]) {
        let k = self.points.len();
        let xf = x.to_f64_lossy();
        let interval = self.points.partition_point(|&p| p <= xf).saturating_sub(1);
        let start = interval.saturating_sub(1).min(k - 4);
        let nodes: [T; 4] = std::array::from_fn(|a| T::lit(self.points[start + a]));
        let weights = std::array::from_fn(|a| {
            let mut w = T::one();
            for b in 0..4 {
                if b != a {
                    w *= (x - nodes[b]) / (nodes[a] - nodes[b]);
                }
            }
            w
        });
        (start, weights)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtrapolationWarning {
    pub outside: usize,
    pub total: usize,
    pub hull: (f64, f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityNode {
    pub t: f64,
    pub constructed: NodeSummary,
    pub solver: NodeSummary,
    pub combined_stderr: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityCheck {
    pub nodes: Vec<IdentityNode>,
    /// Largest `|difference| / combined SE` over nodes with nonzero error.
    pub max_score: f64,
    /// `max |Y(T) - ψ(T)|` over paths for the construction.
    pub terminal_mismatch: f64,
    pub tol_multiplier: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct ConstructedSolution<T> {
    pub kind: u8,
    pub y: Vec<NodeEstimate<T>>,
    /// Node means of `Z(t_i, t_j)`, `[i][j - i]` for `i ≤ j < N`.
    pub z_mean: Vec<Vec<f64>>,
    pub x_grid: Option<XGrid>,
    pub extrapolation: Option<ExtrapolationWarning>,
}

#[derive(Clone, Debug)]
pub struct SemimartingaleResult<T> {
    pub constructed: ConstructedSolution<T>,
    pub solver: SolutionSurface<T>,
    pub identity: IdentityCheck,
}

fn no_jumps<T: Scalar>(bundle: &PathBundle<T>) -> Result<(), SemimartingaleError> {
    let lambda = bundle.jump_model().intensity;
    if lambda > 0.0 {
        return Err(SemimartingaleError::Jumps(lambda));
    }
    Ok(())
}

fn x_range<T: Scalar>(bundle: &PathBundle<T>) -> (f64, f64) {
    let (lo, hi) = (0..=bundle.grid().steps())
        .flat_map(|i| bundle.x(i).iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.to_f64_lossy();
            (lo.min(v), hi.max(v))
        });
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

fn projector<T: Scalar>(basis: RegressionBasis, bundle: &PathBundle<T>, node: usize) -> Result<Projector<T>, SemimartingaleError> {
    Projector::new(basis, &[bundle.x(node)]).map_err(|source| SemimartingaleError::Regression { node, source })
}

fn eval_paths<T: Scalar>(
    e: &Expr,
    node: usize,
    n: usize,
    bind: impl Fn(usize) -> Env<T>,
) -> Result<Vec<T>, SemimartingaleError> {
    (0..n)
        .map(|path| e.eval(&bind(path)).map_err(|source| SemimartingaleError::Evaluation { node, path, source }))
        .collect()
}

fn node_estimate<T: Scalar>(t: T, values: Vec<T>, raw: &[T]) -> NodeEstimate<T> {
    let (mean, _) = mean_and_stderr(&values);
    let (_, stderr) = mean_and_stderr(raw);
    NodeEstimate {
        t,
        values,
        fit: None,
        mean,
        stderr,
    }
}

/// `E[target · ΔB_j | X(t_j)] / Δ` after removing the projection of `target`.
fn martingale_density<T: Scalar>(proj: &Projector<T>, target: &[T], db: &[T], dt: T) -> Vec<T> {
    let (_, fitted) = proj.project(target);
    let scaled: Vec<T> = target
        .iter()
        .zip(&fitted)
        .zip(db)
        .map(|((&a, &f), &d)| (a - f) * d / dt)
        .collect();
    proj.project(&scaled).1
}

/// Type 1 without the comparison against the general solver.
pub fn construct_type1<T: Scalar>(
    f: &FactorizedTerminal,
    bundle: &PathBundle<T>,
    basis: RegressionBasis,
) -> Result<ConstructedSolution<T>, SemimartingaleError> {
    no_jumps(bundle)?;
    let range = x_range(bundle);
    smoothness(&f.current, "F1", &[Var::X], range)?;
    smoothness(&f.terminal, "F2", &[Var::X], range)?;
    let grid = *bundle.grid();
    let n = grid.steps();
    let paths = bundle.n_paths();
    let xe = bundle.x(n);
    let at = |e: &Expr, node: usize, xs: &[T]| eval_paths(e, node, paths, |p| Env::new().with(Var::X, xs[p]));
    let terminal = at(&f.terminal, n, xe)?;
    let dt = grid.dt();

    let per_node: Vec<(NodeEstimate<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let proj = projector(basis, bundle, i)?;
            let first = at(&f.current, i, bundle.x(i))?;
            let (_, bsde) = proj.project(&terminal);
            let values: Vec<T> = first.iter().zip(&bsde).map(|(&a, &b)| a * b).collect();
            let raw: Vec<T> = first.iter().zip(&terminal).map(|(&a, &b)| a * b).collect();
            let z = martingale_density(&proj, &terminal, bundle.db(i), dt);
            Ok((node_estimate(grid.node(i), values, &raw), first, z))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_, SemimartingaleError>>()?;

    let z_mean = (0..n)
        .map(|i| {
            (i..n)
                .map(|j| {
                    let first = &per_node[i].1;
                    let z = &per_node[j].2;
                    mean_and_stderr(&first.iter().zip(z).map(|(&a, &b)| a * b).collect::<Vec<T>>())
                        .0
                        .to_f64_lossy()
                })
                .collect()
        })
        .collect();

    let mut y: Vec<NodeEstimate<T>> = per_node.into_iter().map(|(e, _, _)| e).collect();
    let last = at(&f.current, n, xe)?
        .iter()
        .zip(&terminal)
        .map(|(&a, &b)| a * b)
        .collect::<Vec<T>>();
    y.push(node_estimate(grid.node(n), last.clone(), &last));
    Ok(ConstructedSolution {
        kind: 1,
        y,
        z_mean,
        x_grid: None,
        extrapolation: None,
    })
}

fn identity<T: Scalar>(
    constructed: &ConstructedSolution<T>,
    solver: &SolutionSurface<T>,
    psi: &TerminalProcess,
    bundle: &PathBundle<T>,
    tol_multiplier: f64,
) -> Result<IdentityCheck, SemimartingaleError> {
    let n = bundle.grid().steps();
    let mut nodes = Vec::with_capacity(n + 1);
    let mut max_score = 0.0f64;
    let mut passed = true;
    for (c, s) in constructed.y.iter().zip(&solver.y) {
        let se = combined_stderr(c.stderr, s.stderr).to_f64_lossy();
        let diff = (c.mean - s.mean).abs().to_f64_lossy();
        let ok = if se > 0.0 {
            max_score = max_score.max(diff / se);
            diff <= tol_multiplier * se
        } else {
            diff <= 1e-12 * (1.0 + s.mean.abs().to_f64_lossy())
        };
        passed &= ok;
        nodes.push(IdentityNode {
            t: c.t.to_f64_lossy(),
            constructed: c.summary(),
            solver: s.summary(),
            combined_stderr: se,
            passed: ok,
        });
    }
    let expected = psi.node_values(bundle, n)?;
    let terminal_mismatch = constructed.y[n]
        .values
        .iter()
        .zip(&expected)
        .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs().to_f64_lossy()));
    passed &= terminal_mismatch == 0.0;
    Ok(IdentityCheck {
        nodes,
        max_score,
        terminal_mismatch,
        tol_multiplier,
        passed,
    })
}

pub fn type1<T: Scalar>(
    f: &FactorizedTerminal,
    bundle: &PathBundle<T>,
    opts: &SolverOptions,
    tol_multiplier: f64,
) -> Result<SemimartingaleResult<T>, SemimartingaleError> {
    let constructed = construct_type1(f, bundle, opts.basis)?;
    let psi = f.process();
    let solver = solve(&Driver::zero(), &psi, TerminalSign::Plus, bundle, opts)?;
    let identity = identity(&constructed, &solver, &psi, bundle, tol_multiplier)?;
    Ok(SemimartingaleResult {
        constructed,
        solver,
        identity,
    })
}

/// Frozen-argument family `Ỹ(t, x_k) = E[F(x_k, X(T)) + Σ_{j ≥ i} g(x_k, X(t_j), Y(t_j)) Δ | X(t_i)]`
/// read off at `x = X(t_i)`.
fn construct_family<T: Scalar>(
    psi: &TerminalProcess,
    driver: Option<(&Driver, &[NodeEstimate<T>])>,
    bundle: &PathBundle<T>,
    basis: RegressionBasis,
    x_grid: XGrid,
    kind: u8,
) -> Result<ConstructedSolution<T>, SemimartingaleError> {
    let grid = *bundle.grid();
    let n = grid.steps();
    let paths = bundle.n_paths();
    let dt = grid.dt();
    let xe = bundle.x(n);
    let points = &x_grid.points;

    // raw family targets at every node, [i][k][p]; without a driver they do not depend on i
    let terminal_k: Vec<Vec<T>> = points
        .iter()
        .map(|&xk| {
            eval_paths(psi.expr(), n, paths, |p| {
                Env::new().with(Var::T, grid.node(n)).with(Var::X, xe[p]).with(Var::Xt, T::lit(xk))
            })
        })
        .collect::<Result<_, _>>()?;
    let targets: Vec<Vec<Vec<T>>> = match driver {
        None => vec![terminal_k.clone(); 1],
        Some((g, y)) => {
            // suffix sums of the driver along the frozen argument
            let mut out = vec![Vec::new(); n];
            let mut acc = terminal_k.clone();
            for j in (0..n).rev() {
                let s = grid.node(j);
                let xj = bundle.x(j);
                for (k, &xk) in points.iter().enumerate() {
                    for p in 0..paths {
                        let v = g
                            .eval(s, s, y[j].values[p], T::zero(), &[], xj[p], T::lit(xk))
                            .map_err(|source| SemimartingaleError::Evaluation { node: j, path: p, source })?;
                        acc[k][p] += v * dt;
                    }
                }
                out[j] = acc.clone();
            }
            out
        }
    };
    let target_at = |i: usize| if driver.is_some() { &targets[i] } else { &targets[0] };

    let stencils: Vec<Vec<(usize, [T; 4])>> = (0..=n)
        .map(|i| bundle.x(i).iter().map(|&x| x_grid.stencil(x)).collect())
        .collect();
    let (lo, hi) = x_grid.hull();
    let outside = (1..=n)
        .flat_map(|i| bundle.x(i).iter())
        .filter(|v| {
            let v = v.to_f64_lossy();
            v < lo || v > hi
        })
        .count();
    let interpolate = |i: usize, family: &[Vec<T>]| -> Vec<T> {
        stencils[i]
            .iter()
            .enumerate()
            .map(|(p, (start, w))| (0..4).map(|a| w[a] * family[start + a][p]).sum())
            .collect()
    };

    let per_node: Vec<(NodeEstimate<T>, Vec<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let proj = projector(basis, bundle, i)?;
            let family = target_at(i);
            let fitted: Vec<Vec<T>> = family.iter().map(|v| proj.project(v).1).collect();
            let values = interpolate(i, &fitted);
            let raw = interpolate(i, family);
            let z: Vec<Vec<T>> = family
                .iter()
                .map(|v| martingale_density(&proj, v, bundle.db(i), dt))
                .collect();
            Ok((node_estimate(grid.node(i), values, &raw), z))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_, SemimartingaleError>>()?;

    let z_mean = (0..n)
        .map(|i| {
            (i..n)
                .map(|j| mean_and_stderr(&interpolate(i, &per_node[j].1)).0.to_f64_lossy())
                .collect()
        })
        .collect();
    let mut y: Vec<NodeEstimate<T>> = per_node.into_iter().map(|(e, _)| e).collect();
    // Ỹ(T, x) = F(x, X(T)) read off at x = X(T) is ψ(T) itself
    let last = psi.node_values(bundle, n)?;
    y.push(node_estimate(grid.node(n), last.clone(), &last));
    Ok(ConstructedSolution {
        kind,
        y,
        z_mean,
        extrapolation: (outside > 0).then_some(ExtrapolationWarning {
            outside,
            total: n * paths,
            hull: (lo, hi),
        }),
        x_grid: Some(x_grid),
    })
}

fn check_two_argument(psi: &TerminalProcess, bundle_range: (f64, f64)) -> Result<(), SemimartingaleError> {
    only(psi.expr(), "F", &[Var::X, Var::Xt], "x and xt")?;
    smoothness(psi.expr(), "F", &[Var::X, Var::Xt], bundle_range)
}

/// Type 2 without the comparison against the general solver.
pub fn construct_type2<T: Scalar>(
    f: &TerminalProcess,
    bundle: &PathBundle<T>,
    basis: RegressionBasis,
    grid_points: usize,
) -> Result<ConstructedSolution<T>, SemimartingaleError> {
    no_jumps(bundle)?;
    check_two_argument(f, x_range(bundle))?;
    let x_grid = XGrid::from_bundle(bundle, grid_points)?;
    construct_family(f, None, bundle, basis, x_grid, 2)
}

/// `F` is written in `xt` (frozen argument) and `x` (terminal state).
pub fn type2<T: Scalar>(
    f: &TerminalProcess,
    bundle: &PathBundle<T>,
    opts: &SolverOptions,
    grid_points: usize,
    tol_multiplier: f64,
) -> Result<SemimartingaleResult<T>, SemimartingaleError> {
    let constructed = construct_type2(f, bundle, opts.basis, grid_points)?;
    let solver = solve(&Driver::zero(), f, TerminalSign::Plus, bundle, opts)?;
    let identity = identity(&constructed, &solver, f, bundle, tol_multiplier)?;
    Ok(SemimartingaleResult {
        constructed,
        solver,
        identity,
    })
}

/// The driver may read `s`, `y`, `x = X(s)` and `xt` (the frozen argument).
pub fn type3<T: Scalar>(
    f: &TerminalProcess,
    driver: &Driver,
    bundle: &PathBundle<T>,
    opts: &SolverOptions,
    grid_points: usize,
    tol_multiplier: f64,
) -> Result<SemimartingaleResult<T>, SemimartingaleError> {
    no_jumps(bundle)?;
    let range = x_range(bundle);
    check_two_argument(f, range)?;
    only(&driver.expr, "the driver", &[Var::S, Var::Y, Var::X, Var::Xt], "s, y, x and xt")?;
    let solver = solve(driver, f, TerminalSign::Plus, bundle, opts)?;
    let x_grid = XGrid::from_bundle(bundle, grid_points)?;
    let constructed = construct_family(f, Some((driver, &solver.y)), bundle, opts.basis, x_grid, 3)?;
    let identity = identity(&constructed, &solver, f, bundle, tol_multiplier)?;
    Ok(SemimartingaleResult {
        constructed,
        solver,
        identity,
    })
}

/// Split of `Y(t_{i+1}) - Y(t_i)` on one grid into a predictable drift, a
/// Brownian martingale increment and what neither explains.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecompositionLevel {
    pub steps: usize,
    pub dt: f64,
    /// `Σ_i E[ΔY_i²]`
    pub increment_energy: f64,
    pub drift_energy: f64,
    pub martingale_energy: f64,
    pub residual_energy: f64,
}

/// Regresses each increment on `[p(X(t_i)), p(X(t_i)) ΔB_i]` with `p` the
/// monomials up to the basis degree.
pub fn decompose<T: Scalar>(
    y: &[Vec<T>],
    bundle: &PathBundle<T>,
    basis: RegressionBasis,
) -> Result<DecompositionLevel, SemimartingaleError> {
    let grid = bundle.grid();
    let n = grid.steps();
    let parts: Vec<[f64; 4]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = bundle.x(i);
            let db = bundle.db(i);
            let (mean, sd) = {
                let (m, _) = mean_and_stderr(x);
                let v = x.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::from_usize_lossy(x.len());
                (m, v.sqrt())
            };
            let degree = if sd > T::lit(1e-12) * (T::one() + mean.abs()) { basis.degree } else { 0 };
            let powers: Vec<Vec<T>> = (0..=degree)
                .map(|d| match d {
                    0 => vec![T::one(); x.len()],
                    _ => x.iter().map(|&v| ((v - mean) / sd).powi(d as i32)).collect(),
                })
                .collect();
            let mut columns = powers.clone();
            columns.extend(powers.iter().map(|c| c.iter().zip(db).map(|(&a, &b)| a * b).collect::<Vec<T>>()));
            let proj = Projector::from_columns(&columns).map_err(|source| SemimartingaleError::Regression { node: i, source })?;
            let dy: Vec<T> = y[i + 1].iter().zip(&y[i]).map(|(&a, &b)| a - b).collect();
            let c = proj.coefficients(&dy);
            let k = powers.len();
            let nf = T::from_usize_lossy(dy.len());
            let (mut inc, mut dr, mut ma, mut re) = (T::zero(), T::zero(), T::zero(), T::zero());
            for p in 0..dy.len() {
                let drift: T = (0..k).map(|d| c[d] * powers[d][p]).sum();
                let mart: T = (0..k).map(|d| c[k + d] * powers[d][p]).sum::<T>() * db[p];
                let r = dy[p] - drift - mart;
                inc += dy[p] * dy[p];
                dr += drift * drift;
                ma += mart * mart;
                re += r * r;
            }
            Ok([inc, dr, ma, re].map(|v| (v / nf).to_f64_lossy()))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_, SemimartingaleError>>()?;
    let sum = |k: usize| parts.iter().map(|p| p[k]).sum::<f64>();
    Ok(DecompositionLevel {
        steps: n,
        dt: grid.dt().to_f64_lossy(),
        increment_energy: sum(0),
        drift_energy: sum(1),
        martingale_energy: sum(2),
        residual_energy: sum(3),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DecompositionReport {
    pub levels: Vec<DecompositionLevel>,
    /// Slope of `log residual energy` against `log Δ`.
    pub slope: Option<f64>,
    /// The increments are explained to rounding on every grid.
    pub exact: bool,
    pub slope_range: (f64, f64),
    pub passed: bool,
}

/// A semimartingale leaves a residual of order `Δ` in total, so the slope
/// under refinement should be near one.
pub fn decomposition_check(levels: Vec<DecompositionLevel>) -> Result<DecompositionReport, SemimartingaleError> {
    if levels.len() < 2 {
        return Err(SemimartingaleError::Levels(levels.len()));
    }
    let slope_range = (0.5, 1.5);
    let exact = levels
        .iter()
        .all(|l| l.residual_energy <= 1e-20 * l.increment_energy.max(f64::MIN_POSITIVE));
    let slope = if exact {
        None
    } else {
        let pts: Vec<(f64, f64)> = levels
            .iter()
            .map(|l| (l.dt.ln(), l.residual_energy.max(f64::MIN_POSITIVE).ln()))
            .collect();
        let m = pts.len() as f64;
        let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x / m, b + y / m));
        let sxx: f64 = pts.iter().map(|&(x, _)| (x - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
        Some(sxy / sxx)
    };
    let passed = exact || slope.is_some_and(|s| s >= slope_range.0 && s <= slope_range.1);
    Ok(DecompositionReport {
        levels,
        slope,
        exact,
        slope_range,
        passed,
    })
}
