//! Least-squares Monte Carlo solver for
//! `Y(t) = ±ψ(t) + ∫_t^T g(t, s, Y(s), Z(t,s), K(t,s,·)) ds - ∫_t^T Z(t,s) dB(s) - ∫_t^T ∫ K(t,s,ζ) Ñ(ds,dζ)`.
//!
//! Each row `t_i` is a backward sweep over `s = t_j`, `j = N-1..i`, that
//! carries the pathwise accumulator `±ψ(t_i) + Σ_{j' > j} g(...) Δ`. At each
//! `t_j` the accumulator is projected on the state, the residual gives `Z`
//! through `ΔB_j` and the jump functionals `u_m` through the compensated
//! increments of `w_m`. The diagonal `Y(t_j)` fed to the driver comes from the
//! previous Picard iterate, so rows are independent within an iteration.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::driver::{invert, Driver, DriverError};
use crate::dsl::EvalError;
use crate::estimate::NodeEstimate;
use crate::linear::TerminalSign;
use crate::regression::{Projector, RegressionBasis, RegressionError, RegressionFit};
use crate::scalar::{mean_and_stderr, Scalar};
use crate::stochastic::{PathBundle, StochasticError, TimeGrid};
use crate::terminal::{TerminalError, TerminalProcess};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error(transparent)]
    Stochastic(#[from] StochasticError),
    #[error("regression for row {row} at node {node}: {source}")]
    Regression {
        row: usize,
        node: usize,
        #[source]
        source: RegressionError,
    },
    #[error("driver evaluation failed in row {row} at node {node}, path {path}: {source}")]
    Evaluation {
        row: usize,
        node: usize,
        path: usize,
        #[source]
        source: EvalError,
    },
    #[error("Picard iteration did not reach tolerance {tol} in {max_iter} iterations; distances {history:?}")]
    Divergence { tol: f64, max_iter: usize, history: Vec<f64> },
    #[error("invalid solver options: {0}")]
    Options(String),
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub basis: RegressionBasis,
    pub picard_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            basis: RegressionBasis::default(),
            picard_tol: 1e-6,
            max_iter: 50,
        }
    }
}

/// Regression state of a cell `(t_i, t_j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowState {
    /// `X(t_j)` only.
    Current,
    /// `(X(t_j), X(t_i))`, needed when `ψ(t_i)` or the driver reads `X(t_i)`.
    CurrentAndRow,
}

/// `Z(t_i, t_j)` and the jump functionals `u_m(t_i, t_j)` as functions of the
/// cell's regression state.
#[derive(Clone, Debug)]
pub struct CellEstimate<T> {
    pub z: RegressionFit<T>,
    pub u: Vec<RegressionFit<T>>,
    pub z_mean: T,
    pub u_mean: Vec<T>,
    /// `E[Z²]`
    pub z_sq: T,
    /// `E[∫ K² dν] = E[uᵀ G⁻¹ u]`
    pub k_sq: T,
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct SolutionNorms {
    /// `(E ∫ |Y(t)|² dt)^{1/2}`
    pub y: f64,
    /// `(E ∫∫_Δ |Z(t,s)|² ds dt)^{1/2}`
    pub z: f64,
    /// `(E ∫∫_Δ ∫ |K(t,s,ζ)|² ν(dζ) ds dt)^{1/2}`
    pub k: f64,
}

#[derive(Clone, Debug)]
pub struct SolutionSurface<T> {
    pub grid: TimeGrid<T>,
    pub sign: TerminalSign,
    pub row_state: RowState,
    /// Diagonal `Y(t_j)`, `j = 0..=N`.
    pub y: Vec<NodeEstimate<T>>,
    /// `cells[i][j - i]` for `i ≤ j < N`.
    pub cells: Vec<Vec<CellEstimate<T>>>,
    /// `G⁻¹` of the jump weights, row-major.
    pub gram_inverse: Vec<f64>,
    /// Max-node L² distance between successive Picard iterates.
    pub history: Vec<f64>,
    pub norms: SolutionNorms,
}

impl<T: Scalar> SolutionSurface<T> {
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn cell(&self, i: usize, j: usize) -> &CellEstimate<T> {
        &self.cells[i][j - i]
    }

    pub fn weight_count(&self) -> usize {
        (self.gram_inverse.len() as f64).sqrt() as usize
    }

    fn cell_state<'a>(&self, bundle: &'a PathBundle<T>, i: usize, j: usize) -> Vec<&'a [T]> {
        match self.row_state {
            RowState::CurrentAndRow if j > i => vec![bundle.x(j), bundle.x(i)],
            _ => vec![bundle.x(j)],
        }
    }

    /// `Z(t_i, t_j)` per path.
    pub fn z_values(&self, bundle: &PathBundle<T>, i: usize, j: usize) -> Vec<T> {
        self.cell(i, j).z.eval_state(&self.cell_state(bundle, i, j))
    }

    /// `u_m(t_i, t_j)` per path, `[m][p]`.
    pub fn u_values(&self, bundle: &PathBundle<T>, i: usize, j: usize) -> Vec<Vec<T>> {
        let state = self.cell_state(bundle, i, j);
        self.cell(i, j).u.iter().map(|f| f.eval_state(&state)).collect()
    }

    /// Coefficients `κ = G⁻¹ u` of `K(t_i, t_j, ·)` in the jump weights, `[m][p]`.
    pub fn k_coefficients(&self, bundle: &PathBundle<T>, i: usize, j: usize) -> Vec<Vec<T>> {
        let u = self.u_values(bundle, i, j);
        apply_matrix(&self.gram_inverse, &u)
    }

    /// Mean coefficients of `K(t_i, t_j, ·)`.
    pub fn k_mean(&self, i: usize, j: usize) -> Vec<T> {
        let u: Vec<Vec<T>> = self.cell(i, j).u_mean.iter().map(|&v| vec![v]).collect();
        apply_matrix(&self.gram_inverse, &u).into_iter().map(|c| c[0]).collect()
    }

    pub fn iterations(&self) -> usize {
        self.history.len()
    }
}

fn apply_matrix<T: Scalar>(m: &[f64], u: &[Vec<T>]) -> Vec<Vec<T>> {
    let k = u.len();
    let n = u.first().map_or(0, Vec::len);
    (0..k)
        .map(|l| {
            (0..n)
                .map(|p| (0..k).map(|q| T::lit(m[l * k + q]) * u[q][p]).sum())
                .collect()
        })
        .collect()
}

struct RowOutput<T> {
    y: NodeEstimate<T>,
    cells: Vec<CellEstimate<T>>,
}

struct Context<'a, T> {
    bundle: &'a PathBundle<T>,
    driver: &'a Driver,
    basis: RegressionBasis,
    /// `±ψ(t_i)`, `[i][p]`
    psi: &'a [Vec<T>],
    /// compensated increments of each weight, `[m][j][p]`
    increments: &'a [Vec<Vec<T>>],
    gram_inverse: &'a [f64],
    /// projectors on `X(t_j)`
    node_projectors: &'a [Projector<T>],
    row_state: RowState,
}

fn fit_of<T: Scalar>(p: &Projector<T>, c: Vec<T>) -> RegressionFit<T> {
    p.to_fit(c).expect("polynomial projector")
}

fn sweep_row<T: Scalar>(ctx: &Context<'_, T>, i: usize, y_prev: &[Vec<T>]) -> Result<RowOutput<T>, SolverError> {
    let bundle = ctx.bundle;
    let grid = bundle.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let inv_dt = T::one() / dt;
    let n_paths = bundle.n_paths();
    let m = ctx.driver.weight_count();
    let t = grid.node(i);
    let xi = bundle.x(i);

    let mut acc = ctx.psi[i].clone();
    let mut cells = Vec::with_capacity(n - i);
    let mut scratch = vec![T::zero(); n_paths];
    let mut u_vals = vec![vec![T::zero(); n_paths]; m];
    let mut u_at = vec![T::zero(); m];
    for j in (i..n).rev() {
        let owned;
        let proj = match ctx.row_state {
            RowState::CurrentAndRow if j > i => {
                owned = Projector::new(ctx.basis, &[bundle.x(j), xi])
                    .map_err(|source| SolverError::Regression { row: i, node: j, source })?;
                &owned
            }
            _ => &ctx.node_projectors[j],
        };
        let (_, fitted) = proj.project(&acc);
        let resid: Vec<T> = acc.iter().zip(&fitted).map(|(&a, &f)| a - f).collect();

        let db = bundle.db(j);
        for p in 0..n_paths {
            scratch[p] = resid[p] * db[p] * inv_dt;
        }
        let zc = proj.coefficients(&scratch);
        let z_vals = proj.fitted(&zc);
        let mut u_fits = Vec::with_capacity(m);
        let mut u_mean = Vec::with_capacity(m);
        for (mm, incs) in ctx.increments.iter().enumerate() {
            let dn = &incs[j];
            for p in 0..n_paths {
                scratch[p] = resid[p] * dn[p] * inv_dt;
            }
            let uc = proj.coefficients(&scratch);
            u_vals[mm] = proj.fitted(&uc);
            u_mean.push(mean_and_stderr(&u_vals[mm]).0);
            u_fits.push(fit_of(proj, uc));
        }

        let s = grid.node(j);
        let xj = bundle.x(j);
        let yj = &y_prev[j];
        let mut z_sq = T::zero();
        let mut k_sq = T::zero();
        for p in 0..n_paths {
            for mm in 0..m {
                u_at[mm] = u_vals[mm][p];
            }
            let g = ctx
                .driver
                .eval(t, s, yj[p], z_vals[p], &u_at, xj[p], xi[p])
                .map_err(|source| SolverError::Evaluation {
                    row: i,
                    node: j,
                    path: p,
                    source,
                })?;
            acc[p] += g * dt;
            z_sq += z_vals[p] * z_vals[p];
            for l in 0..m {
                for q in 0..m {
                    k_sq += u_at[l] * T::lit(ctx.gram_inverse[l * m + q]) * u_at[q];
                }
            }
        }
        let nf = T::from_usize_lossy(n_paths);
        cells.push(CellEstimate {
            z_mean: mean_and_stderr(&z_vals).0,
            z: fit_of(proj, zc),
            u: u_fits,
            u_mean,
            z_sq: z_sq / nf,
            k_sq: k_sq / nf,
        });
    }
    cells.reverse();

    let proj = &ctx.node_projectors[i];
    let (c, values) = proj.project(&acc);
    let (mean, stderr) = mean_and_stderr(&acc);
    Ok(RowOutput {
        y: NodeEstimate {
            t,
            values,
            fit: Some(fit_of(proj, c)),
            mean,
            stderr,
        },
        cells,
    })
}

fn rms_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let s: T = a.iter().zip(b).map(|(&u, &v)| (u - v) * (u - v)).sum();
    (s / T::from_usize_lossy(a.len().max(1))).sqrt().to_f64_lossy()
}

pub fn solve<T: Scalar>(
    driver: &Driver,
    psi: &TerminalProcess,
    sign: TerminalSign,
    bundle: &PathBundle<T>,
    opts: &SolverOptions,
) -> Result<SolutionSurface<T>, SolverError> {
    if !(opts.picard_tol > 0.0) || opts.max_iter == 0 {
        return Err(SolverError::Options(format!(
            "picard_tol = {}, max_iter = {}",
            opts.picard_tol, opts.max_iter
        )));
    }
    let grid = *bundle.grid();
    let n = grid.steps();
    let sign_t = T::lit(sign.value());
    let psi_values: Vec<Vec<T>> = psi
        .values(bundle)?
        .into_iter()
        .map(|row| row.into_iter().map(|v| sign_t * v).collect())
        .collect();

    let m = driver.weight_count();
    let jumps_active = m > 0 && bundle.jump_model().intensity > 0.0;
    let gram_inverse = if jumps_active {
        invert(&driver.gram(bundle.jump_model())?, m).ok_or(DriverError::SingularGram)?
    } else {
        vec![0.0; m * m]
    };
    let increments: Vec<Vec<Vec<T>>> = if jumps_active {
        driver
            .jump_weights
            .iter()
            .map(|w| bundle.compensated_increments(w))
            .collect::<Result<_, _>>()?
    } else {
        vec![vec![vec![T::zero(); bundle.n_paths()]; n]; m]
    };

    let node_projectors: Vec<Projector<T>> = (0..n)
        .into_par_iter()
        .map(|j| {
            Projector::new(opts.basis, &[bundle.x(j)]).map_err(|source| SolverError::Regression {
                row: j,
                node: j,
                source,
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_, _>>()?;

    let row_state = if driver.uses_row_state() || psi.uses_row_state() {
        RowState::CurrentAndRow
    } else {
        RowState::Current
    };
    let ctx = Context {
        bundle,
        driver,
        basis: opts.basis,
        psi: &psi_values,
        increments: &increments,
        gram_inverse: &gram_inverse,
        node_projectors: &node_projectors,
        row_state,
    };

    let terminal = {
        let values = psi_values[n].clone();
        let (mean, stderr) = mean_and_stderr(&values);
        NodeEstimate {
            t: grid.node(n),
            values,
            fit: None,
            mean,
            stderr,
        }
    };

    let mut y_prev: Vec<Vec<T>> = vec![vec![T::zero(); bundle.n_paths()]; n + 1];
    y_prev[n] = terminal.values.clone();
    let mut history = Vec::new();
    loop {
        let rows: Vec<RowOutput<T>> = (0..n)
            .into_par_iter()
            .map(|i| sweep_row(&ctx, i, &y_prev))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<_, _>>()?;
        let distance = rows
            .iter()
            .enumerate()
            .map(|(i, r)| rms_distance(&r.y.values, &y_prev[i]))
            .fold(0.0, f64::max);
        history.push(distance);
        for (i, r) in rows.iter().enumerate() {
            y_prev[i].clone_from(&r.y.values);
        }
        let done = !driver.depends_on_y() || distance < opts.picard_tol;
        if done {
            return Ok(assemble(grid, sign, row_state, rows, terminal, gram_inverse, history));
        }
        if history.len() >= opts.max_iter {
            return Err(SolverError::Divergence {
                tol: opts.picard_tol,
                max_iter: opts.max_iter,
                history,
            });
        }
    }
}

fn assemble<T: Scalar>(
    grid: TimeGrid<T>,
    sign: TerminalSign,
    row_state: RowState,
    rows: Vec<RowOutput<T>>,
    terminal: NodeEstimate<T>,
    gram_inverse: Vec<f64>,
    history: Vec<f64>,
) -> SolutionSurface<T> {
    let dt = grid.dt().to_f64_lossy();
    let mut y = Vec::with_capacity(rows.len() + 1);
    let mut cells = Vec::with_capacity(rows.len());
    let (mut ny, mut nz, mut nk) = (0.0, 0.0, 0.0);
    for r in rows {
        let (sq, _) = mean_and_stderr(&r.y.values.iter().map(|&v| v * v).collect::<Vec<T>>());
        ny += sq.to_f64_lossy() * dt;
        for c in &r.cells {
            nz += c.z_sq.to_f64_lossy() * dt * dt;
            nk += c.k_sq.to_f64_lossy() * dt * dt;
        }
        y.push(r.y);
        cells.push(r.cells);
    }
    y.push(terminal);
    SolutionSurface {
        grid,
        sign,
        row_state,
        y,
        cells,
        gram_inverse,
        history,
        norms: SolutionNorms {
            y: ny.sqrt(),
            z: nz.sqrt(),
            k: nk.sqrt(),
        },
    }
}

/// Per-row mean-square defect of the discretized equation,
/// `E|Y(t_i) - ±ψ(t_i) - Σ_j (g Δ - Z ΔB_j - Σ_m κ_m ΔÑ^m_j)|²`, with the
/// surface's own `Y`, `Z` and `K` plugged in.
pub fn residual<T: Scalar>(
    surface: &SolutionSurface<T>,
    driver: &Driver,
    psi: &TerminalProcess,
    bundle: &PathBundle<T>,
) -> Result<Vec<f64>, SolverError> {
    let grid = bundle.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let sign = T::lit(surface.sign.value());
    let m = driver.weight_count();
    let jumps_active = m > 0 && bundle.jump_model().intensity > 0.0;
    let increments: Vec<Vec<Vec<T>>> = if jumps_active {
        driver
            .jump_weights
            .iter()
            .map(|w| bundle.compensated_increments(w))
            .collect::<Result<_, _>>()?
    } else {
        vec![vec![vec![T::zero(); bundle.n_paths()]; n]; m]
    };
    (0..=n)
        .into_par_iter()
        .map(|i| {
            let t = grid.node(i);
            let xi = bundle.x(i);
            let mut rhs: Vec<T> = psi.node_values(bundle, i)?.into_iter().map(|v| sign * v).collect();
            let mut u_at = vec![T::zero(); m];
            for j in i..n {
                let z = surface.z_values(bundle, i, j);
                let u = surface.u_values(bundle, i, j);
                let kappa = apply_matrix(&surface.gram_inverse, &u);
                let s = grid.node(j);
                let xj = bundle.x(j);
                let yj = &surface.y[j].values;
                let db = bundle.db(j);
                for p in 0..bundle.n_paths() {
                    for mm in 0..m {
                        u_at[mm] = u[mm][p];
                    }
                    let g = driver
                        .eval(t, s, yj[p], z[p], &u_at, xj[p], xi[p])
                        .map_err(|source| SolverError::Evaluation {
                            row: i,
                            node: j,
                            path: p,
                            source,
                        })?;
                    let mut v = g * dt - z[p] * db[p];
                    for mm in 0..m {
                        v -= kappa[mm][p] * increments[mm][j][p];
                    }
                    rhs[p] += v;
                }
            }
            let defect: Vec<T> = surface.y[i].values.iter().zip(&rhs).map(|(&a, &b)| a - b).collect();
            let (ms, _) = mean_and_stderr(&defect.iter().map(|&d| d * d).collect::<Vec<T>>());
            Ok(ms.to_f64_lossy())
        })
        .collect()
}
