//! Brownian increments, finite-activity Poisson random measures and the
//! Euler scheme for the forward state `dX = b(s, X) ds + σ(s, X) dB`.
//!
//! # Seeding
//!
//! Every path owns a ChaCha8 stream: the key is derived from the root seed
//! with `seed_from_u64(seed)` and the stream id is the path index. Within a
//! path, interval `i` consumes one standard normal, then (when λ > 0) one
//! Poisson count followed by a uniform time and a mark per jump. Growing
//! `n_paths` therefore appends paths without touching existing ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{parse_with_vars, Env, EvalError, Expr, ParseError, Var};
use crate::quadrature::standard_normal_rule;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum StochasticError {
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("invalid jump model: {0}")]
    Jump(String),
    #[error("invalid diffusion model: {0}")]
    Diffusion(String),
    #[error("expression error: {0}")]
    Parse(#[from] ParseError),
    #[error("evaluation failed at step {step}, path {path}: {source}")]
    Evaluation {
        step: usize,
        path: usize,
        #[source]
        source: EvalError,
    },
    #[error("jump weight not evaluable at mark {mark}: {source}")]
    Weight {
        mark: f64,
        #[source]
        source: EvalError,
    },
    #[error("jump weight is not square integrable against the Lévy measure")]
    NotSquareIntegrable,
    #[error("need at least one path")]
    NoPaths,
    #[error("interval range {from}..{to} outside grid of {steps} steps")]
    Range { from: usize, to: usize, steps: usize },
}

/// Uniform partition `t_i = i T / N` of `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid<T> {
    horizon: T,
    steps: usize,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(horizon: T, steps: usize) -> Result<Self, StochasticError> {
        if steps < 1 {
            return Err(StochasticError::Grid("need N >= 1 steps".into()));
        }
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(StochasticError::Grid(format!("horizon must be positive and finite, got {horizon}")));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> T {
        self.horizon / T::from_usize_lossy(self.steps)
    }

    /// Node `t_i`; the last node is exactly the horizon.
    pub fn node(&self, i: usize) -> T {
        if i == self.steps {
            self.horizon
        } else {
            T::from_usize_lossy(i) * self.horizon / T::from_usize_lossy(self.steps)
        }
    }

    pub fn nodes(&self) -> Vec<T> {
        (0..=self.steps).map(|i| self.node(i)).collect()
    }
}

/// Law of a single jump mark. Parameters are configuration data and stay in `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MarkDistribution {
    Normal { mean: f64, sd: f64 },
    Lognormal { mu: f64, sigma: f64 },
    Point { value: f64 },
}

impl MarkDistribution {
    fn validate(&self) -> Result<(), StochasticError> {
        match *self {
            MarkDistribution::Normal { mean, sd } => {
                if !(sd > 0.0) || !sd.is_finite() || !mean.is_finite() {
                    return Err(StochasticError::Jump(format!("normal marks need finite mean and sd > 0, got ({mean}, {sd})")));
                }
            }
            MarkDistribution::Lognormal { mu, sigma } => {
                if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
                    return Err(StochasticError::Jump(format!("lognormal marks need finite mu and sigma > 0, got ({mu}, {sigma})")));
                }
            }
            MarkDistribution::Point { value } => {
                if value == 0.0 || !value.is_finite() {
                    return Err(StochasticError::Jump("point mass must sit away from 0".into()));
                }
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            MarkDistribution::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            MarkDistribution::Lognormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (mu + sigma * z).exp()
            }
            MarkDistribution::Point { value } => value,
        }
    }

    /// `E[f(ζ)]` under the mark law: exact for point masses, 64-node
    /// Gauss–Hermite otherwise.
    pub fn expectation<E>(&self, mut f: impl FnMut(f64) -> Result<f64, E>) -> Result<f64, E> {
        match *self {
            MarkDistribution::Point { value } => f(value),
            MarkDistribution::Normal { mean, sd } => {
                let mut acc = 0.0;
                for &(x, w) in standard_normal_rule() {
                    acc += w * f(mean + sd * x)?;
                }
                Ok(acc)
            }
            MarkDistribution::Lognormal { mu, sigma } => {
                let mut acc = 0.0;
                for &(x, w) in standard_normal_rule() {
                    acc += w * f((mu + sigma * x).exp())?;
                }
                Ok(acc)
            }
        }
    }

    /// Representative marks used when auditing coefficient bounds.
    pub fn support_sample(&self) -> Vec<f64> {
        match *self {
            MarkDistribution::Point { value } => vec![value],
            MarkDistribution::Normal { mean, sd } => {
                let mut v: Vec<f64> = standard_normal_rule().iter().map(|&(x, _)| mean + sd * x).collect();
                v.retain(|z| *z != 0.0);
                v
            }
            MarkDistribution::Lognormal { mu, sigma } => {
                standard_normal_rule().iter().map(|&(x, _)| (mu + sigma * x).exp()).collect()
            }
        }
    }
}

/// Finite-activity jump measure `ν = λ μ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpModel {
    pub intensity: f64,
    pub marks: MarkDistribution,
}

impl JumpModel {
    pub fn new(intensity: f64, marks: MarkDistribution) -> Result<Self, StochasticError> {
        if !(intensity >= 0.0) || !intensity.is_finite() {
            return Err(StochasticError::Jump(format!("intensity must be finite and >= 0, got {intensity}")));
        }
        marks.validate()?;
        Ok(JumpModel { intensity, marks })
    }

    pub fn none() -> Self {
        JumpModel {
            intensity: 0.0,
            marks: MarkDistribution::Point { value: 1.0 },
        }
    }

    /// `∫ f dν`.
    pub fn integrate<E>(&self, f: impl FnMut(f64) -> Result<f64, E>) -> Result<f64, E> {
        if self.intensity == 0.0 {
            return Ok(0.0);
        }
        Ok(self.intensity * self.marks.expectation(f)?)
    }

    /// `∫ w dν` for a weight expression in `zeta`, after checking `∫ w² dν < ∞`.
    pub fn integrate_weight(&self, w: &Expr) -> Result<f64, StochasticError> {
        let eval = |zeta: f64| {
            w.eval(&Env::new().with(Var::Zeta, zeta))
                .map_err(|source| StochasticError::Weight { mark: zeta, source })
        };
        let second = self.integrate(|z| eval(z).map(|v| v * v))?;
        if !second.is_finite() {
            return Err(StochasticError::NotSquareIntegrable);
        }
        self.integrate(eval)
    }
}

/// Forward diffusion. `b` and `σ` are expressions in `s` (or `t`) and `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub x0: f64,
    pub drift: Expr,
    pub volatility: Expr,
}

impl DiffusionModel {
    pub const VARS: [Var; 3] = [Var::T, Var::S, Var::X];

    pub fn new(x0: f64, drift: Expr, volatility: Expr) -> Result<Self, StochasticError> {
        if !x0.is_finite() {
            return Err(StochasticError::Diffusion("x0 must be finite".into()));
        }
        for e in [&drift, &volatility] {
            if let Some(v) = e.variables().into_iter().find(|v| !Self::VARS.contains(v)) {
                return Err(StochasticError::Diffusion(format!("coefficient uses `{v}`; only t, s, x are allowed")));
            }
        }
        Ok(DiffusionModel { x0, drift, volatility })
    }

    pub fn parse(x0: f64, drift: &str, volatility: &str) -> Result<Self, StochasticError> {
        let drift = parse_with_vars(drift, &Self::VARS)?;
        let volatility = parse_with_vars(volatility, &Self::VARS)?;
        Self::new(x0, drift, volatility)
    }

    /// Standard Brownian motion started at `x0`.
    pub fn brownian(x0: f64) -> Self {
        DiffusionModel {
            x0,
            drift: Expr::Lit(0.0),
            volatility: Expr::Lit(1.0),
        }
    }

    pub(crate) fn coefficients<T: Scalar>(&self, s: T, x: T) -> Result<(T, T), EvalError> {
        let env = Env::new().with(Var::S, s).with(Var::T, s).with(Var::X, x);
        Ok((self.drift.eval(&env)?, self.volatility.eval(&env)?))
    }
}

/// Jumps falling in one grid interval, for every path (compressed rows).
#[derive(Clone, Debug, Default)]
pub struct IntervalJumps<T> {
    offsets: Vec<usize>,
    times: Vec<T>,
    marks: Vec<T>,
}

impl<T: Scalar> IntervalJumps<T> {
    pub fn count(&self, path: usize) -> usize {
        self.offsets[path + 1] - self.offsets[path]
    }

    pub fn marks(&self, path: usize) -> &[T] {
        &self.marks[self.offsets[path]..self.offsets[path + 1]]
    }

    pub fn times(&self, path: usize) -> &[T] {
        &self.times[self.offsets[path]..self.offsets[path + 1]]
    }
}

/// Simulated increments and states on a shared grid. Immutable once built.
#[derive(Clone, Debug)]
pub struct PathBundle<T> {
    grid: TimeGrid<T>,
    jump_model: JumpModel,
    diffusion: DiffusionModel,
    n_paths: usize,
    seed: u64,
    /// `dB[i][p]`, `i < N`.
    db: Vec<Vec<T>>,
    /// `X[i][p]`, `i <= N`.
    x: Vec<Vec<T>>,
    jumps: Vec<IntervalJumps<T>>,
}

struct SinglePath<T> {
    db: Vec<T>,
    x: Vec<T>,
    jumps: Vec<Vec<(T, T)>>,
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

fn simulate_one<T: Scalar>(
    grid: &TimeGrid<T>,
    jump: &JumpModel,
    diff: &DiffusionModel,
    poisson: Option<&Poisson<f64>>,
    seed: u64,
    path: usize,
) -> Result<SinglePath<T>, StochasticError> {
    let mut rng = path_rng(seed, path);
    let n = grid.steps();
    let dt = grid.dt();
    let dt64 = dt.to_f64_lossy();
    let sqrt_dt = dt.sqrt();
    let mut db = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n + 1);
    let mut jumps = Vec::with_capacity(n);
    let mut state = T::lit(diff.x0);
    x.push(state);
    for i in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let increment = sqrt_dt * T::lit(z);
        db.push(increment);

        let mut here = Vec::new();
        if let Some(poisson) = poisson {
            let count = poisson.sample(&mut rng) as usize;
            let t_i = grid.node(i).to_f64_lossy();
            for _ in 0..count {
                let u: f64 = 1.0 - rng.random::<f64>();
                let mark = jump.marks.sample(&mut rng);
                here.push((T::lit(t_i + u * dt64), T::lit(mark)));
            }
            here.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        }
        jumps.push(here);

        let (b, sigma) = diff
            .coefficients(grid.node(i), state)
            .map_err(|source| StochasticError::Evaluation { step: i, path, source })?;
        state = state + b * dt + sigma * increment;
        if !state.is_finite() {
            return Err(StochasticError::Evaluation {
                step: i,
                path,
                source: EvalError::NonFinite { op: "euler step" },
            });
        }
        x.push(state);
    }
    Ok(SinglePath { db, x, jumps })
}

/// Simulates `n_paths` independent paths. The result is a pure function of
/// the inputs and `seed`, independent of the number of worker threads.
pub fn simulate_paths<T: Scalar>(
    grid: TimeGrid<T>,
    jump: &JumpModel,
    diff: &DiffusionModel,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle<T>, StochasticError> {
    if n_paths < 1 {
        return Err(StochasticError::NoPaths);
    }
    let lambda_dt = jump.intensity * grid.dt().to_f64_lossy();
    let poisson = if lambda_dt > 0.0 {
        Some(Poisson::new(lambda_dt).map_err(|e| StochasticError::Jump(e.to_string()))?)
    } else {
        None
    };

    let results: Vec<Result<SinglePath<T>, StochasticError>> = (0..n_paths)
        .into_par_iter()
        .map(|p| simulate_one(&grid, jump, diff, poisson.as_ref(), seed, p))
        .collect();
    // first failing path in index order, whatever the scheduling
    let paths: Vec<SinglePath<T>> = results.into_iter().collect::<Result<_, _>>()?;

    let n = grid.steps();
    let mut db = vec![Vec::with_capacity(n_paths); n];
    let mut x = vec![Vec::with_capacity(n_paths); n + 1];
    let mut jumps: Vec<IntervalJumps<T>> = (0..n)
        .map(|_| IntervalJumps {
            offsets: vec![0],
            times: Vec::new(),
            marks: Vec::new(),
        })
        .collect();
    for path in &paths {
        for i in 0..n {
            db[i].push(path.db[i]);
            let record = &mut jumps[i];
            for &(t, m) in &path.jumps[i] {
                record.times.push(t);
                record.marks.push(m);
            }
            record.offsets.push(record.times.len());
        }
        for i in 0..=n {
            x[i].push(path.x[i]);
        }
    }

    Ok(PathBundle {
        grid,
        jump_model: jump.clone(),
        diffusion: diff.clone(),
        n_paths,
        seed,
        db,
        x,
        jumps,
    })
}

impl<T: Scalar> PathBundle<T> {
    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn jump_model(&self) -> &JumpModel {
        &self.jump_model
    }

    pub fn diffusion(&self) -> &DiffusionModel {
        &self.diffusion
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Brownian increments over `(t_i, t_{i+1}]`, one per path.
    pub fn db(&self, i: usize) -> &[T] {
        &self.db[i]
    }

    /// Euler states at node `i`, one per path.
    pub fn x(&self, i: usize) -> &[T] {
        &self.x[i]
    }

    pub fn jumps(&self, i: usize) -> &IntervalJumps<T> {
        &self.jumps[i]
    }

    pub fn has_jumps(&self) -> bool {
        self.jump_model.intensity > 0.0
    }

    /// `B(t_i)` per path.
    pub fn brownian(&self, i: usize) -> Vec<T> {
        let mut acc = vec![T::zero(); self.n_paths];
        for j in 0..i {
            for (a, &d) in acc.iter_mut().zip(&self.db[j]) {
                *a += d;
            }
        }
        acc
    }

    /// Compensated increments `∫∫ w(ζ) Ñ(ds, dζ)` over every grid interval, `[i][p]`.
    pub fn compensated_increments(&self, w: &Expr) -> Result<Vec<Vec<T>>, StochasticError> {
        let compensator = T::lit(self.jump_model.integrate_weight(w)?) * self.grid.dt();
        (0..self.grid.steps())
            .map(|i| {
                let record = &self.jumps[i];
                (0..self.n_paths)
                    .map(|p| {
                        let mut acc = T::zero();
                        for &mark in record.marks(p) {
                            acc += w
                                .eval(&Env::new().with(Var::Zeta, mark))
                                .map_err(|source| StochasticError::Weight {
                                    mark: mark.to_f64_lossy(),
                                    source,
                                })?;
                        }
                        Ok(acc - compensator)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Per-path value of `∫∫ w(ζ) Ñ(ds, dζ)` over `(t_from, t_to]`.
pub fn jump_integral<T: Scalar>(
    bundle: &PathBundle<T>,
    w: &Expr,
    from: usize,
    to: usize,
) -> Result<Vec<T>, StochasticError> {
    let steps = bundle.grid.steps();
    if from > to || to > steps {
        return Err(StochasticError::Range { from, to, steps });
    }
    let nu_w = T::lit(bundle.jump_model.integrate_weight(w)?);
    let compensator = T::from_usize_lossy(to - from) * bundle.grid.dt() * nu_w;
    (0..bundle.n_paths)
        .map(|p| {
            let mut acc = T::zero();
            for i in from..to {
                for &mark in bundle.jumps[i].marks(p) {
                    acc += w
                        .eval(&Env::new().with(Var::Zeta, mark))
                        .map_err(|source| StochasticError::Weight {
                            mark: mark.to_f64_lossy(),
                            source,
                        })?;
                }
            }
            Ok(acc - compensator)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;
    use crate::scalar::mean_and_stderr;

    fn point_jumps(lambda: f64) -> JumpModel {
        JumpModel::new(lambda, MarkDistribution::Point { value: 1.0 }).unwrap()
    }

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::<f64>::new(1.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(TimeGrid::<f64>::new(1.0, 0).is_err());
        assert!(TimeGrid::<f64>::new(0.0, 3).is_err());
    }

    #[test]
    fn constant_path() {
        let diff = DiffusionModel::parse(1.0, "0", "0").unwrap();
        let b = simulate_paths(TimeGrid::<f64>::new(1.0, 8).unwrap(), &point_jumps(2.0), &diff, 50, 3).unwrap();
        for i in 0..=8 {
            assert!(b.x(i).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn deterministic_ode() {
        let diff = DiffusionModel::parse(0.0, "0.5", "0").unwrap();
        let b = simulate_paths(TimeGrid::<f64>::new(1.0, 4).unwrap(), &JumpModel::none(), &diff, 3, 0).unwrap();
        let expected = [0.0, 0.125, 0.25, 0.375, 0.5];
        for (i, e) in expected.iter().enumerate() {
            assert!(b.x(i).iter().all(|v| (v - e).abs() < 1e-15));
        }
    }

    #[test]
    fn brownian_terminal_mean() {
        let n = 100_000;
        let b = simulate_paths(TimeGrid::<f64>::new(1.0, 4).unwrap(), &JumpModel::none(), &DiffusionModel::brownian(0.0), n, 11)
            .unwrap();
        let (mean, _) = mean_and_stderr(b.x(4));
        assert!(mean.abs() <= 3.0 * (1.0 / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn reproducible_and_prefix_stable() {
        let diff = DiffusionModel::parse(1.0, "0.05*x", "0.2*x").unwrap();
        let jumps = JumpModel::new(1.5, MarkDistribution::Normal { mean: 0.1, sd: 0.3 }).unwrap();
        let grid = TimeGrid::<f64>::new(1.0, 6).unwrap();
        let a = simulate_paths(grid, &jumps, &diff, 40, 99).unwrap();
        let b = simulate_paths(grid, &jumps, &diff, 40, 99).unwrap();
        let c = simulate_paths(grid, &jumps, &diff, 70, 99).unwrap();
        for i in 0..6 {
            assert_eq!(a.db(i), b.db(i));
            assert_eq!(a.db(i), &c.db(i)[..40]);
            for p in 0..40 {
                assert_eq!(a.jumps(i).marks(p), c.jumps(i).marks(p));
                assert_eq!(a.jumps(i).times(p), b.jumps(i).times(p));
            }
        }
        let d = simulate_paths(grid, &jumps, &diff, 40, 100).unwrap();
        assert_ne!(a.db(0), d.db(0));
    }

    #[test]
    fn jump_times_fall_in_their_interval() {
        let grid = TimeGrid::<f64>::new(2.0, 5).unwrap();
        let b = simulate_paths(grid, &point_jumps(3.0), &DiffusionModel::brownian(0.0), 200, 5).unwrap();
        for i in 0..5 {
            for p in 0..200 {
                for &t in b.jumps(i).times(p) {
                    assert!(t > grid.node(i) && t <= grid.node(i + 1) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn no_jumps_gives_zero_integral() {
        let b = simulate_paths(TimeGrid::<f64>::new(1.0, 4).unwrap(), &JumpModel::none(), &DiffusionModel::brownian(0.0), 20, 1)
            .unwrap();
        let v = jump_integral(&b, &parse("zeta").unwrap(), 0, 4).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        let b = simulate_paths(TimeGrid::<f64>::new(1.0, 4).unwrap(), &point_jumps(1.0), &DiffusionModel::brownian(0.0), 20, 1)
            .unwrap();
        let v = jump_integral(&b, &parse("0").unwrap(), 0, 4).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn compensated_integral_is_centred() {
        let n = 100_000;
        let b = simulate_paths(TimeGrid::<f64>::new(1.0, 4).unwrap(), &point_jumps(1.0), &DiffusionModel::brownian(0.0), n, 21)
            .unwrap();
        let v = jump_integral(&b, &parse("zeta").unwrap(), 0, 4).unwrap();
        let (mean, se) = mean_and_stderr(&v);
        assert!(mean.abs() <= 3.0 * se, "{mean} vs {se}");
        // Poisson(1) minus 1 has unit variance
        assert!((se * (n as f64).sqrt() - 1.0).abs() < 0.02);
    }

    #[test]
    fn weight_integrals_by_quadrature() {
        let normal = JumpModel::new(2.0, MarkDistribution::Normal { mean: 0.5, sd: 0.2 }).unwrap();
        let m = normal.integrate_weight(&parse("zeta^2").unwrap()).unwrap();
        assert!((m - 2.0 * (0.25 + 0.04)).abs() < 1e-12);
        let logn = JumpModel::new(1.0, MarkDistribution::Lognormal { mu: 0.0, sigma: 0.5 }).unwrap();
        let m = logn.integrate_weight(&parse("zeta").unwrap()).unwrap();
        assert!((m - 0.125f64.exp()).abs() < 1e-12);
        assert!(matches!(
            normal.integrate_weight(&parse("log(zeta)").unwrap()),
            Err(StochasticError::Weight { .. })
        ));
    }

    #[test]
    fn invalid_models() {
        assert!(JumpModel::new(-1.0, MarkDistribution::Point { value: 1.0 }).is_err());
        assert!(JumpModel::new(1.0, MarkDistribution::Point { value: 0.0 }).is_err());
        assert!(JumpModel::new(1.0, MarkDistribution::Normal { mean: 0.0, sd: 0.0 }).is_err());
        assert!(DiffusionModel::parse(0.0, "y", "1").is_err());
    }

    #[test]
    fn euler_failure_names_step_and_path() {
        let diff = DiffusionModel::parse(1.0, "log(x - 1)", "0").unwrap();
        let err = simulate_paths(TimeGrid::<f64>::new(1.0, 2).unwrap(), &JumpModel::none(), &diff, 2, 0).unwrap_err();
        assert!(matches!(err, StochasticError::Evaluation { step: 0, path: 0, .. }), "{err}");
    }
}
