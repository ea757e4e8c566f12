//! Measure change `dQ = M(T) dP` driven by a Brownian coefficient `β` and a
//! jump coefficient `θ`, and Q-conditional expectations as ratios of
//! P-conditional expectations.
//!
//! `β` and `θ` may depend on `(s, x)` where `x = X(s)`; they are always
//! evaluated at the left end of a grid interval, which keeps them predictable.

use serde::Serialize;
use thiserror::Error;

use crate::dsl::{parse_with_vars, Env, EvalError, Expr, ParseError, Var};
use crate::regression::{Projector, RegressionBasis, RegressionError, RegressionFit};
use crate::scalar::{mean_and_stderr, Scalar};
use crate::stochastic::{PathBundle, StochasticError};

#[derive(Debug, Error)]
pub enum GirsanovError {
    #[error("expression error: {0}")]
    Parse(#[from] ParseError),
    #[error("coefficient uses `{0}`, which is not allowed here")]
    Variable(Var),
    #[error("theta = {theta} <= -1 at step {step}, path {path}, mark {mark}")]
    JumpFactor {
        step: usize,
        path: usize,
        mark: f64,
        theta: f64,
    },
    #[error("coefficient evaluation failed at step {step}, path {path}: {source}")]
    Evaluation {
        step: usize,
        path: usize,
        #[source]
        source: EvalError,
    },
    #[error(transparent)]
    Stochastic(#[from] StochasticError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error("estimated denominator E[M(T)|F_t] is not positive on path {path}")]
    Denominator { path: usize },
    #[error("payoff length {got} does not match {expected} paths")]
    Length { got: usize, expected: usize },
    #[error("density evaluated on a different grid")]
    Grid,
}

/// `β(s, x)`, `θ(s, x, ζ)`, the lower margin `ε` and the dominating `Π(ζ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GirsanovCoefficients {
    pub beta: Expr,
    pub theta: Expr,
    pub epsilon: f64,
    pub dominating: Expr,
}

const BETA_VARS: [Var; 3] = [Var::T, Var::S, Var::X];
const THETA_VARS: [Var; 4] = [Var::T, Var::S, Var::X, Var::Zeta];

impl GirsanovCoefficients {
    pub fn new(beta: Expr, theta: Expr, epsilon: f64, dominating: Expr) -> Result<Self, GirsanovError> {
        for v in beta.variables() {
            if !BETA_VARS.contains(&v) {
                return Err(GirsanovError::Variable(v));
            }
        }
        for v in theta.variables() {
            if !THETA_VARS.contains(&v) {
                return Err(GirsanovError::Variable(v));
            }
        }
        for v in dominating.variables() {
            if v != Var::Zeta {
                return Err(GirsanovError::Variable(v));
            }
        }
        Ok(GirsanovCoefficients {
            beta,
            theta,
            epsilon,
            dominating,
        })
    }

    pub fn parse(beta: &str, theta: &str, epsilon: f64, dominating: &str) -> Result<Self, GirsanovError> {
        Self::new(
            parse_with_vars(beta, &BETA_VARS)?,
            parse_with_vars(theta, &THETA_VARS)?,
            epsilon,
            parse_with_vars(dominating, &[Var::Zeta])?,
        )
    }

    /// `β = θ = 0`: the identity measure change.
    pub fn zero() -> Self {
        GirsanovCoefficients {
            beta: Expr::Lit(0.0),
            theta: Expr::Lit(0.0),
            epsilon: 0.5,
            dominating: Expr::Lit(0.0),
        }
    }

    pub fn is_state_dependent(&self) -> bool {
        self.beta.uses(Var::X) || self.theta.uses(Var::X)
    }

    pub fn is_trivial(&self) -> bool {
        self.beta == Expr::Lit(0.0) && self.theta == Expr::Lit(0.0)
    }

    fn env<T: Scalar>(s: T, x: T) -> Env<T> {
        Env::new().with(Var::S, s).with(Var::T, s).with(Var::X, x)
    }

    pub fn beta_at<T: Scalar>(&self, s: T, x: T) -> Result<T, EvalError> {
        self.beta.eval(&Self::env(s, x))
    }

    pub fn theta_at<T: Scalar>(&self, s: T, x: T, zeta: T) -> Result<T, EvalError> {
        self.theta.eval(&Self::env(s, x).with(Var::Zeta, zeta))
    }

    /// Checks `θ ≥ -1 + ε`, `|θ| ≤ Π`, `∫ Π² dν < ∞` and finiteness of `β` on
    /// every grid node and a subsample of simulated states and marks.
    pub fn audit<T: Scalar>(&self, bundle: &PathBundle<T>) -> Result<GirsanovAudit, GirsanovError> {
        let grid = bundle.grid();
        let nu = bundle.jump_model();
        let stride = (bundle.n_paths() / 64).max(1);
        let mut marks: Vec<f64> = nu.marks.support_sample();
        for i in 0..grid.steps() {
            for p in (0..bundle.n_paths()).step_by(stride) {
                marks.extend(bundle.jumps(i).marks(p).iter().map(|m| m.to_f64_lossy()));
            }
        }
        let pi_sq = nu
            .integrate(|z| {
                self.dominating
                    .eval(&Env::new().with(Var::Zeta, z))
                    .map(|v: f64| v * v)
            })
            .map_err(|source| GirsanovError::Evaluation { step: 0, path: 0, source })?;

        let mut audit = GirsanovAudit {
            min_theta_margin: f64::INFINITY,
            max_domination_excess: f64::NEG_INFINITY,
            max_abs_beta: 0.0,
            dominating_square_integral: pi_sq,
            passed: true,
        };
        for i in 0..grid.steps() {
            let s = grid.node(i).to_f64_lossy();
            for p in (0..bundle.n_paths()).step_by(stride) {
                let x = bundle.x(i)[p].to_f64_lossy();
                let b: f64 = self
                    .beta_at(s, x)
                    .map_err(|source| GirsanovError::Evaluation { step: i, path: p, source })?;
                audit.max_abs_beta = audit.max_abs_beta.max(b.abs());
                if nu.intensity == 0.0 {
                    continue;
                }
                for &z in &marks {
                    let th: f64 = self
                        .theta_at(s, x, z)
                        .map_err(|source| GirsanovError::Evaluation { step: i, path: p, source })?;
                    let pi: f64 = self
                        .dominating
                        .eval(&Env::new().with(Var::Zeta, z))
                        .map_err(|source| GirsanovError::Evaluation { step: i, path: p, source })?;
                    audit.min_theta_margin = audit.min_theta_margin.min(th - (-1.0 + self.epsilon));
                    audit.max_domination_excess = audit.max_domination_excess.max(th.abs() - pi);
                }
            }
        }
        audit.passed = self.epsilon > 0.0
            && audit.min_theta_margin >= 0.0
            && audit.max_domination_excess <= 0.0
            && pi_sq.is_finite();
        Ok(audit)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GirsanovAudit {
    /// `min (θ - (-1 + ε))`; negative means the lower bound fails.
    pub min_theta_margin: f64,
    /// `max (|θ| - Π)`; positive means domination fails.
    pub max_domination_excess: f64,
    pub max_abs_beta: f64,
    pub dominating_square_integral: f64,
    pub passed: bool,
}

/// `M(t_i)` per path; `M(0) = 1`, `M > 0`.
#[derive(Clone, Debug)]
pub struct DensityPath<T> {
    steps: usize,
    values: Vec<Vec<T>>,
}

impl<T: Scalar> DensityPath<T> {
    pub fn at(&self, i: usize) -> &[T] {
        &self.values[i]
    }

    pub fn terminal(&self) -> &[T] {
        &self.values[self.steps]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `M(T) / M(t_i)` per path.
    pub fn forward_ratio(&self, i: usize) -> Vec<T> {
        self.terminal().iter().zip(self.at(i)).map(|(&a, &b)| a / b).collect()
    }

    /// The identity density `M ≡ 1`.
    pub fn ones(steps: usize, n_paths: usize) -> Self {
        DensityPath {
            steps,
            values: vec![vec![T::one(); n_paths]; steps + 1],
        }
    }
}

/// Accumulates the exponent of `M` interval by interval:
/// `β ΔB - ½ β² Δ + Σ_jumps ln(1 + θ) - (∫ θ dν) Δ`, with coefficients frozen at
/// the left node.
pub fn stochastic_exponential<T: Scalar>(
    coeffs: &GirsanovCoefficients,
    bundle: &PathBundle<T>,
) -> Result<DensityPath<T>, GirsanovError> {
    let grid = bundle.grid();
    let n = grid.steps();
    let n_paths = bundle.n_paths();
    let dt = grid.dt();
    let half = T::lit(0.5);
    let nu = bundle.jump_model();
    let jumps_active = nu.intensity > 0.0 && coeffs.theta != Expr::Lit(0.0);

    let theta_nu = |s: f64, x: f64, step: usize, path: usize| -> Result<T, GirsanovError> {
        if !jumps_active {
            return Ok(T::zero());
        }
        nu.integrate(|z| coeffs.theta_at(s, x, z))
            .map(T::lit)
            .map_err(|source| GirsanovError::Evaluation { step, path, source })
    };
    let theta_uses_x = coeffs.theta.uses(Var::X);

    let mut log_m = vec![T::zero(); n_paths];
    let mut values = Vec::with_capacity(n + 1);
    values.push(vec![T::one(); n_paths]);
    for i in 0..n {
        let s = grid.node(i);
        let s64 = s.to_f64_lossy();
        let shared_comp = if theta_uses_x {
            None
        } else {
            Some(theta_nu(s64, 0.0, i, 0)?)
        };
        let db = bundle.db(i);
        let xs = bundle.x(i);
        let record = bundle.jumps(i);
        for p in 0..n_paths {
            let x = xs[p];
            let beta = coeffs
                .beta_at(s, x)
                .map_err(|source| GirsanovError::Evaluation { step: i, path: p, source })?;
            let mut incr = beta * db[p] - half * beta * beta * dt;
            if jumps_active {
                for &mark in record.marks(p) {
                    let th = coeffs
                        .theta_at(s, x, mark)
                        .map_err(|source| GirsanovError::Evaluation { step: i, path: p, source })?;
                    if th <= -T::one() {
                        return Err(GirsanovError::JumpFactor {
                            step: i,
                            path: p,
                            mark: mark.to_f64_lossy(),
                            theta: th.to_f64_lossy(),
                        });
                    }
                    incr += (T::one() + th).ln();
                }
                let comp = match shared_comp {
                    Some(c) => c,
                    None => theta_nu(s64, x.to_f64_lossy(), i, p)?,
                };
                incr -= comp * dt;
            }
            log_m[p] += incr;
        }
        values.push(log_m.iter().map(|v| v.exp()).collect());
    }
    Ok(DensityPath { steps: n, values })
}

/// How `E[M(T) | F_t]` is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DenominatorMode {
    /// Regress `M(T)` on the state.
    Estimated,
    /// Use the simulated `M(t)` (tower property) and regress `M(T)/M(t) · payoff`.
    #[default]
    Simulated,
}

/// Estimate of `E[M(T) ξ | F_t] / E[M(T) | F_t]`.
#[derive(Clone, Debug)]
pub struct RatioEstimate<T> {
    /// Per-path value of the ratio.
    pub values: Vec<T>,
    /// Estimate of the P-mean of the ratio at this node.
    pub mean: T,
    pub stderr: T,
    pub numerator: Option<RegressionFit<T>>,
    pub denominator: Option<RegressionFit<T>>,
}

/// Regression estimate of the Q-conditional expectation of `payoff` given the
/// state at node `node`.
pub fn q_conditional_ratio<T: Scalar>(
    payoff: &[T],
    density: &DensityPath<T>,
    node: usize,
    state: &[&[T]],
    basis: RegressionBasis,
    mode: DenominatorMode,
) -> Result<RatioEstimate<T>, GirsanovError> {
    let n = density.terminal().len();
    if payoff.len() != n {
        return Err(GirsanovError::Length {
            got: payoff.len(),
            expected: n,
        });
    }
    if node > density.steps() {
        return Err(GirsanovError::Grid);
    }
    let projector = Projector::new(basis, state)?;
    match mode {
        DenominatorMode::Simulated => {
            let target: Vec<T> = density
                .forward_ratio(node)
                .iter()
                .zip(payoff)
                .map(|(&w, &v)| w * v)
                .collect();
            let (coefficients, values) = projector.project(&target);
            let (mean, stderr) = mean_and_stderr(&target);
            Ok(RatioEstimate {
                values,
                mean,
                stderr,
                numerator: projector.to_fit(coefficients),
                denominator: None,
            })
        }
        DenominatorMode::Estimated => {
            let weights = density.terminal();
            let weighted: Vec<T> = weights.iter().zip(payoff).map(|(&w, &v)| w * v).collect();
            let (num_c, num) = projector.project(&weighted);
            let (den_c, den) = projector.project(weights);
            let mut values = Vec::with_capacity(n);
            for (p, (&a, &b)) in num.iter().zip(&den).enumerate() {
                if !(b > T::zero()) {
                    return Err(GirsanovError::Denominator { path: p });
                }
                values.push(a / b);
            }
            // delta-method influence values of the self-normalized estimator
            let influence: Vec<T> = (0..n)
                .map(|p| values[p] + weights[p] * (payoff[p] - values[p]) / den[p])
                .collect();
            let (_, stderr) = mean_and_stderr(&influence);
            let (mean, _) = mean_and_stderr(&values);
            Ok(RatioEstimate {
                values,
                mean,
                stderr,
                numerator: projector.to_fit(num_c),
                denominator: projector.to_fit(den_c),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{simulate_paths, DiffusionModel, JumpModel, MarkDistribution, TimeGrid};

    fn bundle(lambda: f64, n: usize, seed: u64) -> PathBundle<f64> {
        let jumps = JumpModel::new(lambda, MarkDistribution::Point { value: 1.0 }).unwrap();
        simulate_paths(TimeGrid::new(1.0, 8).unwrap(), &jumps, &DiffusionModel::brownian(0.0), n, seed).unwrap()
    }

    #[test]
    fn trivial_change_is_identity() {
        let b = bundle(1.0, 200, 1);
        let m = stochastic_exponential(&GirsanovCoefficients::zero(), &b).unwrap();
        for i in 0..=8 {
            assert!(m.at(i).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn brownian_factor_matches_direct_formula() {
        let b = bundle(0.0, 300, 2);
        let c = GirsanovCoefficients::parse("0.4", "0", 0.5, "0").unwrap();
        let m = stochastic_exponential(&c, &b).unwrap();
        let grid = b.grid();
        for i in 0..=8 {
            let bt = b.brownian(i);
            let t = grid.node(i);
            for (p, &v) in m.at(i).iter().enumerate() {
                let direct = (0.4 * bt[p] - 0.5 * 0.16 * t).exp();
                assert!((v - direct).abs() <= 1e-12 * direct, "{v} vs {direct}");
            }
        }
    }

    #[test]
    fn pure_jump_factor() {
        let n = 100_000;
        let b = bundle(1.0, n, 3);
        let c = GirsanovCoefficients::parse("0", "0.3", 0.5, "0.3").unwrap();
        let m = stochastic_exponential(&c, &b).unwrap();
        for p in 0..50 {
            let count: usize = (0..8).map(|i| b.jumps(i).count(p)).sum();
            let expected = 1.3f64.powi(count as i32) * (-0.3f64).exp();
            assert!((m.terminal()[p] - expected).abs() < 1e-12 * expected);
        }
        let (mean, se) = mean_and_stderr(m.terminal());
        assert!((mean - 1.0).abs() <= 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn theta_at_or_below_minus_one_is_rejected() {
        let b = bundle(5.0, 50, 4);
        let c = GirsanovCoefficients::parse("0", "-1", 0.5, "1").unwrap();
        assert!(matches!(stochastic_exponential(&c, &b), Err(GirsanovError::JumpFactor { .. })));
    }

    #[test]
    fn audit_flags_bounds() {
        let b = bundle(1.0, 64, 5);
        let ok = GirsanovCoefficients::parse("0.3", "0.2", 0.5, "0.2").unwrap();
        assert!(ok.audit(&b).unwrap().passed);
        let low = GirsanovCoefficients::parse("0", "-0.9", 0.5, "1").unwrap();
        assert!(!low.audit(&b).unwrap().passed);
        let undominated = GirsanovCoefficients::parse("0", "0.5", 0.5, "0.1").unwrap();
        assert!(!undominated.audit(&b).unwrap().passed);
    }

    #[test]
    fn constant_payoff_passes_through() {
        let b = bundle(1.0, 500, 6);
        let c = GirsanovCoefficients::parse("0.3", "0.2", 0.5, "0.2").unwrap();
        let m = stochastic_exponential(&c, &b).unwrap();
        let payoff = vec![2.0; 500];
        for mode in [DenominatorMode::Estimated, DenominatorMode::Simulated] {
            let r = q_conditional_ratio(&payoff, &m, 4, &[b.x(4)], RegressionBasis::new(3), mode).unwrap();
            if mode == DenominatorMode::Estimated {
                assert!(r.values.iter().all(|&v| (v - 2.0).abs() < 1e-12));
            } else {
                // ratio of M(T)/M(t) has conditional mean one, not sample mean one
                assert!((r.mean - 2.0).abs() < 3.0 * r.stderr + 1e-12);
            }
        }
    }

    #[test]
    fn shifted_brownian_mean() {
        let n = 40_000;
        let b = bundle(0.0, n, 7);
        let c = GirsanovCoefficients::parse("0.5", "0", 0.5, "0").unwrap();
        let m = stochastic_exponential(&c, &b).unwrap();
        let payoff = b.brownian(8);
        for mode in [DenominatorMode::Estimated, DenominatorMode::Simulated] {
            let r = q_conditional_ratio(&payoff, &m, 0, &[b.x(0)], RegressionBasis::new(3), mode).unwrap();
            assert!((r.mean - 0.5).abs() <= 3.0 * r.stderr, "{mode:?}: {} ± {}", r.mean, r.stderr);
        }
    }
}
