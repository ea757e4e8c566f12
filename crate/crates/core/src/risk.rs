//! The dynamic risk measure `ρ(t; ψ) = Y(t)` of the equation with terminal
//! `-ψ` and a driver free of `y`, and statistical checks of its axioms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::driver::Driver;
use crate::dsl::{EvalError, Expr, ProbeBox, Var};
use crate::estimate::{NodeEstimate, NodeSummary};
use crate::linear::TerminalSign;
use crate::scalar::Scalar;
use crate::solver::{solve, SolutionSurface, SolverError, SolverOptions};
use crate::stochastic::PathBundle;
use crate::terminal::{TerminalError, TerminalProcess};

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("risk drivers must not depend on y")]
    DriverDependsOnY,
    #[error("driver is flagged convex but fails the chord test by {violation} at {point:?}")]
    NotConvex { violation: f64, point: Vec<(String, f64)> },
    #[error("node {node} outside the grid of {steps} steps")]
    Node { node: usize, steps: usize },
    #[error("mixing weights must lie in [0, 1], got {0}")]
    Lambda(f64),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error("driver evaluation failed in the convexity probe: {0}")]
    Evaluation(#[from] EvalError),
}

#[derive(Clone, Debug)]
pub struct RiskSpec {
    pub driver: Driver,
    pub convex: bool,
    pub position: TerminalProcess,
}

impl RiskSpec {
    pub fn new(driver: Driver, convex: bool, position: TerminalProcess) -> Result<Self, RiskError> {
        if driver.depends_on_y() {
            return Err(RiskError::DriverDependsOnY);
        }
        Ok(RiskSpec {
            driver,
            convex,
            position,
        })
    }

    fn with_position(&self, position: TerminalProcess) -> Self {
        RiskSpec {
            position,
            ..self.clone()
        }
    }
}

/// All nodes of `ρ(·; ψ)`.
pub fn rho_surface<T: Scalar>(
    spec: &RiskSpec,
    bundle: &PathBundle<T>,
    opts: &SolverOptions,
) -> Result<SolutionSurface<T>, RiskError> {
    Ok(solve(&spec.driver, &spec.position, TerminalSign::Minus, bundle, opts)?)
}

/// `ρ(t_k; ψ)` as a regression function with its node mean and error.
pub fn rho<T: Scalar>(
    spec: &RiskSpec,
    node: usize,
    bundle: &PathBundle<T>,
    opts: &SolverOptions,
) -> Result<NodeEstimate<T>, RiskError> {
    let steps = bundle.grid().steps();
    if node > steps {
        return Err(RiskError::Node { node, steps });
    }
    let mut surface = rho_surface(spec, bundle, opts)?;
    Ok(surface.y.swap_remove(node))
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvexityProbe {
    pub passed: bool,
    /// Largest `g(midpoint) - mean of endpoint values`; positive violates convexity.
    pub worst_violation: f64,
    pub point: Vec<(String, f64)>,
}

/// Midpoint test of `(z, u) ↦ g` on random chords, other arguments frozen.
pub fn convexity_probe(driver: &Driver, probe_box: &ProbeBox, samples: usize, seed: u64) -> Result<ConvexityProbe, RiskError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let range = |v: Var| {
        probe_box
            .intervals
            .iter()
            .find(|(w, _, _)| *w == v)
            .map(|&(_, lo, hi)| (lo, hi))
            .unwrap_or((0.0, 0.0))
    };
    let mut draw = |v: Var| {
        let (lo, hi) = range(v);
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    let m = driver.weight_count();
    let mut worst = f64::NEG_INFINITY;
    let mut point = Vec::new();
    for _ in 0..samples {
        let t = draw(Var::T);
        let s = draw(Var::S).max(t);
        let (x, xt) = (draw(Var::X), draw(Var::Xt));
        let (z1, z2) = (draw(Var::Z), draw(Var::Z));
        let u1: Vec<f64> = (0..m).map(|k| draw(Var::U(k as u8))).collect();
        let u2: Vec<f64> = (0..m).map(|k| draw(Var::U(k as u8))).collect();
        let um: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| 0.5 * (a + b)).collect();
        let g = |z: f64, u: &[f64]| driver.eval(t, s, 0.0, z, u, x, xt);
        let violation = g(0.5 * (z1 + z2), &um)? - 0.5 * (g(z1, &u1)? + g(z2, &u2)?);
        if violation > worst {
            worst = violation;
            point = vec![("t".into(), t), ("s".into(), s), ("z1".into(), z1), ("z2".into(), z2)];
            point.extend(u1.iter().enumerate().map(|(k, &v)| (format!("u{}_1", k + 1), v)));
            point.extend(u2.iter().enumerate().map(|(k, &v)| (format!("u{}_2", k + 1), v)));
        }
    }
    Ok(ConvexityProbe {
        passed: worst <= 1e-12,
        worst_violation: worst.max(0.0),
        point,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axiom {
    Convexity,
    Monotonicity,
    TranslationInvariance,
    PastIndependence,
}

fn pass_fail<S: Serializer>(passed: &bool, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(if *passed { "pass" } else { "fail" })
}

#[derive(Clone, Debug, Serialize)]
pub struct AxiomVerdict {
    pub axiom: Axiom,
    #[serde(serialize_with = "pass_fail")]
    pub verdict: bool,
    /// Slack of the inequality at the node closest to failing (for the exact
    /// axioms: the largest absolute deviation, negated).
    pub worst_margin: f64,
    pub node: usize,
    pub stderr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct NormalizationCheck {
    /// Largest `|ρ(t; 0)|` over nodes and paths.
    pub max_abs: f64,
    /// Whether `g(t, s, 0, 0) = 0` on the sampled points, so zero is expected.
    pub driver_vanishes: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RiskReport {
    pub rho: Vec<NodeSummary>,
    pub normalization: NormalizationCheck,
    pub convexity_probe: Option<ConvexityProbe>,
    pub axioms: Vec<AxiomVerdict>,
}

impl RiskReport {
    pub fn passed(&self) -> bool {
        self.axioms.iter().all(|a| a.verdict) && self.normalization.passed && self.convexity_probe.as_ref().is_none_or(|c| c.passed)
    }

    pub fn axiom(&self, a: Axiom) -> &AxiomVerdict {
        self.axioms.iter().find(|v| v.axiom == a).expect("every axiom is checked")
    }
}

#[derive(Clone, Debug)]
pub struct AxiomOptions {
    /// Cash shift `a` for translation invariance.
    pub shift: f64,
    /// Mixing weights for convexity.
    pub lambdas: Vec<f64>,
    /// Second position for convexity; `-ψ` when absent.
    pub partner: Option<TerminalProcess>,
    /// A position dominating `ψ` path-wise; `ψ + |X(T)|` when absent.
    pub dominating: Option<TerminalProcess>,
    /// Nodes `t_k` at which `ψ` is perturbed on `[0, t_k)`; the midpoint when empty.
    pub past_nodes: Vec<usize>,
    /// Statistical tolerance in standard errors.
    pub tol_multiplier: f64,
    /// Absolute tolerance for translation invariance.
    pub translation_tol: f64,
    pub probe_samples: usize,
    pub seed: u64,
}

impl Default for AxiomOptions {
    fn default() -> Self {
        AxiomOptions {
            shift: 5.0,
            lambdas: vec![0.25, 0.5, 0.75],
            partner: None,
            dominating: None,
            past_nodes: Vec::new(),
            tol_multiplier: 3.0,
            translation_tol: 1e-8,
            probe_samples: 2000,
            seed: 0,
        }
    }
}

/// `ψ + 100·1{t < t_k}`, written with the language's `indicator(· ≥ 0)`.
fn perturb_past(psi: &TerminalProcess, t_k: f64) -> TerminalProcess {
    let before = Expr::sub(
        Expr::lit(1.0),
        Expr::Indicator(Box::new(Expr::sub(Expr::var(Var::T), Expr::lit(t_k)))),
    );
    TerminalProcess::new(Expr::add(psi.expr().clone(), Expr::mul(Expr::lit(100.0), before))).expect("same variables")
}

fn shifted(psi: &TerminalProcess, a: f64) -> TerminalProcess {
    TerminalProcess::new(Expr::add(psi.expr().clone(), Expr::lit(a))).expect("same variables")
}

/// Tracks the node where `slack + tol·se` is smallest.
struct Worst {
    key: f64,
    slack: f64,
    node: usize,
    se: f64,
}

impl Worst {
    fn new() -> Self {
        Worst {
            key: f64::INFINITY,
            slack: 0.0,
            node: 0,
            se: 0.0,
        }
    }

    fn record(&mut self, slack: f64, se: f64, tol: f64, node: usize) {
        let key = slack + tol * se;
        if key < self.key {
            *self = Worst { key, slack, node, se };
        }
    }
}

pub fn axiom_suite<T: Scalar>(
    spec: &RiskSpec,
    bundle: &PathBundle<T>,
    solver: &SolverOptions,
    opts: &AxiomOptions,
) -> Result<RiskReport, RiskError> {
    let grid = bundle.grid();
    let n = grid.steps();
    for &l in &opts.lambdas {
        if !(0.0..=1.0).contains(&l) {
            return Err(RiskError::Lambda(l));
        }
    }
    let past_nodes = if opts.past_nodes.is_empty() {
        vec![n / 2]
    } else {
        opts.past_nodes.clone()
    };
    if let Some(&node) = past_nodes.iter().find(|&&k| k > n) {
        return Err(RiskError::Node { node, steps: n });
    }

    let psi = &spec.position;
    let partner = opts
        .partner
        .clone()
        .unwrap_or_else(|| TerminalProcess::new(Expr::Neg(Box::new(psi.expr().clone()))).expect("same variables"));
    let dominating = opts.dominating.clone().unwrap_or_else(|| {
        TerminalProcess::new(Expr::add(psi.expr().clone(), Expr::Abs(Box::new(Expr::var(Var::X))))).expect("same variables")
    });

    // every position solved on the same paths
    let mut positions = vec![
        psi.clone(),
        shifted(psi, opts.shift),
        TerminalProcess::constant(0.0),
        partner.clone(),
        dominating.clone(),
    ];
    for &l in &opts.lambdas {
        positions.push(TerminalProcess::combine(l, psi, 1.0 - l, &partner));
    }
    for &k in &past_nodes {
        positions.push(perturb_past(psi, grid.node(k).to_f64_lossy()));
    }
    let surfaces: Vec<SolutionSurface<T>> = positions
        .par_iter()
        .map(|p| rho_surface(&spec.with_position(p.clone()), bundle, solver))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_, _>>()?;
    let base = &surfaces[0];
    let shifted_s = &surfaces[1];
    let zero = &surfaces[2];
    let partner_s = &surfaces[3];
    let dom_s = &surfaces[4];
    let mixes = &surfaces[5..5 + opts.lambdas.len()];
    let pasts = &surfaces[5 + opts.lambdas.len()..];
    let tol = opts.tol_multiplier;
    let mut axioms = Vec::new();

    // convexity: ρ(λψ₁ + (1-λ)ψ₂) ≤ λρ(ψ₁) + (1-λ)ρ(ψ₂)
    let mut worst = Worst::new();
    for (&l, mix) in opts.lambdas.iter().zip(mixes) {
        for k in 0..=n {
            let lhs = mix.y[k].mean.to_f64_lossy();
            let rhs = l * base.y[k].mean.to_f64_lossy() + (1.0 - l) * partner_s.y[k].mean.to_f64_lossy();
            let se = (mix.y[k].stderr.to_f64_lossy().powi(2)
                + (l * base.y[k].stderr.to_f64_lossy()).powi(2)
                + ((1.0 - l) * partner_s.y[k].stderr.to_f64_lossy()).powi(2))
            .sqrt();
            worst.record(rhs - lhs, se, tol, k);
        }
    }
    axioms.push(AxiomVerdict {
        axiom: Axiom::Convexity,
        verdict: worst.key >= 0.0,
        worst_margin: worst.slack,
        node: worst.node,
        stderr: worst.se,
    });

    // monotonicity: ψ ≤ ψ' path-wise ⇒ ρ(ψ) ≥ ρ(ψ')
    let mut dominated = true;
    for k in 0..=n {
        let a = psi.node_values(bundle, k)?;
        let b = dominating.node_values(bundle, k)?;
        dominated &= a.iter().zip(&b).all(|(u, v)| u <= v);
    }
    let mut worst = Worst::new();
    for k in 0..=n {
        let slack = (base.y[k].mean - dom_s.y[k].mean).to_f64_lossy();
        let se = crate::scalar::combined_stderr(base.y[k].stderr, dom_s.y[k].stderr).to_f64_lossy();
        worst.record(slack, se, tol, k);
    }
    axioms.push(AxiomVerdict {
        axiom: Axiom::Monotonicity,
        verdict: dominated && worst.key >= 0.0,
        worst_margin: worst.slack,
        node: worst.node,
        stderr: worst.se,
    });

    // translation invariance: ρ(ψ + a) = ρ(ψ) - a, path-wise
    let (mut dev, mut dev_node) = (0.0f64, 0);
    let a = T::lit(opts.shift);
    for k in 0..=n {
        for (&u, &v) in shifted_s.y[k].values.iter().zip(&base.y[k].values) {
            let d = (u + a - v).abs().to_f64_lossy();
            if d > dev {
                dev = d;
                dev_node = k;
            }
        }
    }
    axioms.push(AxiomVerdict {
        axiom: Axiom::TranslationInvariance,
        verdict: dev <= opts.translation_tol,
        worst_margin: -dev,
        node: dev_node,
        stderr: 0.0,
    });

    // past independence: nodes at and after t_k are bit-identical
    let (mut identical, mut first_bad, mut dev) = (true, 0, 0.0f64);
    for (&k, surf) in past_nodes.iter().zip(pasts) {
        for j in k..=n {
            for (&u, &v) in surf.y[j].values.iter().zip(&base.y[j].values) {
                if u.to_bits_eq(v) {
                    continue;
                }
                if identical {
                    first_bad = j;
                }
                identical = false;
                dev = dev.max((u - v).abs().to_f64_lossy());
            }
        }
    }
    axioms.push(AxiomVerdict {
        axiom: Axiom::PastIndependence,
        verdict: identical,
        worst_margin: -dev,
        node: if identical { past_nodes[0] } else { first_bad },
        stderr: 0.0,
    });

    // normalization: zero position gives zero risk when g(·, 0, 0) = 0
    let max_abs = zero
        .y
        .iter()
        .flat_map(|e| e.values.iter())
        .fold(0.0f64, |m, v| m.max(v.abs().to_f64_lossy()));
    let mut vanishes = true;
    let horizon = grid.horizon().to_f64_lossy();
    let zeros = vec![0.0; spec.driver.weight_count()];
    for i in 0..=n {
        for j in i..=n {
            let (t, s) = (i as f64 * horizon / n as f64, j as f64 * horizon / n as f64);
            let x = bundle.x(j)[0].to_f64_lossy();
            let xt = bundle.x(i)[0].to_f64_lossy();
            vanishes &= spec.driver.eval(t, s, 0.0, 0.0, &zeros, x, xt)? == 0.0;
        }
    }
    let normalization = NormalizationCheck {
        max_abs,
        driver_vanishes: vanishes,
        passed: !vanishes || max_abs == 0.0,
    };

    let convexity_probe = if spec.convex {
        let x_range = (0..=n).flat_map(|i| bundle.x(i).iter()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.to_f64_lossy();
            (lo.min(v), hi.max(v))
        });
        let probe_box = spec.driver.probe_box(horizon, x_range, 10.0);
        Some(convexity_probe(&spec.driver, &probe_box, opts.probe_samples, opts.seed)?)
    } else {
        None
    };

    Ok(RiskReport {
        rho: base.y.iter().map(|e| e.summary()).collect(),
        normalization,
        convexity_probe,
        axioms,
    })
}

trait BitEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        // integer_decode is exact for both f32 and f64
        self.integer_decode() == other.integer_decode() && self.is_nan() == other.is_nan()
    }
}
