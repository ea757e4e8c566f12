//! Sampled checks of the comparison hypotheses and of the ordering
//! `Y¹ ≥ Y²` on two surfaces solved on the same paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::driver::{invert, Driver};
use crate::dsl::{EvalError, Var};
use crate::girsanov::{GirsanovCoefficients, GirsanovError};
use crate::linear::TerminalSign;
use crate::scalar::{combined_stderr, Scalar};
use crate::solver::SolutionSurface;
use crate::stochastic::PathBundle;
use crate::terminal::{TerminalError, TerminalProcess};

#[derive(Debug, Error)]
pub enum ComparisonError {
    #[error("negated-terminal comparisons need drivers independent of y")]
    DriverDependsOnY,
    #[error("both drivers must use the same jump weights")]
    JumpBasis,
    #[error("the certificate may depend on s and zeta only, found `{0}`")]
    CertificateVariable(Var),
    #[error("surface solved with terminal sign {found:?}, orientation needs {expected:?}")]
    Sign { expected: TerminalSign, found: TerminalSign },
    #[error("surfaces live on different grids")]
    Grid,
    #[error(transparent)]
    Girsanov(#[from] GirsanovError),
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error("evaluation failed: {0}")]
    Evaluation(#[from] EvalError),
    #[error("Gram matrix of the jump weights is singular")]
    SingularGram,
}

/// Which pairing of driver and terminal orderings is being compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `+ψ` terminal, `g₁ ≥ g₂`, `ψ₁ ≥ ψ₂`, `g₁` increasing in `y`.
    PositiveTerminal,
    /// `-ψ` terminal, `g₁ ≥ g₂`, `ψ₁ ≤ ψ₂`, drivers free of `y`.
    NegatedTerminal,
}

impl Orientation {
    pub fn sign(self) -> TerminalSign {
        match self {
            Orientation::PositiveTerminal => TerminalSign::Plus,
            Orientation::NegatedTerminal => TerminalSign::Minus,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub driver: Driver,
    pub terminal: TerminalProcess,
}

#[derive(Clone, Debug)]
pub struct ComparisonInstance {
    pub first: ProblemSpec,
    pub second: ProblemSpec,
    /// `θ(s, ζ)` for the jump condition, with its `ε` and `Π`.
    pub certificate: GirsanovCoefficients,
    pub orientation: Orientation,
}

impl ComparisonInstance {
    pub fn new(
        first: ProblemSpec,
        second: ProblemSpec,
        certificate: GirsanovCoefficients,
        orientation: Orientation,
    ) -> Result<Self, ComparisonError> {
        if orientation == Orientation::NegatedTerminal && (first.driver.depends_on_y() || second.driver.depends_on_y()) {
            return Err(ComparisonError::DriverDependsOnY);
        }
        if first.driver.jump_weights != second.driver.jump_weights {
            return Err(ComparisonError::JumpBasis);
        }
        if let Some(v) = certificate
            .theta
            .variables()
            .into_iter()
            .find(|v| !matches!(v, Var::S | Var::T | Var::Zeta))
        {
            return Err(ComparisonError::CertificateVariable(v));
        }
        Ok(ComparisonInstance {
            first,
            second,
            certificate,
            orientation,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    DriverOrdering,
    JumpMonotonicity,
    GirsanovBounds,
    YMonotonicity,
    TerminalOrdering,
}

#[derive(Clone, Debug, Serialize)]
pub struct Verdict {
    pub hypothesis: Hypothesis,
    pub passed: bool,
    /// Smallest slack found; negative means violated.
    pub worst_margin: f64,
    /// Where the smallest slack occurred.
    pub point: Vec<(String, f64)>,
    pub evaluations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct HypothesisReport {
    pub orientation: Orientation,
    pub verdicts: Vec<Verdict>,
    pub passed: bool,
}

impl HypothesisReport {
    pub fn verdict(&self, h: Hypothesis) -> &Verdict {
        self.verdicts.iter().find(|v| v.hypothesis == h).expect("every hypothesis is checked")
    }
}

/// Margins at or above this count as satisfied (round-off of equal expressions).
const SLACK: f64 = 1e-12;

struct Tracker {
    hypothesis: Hypothesis,
    worst: f64,
    point: Vec<(String, f64)>,
    evaluations: usize,
}

impl Tracker {
    fn new(hypothesis: Hypothesis) -> Self {
        Tracker {
            hypothesis,
            worst: f64::INFINITY,
            point: Vec::new(),
            evaluations: 0,
        }
    }

    fn record(&mut self, margin: f64, point: impl FnOnce() -> Vec<(String, f64)>) {
        self.evaluations += 1;
        if margin < self.worst {
            self.worst = margin;
            self.point = point();
        }
    }

    fn finish(self, scale: f64) -> Verdict {
        let worst = if self.evaluations == 0 { 0.0 } else { self.worst };
        Verdict {
            hypothesis: self.hypothesis,
            passed: worst >= -SLACK * scale.max(1.0),
            worst_margin: worst,
            point: self.point,
            evaluations: self.evaluations,
        }
    }
}

#[derive(Clone, Copy)]
struct DriverPoint<'a> {
    t: f64,
    s: f64,
    y: f64,
    z: f64,
    u: &'a [f64],
    x: f64,
    xt: f64,
}

impl DriverPoint<'_> {
    fn eval(&self, d: &Driver) -> Result<f64, EvalError> {
        d.eval(self.t, self.s, self.y, self.z, self.u, self.x, self.xt)
    }

    fn describe(&self) -> Vec<(String, f64)> {
        let mut v = vec![
            ("t".to_string(), self.t),
            ("s".to_string(), self.s),
            ("y".to_string(), self.y),
            ("z".to_string(), self.z),
        ];
        v.extend(self.u.iter().enumerate().map(|(k, &u)| (format!("u{}", k + 1), u)));
        v.push(("x".to_string(), self.x));
        v.push(("xt".to_string(), self.xt));
        v
    }
}

/// Checks every hypothesis on `sample_count` box points plus the realized
/// values of the two surfaces (a subsample of paths at every cell).
pub fn check_hypotheses<T: Scalar>(
    inst: &ComparisonInstance,
    first: &SolutionSurface<T>,
    second: &SolutionSurface<T>,
    bundle: &PathBundle<T>,
    sample_count: usize,
    seed: u64,
) -> Result<HypothesisReport, ComparisonError> {
    let expected = inst.orientation.sign();
    for s in [first, second] {
        if s.sign != expected {
            return Err(ComparisonError::Sign { expected, found: s.sign });
        }
        if s.grid != *bundle.grid() {
            return Err(ComparisonError::Grid);
        }
    }
    let grid = bundle.grid();
    let n = grid.steps();
    let horizon = grid.horizon().to_f64_lossy();
    let g1 = &inst.first.driver;
    let g2 = &inst.second.driver;
    let m = g1.weight_count();

    let x_lo = (0..=n).flat_map(|i| bundle.x(i).iter()).fold(f64::INFINITY, |a, &v| a.min(v.to_f64_lossy()));
    let x_hi = (0..=n).flat_map(|i| bundle.x(i).iter()).fold(f64::NEG_INFINITY, |a, &v| a.max(v.to_f64_lossy()));
    let radius = 10.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };

    let mut driver_order = Tracker::new(Hypothesis::DriverOrdering);
    let mut y_mono = Tracker::new(Hypothesis::YMonotonicity);
    let mut jump = Tracker::new(Hypothesis::JumpMonotonicity);
    let mut scale = 1.0f64;

    // box samples
    for _ in 0..sample_count {
        let t = draw(0.0, horizon);
        let s = draw(t, horizon);
        let u: Vec<f64> = (0..m).map(|_| draw(-radius, radius)).collect();
        let pt = DriverPoint {
            t,
            s,
            y: draw(-radius, radius),
            z: draw(-radius, radius),
            u: &u,
            x: draw(x_lo, x_hi),
            xt: draw(x_lo, x_hi),
        };
        let (a, b) = (pt.eval(g1)?, pt.eval(g2)?);
        scale = scale.max(a.abs()).max(b.abs());
        driver_order.record(a - b, || pt.describe());
        if inst.orientation == Orientation::PositiveTerminal {
            let y2 = draw(-radius, radius);
            let (lo, hi) = if y2 < pt.y { (y2, pt.y) } else { (pt.y, y2) };
            let low = DriverPoint { y: lo, ..pt }.eval(g1)?;
            let high = DriverPoint { y: hi, ..pt }.eval(g1)?;
            y_mono.record(high - low, || DriverPoint { y: lo, ..pt }.describe());
        }
    }

    // certificate expanded in the jump weights, c(s) = G⁻¹ ∫ θ(s, ·) w dν
    let nu = bundle.jump_model();
    let jumps_active = m > 0 && nu.intensity > 0.0;
    let gram_inverse = if jumps_active {
        invert(&g1.gram(nu).map_err(|_| ComparisonError::SingularGram)?, m).ok_or(ComparisonError::SingularGram)?
    } else {
        Vec::new()
    };
    let cert_at = |s: f64| -> Result<Vec<f64>, ComparisonError> {
        let a: Vec<f64> = g1
            .jump_weights
            .iter()
            .map(|w| {
                nu.integrate(|z| {
                    let th: f64 = inst.certificate.theta_at(s, 0.0, z)?;
                    let wv: f64 = w.eval(&crate::dsl::Env::new().with(Var::Zeta, z))?;
                    Ok::<f64, EvalError>(th * wv)
                })
            })
            .collect::<Result<_, _>>()?;
        Ok((0..m).map(|l| (0..m).map(|q| gram_inverse[l * m + q] * a[q]).sum()).collect())
    };

    // realized values along every cell on a path subsample
    let stride = (bundle.n_paths() / 200).max(1);
    let mut u1 = vec![0.0; m];
    let mut u2 = vec![0.0; m];
    for j in 0..n {
        let s = grid.node(j).to_f64_lossy();
        let c = if jumps_active { cert_at(s)? } else { vec![0.0; m] };
        for i in 0..=j {
            let t = grid.node(i).to_f64_lossy();
            let z2 = second.z_values(bundle, i, j);
            let uu1 = first.u_values(bundle, i, j);
            let uu2 = second.u_values(bundle, i, j);
            let y2 = &second.y[j].values;
            for p in (0..bundle.n_paths()).step_by(stride) {
                for k in 0..m {
                    u1[k] = uu1[k][p].to_f64_lossy();
                    u2[k] = uu2[k][p].to_f64_lossy();
                }
                let pt = DriverPoint {
                    t,
                    s,
                    y: y2[p].to_f64_lossy(),
                    z: z2[p].to_f64_lossy(),
                    u: &u2,
                    x: bundle.x(j)[p].to_f64_lossy(),
                    xt: bundle.x(i)[p].to_f64_lossy(),
                };
                let (a, b) = (pt.eval(g1)?, pt.eval(g2)?);
                scale = scale.max(a.abs());
                driver_order.record(a - b, || pt.describe());
                if jumps_active {
                    let with_first = DriverPoint { u: &u1, ..pt }.eval(g1)?;
                    let theta_term: f64 = (0..m).map(|k| c[k] * (u1[k] - u2[k])).sum();
                    jump.record(with_first - a - theta_term, || DriverPoint { u: &u1, ..pt }.describe());
                }
            }
        }
    }

    let audit = inst.certificate.audit(bundle)?;
    let girsanov = Verdict {
        hypothesis: Hypothesis::GirsanovBounds,
        passed: audit.passed,
        worst_margin: if nu.intensity > 0.0 {
            audit.min_theta_margin.min(-audit.max_domination_excess)
        } else {
            0.0
        },
        point: vec![("integral_pi_squared".to_string(), audit.dominating_square_integral)],
        evaluations: 1,
    };

    let mut terminal = Tracker::new(Hypothesis::TerminalOrdering);
    for i in 0..=n {
        let p1 = inst.first.terminal.node_values(bundle, i)?;
        let p2 = inst.second.terminal.node_values(bundle, i)?;
        for (p, (&a, &b)) in p1.iter().zip(&p2).enumerate() {
            let margin = match inst.orientation {
                Orientation::PositiveTerminal => a - b,
                Orientation::NegatedTerminal => b - a,
            }
            .to_f64_lossy();
            terminal.record(margin, || {
                vec![
                    ("node".to_string(), i as f64),
                    ("path".to_string(), p as f64),
                    ("psi1".to_string(), a.to_f64_lossy()),
                    ("psi2".to_string(), b.to_f64_lossy()),
                ]
            });
        }
    }

    let verdicts = vec![
        driver_order.finish(scale),
        jump.finish(scale),
        girsanov,
        y_mono.finish(scale),
        terminal.finish(1.0),
    ];
    let passed = verdicts.iter().all(|v| v.passed);
    Ok(HypothesisReport {
        orientation: inst.orientation,
        verdicts,
        passed,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct NodeOrdering {
    pub node: usize,
    pub t: f64,
    /// Mean of `Y¹(t) - Y²(t)`.
    pub difference: f64,
    pub stderr: f64,
    /// Smallest pathwise difference of the regression values.
    pub min_pathwise: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderingVerdict {
    pub passed: bool,
    pub tol_multiplier: f64,
    pub nodes: Vec<NodeOrdering>,
    /// Nodes where the difference is below `-tol_multiplier · stderr`.
    pub violations: Vec<usize>,
}

/// `Y¹ - Y² ≥ -tol_multiplier · SE` at every node, with the combined SE of
/// the two node means.
pub fn verify_ordering<T: Scalar>(first: &SolutionSurface<T>, second: &SolutionSurface<T>, tol_multiplier: f64) -> OrderingVerdict {
    let mut nodes = Vec::with_capacity(first.y.len());
    let mut violations = Vec::new();
    for (k, (a, b)) in first.y.iter().zip(&second.y).enumerate() {
        let difference = (a.mean - b.mean).to_f64_lossy();
        let stderr = combined_stderr(a.stderr, b.stderr).to_f64_lossy();
        let min_pathwise = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(&u, &v)| (u - v).to_f64_lossy())
            .fold(f64::INFINITY, f64::min);
        if difference < -tol_multiplier * stderr {
            violations.push(k);
        }
        nodes.push(NodeOrdering {
            node: k,
            t: a.t.to_f64_lossy(),
            difference,
            stderr,
            min_pathwise,
        });
    }
    OrderingVerdict {
        passed: violations.is_empty(),
        tol_multiplier,
        nodes,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{solve, SolverOptions};
    use crate::stochastic::{simulate_paths, DiffusionModel, JumpModel, MarkDistribution, TimeGrid};

    fn bundle() -> PathBundle<f64> {
        let jumps = JumpModel::new(1.0, MarkDistribution::Point { value: 1.0 }).unwrap();
        simulate_paths(TimeGrid::new(1.0, 8).unwrap(), &jumps, &DiffusionModel::brownian(0.0), 2000, 11).unwrap()
    }

    fn spec(g: &str, psi: &str) -> ProblemSpec {
        ProblemSpec {
            driver: Driver::parse(g, &["1"], 1.0).unwrap(),
            terminal: TerminalProcess::parse(psi).unwrap(),
        }
    }

    fn run(inst: &ComparisonInstance, b: &PathBundle<f64>) -> (SolutionSurface<f64>, SolutionSurface<f64>) {
        let sign = inst.orientation.sign();
        let o = SolverOptions::default();
        (
            solve(&inst.first.driver, &inst.first.terminal, sign, b, &o).unwrap(),
            solve(&inst.second.driver, &inst.second.terminal, sign, b, &o).unwrap(),
        )
    }

    fn cert(theta: &str) -> GirsanovCoefficients {
        GirsanovCoefficients::parse("0", theta, 0.5, "abs(zeta)").unwrap()
    }

    #[test]
    fn reflexive_instance() {
        let b = bundle();
        let inst = ComparisonInstance::new(
            spec("0.5*abs(z)", "x"),
            spec("0.5*abs(z)", "x"),
            cert("0"),
            Orientation::NegatedTerminal,
        )
        .unwrap();
        let (s1, s2) = run(&inst, &b);
        let rep = check_hypotheses(&inst, &s1, &s2, &b, 200, 1).unwrap();
        assert!(rep.passed, "{rep:#?}");
        assert_eq!(rep.verdict(Hypothesis::DriverOrdering).worst_margin, 0.0);
        assert_eq!(rep.verdict(Hypothesis::TerminalOrdering).worst_margin, 0.0);
        let ord = verify_ordering(&s1, &s2, 3.0);
        assert!(ord.passed);
        assert!(ord.nodes.iter().all(|n| n.difference == 0.0));
    }

    #[test]
    fn constant_gap_in_driver() {
        let b = bundle();
        let inst = ComparisonInstance::new(spec("z + 1", "x"), spec("z", "x"), cert("0"), Orientation::PositiveTerminal).unwrap();
        let (s1, s2) = run(&inst, &b);
        let rep = check_hypotheses(&inst, &s1, &s2, &b, 200, 2).unwrap();
        assert!((rep.verdict(Hypothesis::DriverOrdering).worst_margin - 1.0).abs() < 1e-9);
        assert!(rep.passed);
        assert!(verify_ordering(&s1, &s2, 3.0).passed);
    }

    #[test]
    fn linear_jump_term_is_an_identity() {
        let b = bundle();
        let inst = ComparisonInstance::new(
            spec("0.5*u1", "x^2"),
            spec("0.5*u1", "x^2 - 1"),
            cert("0.5"),
            Orientation::PositiveTerminal,
        )
        .unwrap();
        let (s1, s2) = run(&inst, &b);
        let rep = check_hypotheses(&inst, &s1, &s2, &b, 100, 3).unwrap();
        let v = rep.verdict(Hypothesis::JumpMonotonicity);
        assert!(v.worst_margin.abs() < 1e-12 && v.passed, "{v:?}");
    }

    #[test]
    fn negated_orientation_shifts_by_the_terminal_gap() {
        let b = bundle();
        let inst = ComparisonInstance::new(spec("0", "x - 1"), spec("0", "x"), cert("0"), Orientation::NegatedTerminal).unwrap();
        let (s1, s2) = run(&inst, &b);
        let ord = verify_ordering(&s1, &s2, 3.0);
        assert!(ord.nodes.iter().all(|n| (n.difference - 1.0).abs() < 1e-9));
        assert!(check_hypotheses(&inst, &s1, &s2, &b, 50, 4).unwrap().passed);
    }

    #[test]
    fn violations_and_refusals() {
        let b = bundle();
        assert!(matches!(
            ComparisonInstance::new(spec("y", "x"), spec("0", "x"), cert("0"), Orientation::NegatedTerminal),
            Err(ComparisonError::DriverDependsOnY)
        ));
        let inst = ComparisonInstance::new(spec("-1 - y", "x"), spec("0", "x + 1"), cert("-2"), Orientation::PositiveTerminal).unwrap();
        let (s1, s2) = run(&inst, &b);
        let rep = check_hypotheses(&inst, &s1, &s2, &b, 100, 5).unwrap();
        assert!(!rep.passed);
        for h in [
            Hypothesis::DriverOrdering,
            Hypothesis::YMonotonicity,
            Hypothesis::TerminalOrdering,
            Hypothesis::GirsanovBounds,
        ] {
            assert!(!rep.verdict(h).passed, "{h:?}");
        }
        let neg = ComparisonInstance {
            orientation: Orientation::NegatedTerminal,
            ..inst.clone()
        };
        assert!(matches!(
            check_hypotheses(&neg, &s1, &s2, &b, 10, 0),
            Err(ComparisonError::Sign { .. })
        ));
    }
}
