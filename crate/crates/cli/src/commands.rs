use serde::Serialize;

use bsvie::comparison::{check_hypotheses, verify_ordering, ComparisonInstance, HypothesisReport, Orientation, OrderingVerdict, ProblemSpec};
use bsvie::driver::Driver;
use bsvie::dsl::{parse_with_vars, ProbeReport, Var};
use bsvie::estimate::NodeSummary;
use bsvie::girsanov::{GirsanovAudit, GirsanovCoefficients};
use bsvie::linear::{solve_linear, LinearBSVIE, LinearOptions, TerminalSign};
use bsvie::oracle::{nested_mc_oracle, OracleEstimate, OracleOptions};
use bsvie::regression::FitDescription;
use bsvie::resolvent::{resolvent, ResolventSummary};
use bsvie::risk::{axiom_suite, convexity_probe, rho_surface, AxiomOptions, ConvexityProbe, RiskReport, RiskSpec};
use bsvie::semimartingale::{
    construct_type1, construct_type2, decompose, decomposition_check, type1, type2, type3, ConstructedSolution,
    DecompositionReport, ExtrapolationWarning, FactorizedTerminal, IdentityCheck, SemimartingaleResult, XGrid,
    DEFAULT_GRID_POINTS,
};
use bsvie::solver::{residual, solve, RowState, SolutionNorms, SolverOptions};
use bsvie::stochastic::{simulate_paths, DiffusionModel, JumpModel};
use bsvie::terminal::TerminalProcess;
use bsvie::{PathBundle64, TimeGrid64};

use crate::error::CliError;
use crate::output::{num, Artifacts};
use crate::scenario::Builder;

/// Whether the mathematical checks of a run held.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    VerdictFailure,
}

impl Outcome {
    fn from(passed: bool) -> Self {
        if passed {
            Outcome::Pass
        } else {
            Outcome::VerdictFailure
        }
    }
}

const PROBE_SAMPLES: usize = 2000;
const PROBE_RADIUS: f64 = 10.0;

fn simulate(grid: TimeGrid64, jumps: &JumpModel, diff: &DiffusionModel, paths: usize, seed: u64) -> Result<PathBundle64, CliError> {
    simulate_paths(grid, jumps, diff, paths, seed).map_err(|e| CliError::compute("path simulation", e))
}

fn x_range(b: &PathBundle64) -> (f64, f64) {
    (0..=b.grid().steps())
        .flat_map(|i| b.x(i).iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Empirical Lipschitz estimate against the declared constant; a violation
/// is a configuration error, not a verdict.
fn audit_lipschitz(driver: &Driver, bundle: &PathBundle64, seed: u64, key: &str) -> Result<ProbeReport, CliError> {
    let horizon = bundle.grid().horizon();
    let report = driver.probe(&driver.probe_box(horizon, x_range(bundle), PROBE_RADIUS), PROBE_SAMPLES, seed);
    if !report.passed {
        return Err(CliError::Schema(vec![format!(
            "{key}.lipschitz_C: empirical Lipschitz estimate {} exceeds the declared {}",
            report.estimate, driver.lipschitz
        )]));
    }
    Ok(report)
}

fn dump_paths(out: &mut Artifacts, b: &PathBundle64) -> Result<(), CliError> {
    let n = b.grid().steps();
    let rows = (0..b.n_paths()).flat_map(move |p| {
        (0..=n).map(move |i| {
            let (db, count) = if i < n {
                (num(b.db(i)[p]), b.jumps(i).count(p).to_string())
            } else {
                (String::new(), String::new())
            };
            vec![p.to_string(), i.to_string(), num(b.grid().node(i)), db, num(b.x(i)[p]), count]
        })
    });
    out.csv("paths.csv", &header(&["path_id", "i", "t", "dB", "X", "jump_count"]), rows)
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn node_rows(nodes: &[NodeSummary]) -> impl Iterator<Item = Vec<String>> + '_ {
    nodes
        .iter()
        .enumerate()
        .map(|(i, n)| vec![i.to_string(), num(n.t), num(n.mean), num(n.stderr)])
}

/// Grid, paths and seed shared by the path-based commands.
struct Common {
    bundle: PathBundle64,
    seed: u64,
}

fn common(b: &mut Builder) -> Option<(TimeGrid64, JumpModel, DiffusionModel, usize, u64)> {
    let grid = b.grid();
    let jumps = b.jumps();
    let diff = b.diffusion();
    let mc = b.mc();
    let (paths, seed) = mc?;
    Some((grid?, jumps?, diff?, paths, seed))
}

fn finish_validation(b: Builder) -> Result<(), CliError> {
    b.finish().map_err(CliError::Schema)
}

fn simulate_common(
    parts: (TimeGrid64, JumpModel, DiffusionModel, usize, u64),
    out: &mut Artifacts,
    dump: bool,
) -> Result<Common, CliError> {
    let (grid, jumps, diff, paths, seed) = parts;
    let bundle = simulate(grid, &jumps, &diff, paths, seed)?;
    if dump {
        dump_paths(out, &bundle)?;
    }
    Ok(Common { bundle, seed })
}

fn unwrap_validated<T>(v: Option<T>) -> Result<T, CliError> {
    // a `None` always comes with a recorded error, which `finish` reports first
    v.ok_or_else(|| CliError::Schema(vec!["incomplete configuration".into()]))
}

#[derive(Serialize)]
struct ConvergenceReport {
    iterations: usize,
    history: Vec<f64>,
    row_state: RowState,
    norms: SolutionNorms,
    residual: Vec<f64>,
    lipschitz_probe: ProbeReport,
}

pub fn solve_cmd(mut b: Builder, out: &mut Artifacts, dump: bool) -> Result<Outcome, CliError> {
    let parts = common(&mut b);
    let driver = b.driver();
    let psi = b.psi();
    let sign = b.sign();
    let opts = b.solver();
    finish_validation(b)?;
    let (parts, driver, psi) = (unwrap_validated(parts)?, unwrap_validated(driver)?, unwrap_validated(psi)?);
    let c = simulate_common(parts, out, dump)?;
    let probe = audit_lipschitz(&driver, &c.bundle, c.seed, "driver")?;
    let s = solve(&driver, &psi, sign, &c.bundle, &opts).map_err(|e| CliError::compute("solve", e))?;
    let res = residual(&s, &driver, &psi, &c.bundle).map_err(|e| CliError::compute("residual", e))?;

    let grid = c.bundle.grid();
    let n = grid.steps();
    let m = s.weight_count();
    let mut cols = header(&["i", "j", "t", "s", "Y", "Z"]);
    cols.extend((1..=m).map(|k| format!("K_{k}")));
    let rows = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).map(|(i, j)| {
        let cell = s.cell(i, j);
        let mut row = vec![
            i.to_string(),
            j.to_string(),
            num(grid.node(i)),
            num(grid.node(j)),
            num(s.y[j].mean),
            num(cell.z_mean),
        ];
        row.extend(s.k_mean(i, j).into_iter().map(num));
        row
    });
    out.csv("surface.csv", &cols, rows)?;
    let nodes: Vec<NodeSummary> = s.y.iter().map(|y| y.summary()).collect();
    out.csv("nodes.csv", &header(&["i", "t", "Y", "stderr"]), node_rows(&nodes))?;
    out.json(
        "convergence.json",
        &ConvergenceReport {
            iterations: s.iterations(),
            history: s.history.clone(),
            row_state: s.row_state,
            norms: s.norms,
            residual: res,
            lipschitz_probe: probe,
        },
    )?;
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct LinearNode {
    t: f64,
    mean: f64,
    stderr: f64,
    y_at_x0: f64,
    fit: Option<FitDescription>,
    denominator: Option<FitDescription>,
}

#[derive(Serialize)]
struct LinearReport {
    sign: TerminalSign,
    resolvent: Option<ResolventSummary>,
    girsanov_audit: GirsanovAudit,
    nodes: Vec<LinearNode>,
}

pub fn solve_linear_cmd(mut b: Builder, out: &mut Artifacts, dump: bool) -> Result<Outcome, CliError> {
    let parts = common(&mut b);
    let grid = parts.as_ref().map(|p| p.0);
    let kernel = b.kernel(grid.as_ref());
    let girsanov = b.girsanov();
    let psi = b.psi();
    let sign = b.sign();
    let mode = b.denominator();
    let tol = b.resolvent_tol();
    let degree = b.solver().basis;
    finish_validation(b)?;
    let prob = LinearBSVIE {
        kernel: unwrap_validated(kernel)?,
        girsanov: unwrap_validated(girsanov)?,
        terminal: unwrap_validated(psi)?,
        sign,
    };
    let c = simulate_common(unwrap_validated(parts)?, out, dump)?;
    let audit = prob.girsanov.audit(&c.bundle).map_err(|e| CliError::compute("girsanov audit", e))?;
    if !audit.passed {
        return Err(CliError::Schema(vec![format!(
            "linear: measure-change coefficients fail their bounds (theta margin {}, domination excess {})",
            audit.min_theta_margin, audit.max_domination_excess
        )]));
    }
    let opts = LinearOptions { basis: degree, mode, tol };
    let sol = solve_linear(&prob, &c.bundle, &opts).map_err(|e| CliError::compute("solve-linear", e))?;
    let x0 = c.bundle.diffusion().x0;
    let nodes: Vec<LinearNode> = sol
        .nodes
        .iter()
        .zip(&sol.denominators)
        .map(|(n, d)| LinearNode {
            t: n.t,
            mean: n.mean,
            stderr: n.stderr,
            y_at_x0: n.fit.as_ref().map_or(n.mean, |f| f.eval(&[x0])),
            fit: n.fit.as_ref().map(|f| f.describe()),
            denominator: d.as_ref().map(|f| f.describe()),
        })
        .collect();
    out.csv(
        "linear.csv",
        &header(&["t", "Y_mean", "stderr", "Y_at_x0"]),
        nodes.iter().map(|n| vec![num(n.t), num(n.mean), num(n.stderr), num(n.y_at_x0)]),
    )?;
    out.json(
        "linear.json",
        &LinearReport {
            sign,
            resolvent: sol.resolvent,
            girsanov_audit: audit,
            nodes,
        },
    )?;
    Ok(Outcome::Pass)
}

pub fn kernel_cmd(mut b: Builder, out: &mut Artifacts) -> Result<Outcome, CliError> {
    let grid = b.grid();
    let kernel = b.kernel(grid.as_ref());
    let tol = b.resolvent_tol();
    finish_validation(b)?;
    let (grid, kernel) = (unwrap_validated(grid)?, unwrap_validated(kernel)?);
    let phi = resolvent(&kernel, &grid, tol).map_err(|e| CliError::compute("resolvent", e))?;
    let n = grid.steps();
    let (n_max, tail) = (phi.n_max.to_string(), num(phi.tail_bound));
    let rows = (0..=n).flat_map(|i| (i..=n).map(move |j| (i, j))).map(|(i, j)| {
        vec![num(grid.node(i)), num(grid.node(j)), num(phi.get(i, j)), n_max.clone(), tail.clone()]
    });
    out.csv("kernel.csv", &header(&["t", "r", "phi", "n_max", "tail_bound"]), rows)?;
    Ok(Outcome::Pass)
}

fn risk_spec(b: &mut Builder) -> Option<RiskSpec> {
    let driver = b.driver();
    let psi = b.psi();
    let convex = b.root.get("risk").bool_or("convex", true);
    if b.root.get("psi").has("sign") {
        b.error("psi.sign: risk measures always use the negated position; remove the key");
    }
    match RiskSpec::new(driver?, convex, psi?) {
        Ok(s) => Some(s),
        Err(e) => {
            b.error(format!("driver.g_expr: {e}"));
            None
        }
    }
}

#[derive(Serialize)]
struct RiskValues {
    node: usize,
    rho: NodeSummary,
    convexity_probe: Option<ConvexityProbe>,
    lipschitz_probe: ProbeReport,
}

fn probe_convexity(spec: &RiskSpec, bundle: &PathBundle64, samples: usize, seed: u64) -> Result<Option<ConvexityProbe>, CliError> {
    if !spec.convex {
        return Ok(None);
    }
    let d = &spec.driver;
    let probe_box = d.probe_box(bundle.grid().horizon(), x_range(bundle), PROBE_RADIUS);
    convexity_probe(d, &probe_box, samples, seed)
        .map(Some)
        .map_err(|e| CliError::compute("convexity probe", e))
}

pub fn risk_cmd(mut b: Builder, out: &mut Artifacts, dump: bool) -> Result<Outcome, CliError> {
    let parts = common(&mut b);
    let spec = risk_spec(&mut b);
    let opts = b.solver();
    let r = b.root.get("risk");
    let node = b.nonnegative("risk.node", r.i64_or("node", 0));
    let samples = b.nonnegative("risk.probe_samples", r.i64_or("probe_samples", PROBE_SAMPLES as i64));
    finish_validation(b)?;
    let spec = unwrap_validated(spec)?;
    let c = simulate_common(unwrap_validated(parts)?, out, dump)?;
    if node > c.bundle.grid().steps() {
        return Err(CliError::Schema(vec![format!(
            "risk.node: {node} is beyond the last grid node {}",
            c.bundle.grid().steps()
        )]));
    }
    let probe = audit_lipschitz(&spec.driver, &c.bundle, c.seed, "driver")?;
    let surface = rho_surface(&spec, &c.bundle, &opts).map_err(|e| CliError::compute("risk", e))?;
    let nodes: Vec<NodeSummary> = surface.y.iter().map(|y| y.summary()).collect();
    out.csv("rho.csv", &header(&["i", "t", "rho", "stderr"]), node_rows(&nodes))?;
    let convexity = probe_convexity(&spec, &c.bundle, samples, c.seed)?;
    let passed = convexity.as_ref().is_none_or(|p| p.passed);
    out.json(
        "risk.json",
        &RiskValues {
            node,
            rho: nodes[node],
            convexity_probe: convexity,
            lipschitz_probe: probe,
        },
    )?;
    Ok(Outcome::from(passed))
}

pub fn axioms_cmd(mut b: Builder, out: &mut Artifacts, dump: bool) -> Result<Outcome, CliError> {
    let parts = common(&mut b);
    let spec = risk_spec(&mut b);
    let solver = b.solver();
    let r = b.root.get("risk");
    let d = AxiomOptions::default();
    let partner = r.str("partner_expr").and_then(|t| b.terminal_from("risk.partner_expr", t));
    let dominating = r.str("dominating_expr").and_then(|t| b.terminal_from("risk.dominating_expr", t));
    let past_nodes = r
        .i64s("past_nodes")
        .unwrap_or_default()
        .into_iter()
        .map(|k| b.nonnegative("risk.past_nodes", k))
        .collect();
    let probe_samples = b.nonnegative("risk.probe_samples", r.i64_or("probe_samples", d.probe_samples as i64));
    let lambdas = r.f64s("lambdas").unwrap_or(d.lambdas);
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        b.error(format!("risk.lambdas: weights must lie in [0, 1], got {l}"));
    }
    let opts = AxiomOptions {
        shift: r.f64_or("shift", d.shift),
        lambdas,
        partner,
        dominating,
        past_nodes,
        tol_multiplier: r.f64_or("tol_multiplier", d.tol_multiplier),
        translation_tol: r.f64_or("translation_tol", d.translation_tol),
        probe_samples,
        seed: 0,
    };
    finish_validation(b)?;
    let spec = unwrap_validated(spec)?;
    let c = simulate_common(unwrap_validated(parts)?, out, dump)?;
    audit_lipschitz(&spec.driver, &c.bundle, c.seed, "driver")?;
    let opts = AxiomOptions { seed: c.seed, ..opts };
    let report: RiskReport = axiom_suite(&spec, &c.bundle, &solver, &opts).map_err(|e| CliError::compute("axioms", e))?;
    out.csv("rho.csv", &header(&["i", "t", "rho", "stderr"]), node_rows(&report.rho))?;
    out.json("axioms.json", &report)?;
    Ok(Outcome::from(report.passed()))
}

#[derive(Serialize)]
struct CompareReport {
    hypotheses: HypothesisReport,
    ordering: OrderingVerdict,
}

pub fn compare_cmd(mut b: Builder, out: &mut Artifacts, dump: bool) -> Result<Outcome, CliError> {
    let parts = common(&mut b);
    let solver = b.solver();
    let c = b.root.get("compare");
    let orientation = match c.str_or("orientation", "positive_terminal") {
        "positive_terminal" => Some(Orientation::PositiveTerminal),
        "negated_terminal" => Some(Orientation::NegatedTerminal),
        other => {
            b.error(format!("compare.orientation: expected positive_terminal or negated_terminal, got `{other}`"));
            None
        }
    };
    let weights = c.strs("jump_weights");
    let lipschitz = c.f64_or("lipschitz_C", 0.0);
    let problem = |b: &mut Builder, which: &str| -> Option<ProblemSpec> {
        let t = c.get(which);
        let key = if which == "first" { "compare.first" } else { "compare.second" };
        let driver = b.driver_from(key, t.str("g_expr")?, &weights, lipschitz);
        let terminal = b.terminal_from(key, t.str("psi_expr")?);
        Some(ProblemSpec {
            driver: driver?,
            terminal: terminal?,
        })
    };
    let first = problem(&mut b, "first");
    let second = problem(&mut b, "second");
    let cert = c.get("certificate");
    let certificate = match (cert.str("theta_expr"), cert.str("dominating_expr")) {
        (Some(theta), Some(dom)) => match GirsanovCoefficients::parse("0", theta, cert.f64_or("epsilon", 0.5), dom) {
            Ok(g) => Some(g),
            Err(e) => {
                b.error(format!("compare.certificate: {e}"));
                None
            }
        },
        _ => None,
    };
    let tol = c.f64_or("tol_multiplier", 3.0);
    let samples = b.nonnegative("compare.samples", c.i64_or("samples", PROBE_SAMPLES as i64));
    let instance = match (first, second, certificate, orientation) {
        (Some(f), Some(s), Some(cert), Some(o)) => match ComparisonInstance::new(f, s, cert, o) {
            Ok(i) => Some(i),
            Err(e) => {
                b.error(format!("compare: {e}"));
                None
            }
        },
        _ => None,
    };
    finish_validation(b)?;
    let inst = unwrap_validated(instance)?;
    let cm = simulate_common(unwrap_validated(parts)?, out, dump)?;
    audit_lipschitz(&inst.first.driver, &cm.bundle, cm.seed, "compare")?;
    audit_lipschitz(&inst.second.driver, &cm.bundle, cm.seed, "compare")?;
    let sign = inst.orientation.sign();
    let run = |p: &ProblemSpec| solve(&p.driver, &p.terminal, sign, &cm.bundle, &solver).map_err(|e| CliError::compute("solve", e));
    let (s1, s2) = (run(&inst.first)?, run(&inst.second)?);
    let hypotheses =
        check_hypotheses(&inst, &s1, &s2, &cm.bundle, samples, cm.seed).map_err(|e| CliError::compute("hypotheses", e))?;
    let ordering = verify_ordering(&s1, &s2, tol);
    out.csv(
        "ordering.csv",
        &header(&["i", "t", "difference", "stderr", "min_pathwise"]),
        ordering
            .nodes
            .iter()
            .map(|n| vec![n.node.to_string(), num(n.t), num(n.difference), num(n.stderr), num(n.min_pathwise)]),
    )?;
    let passed = hypotheses.passed && ordering.passed;
    out.json("compare.json", &CompareReport { hypotheses, ordering })?;
    Ok(Outcome::from(passed))
}

enum Construction {
    One(FactorizedTerminal),
    Two(TerminalProcess),
    Three(TerminalProcess, Driver),
}

impl Construction {
    fn kind(&self) -> u8 {
        match self {
            Construction::One(_) => 1,
            Construction::Two(_) => 2,
            Construction::Three(..) => 3,
        }
    }

    fn run(&self, bundle: &PathBundle64, opts: &SolverOptions, points: usize, tol: f64) -> Result<SemimartingaleResult<f64>, CliError> {
        match self {
            Construction::One(f) => type1(f, bundle, opts, tol),
            Construction::Two(f) => type2(f, bundle, opts, points, tol),
            Construction::Three(f, g) => type3(f, g, bundle, opts, points, tol),
        }
        .map_err(|e| CliError::compute("semimartingale", e))
    }

    fn construct(&self, bundle: &PathBundle64, opts: &SolverOptions, points: usize, tol: f64) -> Result<ConstructedSolution<f64>, CliError> {
        match self {
            Construction::One(f) => construct_type1(f, bundle, opts.basis),
            Construction::Two(f) => construct_type2(f, bundle, opts.basis, points),
            Construction::Three(..) => return self.run(bundle, opts, points, tol).map(|r| r.constructed),
        }
        .map_err(|e| CliError::compute("semimartingale", e))
    }
}

#[derive(Serialize)]
struct SemimartingaleReport {
    #[serde(rename = "type")]
    kind: u8,
    identity: IdentityCheck,
    x_grid: Option<XGrid>,
    extrapolation: Option<ExtrapolationWarning>,
    decomposition: DecompositionReport,
}

pub fn semimartingale_cmd(mut b: Builder, out: &mut Artifacts, dump: bool) -> Result<Outcome, CliError> {
    let parts = common(&mut b);
    let opts = b.solver();
    let s = b.root.get("semimartingale");
    let need = |b: &mut Builder, key: &str, kind: i64| -> Option<&str> {
        let v = s.str(key);
        if v.is_none() {
            b.error(format!("semimartingale.{key}: required for type {kind}"));
        }
        v
    };
    let construction = match s.i64("type") {
        Some(1) => {
            let f1 = need(&mut b, "f1_expr", 1);
            let f2 = need(&mut b, "f2_expr", 1);
            let parse = |b: &mut Builder, key: &str, text: Option<&str>| {
                parse_with_vars(text?, &[Var::X]).map_err(|e| b.error(format!("semimartingale.{key}: {e}"))).ok()
            };
            let (f1, f2) = (parse(&mut b, "f1_expr", f1), parse(&mut b, "f2_expr", f2));
            match f1.zip(f2).map(|(f1, f2)| FactorizedTerminal::new(f1, f2)) {
                Some(Ok(f)) => Some(Construction::One(f)),
                Some(Err(e)) => {
                    b.error(format!("semimartingale: {e}"));
                    None
                }
                None => None,
            }
        }
        Some(k @ (2 | 3)) => {
            let f = need(&mut b, "f_expr", k).and_then(|t| b.terminal_from("semimartingale.f_expr", t));
            if k == 2 {
                f.map(Construction::Two)
            } else {
                let g = need(&mut b, "g_expr", 3)
                    .and_then(|t| b.driver_from("semimartingale.g_expr", t, &[], s.f64_or("lipschitz_C", 1.0)));
                f.zip(g).map(|(f, g)| Construction::Three(f, g))
            }
        }
        Some(k) => {
            b.error(format!("semimartingale.type: expected 1, 2 or 3, got {k}"));
            None
        }
        None => {
            b.error("semimartingale.type: missing (set it in the file or pass --type)");
            None
        }
    };
    let points = b.nonnegative("semimartingale.grid_points", s.i64_or("grid_points", DEFAULT_GRID_POINTS as i64));
    let tol = s.f64_or("tol_multiplier", 3.0);
    let refinement: Vec<usize> = s
        .i64s("refinement")
        .unwrap_or_else(|| vec![16, 32, 64])
        .into_iter()
        .map(|n| b.nonnegative("semimartingale.refinement", n))
        .collect();
    if refinement.len() < 2 || refinement.contains(&0) {
        b.error("semimartingale.refinement: need at least two positive step counts");
    }
    finish_validation(b)?;
    let construction = unwrap_validated(construction)?;
    let parts = unwrap_validated(parts)?;
    let (grid, jumps, diff, paths, seed) = (parts.0, parts.1.clone(), parts.2.clone(), parts.3, parts.4);
    let c = simulate_common(parts, out, dump)?;

    let result = construction.run(&c.bundle, &opts, points, tol)?;
    let mut levels = Vec::with_capacity(refinement.len());
    for &steps in &refinement {
        let g = TimeGrid64::new(grid.horizon(), steps).map_err(|e| CliError::compute("refinement grid", e))?;
        let bundle = simulate(g, &jumps, &diff, paths, seed)?;
        let constructed = construction.construct(&bundle, &opts, points, tol)?;
        let y: Vec<Vec<f64>> = constructed.y.into_iter().map(|n| n.values).collect();
        levels.push(decompose(&y, &bundle, opts.basis).map_err(|e| CliError::compute("decomposition", e))?);
    }
    let decomposition = decomposition_check(levels).map_err(|e| CliError::compute("decomposition", e))?;

    out.csv(
        "identity.csv",
        &header(&["t", "constructed", "constructed_stderr", "solver", "solver_stderr", "combined_stderr", "passed"]),
        result.identity.nodes.iter().map(|n| {
            vec![
                num(n.t),
                num(n.constructed.mean),
                num(n.constructed.stderr),
                num(n.solver.mean),
                num(n.solver.stderr),
                num(n.combined_stderr),
                n.passed.to_string(),
            ]
        }),
    )?;
    out.csv(
        "decomposition.csv",
        &header(&["steps", "dt", "increment_energy", "drift_energy", "martingale_energy", "residual_energy"]),
        decomposition.levels.iter().map(|l| {
            vec![
                l.steps.to_string(),
                num(l.dt),
                num(l.increment_energy),
                num(l.drift_energy),
                num(l.martingale_energy),
                num(l.residual_energy),
            ]
        }),
    )?;
    let passed = result.identity.passed && decomposition.passed;
    out.json(
        "identity.json",
        &SemimartingaleReport {
            kind: construction.kind(),
            identity: result.identity,
            x_grid: result.constructed.x_grid,
            extrapolation: result.constructed.extrapolation,
            decomposition,
        },
    )?;
    Ok(Outcome::from(passed))
}

#[derive(Serialize)]
struct OracleReport {
    steps: usize,
    branching: usize,
    estimate: OracleEstimate,
}

pub fn oracle_cmd(mut b: Builder, out: &mut Artifacts) -> Result<Outcome, CliError> {
    let grid = b.grid();
    let jumps = b.jumps();
    let diff = b.diffusion();
    let seed = b.seed();
    let driver = b.driver();
    let psi = b.psi();
    let sign = b.sign();
    let o = b.root.get("oracle");
    let d = OracleOptions::default();
    let opts = OracleOptions {
        branching: b.nonnegative("oracle.branching", o.i64_or("branching", d.branching as i64)),
        replications: b.nonnegative("oracle.replications", o.i64_or("replications", d.replications as i64)),
        seed,
        max_leaves: b.nonnegative("oracle.max_leaves", o.i64_or("max_leaves", d.max_leaves as i64)) as u64,
    };
    finish_validation(b)?;
    let (grid, jumps, diff) = (unwrap_validated(grid)?, unwrap_validated(jumps)?, unwrap_validated(diff)?);
    let (driver, psi) = (unwrap_validated(driver)?, unwrap_validated(psi)?);
    let estimate = nested_mc_oracle(&driver, &psi, sign, grid, &jumps, &diff, &opts).map_err(|e| CliError::compute("oracle", e))?;
    out.json(
        "oracle.json",
        &OracleReport {
            steps: grid.steps(),
            branching: opts.branching,
            estimate,
        },
    )?;
    Ok(Outcome::Pass)
}
