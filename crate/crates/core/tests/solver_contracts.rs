use bsvie::driver::Driver;
use bsvie::girsanov::GirsanovCoefficients;
use bsvie::linear::{solve_linear, LinearBSVIE, LinearOptions, TerminalSign};
use bsvie::oracle::{nested_mc_oracle, OracleOptions};
use bsvie::regression::RegressionBasis;
use bsvie::resolvent::Kernel;
use bsvie::scalar::combined_stderr;
use bsvie::solver::{residual, solve, SolverOptions};
use bsvie::stochastic::{simulate_paths, DiffusionModel, JumpModel, MarkDistribution, TimeGrid};
use bsvie::terminal::TerminalProcess;

struct LinearCase {
    driver: &'static str,
    weights: &'static [&'static str],
    beta: &'static str,
    theta: &'static str,
    psi: &'static str,
    sign: TerminalSign,
    marks: MarkDistribution,
    diffusion: (&'static str, &'static str),
}

#[test]
fn linear_corpus_matches_closed_form() {
    let cases = [
        LinearCase {
            driver: "0.3*z + 0.2*u1",
            weights: &["1"],
            beta: "0.3",
            theta: "0.2",
            psi: "x",
            sign: TerminalSign::Plus,
            marks: MarkDistribution::Point { value: 1.0 },
            diffusion: ("0.05*x", "0.2*x"),
        },
        LinearCase {
            driver: "-0.4*z",
            weights: &[],
            beta: "-0.4",
            theta: "0",
            psi: "x^2",
            sign: TerminalSign::Plus,
            marks: MarkDistribution::Point { value: 1.0 },
            diffusion: ("0", "1"),
        },
        LinearCase {
            driver: "0.25*z - 0.3*u1",
            weights: &["1"],
            beta: "0.25",
            theta: "-0.3",
            psi: "max(x, 0) + t",
            sign: TerminalSign::Minus,
            marks: MarkDistribution::Point { value: 0.5 },
            diffusion: ("0", "0.5"),
        },
        LinearCase {
            driver: "0.5*u1",
            weights: &["zeta"],
            beta: "0",
            theta: "0.5*zeta",
            psi: "x",
            sign: TerminalSign::Plus,
            marks: MarkDistribution::Normal { mean: 0.3, sd: 0.2 },
            diffusion: ("0", "0.3"),
        },
    ];
    for (k, c) in cases.iter().enumerate() {
        let diff = DiffusionModel::parse(1.0, c.diffusion.0, c.diffusion.1).unwrap();
        let jumps = JumpModel::new(1.0, c.marks.clone()).unwrap();
        let b = simulate_paths(TimeGrid::<f64>::new(1.0, 16).unwrap(), &jumps, &diff, 20_000, 40 + k as u64).unwrap();
        let d = Driver::parse(c.driver, c.weights, 0.5).unwrap();
        let psi = TerminalProcess::parse(c.psi).unwrap();
        let s = solve(&d, &psi, c.sign, &b, &SolverOptions::default()).unwrap();
        let lin = LinearBSVIE {
            kernel: Kernel::constant(0.0),
            girsanov: GirsanovCoefficients::parse(c.beta, c.theta, 0.5, "0.5").unwrap(),
            terminal: psi,
            sign: c.sign,
        };
        let l = solve_linear(&lin, &b, &LinearOptions::default()).unwrap();
        for i in 0..=16 {
            let se = combined_stderr(s.y[i].stderr, l.nodes[i].stderr);
            assert!(
                (s.y[i].mean - l.nodes[i].mean).abs() <= 3.0 * se,
                "case {k} ({}), node {i}: {} vs {} (se {se})",
                c.driver,
                s.y[i].mean,
                l.nodes[i].mean
            );
        }
    }
}

#[test]
fn picard_iterates_contract() {
    let diff = DiffusionModel::parse(1.0, "0", "0.5").unwrap();
    let b = simulate_paths(TimeGrid::<f64>::new(1.0, 8).unwrap(), &JumpModel::none(), &diff, 4000, 12).unwrap();
    for g in ["0.4*y + 0.3*z", "0.5*max(y, 0) - 0.2*abs(z)", "0.6*y"] {
        let d = Driver::parse(g, &[], 0.7).unwrap();
        let s = solve(&d, &TerminalProcess::parse("x").unwrap(), TerminalSign::Plus, &b, &SolverOptions::default()).unwrap();
        let h = &s.history;
        assert!(h.len() >= 4, "{g}: {h:?}");
        for w in h[h.len() - 4..].windows(2) {
            assert!(w[1] < w[0], "{g}: {h:?}");
        }
    }
}

#[test]
fn residual_shrinks_with_basis_degree() {
    let diff = DiffusionModel::parse(1.0, "0", "1").unwrap();
    let b = simulate_paths(TimeGrid::<f64>::new(1.0, 8).unwrap(), &JumpModel::none(), &diff, 5000, 13).unwrap();
    let d = Driver::parse("0.3*z", &[], 0.3).unwrap();
    let psi = TerminalProcess::parse("x^3 - x").unwrap();
    let totals: Vec<f64> = (1..=3)
        .map(|deg| {
            let opts = SolverOptions {
                basis: RegressionBasis::new(deg),
                ..Default::default()
            };
            let s = solve(&d, &psi, TerminalSign::Plus, &b, &opts).unwrap();
            residual(&s, &d, &psi, &b).unwrap().iter().sum()
        })
        .collect();
    assert!(totals[0] > totals[1] && totals[1] > totals[2], "{totals:?}");
}

#[test]
fn two_step_oracle_agrees_with_solver_on_nonlinear_driver() {
    // kinks sit away from the true z and u: a tree estimate of u near a kink of |u| is biased by E|û| > |u|
    let d = Driver::parse("0.5*abs(z) + 0.2*y - 0.3*abs(u1 - 1)", &["1"], 0.5).unwrap();
    let psi = TerminalProcess::parse("max(x, 0)").unwrap();
    let jumps = JumpModel::new(1.0, MarkDistribution::Point { value: 0.5 }).unwrap();
    let diff = DiffusionModel::parse(0.0, "0", "1").unwrap();
    let grid = TimeGrid::<f64>::new(1.0, 2).unwrap();
    let b = simulate_paths(grid, &jumps, &diff, 50_000, 21).unwrap();
    let s = solve(&d, &psi, TerminalSign::Plus, &b, &SolverOptions::default()).unwrap();
    let opts = OracleOptions {
        branching: 16,
        replications: 400,
        seed: 22,
        ..Default::default()
    };
    let o = nested_mc_oracle(&d, &psi, TerminalSign::Plus, grid, &jumps, &diff, &opts).unwrap();
    let se = combined_stderr(s.y[0].stderr, o.stderr);
    assert!((s.y[0].mean - o.mean).abs() <= 3.0 * se, "solve {} ± {}, oracle {} ± {}", s.y[0].mean, s.y[0].stderr, o.mean, o.stderr);
}

#[test]
fn norms_scale_with_terminal() {
    let diff = DiffusionModel::parse(1.0, "0.05*x", "0.2*x").unwrap();
    let jumps = JumpModel::new(1.0, MarkDistribution::Point { value: 1.0 }).unwrap();
    let b = simulate_paths(TimeGrid::<f64>::new(1.0, 16).unwrap(), &jumps, &diff, 10_000, 23).unwrap();
    let d = Driver::parse("0.3*z + 0.2*u1", &["1"], 0.3).unwrap();
    let base = solve(&d, &TerminalProcess::parse("x").unwrap(), TerminalSign::Plus, &b, &SolverOptions::default()).unwrap();
    let scaled = solve(&d, &TerminalProcess::parse("2*x").unwrap(), TerminalSign::Plus, &b, &SolverOptions::default()).unwrap();
    for (name, a, s) in [
        ("y", base.norms.y, scaled.norms.y),
        ("z", base.norms.z, scaled.norms.z),
        ("k", base.norms.k, scaled.norms.k),
    ] {
        assert!(a > 0.0);
        assert!((s / a - 2.0).abs() <= 0.1, "{name}: {a} -> {s}");
    }
}

#[test]
fn single_precision_solve_tracks_double() {
    let diff = DiffusionModel::parse(1.0, "0.05*x", "0.2*x").unwrap();
    let d = Driver::parse("0.3*z + 0.1*y", &[], 0.3).unwrap();
    let psi = TerminalProcess::parse("x").unwrap();
    let b64 = simulate_paths(TimeGrid::<f64>::new(1.0, 8).unwrap(), &JumpModel::none(), &diff, 4000, 24).unwrap();
    let b32 = simulate_paths(TimeGrid::<f32>::new(1.0, 8).unwrap(), &JumpModel::none(), &diff, 4000, 24).unwrap();
    let s64 = solve(&d, &psi, TerminalSign::Plus, &b64, &SolverOptions::default()).unwrap();
    let opts32 = SolverOptions {
        picard_tol: 1e-4,
        ..Default::default()
    };
    let s32 = solve(&d, &psi, TerminalSign::Plus, &b32, &opts32).unwrap();
    for i in 0..=8 {
        assert!((s32.y[i].mean as f64 - s64.y[i].mean).abs() < 1e-3, "node {i}");
    }
}
