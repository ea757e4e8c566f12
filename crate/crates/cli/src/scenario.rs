//! Second validation pass: turns a schema-checked table into library
//! objects, collecting every semantic error (bad expressions, out-of-range
//! values) before anything is simulated.

use bsvie::driver::Driver;
use bsvie::dsl::{parse_with_vars, Expr, Var};
use bsvie::girsanov::{DenominatorMode, GirsanovCoefficients};
use bsvie::linear::TerminalSign;
use bsvie::regression::RegressionBasis;
use bsvie::resolvent::Kernel;
use bsvie::solver::SolverOptions;
use bsvie::stochastic::{DiffusionModel, JumpModel, MarkDistribution};
use bsvie::terminal::TerminalProcess;
use bsvie::TimeGrid64;

use crate::config::View;

pub struct Builder<'a> {
    pub root: View<'a>,
    errors: Vec<String>,
}

impl<'a> Builder<'a> {
    pub fn new(root: View<'a>) -> Self {
        Builder { root, errors: Vec::new() }
    }

    pub fn error(&mut self, msg: impl Into<String>) {
        self.errors.push(msg.into());
    }

    pub fn finish(self) -> Result<(), Vec<String>> {
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(self.errors)
        }
    }

    fn check<T, E: std::fmt::Display>(&mut self, key: &str, r: Result<T, E>) -> Option<T> {
        r.map_err(|e| self.error(format!("{key}: {e}"))).ok()
    }

    pub fn grid(&mut self) -> Option<TimeGrid64> {
        let g = self.root.get("grid");
        let (t, n) = (g.f64("T")?, g.i64("N")?);
        if n < 1 {
            self.error(format!("grid.N: must be at least 1, got {n}"));
            return None;
        }
        self.check("grid", TimeGrid64::new(t, n as usize))
    }

    pub fn jumps(&mut self) -> Option<JumpModel> {
        let j = self.root.get("jumps");
        if !j.present() {
            return Some(JumpModel::none());
        }
        let (lambda, kind, params) = (j.f64("lambda")?, j.str("mark_dist")?, j.f64s("params")?);
        let marks = match (kind, params.as_slice()) {
            ("point", &[value]) => MarkDistribution::Point { value },
            ("normal", &[mean, sd]) => MarkDistribution::Normal { mean, sd },
            ("lognormal", &[mu, sigma]) => MarkDistribution::Lognormal { mu, sigma },
            ("point" | "normal" | "lognormal", p) => {
                let expected = if kind == "point" { 1 } else { 2 };
                self.error(format!("jumps.params: {kind} marks take {expected} parameter(s), got {}", p.len()));
                return None;
            }
            (other, _) => {
                self.error(format!("jumps.mark_dist: expected point, normal or lognormal, got `{other}`"));
                return None;
            }
        };
        if lambda == 0.0 {
            return Some(JumpModel::none());
        }
        self.check("jumps", JumpModel::new(lambda, marks))
    }

    pub fn diffusion(&mut self) -> Option<DiffusionModel> {
        let d = self.root.get("diffusion");
        let x0 = d.f64("x0")?;
        let r = DiffusionModel::parse(x0, d.str_or("b_expr", "0"), d.str_or("sigma_expr", "1"));
        self.check("diffusion", r)
    }

    /// `(n_paths, seed)`.
    pub fn mc(&mut self) -> Option<(usize, u64)> {
        let m = self.root.get("mc");
        let (n, seed) = (m.i64("n_paths")?, m.i64("seed")?);
        let mut ok = true;
        if n < 2 {
            self.error(format!("mc.n_paths: need at least 2 paths, got {n}"));
            ok = false;
        }
        if seed < 0 {
            self.error(format!("mc.seed: must be non-negative, got {seed}"));
            ok = false;
        }
        ok.then_some((n as usize, seed as u64))
    }

    pub fn seed(&self) -> u64 {
        self.root.get("mc").i64("seed").filter(|&s| s >= 0).unwrap_or(0) as u64
    }

    pub fn driver_from(&mut self, key: &str, g: &str, weights: &[&str], lipschitz: f64) -> Option<Driver> {
        self.check(key, Driver::parse(g, weights, lipschitz))
    }

    pub fn driver(&mut self) -> Option<Driver> {
        let d = self.root.get("driver");
        let (g, c) = (d.str("g_expr")?, d.f64("lipschitz_C")?);
        let weights = d.strs("jump_weights");
        self.driver_from("driver", g, &weights, c)
    }

    pub fn terminal_from(&mut self, key: &str, text: &str) -> Option<TerminalProcess> {
        self.check(key, TerminalProcess::parse(text))
    }

    pub fn psi(&mut self) -> Option<TerminalProcess> {
        let text = self.root.get("psi").str("expr")?;
        self.terminal_from("psi.expr", text)
    }

    pub fn sign(&mut self) -> TerminalSign {
        let v = self.root.get("psi").i64_or("sign", 1);
        TerminalSign::from_integer(v).unwrap_or_else(|| {
            self.error(format!("psi.sign: must be 1 or -1, got {v}"));
            TerminalSign::Plus
        })
    }

    pub fn solver(&mut self) -> SolverOptions {
        let s = self.root.get("solver");
        let d = SolverOptions::default();
        let degree = s.i64_or("basis_degree", d.basis.degree as i64);
        let max_iter = s.i64_or("max_iter", d.max_iter as i64);
        let picard_tol = s.f64_or("picard_tol", d.picard_tol);
        if !(0..=8).contains(&degree) {
            self.error(format!("solver.basis_degree: expected 0..=8, got {degree}"));
        }
        if max_iter < 1 {
            self.error(format!("solver.max_iter: must be at least 1, got {max_iter}"));
        }
        if !(picard_tol > 0.0) {
            self.error(format!("solver.picard_tol: must be positive, got {picard_tol}"));
        }
        SolverOptions {
            basis: RegressionBasis::new(degree.clamp(0, 8) as usize),
            picard_tol,
            max_iter: max_iter.max(1) as usize,
        }
    }

    /// The kernel, with its bound taken from the grid when not declared.
    pub fn kernel(&mut self, grid: Option<&TimeGrid64>) -> Option<Kernel> {
        let l = self.root.get("linear");
        let text = l.str_or("alpha_expr", "0");
        let alpha = self.check("linear.alpha_expr", parse_with_vars(text, &[Var::T, Var::S]))?;
        let bound = match l.f64("alpha_bound") {
            Some(b) => b,
            None => sampled_bound(&alpha, grid?).map_err(|e| self.error(format!("linear.alpha_expr: {e}"))).ok()?,
        };
        if !(bound >= 0.0 && bound.is_finite()) {
            self.error(format!("linear.alpha_bound: must be finite and non-negative, got {bound}"));
            return None;
        }
        self.check("linear.alpha_expr", Kernel::new(alpha, bound))
    }

    pub fn resolvent_tol(&mut self) -> f64 {
        let tol = self.root.get("linear").f64_or("tol", 1e-8);
        if !(tol > 0.0) {
            self.error(format!("linear.tol: must be positive, got {tol}"));
        }
        tol
    }

    pub fn girsanov(&mut self) -> Option<GirsanovCoefficients> {
        let l = self.root.get("linear");
        let theta = l.str_or("theta_expr", "0");
        if l.has("theta_expr") && !l.has("dominating_expr") {
            self.error("linear.dominating_expr: required when linear.theta_expr is set");
            return None;
        }
        let r = GirsanovCoefficients::parse(
            l.str_or("beta_expr", "0"),
            theta,
            l.f64_or("epsilon", 0.5),
            l.str_or("dominating_expr", "0"),
        );
        self.check("linear", r)
    }

    pub fn denominator(&mut self) -> DenominatorMode {
        match self.root.get("linear").str_or("denominator", "simulated") {
            "simulated" => DenominatorMode::Simulated,
            "estimated" => DenominatorMode::Estimated,
            other => {
                self.error(format!("linear.denominator: expected simulated or estimated, got `{other}`"));
                DenominatorMode::Simulated
            }
        }
    }

    pub fn nonnegative(&mut self, key: &str, v: i64) -> usize {
        if v < 0 {
            self.error(format!("{key}: must be non-negative, got {v}"));
        }
        v.max(0) as usize
    }
}

fn sampled_bound(alpha: &Expr, grid: &TimeGrid64) -> Result<f64, bsvie::dsl::EvalError> {
    let nodes = grid.nodes();
    let mut m = 0.0f64;
    for (i, &t) in nodes.iter().enumerate() {
        for &s in &nodes[i..] {
            let v: f64 = alpha.eval(&bsvie::dsl::Env::new().with(Var::T, t).with(Var::S, s))?;
            m = m.max(v.abs());
        }
    }
    Ok(m)
}
