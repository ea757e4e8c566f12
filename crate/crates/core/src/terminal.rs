//! Terminal processes `ψ(t)`, each `F_T`-measurable, given as expressions in
//! `t`, `x = X(T)` and `xt = X(t)`.

use serde::Serialize;

use crate::dsl::{parse_with_vars, Env, EvalError, Expr, ParseError, Var};
use crate::scalar::Scalar;
use crate::stochastic::PathBundle;

pub const TERMINAL_VARS: [Var; 3] = [Var::T, Var::X, Var::Xt];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalClass {
    /// Function of `t` alone.
    Deterministic,
    /// `f(t, X(T))`.
    MarkovTerminal,
    /// Also reads `X(t)`; the row regression state then includes `X(t)`.
    PathFunctional,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerminalProcess {
    expr: Expr,
}

#[derive(Debug, thiserror::Error)]
#[error("terminal process at node {node}, path {path}: {source}")]
pub struct TerminalError {
    pub node: usize,
    pub path: usize,
    #[source]
    pub source: EvalError,
}

impl TerminalProcess {
    /// Fails if the expression uses variables other than `t`, `x`, `xt`.
    pub fn new(expr: Expr) -> Result<Self, Var> {
        match expr.variables().into_iter().find(|v| !TERMINAL_VARS.contains(v)) {
            Some(v) => Err(v),
            None => Ok(TerminalProcess { expr }),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        Ok(TerminalProcess {
            expr: parse_with_vars(text, &TERMINAL_VARS)?,
        })
    }

    pub fn constant(c: f64) -> Self {
        TerminalProcess { expr: Expr::Lit(c) }
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn class(&self) -> TerminalClass {
        if self.expr.uses(Var::Xt) {
            TerminalClass::PathFunctional
        } else if self.expr.uses(Var::X) {
            TerminalClass::MarkovTerminal
        } else {
            TerminalClass::Deterministic
        }
    }

    pub fn uses_row_state(&self) -> bool {
        self.expr.uses(Var::Xt)
    }

    /// `a ψ + b ψ'` as a new terminal process.
    pub fn combine(a: f64, first: &Self, b: f64, second: &Self) -> Self {
        TerminalProcess {
            expr: Expr::add(first.expr.clone().scaled(a), second.expr.clone().scaled(b)),
        }
    }

    pub fn eval<T: Scalar>(&self, t: T, x_terminal: T, x_t: T) -> Result<T, EvalError> {
        self.expr
            .eval(&Env::new().with(Var::T, t).with(Var::X, x_terminal).with(Var::Xt, x_t))
    }

    /// `ψ(t_i)` on every path of the bundle.
    pub fn node_values<T: Scalar>(&self, bundle: &PathBundle<T>, node: usize) -> Result<Vec<T>, TerminalError> {
        let grid = bundle.grid();
        let t = grid.node(node);
        let xt = bundle.x(node);
        let xe = bundle.x(grid.steps());
        xe.iter()
            .zip(xt)
            .enumerate()
            .map(|(path, (&a, &b))| self.eval(t, a, b).map_err(|source| TerminalError { node, path, source }))
            .collect()
    }

    /// `ψ(t_i)` for every node, `[i][p]`.
    pub fn values<T: Scalar>(&self, bundle: &PathBundle<T>) -> Result<Vec<Vec<T>>, TerminalError> {
        (0..=bundle.grid().steps()).map(|i| self.node_values(bundle, i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{simulate_paths, DiffusionModel, JumpModel, TimeGrid};

    #[test]
    fn classes() {
        assert_eq!(TerminalProcess::parse("1 + t").unwrap().class(), TerminalClass::Deterministic);
        assert_eq!(TerminalProcess::parse("x^2").unwrap().class(), TerminalClass::MarkovTerminal);
        assert_eq!(TerminalProcess::parse("x - xt").unwrap().class(), TerminalClass::PathFunctional);
        assert!(TerminalProcess::parse("z").is_err());
        assert_eq!(TerminalProcess::new(crate::dsl::parse("y").unwrap()), Err(Var::Y));
    }

    #[test]
    fn values_on_bundle() {
        let b = simulate_paths(TimeGrid::<f64>::new(1.0, 4).unwrap(), &JumpModel::none(), &DiffusionModel::brownian(0.0), 10, 1)
            .unwrap();
        let psi = TerminalProcess::parse("t + x - xt").unwrap();
        let v = psi.values(&b).unwrap();
        for i in 0..=4 {
            for p in 0..10 {
                let expected = 0.25 * i as f64 + b.x(4)[p] - b.x(i)[p];
                assert!((v[i][p] - expected).abs() < 1e-15);
            }
        }
        assert!(v[4].iter().all(|&w| (w - 1.0).abs() < 1e-15));
    }
}
