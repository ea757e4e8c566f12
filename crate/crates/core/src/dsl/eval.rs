use thiserror::Error;

use super::{Expr, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum EvalError {
    #[error("variable `{0}` is not bound")]
    Unbound(Var),
    #[error("division by zero")]
    DivisionByZero,
    #[error("{op} is undefined at {arg}")]
    Domain { op: &'static str, arg: f64 },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
}

/// Variable bindings for one evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Env<T> {
    slots: [Option<T>; Var::COUNT],
}

impl<T: Scalar> Default for Env<T> {
    fn default() -> Self {
        Env { slots: [None; Var::COUNT] }
    }
}

impl<T: Scalar> Env<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, v: Var, value: T) -> Self {
        self.slots[v.index()] = Some(value);
        self
    }

    #[inline]
    pub fn set(&mut self, v: Var, value: T) {
        self.slots[v.index()] = Some(value);
    }

    #[inline]
    pub fn get(&self, v: Var) -> Option<T> {
        self.slots[v.index()]
    }

    pub fn unset(&mut self, v: Var) {
        self.slots[v.index()] = None;
    }

    /// Binds every jump functional from a slice (`u1` first).
    pub fn set_jump_functionals(&mut self, values: &[T]) {
        for (k, &value) in values.iter().enumerate().take(9) {
            self.set(Var::U(k as u8), value);
        }
    }
}

#[inline]
fn finite<T: Scalar>(value: T, op: &'static str) -> Result<T, EvalError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(EvalError::NonFinite { op })
    }
}

impl Expr {
    /// Evaluates the expression. Never returns a non-finite value.
    pub fn eval<T: Scalar>(&self, env: &Env<T>) -> Result<T, EvalError> {
        match self {
            Expr::Lit(v) => finite(T::lit(*v), "literal"),
            Expr::Var(v) => env.get(*v).ok_or(EvalError::Unbound(*v)),
            Expr::Neg(a) => Ok(-a.eval(env)?),
            Expr::Add(a, b) => finite(a.eval(env)? + b.eval(env)?, "+"),
            Expr::Sub(a, b) => finite(a.eval(env)? - b.eval(env)?, "-"),
            Expr::Mul(a, b) => finite(a.eval(env)? * b.eval(env)?, "*"),
            Expr::Div(a, b) => {
                let num = a.eval(env)?;
                let den = b.eval(env)?;
                if den == T::zero() {
                    return Err(EvalError::DivisionByZero);
                }
                finite(num / den, "/")
            }
            Expr::Pow(a, b) => {
                let base = a.eval(env)?;
                let exponent = b.eval(env)?;
                if base == T::zero() && exponent < T::zero() {
                    return Err(EvalError::DivisionByZero);
                }
                let value = base.powf(exponent);
                if value.is_nan() {
                    return Err(EvalError::Domain {
                        op: "^",
                        arg: base.to_f64_lossy(),
                    });
                }
                finite(value, "^")
            }
            Expr::Abs(a) => Ok(a.eval(env)?.abs()),
            Expr::Exp(a) => finite(a.eval(env)?.exp(), "exp"),
            Expr::Log(a) => {
                let arg = a.eval(env)?;
                if arg <= T::zero() {
                    return Err(EvalError::Domain {
                        op: "log",
                        arg: arg.to_f64_lossy(),
                    });
                }
                Ok(arg.ln())
            }
            Expr::Sqrt(a) => {
                let arg = a.eval(env)?;
                if arg < T::zero() {
                    return Err(EvalError::Domain {
                        op: "sqrt",
                        arg: arg.to_f64_lossy(),
                    });
                }
                Ok(arg.sqrt())
            }
            Expr::Max(a, b) => Ok(a.eval(env)?.max(b.eval(env)?)),
            Expr::Min(a, b) => Ok(a.eval(env)?.min(b.eval(env)?)),
            Expr::Indicator(a) => Ok(if a.eval(env)? >= T::zero() { T::one() } else { T::zero() }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;

    fn ev(text: &str, env: Env<f64>) -> Result<f64, EvalError> {
        parse(text).unwrap().eval(&env)
    }

    #[test]
    fn spot_values() {
        assert_eq!(ev("exp(0)", Env::new()).unwrap(), 1.0);
        assert_eq!(ev("abs(-3) + 2^3", Env::new()).unwrap(), 11.0);
        assert_eq!(ev("-2^2", Env::new()).unwrap(), -4.0);
        assert_eq!(ev("indicator(x - 1)", Env::new().with(Var::X, 1.0)).unwrap(), 1.0);
        assert_eq!(ev("indicator(x - 1)", Env::new().with(Var::X, 0.5)).unwrap(), 0.0);
        assert_eq!(ev("min(u1, u2)", Env::new().with(Var::U(0), 3.0).with(Var::U(1), -1.0)).unwrap(), -1.0);
    }

    #[test]
    fn guarded_operations() {
        let env = Env::new().with(Var::X, 2.0);
        assert_eq!(ev("1/ (x - x)", env), Err(EvalError::DivisionByZero));
        assert!(matches!(ev("log(x - 3)", env), Err(EvalError::Domain { op: "log", .. })));
        assert!(matches!(ev("sqrt(-x)", env), Err(EvalError::Domain { op: "sqrt", .. })));
        assert!(matches!(ev("(-x)^0.5", env), Err(EvalError::Domain { op: "^", .. })));
        assert!(matches!(ev("exp(1000)", env), Err(EvalError::NonFinite { .. })));
        assert_eq!(ev("0^(-1)", env), Err(EvalError::DivisionByZero));
    }

    #[test]
    fn unbound_variable() {
        assert_eq!(ev("y + 1", Env::new()), Err(EvalError::Unbound(Var::Y)));
    }

    #[test]
    fn single_precision() {
        let e = parse("0.5*z + max(y, 0)").unwrap();
        let env = Env::<f32>::new().with(Var::Z, 2.0).with(Var::Y, -1.0);
        assert_eq!(e.eval(&env).unwrap(), 1.0f32);
    }
}
