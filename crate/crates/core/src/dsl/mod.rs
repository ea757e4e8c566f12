//! Expression language for drivers, coefficients and terminal functions.
//!
//! Grammar, from loosest to tightest binding:
//!
//! ```text
//! expr    := term (("+" | "-") term)*
//! term    := unary (("*" | "/") unary)*
//! unary   := "-" unary | power
//! power   := atom ("^" unary)?
//! atom    := number | variable | call | "(" expr ")"
//! call    := ("abs" | "exp" | "log" | "sqrt" | "indicator") "(" expr ")"
//!          | ("max" | "min") "(" expr "," expr ")"
//! number  := digits ["." digits] [("e" | "E") ["+" | "-"] digits]
//! variable:= "t" | "s" | "y" | "z" | "u1" .. "u9" | "x" | "xt" | "zeta"
//! ```
//!
//! `^` is right associative and binds tighter than unary minus, so `-x^2`
//! is `-(x^2)`. `indicator(e)` is 1 when `e >= 0` and 0 otherwise.

mod eval;
mod parser;
mod probe;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use eval::{Env, EvalError};
pub use parser::{parse, parse_with_vars, ParseError};
pub use probe::{lipschitz_probe, ProbeBox, ProbeFailure, ProbeReport};

/// Free variables an expression may reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Var {
    /// Row time of a Volterra equation (also the node time of a terminal process).
    T,
    /// Integration time.
    S,
    Y,
    Z,
    /// Jump functionals `u1..u9`, stored zero based.
    U(u8),
    /// State of the forward diffusion at the integration time (or at the horizon for terminals).
    X,
    /// State of the forward diffusion at the row time.
    Xt,
    /// Jump mark.
    Zeta,
}

impl Var {
    pub const COUNT: usize = 16;

    pub fn index(self) -> usize {
        match self {
            Var::T => 0,
            Var::S => 1,
            Var::Y => 2,
            Var::Z => 3,
            Var::U(k) => 4 + k as usize,
            Var::X => 13,
            Var::Xt => 14,
            Var::Zeta => 15,
        }
    }

    pub fn from_name(name: &str) -> Option<Var> {
        match name {
            "t" => Some(Var::T),
            "s" => Some(Var::S),
            "y" => Some(Var::Y),
            "z" => Some(Var::Z),
            "x" => Some(Var::X),
            "xt" => Some(Var::Xt),
            "zeta" => Some(Var::Zeta),
            _ => {
                let rest = name.strip_prefix('u')?;
                let k: u8 = rest.parse().ok()?;
                if (1..=9).contains(&k) && rest.len() == 1 {
                    Some(Var::U(k - 1))
                } else {
                    None
                }
            }
        }
    }

    /// Coordinates the Lipschitz condition is stated in.
    pub fn is_lipschitz_coordinate(self) -> bool {
        matches!(self, Var::Y | Var::Z | Var::U(_))
    }

    pub fn all() -> Vec<Var> {
        let mut v = vec![Var::T, Var::S, Var::Y, Var::Z];
        v.extend((0..9).map(Var::U));
        v.extend([Var::X, Var::Xt, Var::Zeta]);
        v
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::T => f.write_str("t"),
            Var::S => f.write_str("s"),
            Var::Y => f.write_str("y"),
            Var::Z => f.write_str("z"),
            Var::U(k) => write!(f, "u{}", k + 1),
            Var::X => f.write_str("x"),
            Var::Xt => f.write_str("xt"),
            Var::Zeta => f.write_str("zeta"),
        }
    }
}

/// Expression tree. Literals are kept in `f64` and converted on evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Lit(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Abs(Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Sqrt(Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Indicator(Box<Expr>),
}

impl Expr {
    pub fn lit(v: f64) -> Expr {
        Expr::Lit(v)
    }

    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::Mul(Box::new(a), Box::new(b))
    }

    pub fn scaled(self, factor: f64) -> Expr {
        Expr::mul(Expr::Lit(factor), self)
    }

    /// Free variables, in canonical order.
    pub fn variables(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    pub fn uses(&self, v: Var) -> bool {
        match self {
            Expr::Lit(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Neg(a) | Expr::Abs(a) | Expr::Exp(a) | Expr::Log(a) | Expr::Sqrt(a) | Expr::Indicator(a) => {
                a.uses(v)
            }
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b)
            | Expr::Max(a, b)
            | Expr::Min(a, b) => a.uses(v) || b.uses(v),
        }
    }

    /// Replaces every occurrence of `v` by `by`.
    pub fn substitute(&self, v: Var, by: &Expr) -> Expr {
        let un = |a: &Expr| Box::new(a.substitute(v, by));
        match self {
            Expr::Lit(_) => self.clone(),
            Expr::Var(w) if *w == v => by.clone(),
            Expr::Var(_) => self.clone(),
            Expr::Neg(a) => Expr::Neg(un(a)),
            Expr::Abs(a) => Expr::Abs(un(a)),
            Expr::Exp(a) => Expr::Exp(un(a)),
            Expr::Log(a) => Expr::Log(un(a)),
            Expr::Sqrt(a) => Expr::Sqrt(un(a)),
            Expr::Indicator(a) => Expr::Indicator(un(a)),
            Expr::Add(a, b) => Expr::Add(un(a), un(b)),
            Expr::Sub(a, b) => Expr::Sub(un(a), un(b)),
            Expr::Mul(a, b) => Expr::Mul(un(a), un(b)),
            Expr::Div(a, b) => Expr::Div(un(a), un(b)),
            Expr::Pow(a, b) => Expr::Pow(un(a), un(b)),
            Expr::Max(a, b) => Expr::Max(un(a), un(b)),
            Expr::Min(a, b) => Expr::Min(un(a), un(b)),
        }
    }

    /// True when the expression references none of the given variables.
    pub fn independent_of(&self, vars: &[Var]) -> bool {
        vars.iter().all(|&v| !self.uses(v))
    }

    fn collect_vars(&self, out: &mut BTreeSet<Var>) {
        match self {
            Expr::Lit(_) => {}
            Expr::Var(v) => {
                out.insert(*v);
            }
            Expr::Neg(a) | Expr::Abs(a) | Expr::Exp(a) | Expr::Log(a) | Expr::Sqrt(a) | Expr::Indicator(a) => {
                a.collect_vars(out)
            }
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b)
            | Expr::Max(a, b)
            | Expr::Min(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }

    fn fmt_child(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        if self.precedence() < min_prec {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(v) => {
                if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) {
                    write!(f, "(-{})", -v)
                } else {
                    write!(f, "{v}")
                }
            }
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => {
                f.write_str("-")?;
                a.fmt_child(f, 3)
            }
            Expr::Add(a, b) => {
                a.fmt_child(f, 1)?;
                f.write_str(" + ")?;
                b.fmt_child(f, 2)
            }
            Expr::Sub(a, b) => {
                a.fmt_child(f, 1)?;
                f.write_str(" - ")?;
                b.fmt_child(f, 2)
            }
            Expr::Mul(a, b) => {
                a.fmt_child(f, 2)?;
                f.write_str("*")?;
                b.fmt_child(f, 3)
            }
            Expr::Div(a, b) => {
                a.fmt_child(f, 2)?;
                f.write_str("/")?;
                b.fmt_child(f, 3)
            }
            Expr::Pow(a, b) => {
                a.fmt_child(f, 5)?;
                f.write_str("^")?;
                b.fmt_child(f, 3)
            }
            Expr::Abs(a) => write!(f, "abs({a})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Log(a) => write!(f, "log({a})"),
            Expr::Sqrt(a) => write!(f, "sqrt({a})"),
            Expr::Indicator(a) => write!(f, "indicator({a})"),
            Expr::Max(a, b) => write!(f, "max({a}, {b})"),
            Expr::Min(a, b) => write!(f, "min({a}, {b})"),
        }
    }
}
