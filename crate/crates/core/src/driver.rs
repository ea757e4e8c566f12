//! Drivers `g(t, s, y, z, u1..um, x, xt)` where `u_m = ∫ k(ζ) w_m(ζ) ν(dζ)`
//! for the declared jump weights `w_m`.

use thiserror::Error;

use crate::dsl::{lipschitz_probe, parse_with_vars, Env, EvalError, Expr, ParseError, ProbeBox, ProbeReport, Var};
use crate::scalar::Scalar;
use crate::stochastic::JumpModel;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("driver expression error: {0}")]
    Parse(#[from] ParseError),
    #[error("jump weight {index}: {source}")]
    WeightParse {
        index: usize,
        #[source]
        source: ParseError,
    },
    #[error("`{0}` is not a driver variable")]
    Variable(Var),
    #[error("driver uses u{used} but only {declared} jump weights are declared")]
    JumpFunctional { used: usize, declared: usize },
    #[error("at most 9 jump weights are supported, got {0}")]
    TooManyWeights(usize),
    #[error("jump weight {index} may depend on zeta only, found `{var}`")]
    WeightVariable { index: usize, var: Var },
    #[error("Lipschitz constant must be finite and non-negative, got {0}")]
    Lipschitz(f64),
    #[error("jump weight integral failed: {0}")]
    Integration(EvalError),
    #[error("Gram matrix of the jump weights is singular")]
    SingularGram,
}

pub fn driver_vars() -> Vec<Var> {
    let mut v = vec![Var::T, Var::S, Var::Y, Var::Z];
    v.extend((0..9).map(Var::U));
    v.extend([Var::X, Var::Xt]);
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct Driver {
    pub expr: Expr,
    pub jump_weights: Vec<Expr>,
    /// Declared Lipschitz constant in `(y, z, u)`.
    pub lipschitz: f64,
}

impl Driver {
    pub fn new(expr: Expr, jump_weights: Vec<Expr>, lipschitz: f64) -> Result<Self, DriverError> {
        if jump_weights.len() > 9 {
            return Err(DriverError::TooManyWeights(jump_weights.len()));
        }
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(DriverError::Lipschitz(lipschitz));
        }
        for v in expr.variables() {
            match v {
                Var::Zeta => return Err(DriverError::Variable(v)),
                Var::U(k) if k as usize >= jump_weights.len() => {
                    return Err(DriverError::JumpFunctional {
                        used: k as usize + 1,
                        declared: jump_weights.len(),
                    })
                }
                _ => {}
            }
        }
        for (index, w) in jump_weights.iter().enumerate() {
            if let Some(var) = w.variables().into_iter().find(|&v| v != Var::Zeta) {
                return Err(DriverError::WeightVariable { index, var });
            }
        }
        Ok(Driver {
            expr,
            jump_weights,
            lipschitz,
        })
    }

    pub fn parse(g: &str, jump_weights: &[&str], lipschitz: f64) -> Result<Self, DriverError> {
        let expr = parse_with_vars(g, &driver_vars())?;
        let weights = jump_weights
            .iter()
            .enumerate()
            .map(|(index, w)| parse_with_vars(w, &[Var::Zeta]).map_err(|source| DriverError::WeightParse { index, source }))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(expr, weights, lipschitz)
    }

    pub fn zero() -> Self {
        Driver {
            expr: Expr::Lit(0.0),
            jump_weights: Vec::new(),
            lipschitz: 0.0,
        }
    }

    pub fn depends_on_y(&self) -> bool {
        self.expr.uses(Var::Y)
    }

    pub fn uses_row_state(&self) -> bool {
        self.expr.uses(Var::Xt)
    }

    pub fn weight_count(&self) -> usize {
        self.jump_weights.len()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn eval<T: Scalar>(&self, t: T, s: T, y: T, z: T, u: &[T], x: T, xt: T) -> Result<T, EvalError> {
        let mut env = Env::new()
            .with(Var::T, t)
            .with(Var::S, s)
            .with(Var::Y, y)
            .with(Var::Z, z)
            .with(Var::X, x)
            .with(Var::Xt, xt);
        env.set_jump_functionals(u);
        self.expr.eval(&env)
    }

    /// A box over `[0, T]²`, the given state range and `[-radius, radius]`
    /// for each of `y`, `z` and the declared `u`s.
    pub fn probe_box(&self, horizon: f64, x_range: (f64, f64), radius: f64) -> ProbeBox {
        let mut b = ProbeBox::new()
            .with(Var::T, 0.0, horizon)
            .with(Var::S, 0.0, horizon)
            .with(Var::Y, -radius, radius)
            .with(Var::Z, -radius, radius)
            .with(Var::X, x_range.0, x_range.1)
            .with(Var::Xt, x_range.0, x_range.1);
        for k in 0..self.weight_count() {
            b = b.with(Var::U(k as u8), -radius, radius);
        }
        b
    }

    /// Audits the declared Lipschitz constant.
    pub fn probe(&self, probe_box: &ProbeBox, samples: usize, seed: u64) -> ProbeReport {
        lipschitz_probe(&self.expr, probe_box, samples, self.lipschitz, seed)
    }

    /// `G_{lm} = ∫ w_l w_m dν`, row-major.
    pub fn gram(&self, nu: &JumpModel) -> Result<Vec<f64>, DriverError> {
        let m = self.weight_count();
        let mut g = vec![0.0; m * m];
        for l in 0..m {
            for k in 0..=l {
                let v = nu
                    .integrate(|z| {
                        let env = Env::new().with(Var::Zeta, z);
                        Ok::<f64, EvalError>(self.jump_weights[l].eval(&env)? * self.jump_weights[k].eval(&env)?)
                    })
                    .map_err(DriverError::Integration)?;
                g[l * m + k] = v;
                g[k * m + l] = v;
            }
        }
        Ok(g)
    }
}

/// Inverse of a small symmetric positive definite matrix by Gauss–Jordan
/// elimination with partial pivoting.
pub(crate) fn invert(a: &[f64], m: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    if m == 0 {
        return Some(Vec::new());
    }
    if scale == 0.0 {
        return None;
    }
    let mut work = a.to_vec();
    let mut inv = vec![0.0; m * m];
    for d in 0..m {
        inv[d * m + d] = 1.0;
    }
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&r, &q| work[r * m + col].abs().total_cmp(&work[q * m + col].abs()))
            .unwrap_or(col);
        if work[pivot * m + col].abs() <= 1e-12 * scale {
            return None;
        }
        for k in 0..m {
            work.swap(col * m + k, pivot * m + k);
            inv.swap(col * m + k, pivot * m + k);
        }
        let p = work[col * m + col];
        for k in 0..m {
            work[col * m + k] /= p;
            inv[col * m + k] /= p;
        }
        for r in 0..m {
            if r != col {
                let f = work[r * m + col];
                if f != 0.0 {
                    for k in 0..m {
                        work[r * m + k] -= f * work[col * m + k];
                        inv[r * m + k] -= f * inv[col * m + k];
                    }
                }
            }
        }
    }
    Some(inv)
}
