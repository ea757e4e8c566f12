//! Iterated kernels `α⁽ⁿ⁾(t, r) = ∫_t^r α⁽ⁿ⁻¹⁾(t, s) α(s, r) ds` and their
//! sum, the resolvent `Φ = Σ_{n≥1} α⁽ⁿ⁾`, on the discrete triangle `t_i ≤ t_j`.
//!
//! The truncation order is certified by the majorant
//! `|α⁽ⁿ⁾(t, r)| ≤ Cⁿ (r - t)ⁿ⁻¹ / (n - 1)!`, so the neglected tail beyond
//! `n_max` is at most `C Σ_{m ≥ n_max} (CT)ᵐ / m!`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dsl::{parse_with_vars, Env, EvalError, Expr, ParseError, Var};
use crate::scalar::Scalar;
use crate::stochastic::TimeGrid;

/// Orders above this are refused; `CT` would have to be around 150 to need them.
pub const MAX_ORDER: usize = 400;

#[derive(Debug, Error)]
pub enum ResolventError {
    #[error("kernel expression error: {0}")]
    Parse(#[from] ParseError),
    #[error("kernel may depend on t and s only, found `{0}`")]
    Variable(Var),
    #[error("kernel evaluation failed at (t, s) = ({t}, {s}): {source}")]
    Evaluation {
        t: f64,
        s: f64,
        #[source]
        source: EvalError,
    },
    #[error("|alpha({t}, {s})| = {value} exceeds the declared bound {bound}")]
    Bound { t: f64, s: f64, value: f64, bound: f64 },
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("order must be at least 1")]
    Order,
    #[error("truncation needs order {required}, above the cap {cap}")]
    Capacity { required: usize, cap: usize },
}

/// A bounded kernel `α(t, s)` on `{t ≤ s}` with declared bound `|α| ≤ C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub alpha: Expr,
    pub bound: f64,
}

impl Kernel {
    pub fn new(alpha: Expr, bound: f64) -> Result<Self, ResolventError> {
        for v in alpha.variables() {
            if v != Var::T && v != Var::S {
                return Err(ResolventError::Variable(v));
            }
        }
        Ok(Kernel { alpha, bound })
    }

    pub fn parse(alpha: &str, bound: f64) -> Result<Self, ResolventError> {
        Self::new(parse_with_vars(alpha, &[Var::T, Var::S])?, bound)
    }

    pub fn constant(c: f64) -> Self {
        Kernel {
            alpha: Expr::Lit(c),
            bound: c.abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == Expr::Lit(0.0)
    }

    pub fn eval<T: Scalar>(&self, t: T, s: T) -> Result<T, ResolventError> {
        self.alpha
            .eval(&Env::new().with(Var::T, t).with(Var::S, s))
            .map_err(|source| ResolventError::Evaluation {
                t: t.to_f64_lossy(),
                s: s.to_f64_lossy(),
                source,
            })
    }

    /// `α(t_i, t_j)` on the grid triangle, checked against the declared bound.
    pub fn tabulate<T: Scalar>(&self, grid: &TimeGrid<T>) -> Result<TriangleTable<T>, ResolventError> {
        let n = grid.steps();
        let mut rows = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let mut row = Vec::with_capacity(n + 1 - i);
            for j in i..=n {
                let (t, s) = (grid.node(i), grid.node(j));
                let v = self.eval(t, s)?;
                if v.abs().to_f64_lossy() > self.bound * (1.0 + 1e-12) {
                    return Err(ResolventError::Bound {
                        t: t.to_f64_lossy(),
                        s: s.to_f64_lossy(),
                        value: v.to_f64_lossy(),
                        bound: self.bound,
                    });
                }
                row.push(v);
            }
            rows.push(row);
        }
        Ok(TriangleTable { rows })
    }
}

/// Values on `{(i, j) : i ≤ j ≤ N}`; row `i` holds `j = i..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleTable<T> {
    rows: Vec<Vec<T>>,
}

impl<T: Scalar> TriangleTable<T> {
    pub fn from_fn(steps: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        TriangleTable {
            rows: (0..=steps).map(|i| (i..=steps).map(|j| f(i, j)).collect()).collect(),
        }
    }

    pub fn zeros(steps: usize) -> Self {
        Self::from_fn(steps, |_, _| T::zero())
    }

    pub fn steps(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.rows[i][j - i]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.rows[i]
    }

    pub fn max_abs(&self) -> T {
        self.rows
            .iter()
            .flatten()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.rows.iter_mut().zip(&other.rows) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// One step of the recursion: `next(i, j) = trapezoid over l ∈ [i, j] of prev(i, l) α(l, j)`.
fn compose<T: Scalar>(prev: &TriangleTable<T>, alpha: &TriangleTable<T>, dt: T) -> TriangleTable<T> {
    let n = prev.steps();
    let half = T::lit(0.5);
    let rows = (0..=n)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::with_capacity(n + 1 - i);
            row.push(T::zero());
            for j in i + 1..=n {
                let mut acc = half * (prev.get(i, i) * alpha.get(i, j) + prev.get(i, j) * alpha.get(j, j));
                for l in i + 1..j {
                    acc += prev.get(i, l) * alpha.get(l, j);
                }
                row.push(acc * dt);
            }
            row
        })
        .collect();
    TriangleTable { rows }
}

/// `α⁽ⁿ⁾` on the grid triangle.
pub fn iterate_kernel<T: Scalar>(k: &Kernel, order: usize, grid: &TimeGrid<T>) -> Result<TriangleTable<T>, ResolventError> {
    if order == 0 {
        return Err(ResolventError::Order);
    }
    let alpha = k.tabulate(grid)?;
    let mut cur = alpha.clone();
    for _ in 1..order {
        cur = compose(&cur, &alpha, grid.dt());
    }
    Ok(cur)
}

/// Bound on `sup |α⁽ⁿ⁾|` over a horizon `T`: `Cⁿ Tⁿ⁻¹ / (n - 1)!`.
pub fn iterated_bound(c: f64, horizon: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut v = c;
    for m in 1..n {
        v *= c * horizon / m as f64;
    }
    v
}

/// `Σ_{n > n_max} sup |α⁽ⁿ⁾|`, i.e. `C Σ_{m ≥ n_max} (CT)ᵐ / m!`.
pub fn tail_bound(c: f64, horizon: f64, n_max: usize) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    let x = c * horizon;
    // first term (CT)^n_max / n_max! in log space, then sum forward
    let mut term = (n_max as f64 * x.ln() - ln_factorial(n_max)).exp();
    let mut sum = 0.0;
    let mut m = n_max;
    loop {
        sum += term;
        m += 1;
        term *= x / m as f64;
        if m > n_max && (term <= sum * 1e-17 || term == 0.0) && (m as f64) > x {
            break;
        }
    }
    c * sum
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Smallest `n_max ≥ 1` with `tail_bound(C, T, n_max) < tol`.
pub fn truncation_order(c: f64, horizon: f64, tol: f64) -> Result<usize, ResolventError> {
    if !(tol > 0.0) {
        return Err(ResolventError::Tolerance(tol));
    }
    let mut n = 1;
    while tail_bound(c, horizon, n) >= tol {
        n += 1;
        if n > MAX_ORDER {
            let mut required = n;
            while tail_bound(c, horizon, required) >= tol {
                required += 1;
            }
            return Err(ResolventError::Capacity {
                required,
                cap: MAX_ORDER,
            });
        }
    }
    Ok(n)
}

/// `Φ ≈ Σ_{n ≤ n_max} α⁽ⁿ⁾` on the grid triangle.
#[derive(Clone, Debug)]
pub struct ResolventTable<T> {
    pub values: TriangleTable<T>,
    pub n_max: usize,
    pub tail_bound: f64,
    pub dt: T,
}

impl<T: Scalar> ResolventTable<T> {
    /// Wraps a given table, e.g. a known closed form; `n_max` and `tail_bound` are zero.
    pub fn from_table(values: TriangleTable<T>, dt: T) -> Self {
        ResolventTable {
            values,
            n_max: 0,
            tail_bound: 0.0,
            dt,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values.get(i, j)
    }

    pub fn steps(&self) -> usize {
        self.values.steps()
    }

    pub fn summary(&self) -> ResolventSummary {
        ResolventSummary {
            n_max: self.n_max,
            tail_bound: self.tail_bound,
            max_abs: self.values.max_abs().to_f64_lossy(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolventSummary {
    pub n_max: usize,
    pub tail_bound: f64,
    pub max_abs: f64,
}

pub fn resolvent<T: Scalar>(k: &Kernel, grid: &TimeGrid<T>, tol: f64) -> Result<ResolventTable<T>, ResolventError> {
    let horizon = grid.horizon().to_f64_lossy();
    let n_max = truncation_order(k.bound, horizon, tol)?;
    let alpha = k.tabulate(grid)?;
    let mut phi = alpha.clone();
    let mut term = alpha.clone();
    for _ in 1..n_max {
        term = compose(&term, &alpha, grid.dt());
        phi.add_assign(&term);
    }
    Ok(ResolventTable {
        values: phi,
        n_max,
        tail_bound: tail_bound(k.bound, horizon, n_max),
        dt: grid.dt(),
    })
}

/// `∫_{t_i}^T Φ(t_i, r) ψ(r) dr` per path by the trapezoid rule on row `i`.
/// `psi[j][p]` is `ψ(t_j)` on path `p`; the result is indexed `[i][p]`.
pub fn convolve<T: Scalar>(phi: &ResolventTable<T>, psi: &[Vec<T>]) -> Vec<Vec<T>> {
    let n = phi.steps();
    let n_paths = psi.first().map_or(0, Vec::len);
    let half = T::lit(0.5);
    (0..=n)
        .into_par_iter()
        .map(|i| {
            let mut out = vec![T::zero(); n_paths];
            for j in i..=n {
                let mut w = phi.get(i, j) * phi.dt;
                if j == i || j == n {
                    w *= half;
                }
                if i == n || w == T::zero() {
                    continue;
                }
                for (o, &v) in out.iter_mut().zip(&psi[j]) {
                    *o += w * v;
                }
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid<f64> {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn zero_kernel() {
        let g = grid(10);
        let k = Kernel::constant(0.0);
        assert_eq!(iterate_kernel(&k, 4, &g).unwrap().max_abs(), 0.0);
        let r = resolvent(&k, &g, 1e-6).unwrap();
        assert_eq!(r.n_max, 1);
        assert_eq!(r.values.max_abs(), 0.0);
    }

    #[test]
    fn constant_kernel_iterates() {
        let g = grid(20);
        let c = 0.7;
        let k = Kernel::constant(c);
        for n in 1..=5 {
            let table = iterate_kernel(&k, n, &g).unwrap();
            for i in 0..=20 {
                for j in i..=20 {
                    let d = g.node(j) - g.node(i);
                    let exact = c.powi(n as i32) * d.powi(n as i32 - 1) / ln_factorial(n - 1).exp();
                    let exact = if n == 1 { c } else { exact };
                    assert!((table.get(i, j) - exact).abs() < 2e-3, "n={n} ({i},{j})");
                }
            }
        }
        // first two orders are integrated exactly by the trapezoid rule
        let a2 = iterate_kernel(&k, 2, &g).unwrap();
        assert!((a2.get(3, 17) - c * c * 0.7).abs() < 1e-14);
    }

    #[test]
    fn stated_factorial_bound_fails_for_unit_kernel() {
        // α ≡ 1: α⁽²⁾(0, 1) = 1 while CⁿTⁿ/n! = 1/2; the bound with (n-1)! holds
        let g = grid(64);
        let k = Kernel::constant(1.0);
        let a2 = iterate_kernel(&k, 2, &g).unwrap();
        assert!((a2.get(0, 64) - 1.0).abs() < 1e-14);
        assert!(a2.get(0, 64) > 0.5);
        for n in 1..=8 {
            let sup = iterate_kernel(&k, n, &g).unwrap().max_abs();
            assert!(sup <= iterated_bound(1.0, 1.0, n) * (1.0 + 1e-2), "n={n}: {sup}");
        }
    }

    #[test]
    fn unit_kernel_resolvent_is_exponential() {
        let g = grid(100);
        let r = resolvent(&Kernel::constant(1.0), &g, 1e-6).unwrap();
        assert!(r.n_max <= 13);
        assert!(r.tail_bound < 1e-6);
        let mut worst = 0.0f64;
        for i in 0..=100 {
            for j in i..=100 {
                worst = worst.max((r.get(i, j) - (g.node(j) - g.node(i)).exp()).abs());
            }
        }
        assert!(worst <= 1e-3, "{worst}");
    }

    #[test]
    fn sign_follows_constant() {
        let g = grid(12);
        for c in [-0.8, 0.5] {
            let r = resolvent(&Kernel::constant(c), &g, 1e-8).unwrap();
            for i in 0..12 {
                for j in i + 1..=12 {
                    assert_eq!(r.get(i, j).signum(), c.signum());
                }
            }
        }
    }

    #[test]
    fn tail_certificate_bounds_next_term() {
        let g = grid(32);
        let k = Kernel::parse("cos(t) ", 1.0).err();
        assert!(k.is_some(), "cos is not in the language");
        let k = Kernel::parse("0.9*exp(-(s-t))", 0.9).unwrap();
        let r = resolvent(&k, &g, 1e-5).unwrap();
        let next = iterate_kernel(&k, r.n_max + 1, &g).unwrap();
        assert!(next.max_abs() < r.tail_bound);
    }

    #[test]
    fn bound_violation_and_capacity() {
        let g = grid(4);
        assert!(matches!(
            Kernel::parse("2", 1.0).unwrap().tabulate(&g),
            Err(ResolventError::Bound { .. })
        ));
        assert!(matches!(
            resolvent(&Kernel::constant(1000.0), &g, 1e-6),
            Err(ResolventError::Capacity { .. })
        ));
        assert!(matches!(Kernel::parse("x", 1.0), Err(ResolventError::Parse(_))));
        assert!(matches!(truncation_order(1.0, 1.0, 0.0), Err(ResolventError::Tolerance(_))));
    }

    #[test]
    fn convolution_closed_forms() {
        let g = grid(50);
        let ones = vec![vec![1.0; 3]; 51];
        let zero = ResolventTable::from_table(TriangleTable::zeros(50), g.dt());
        assert!(convolve(&zero, &ones).iter().flatten().all(|&v| v == 0.0));
        let unit = ResolventTable::from_table(TriangleTable::from_fn(50, |_, _| 1.0), g.dt());
        let c = convolve(&unit, &ones);
        for i in 0..=50 {
            assert!((c[i][0] - (1.0 - g.node(i))).abs() < 1e-12);
        }
        let expo = ResolventTable::from_table(TriangleTable::from_fn(50, |i, j| (g.node(j) - g.node(i)).exp()), g.dt());
        let c = convolve(&expo, &ones);
        assert!((c[0][1] - (std::f64::consts::E - 1.0)).abs() < 1e-4);
    }

    #[test]
    fn nonnegative_kernel_gives_nonnegative_resolvent() {
        let g = grid(20);
        let k = Kernel::parse("0.5*abs(s - 2*t) + 0.1*t", 1.2).unwrap();
        let r = resolvent(&k, &g, 1e-8).unwrap();
        assert!(r.values.rows.iter().flatten().all(|&v| v >= 0.0));
    }
}
