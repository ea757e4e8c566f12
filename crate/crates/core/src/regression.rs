//! Least-squares projection onto polynomial features of a regression state.
//!
//! A [`Projector`] factorizes the Gram matrix of one design once and then
//! projects any number of targets in `O(n k)` each. Coordinates with no
//! spread across paths (e.g. `X(0) = x0`) are dropped, so a degenerate state
//! reduces to the intercept and the projection to a plain sample mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum RegressionError {
    #[error("regression design is ill-conditioned (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },
    #[error("{paths} paths cannot identify {terms} basis terms")]
    Underdetermined { paths: usize, terms: usize },
    #[error("state coordinates have unequal lengths")]
    Shape,
    #[error("non-finite value in regression input")]
    NonFinite,
}

/// Polynomials of total degree `<= degree` in the (standardized) state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis { degree: 3 }
    }
}

impl RegressionBasis {
    pub fn new(degree: usize) -> Self {
        RegressionBasis { degree }
    }

    /// Exponent vectors of every monomial over `dim` coordinates, constant first.
    pub fn monomials(&self, dim: usize) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        for total in 0..=self.degree {
            let mut current = vec![0u8; dim];
            push_monomials(dim, 0, total, &mut current, &mut out);
        }
        out
    }
}

fn push_monomials(dim: usize, pos: usize, remaining: usize, current: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if dim == 0 {
        if remaining == 0 {
            out.push(Vec::new());
        }
        return;
    }
    if pos == dim - 1 {
        current[pos] = remaining as u8;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e as u8;
        push_monomials(dim, pos + 1, remaining - e, current, out);
    }
    current[pos] = 0;
}

/// Affine map of the active state coordinates onto zero mean, unit spread.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization<T> {
    dim: usize,
    active: Vec<(usize, T, T)>,
}

impl<T: Scalar> Standardization<T> {
    fn from_state(state: &[&[T]]) -> Self {
        let n = state.first().map_or(0, |c| c.len());
        let nf = T::from_usize_lossy(n.max(1));
        let mut active = Vec::new();
        for (d, coord) in state.iter().enumerate() {
            let mean = coord.iter().copied().sum::<T>() / nf;
            let var = coord.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let sd = var.sqrt();
            let floor = T::lit(1e3) * T::epsilon() * (T::one() + mean.abs());
            if sd > floor {
                active.push((d, mean, sd));
            }
        }
        Standardization { dim: state.len(), active }
    }

    pub fn active_dims(&self) -> usize {
        self.active.len()
    }

    /// `(coordinate, mean, spread)` of every coordinate the fit reads.
    pub fn active(&self) -> impl Iterator<Item = (usize, T, T)> + '_ {
        self.active.iter().copied()
    }

    fn apply(&self, point: &[T], out: &mut [T]) {
        for (slot, &(d, mean, sd)) in out.iter_mut().zip(&self.active) {
            *slot = (point[d] - mean) / sd;
        }
    }
}

fn monomial<T: Scalar>(z: &[T], exps: &[u8]) -> T {
    let mut v = T::one();
    for (&zi, &e) in z.iter().zip(exps) {
        for _ in 0..e {
            v *= zi;
        }
    }
    v
}

/// Fitted regression function, evaluable at any state point.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionFit<T> {
    standardization: Standardization<T>,
    exponents: Vec<Vec<u8>>,
    pub coefficients: Vec<T>,
}

impl<T: Scalar> RegressionFit<T> {
    pub fn eval(&self, point: &[T]) -> T {
        let mut z = vec![T::zero(); self.standardization.active_dims()];
        self.standardization.apply(point, &mut z);
        self.exponents
            .iter()
            .zip(&self.coefficients)
            .map(|(e, &c)| c * monomial(&z, e))
            .sum()
    }

    /// Plain-data form: `f(x) = Σ_k c_k Π_d ((x_d - mean_d) / spread_d)^{e_kd}`.
    pub fn describe(&self) -> FitDescription {
        FitDescription {
            coordinates: self.standardization.active().map(|(d, _, _)| d).collect(),
            means: self.standardization.active().map(|(_, m, _)| m.to_f64_lossy()).collect(),
            spreads: self.standardization.active().map(|(_, _, s)| s.to_f64_lossy()).collect(),
            exponents: self.exponents.clone(),
            coefficients: self.coefficients.iter().map(|c| c.to_f64_lossy()).collect(),
        }
    }

    /// Evaluates on every path of a state given coordinate-wise.
    pub fn eval_state(&self, state: &[&[T]]) -> Vec<T> {
        let n = state.first().map_or(0, |c| c.len());
        let mut point = vec![T::zero(); state.len()];
        (0..n)
            .map(|p| {
                for (slot, c) in point.iter_mut().zip(state) {
                    *slot = c[p];
                }
                self.eval(&point)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitDescription {
    pub coordinates: Vec<usize>,
    pub means: Vec<f64>,
    pub spreads: Vec<f64>,
    pub exponents: Vec<Vec<u8>>,
    pub coefficients: Vec<f64>,
}

/// Factorized least-squares design.
#[derive(Clone, Debug)]
pub struct Projector<T> {
    n: usize,
    k: usize,
    /// row-major `n x k`
    design: Vec<T>,
    /// lower Cholesky factor of the Gram matrix, row-major `k x k`
    chol: Vec<T>,
    condition: T,
    standardization: Option<Standardization<T>>,
    exponents: Vec<Vec<u8>>,
}

impl<T: Scalar> Projector<T> {
    /// Polynomial design in the given state coordinates.
    pub fn new(basis: RegressionBasis, state: &[&[T]]) -> Result<Self, RegressionError> {
        let n = state.first().map_or(0, |c| c.len());
        if state.iter().any(|c| c.len() != n) {
            return Err(RegressionError::Shape);
        }
        if state.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(RegressionError::NonFinite);
        }
        let standardization = Standardization::from_state(state);
        let exponents = basis.monomials(standardization.active_dims());
        let k = exponents.len();
        let mut design = Vec::with_capacity(n * k);
        let mut point = vec![T::zero(); state.len()];
        let mut z = vec![T::zero(); standardization.active_dims()];
        for p in 0..n {
            for (slot, c) in point.iter_mut().zip(state) {
                *slot = c[p];
            }
            standardization.apply(&point, &mut z);
            design.extend(exponents.iter().map(|e| monomial(&z, e)));
        }
        let mut proj = Self::factorize(n, k, design)?;
        proj.standardization = Some(standardization);
        proj.exponents = exponents;
        Ok(proj)
    }

    /// Arbitrary design given column by column.
    pub fn from_columns(columns: &[Vec<T>]) -> Result<Self, RegressionError> {
        let k = columns.len();
        let n = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != n) {
            return Err(RegressionError::Shape);
        }
        let mut design = Vec::with_capacity(n * k);
        for p in 0..n {
            for c in columns {
                if !c[p].is_finite() {
                    return Err(RegressionError::NonFinite);
                }
                design.push(c[p]);
            }
        }
        Self::factorize(n, k, design)
    }

    fn factorize(n: usize, k: usize, design: Vec<T>) -> Result<Self, RegressionError> {
        if n < k || k == 0 {
            return Err(RegressionError::Underdetermined { paths: n, terms: k });
        }
        let mut gram = vec![T::zero(); k * k];
        for row in design.chunks_exact(k) {
            for a in 0..k {
                let ra = row[a];
                for b in 0..=a {
                    gram[a * k + b] += ra * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                gram[b * k + a] = gram[a * k + b];
            }
        }
        let condition = condition_number(&gram, k);
        if !(condition < T::singular_threshold()) {
            return Err(RegressionError::IllConditioned {
                condition: condition.to_f64_lossy(),
            });
        }
        let chol = cholesky(&gram, k).ok_or(RegressionError::IllConditioned {
            condition: condition.to_f64_lossy(),
        })?;
        Ok(Projector {
            n,
            k,
            design,
            chol,
            condition,
            standardization: None,
            exponents: Vec::new(),
        })
    }

    pub fn paths(&self) -> usize {
        self.n
    }

    pub fn terms(&self) -> usize {
        self.k
    }

    pub fn condition(&self) -> T {
        self.condition
    }

    /// Least-squares coefficients of `target` on the design.
    pub fn coefficients(&self, target: &[T]) -> Vec<T> {
        debug_assert_eq!(target.len(), self.n);
        let k = self.k;
        let mut rhs = vec![T::zero(); k];
        for (row, &y) in self.design.chunks_exact(k).zip(target) {
            for (r, &a) in rhs.iter_mut().zip(row) {
                *r += a * y;
            }
        }
        // forward then backward substitution with L L^T
        for a in 0..k {
            let mut v = rhs[a];
            for b in 0..a {
                v -= self.chol[a * k + b] * rhs[b];
            }
            rhs[a] = v / self.chol[a * k + a];
        }
        for a in (0..k).rev() {
            let mut v = rhs[a];
            for b in a + 1..k {
                v -= self.chol[b * k + a] * rhs[b];
            }
            rhs[a] = v / self.chol[a * k + a];
        }
        rhs
    }

    /// Design times coefficients, one value per path.
    pub fn fitted(&self, coefficients: &[T]) -> Vec<T> {
        self.design
            .chunks_exact(self.k)
            .map(|row| row.iter().zip(coefficients).map(|(&a, &c)| a * c).sum())
            .collect()
    }

    /// Projection of `target`: coefficients and fitted values.
    pub fn project(&self, target: &[T]) -> (Vec<T>, Vec<T>) {
        let c = self.coefficients(target);
        let f = self.fitted(&c);
        (c, f)
    }

    /// Turns coefficients into a standalone function of the state.
    /// Only available for polynomial designs.
    pub fn to_fit(&self, coefficients: Vec<T>) -> Option<RegressionFit<T>> {
        Some(RegressionFit {
            standardization: self.standardization.clone()?,
            exponents: self.exponents.clone(),
            coefficients,
        })
    }
}

fn cholesky<T: Scalar>(a: &[T], k: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if !(s > T::zero()) {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Some(l)
}

/// Ratio of extreme eigenvalues of a symmetric positive semidefinite matrix
/// (cyclic Jacobi; `k` is small).
pub(crate) fn condition_number<T: Scalar>(a: &[T], k: usize) -> T {
    let eig = symmetric_eigenvalues(a, k);
    let max = eig.iter().copied().fold(T::zero(), T::max);
    let min = eig.iter().copied().fold(T::infinity(), T::min);
    if !(min > T::zero()) {
        return T::infinity();
    }
    max / min
}

pub(crate) fn symmetric_eigenvalues<T: Scalar>(a: &[T], k: usize) -> Vec<T> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    off += m[i * k + j] * m[i * k + j];
                }
            }
        }
        let scale: T = (0..k).map(|i| m[i * k + i] * m[i * k + i]).sum();
        if off <= T::epsilon() * T::epsilon() * scale {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = m[p * k + q];
                if apq == T::zero() {
                    continue;
                }
                let app = m[p * k + p];
                let aqq = m[q * k + q];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for r in 0..k {
                    let mrp = m[r * k + p];
                    let mrq = m[r * k + q];
                    m[r * k + p] = c * mrp - s * mrq;
                    m[r * k + q] = s * mrp + c * mrq;
                }
                for r in 0..k {
                    let mpr = m[p * k + r];
                    let mqr = m[q * k + r];
                    m[p * k + r] = c * mpr - s * mqr;
                    m[q * k + r] = s * mpr + c * mqr;
                }
            }
        }
    }
    (0..k).map(|i| m[i * k + i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        assert_eq!(RegressionBasis::new(3).monomials(1).len(), 4);
        assert_eq!(RegressionBasis::new(3).monomials(2).len(), 10);
        assert_eq!(RegressionBasis::new(2).monomials(0), vec![Vec::<u8>::new()]);
        assert_eq!(RegressionBasis::new(0).monomials(2), vec![vec![0, 0]]);
    }

    #[test]
    fn recovers_polynomial_exactly() {
        let x: Vec<f64> = (0..50).map(|i| -2.0 + 0.08 * i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v + 0.5 * v * v * v).collect();
        let p = Projector::new(RegressionBasis::new(3), &[&x]).unwrap();
        let (c, fitted) = p.project(&y);
        for (f, t) in fitted.iter().zip(&y) {
            assert!((f - t).abs() < 1e-10);
        }
        let fit = p.to_fit(c).unwrap();
        assert!((fit.eval(&[0.3]) - (1.0 - 0.6 + 0.5 * 0.027)).abs() < 1e-10);
    }

    #[test]
    fn constant_state_reduces_to_mean() {
        let x = vec![1.0; 10];
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let p = Projector::new(RegressionBasis::new(3), &[&x]).unwrap();
        assert_eq!(p.terms(), 1);
        let (_, fitted) = p.project(&y);
        assert!(fitted.iter().all(|&f| (f - 4.5).abs() < 1e-12));
    }

    #[test]
    fn constants_pass_through() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = vec![2.5; 40];
        let p = Projector::new(RegressionBasis::new(3), &[&x]).unwrap();
        let (_, fitted) = p.project(&y);
        assert!(fitted.iter().all(|&f| (f - 2.5).abs() < 1e-12));
    }

    #[test]
    fn singular_design_is_reported() {
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        let err = Projector::from_columns(&[vec![1.0; 20], a, b]).unwrap_err();
        assert!(matches!(err, RegressionError::IllConditioned { .. }));
        let err = Projector::<f64>::new(RegressionBasis::new(3), &[&[1.0, 2.0, 3.0]]).unwrap_err();
        assert!(matches!(err, RegressionError::Underdetermined { paths: 3, terms: 4 }));
    }

    #[test]
    fn jacobi_eigenvalues() {
        let a = [2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0];
        let mut e = symmetric_eigenvalues(&a, 3);
        e.sort_by(|a: &f64, b| a.partial_cmp(b).unwrap());
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12 && (e[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn two_dimensional_state() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
        let w: Vec<f64> = (0..200).map(|i| ((i * 5) % 11) as f64 / 11.0).collect();
        let y: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a * b + b * b).collect();
        let p = Projector::new(RegressionBasis::new(2), &[&x, &w]).unwrap();
        let (c, fitted) = p.project(&y);
        assert!(fitted.iter().zip(&y).all(|(f, t)| (f - t).abs() < 1e-10));
        let fit = p.to_fit(c).unwrap();
        assert!((fit.eval(&[0.5, 0.5]) - 0.5).abs() < 1e-10);
    }
}
