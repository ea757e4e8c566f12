//! Empirical audit of a declared Lipschitz constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Env, Expr, Var};

/// Closed intervals for the variables an expression is probed over.
#[derive(Clone, Debug, Default)]
pub struct ProbeBox {
    pub intervals: Vec<(Var, f64, f64)>,
}

impl ProbeBox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, v: Var, lo: f64, hi: f64) -> Self {
        self.intervals.retain(|(w, _, _)| *w != v);
        self.intervals.push((v, lo, hi));
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeFailure {
    pub point: Vec<(String, f64)>,
    pub message: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    /// Largest observed `|Δe| / ‖Δ(y, z, u)‖₁`.
    pub estimate: f64,
    pub declared: f64,
    pub passed: bool,
    pub failure: Option<ProbeFailure>,
}

fn point_of(env: &Env<f64>, vars: &[Var]) -> Vec<(String, f64)> {
    vars.iter()
        .map(|&v| (v.to_string(), env.get(v).unwrap_or(f64::NAN)))
        .collect()
}

/// Samples `samples` base points in the box and, at each, moves the
/// Lipschitz coordinates (y, z, u1..u9) both one at a time and jointly while
/// holding the others fixed. Passes when the largest difference quotient is at
/// most `declared * (1 + 1e-9)`.
pub fn lipschitz_probe(e: &Expr, probe_box: &ProbeBox, samples: usize, declared: f64, seed: u64) -> ProbeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars: Vec<Var> = probe_box.intervals.iter().map(|(v, _, _)| *v).collect();
    let lip: Vec<usize> = probe_box
        .intervals
        .iter()
        .enumerate()
        .filter(|(_, (v, _, _))| v.is_lipschitz_coordinate())
        .map(|(k, _)| k)
        .collect();
    let draw = |rng: &mut ChaCha8Rng, k: usize| {
        let (_, lo, hi) = probe_box.intervals[k];
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };

    let mut estimate = 0.0f64;
    let mut failure = None;
    'outer: for _ in 0..samples.max(2) {
        let mut base = Env::<f64>::new();
        for k in 0..probe_box.intervals.len() {
            base.set(vars[k], draw(&mut rng, k));
        }
        let e0 = match e.eval(&base) {
            Ok(v) => v,
            Err(err) => {
                failure = Some(ProbeFailure {
                    point: point_of(&base, &vars),
                    message: err.to_string(),
                });
                break;
            }
        };

        // one coordinate at a time, then all of them together
        let moves: Vec<Vec<usize>> = lip.iter().map(|&k| vec![k]).chain(std::iter::once(lip.clone())).collect();
        for mv in moves {
            if mv.is_empty() {
                continue;
            }
            let mut moved = base;
            let mut dist = 0.0;
            for &k in &mv {
                let (v, lo, hi) = probe_box.intervals[k];
                let old = base.get(v).unwrap_or(0.0);
                let mut new = draw(&mut rng, k);
                // keep the step away from zero so the quotient is not roundoff
                let min_step = 1e-3 * (hi - lo).abs();
                let mut tries = 0;
                while (new - old).abs() < min_step && tries < 16 {
                    new = draw(&mut rng, k);
                    tries += 1;
                }
                moved.set(v, new);
                dist += (new - old).abs();
            }
            if dist == 0.0 {
                continue;
            }
            match e.eval(&moved) {
                Ok(e1) => estimate = estimate.max((e1 - e0).abs() / dist),
                Err(err) => {
                    failure = Some(ProbeFailure {
                        point: point_of(&moved, &vars),
                        message: err.to_string(),
                    });
                    break 'outer;
                }
            }
        }
    }

    let passed = failure.is_none() && estimate <= declared * (1.0 + 1e-9);
    ProbeReport {
        estimate,
        declared,
        passed,
        failure,
    }
}
