//! Fixed-point solvers for `z = g(z)`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{PedError, Result};
use crate::numkernel::linalg::solve_spd;
use crate::numkernel::matrix::{dot, norm2, norm_inf, Matrix};
use crate::numkernel::rng::RngStream;

/// Iterates whose sup-norm exceeds this are declared divergent.
pub const DIVERGENCE_BOUND: f64 = 1e12;
const TIKHONOV: f64 = 1e-10;
const REJECT_FACTOR: f64 = 10.0;
const MIN_DAMPING: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub anderson_memory: usize,
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            anderson_memory: 5,
            damping: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter < 1 || self.anderson_memory < 1 {
            return Err(PedError::Validation(
                "solver needs tol > 0, max_iter >= 1 and anderson_memory >= 1".into(),
            ));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(PedError::Validation(format!("damping {} is outside (0, 1]", self.damping)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub z_star: Vec<f64>,
    /// sup-norm of `z - g(z)` at `z_star`
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub contraction_estimate: Option<f64>,
}

fn residual_vec(g: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Vec<f64> {
    let gx = g(x);
    gx.iter().zip(x).map(|(a, b)| a - b).collect()
}

fn blown_up(x: &[f64], f: &[f64]) -> bool {
    x.iter().chain(f).any(|v| !v.is_finite()) || norm_inf(x) > DIVERGENCE_BOUND
}

/// Damped plain iteration `z <- (1 - beta) z + beta g(z)`.
pub fn picard(g: &dyn Fn(&[f64]) -> Vec<f64>, z0: &[f64], cfg: &SolverConfig) -> FixedPointResult {
    let beta = cfg.damping;
    let mut x = z0.to_vec();
    let mut f = residual_vec(g, &x);
    let mut res = norm_inf(&f);
    let mut prev_res = f64::NAN;
    let mut iterations = 0;
    let mut diverged = false;
    while res > cfg.tol {
        if blown_up(&x, &f) {
            diverged = true;
            break;
        }
        if iterations >= cfg.max_iter {
            break;
        }
        x.iter_mut().zip(&f).for_each(|(xi, fi)| *xi += beta * fi);
        f = residual_vec(g, &x);
        prev_res = res;
        res = norm_inf(&f);
        iterations += 1;
    }
    let contraction = if prev_res.is_finite() && prev_res > 0.0 {
        // for the damped map the residual ratio estimates |1 - beta + beta L|
        Some(res / prev_res)
    } else {
        None
    };
    FixedPointResult {
        converged: res <= cfg.tol && !diverged,
        z_star: x,
        residual: if diverged { f64::INFINITY } else { res },
        iterations,
        diverged,
        contraction_estimate: contraction,
    }
}

/// Type-II Anderson mixing over the last `anderson_memory` iterate/residual pairs.
pub fn anderson(g: &dyn Fn(&[f64]) -> Vec<f64>, z0: &[f64], cfg: &SolverConfig) -> FixedPointResult {
    let mut beta = cfg.damping;
    let m = cfg.anderson_memory;
    let mut x = z0.to_vec();
    let mut f = residual_vec(g, &x);
    let mut res = norm_inf(&f);
    let mut dx: VecDeque<Vec<f64>> = VecDeque::with_capacity(m);
    let mut df: VecDeque<Vec<f64>> = VecDeque::with_capacity(m);
    let mut iterations = 0;
    let mut diverged = false;
    while res > cfg.tol {
        if blown_up(&x, &f) {
            diverged = true;
            break;
        }
        if iterations >= cfg.max_iter {
            break;
        }
        let mixed = if dx.is_empty() {
            None
        } else {
            mixing_weights(&df, &f).map(|gamma| {
                let mut next: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + beta * b).collect();
                for (k, gk) in gamma.iter().enumerate() {
                    for ((n, a), b) in next.iter_mut().zip(&dx[k]).zip(&df[k]) {
                        *n -= gk * (a + beta * b);
                    }
                }
                next
            })
        };
        let used_mixing = mixed.is_some();
        let mut x_new = mixed.unwrap_or_else(|| x.iter().zip(&f).map(|(a, b)| a + beta * b).collect());
        let mut f_new = residual_vec(g, &x_new);
        let mut res_new = norm_inf(&f_new);
        let mut picard_retry = used_mixing;
        while !(res_new <= REJECT_FACTOR * res) && (picard_retry || beta > MIN_DAMPING) {
            beta = (0.5 * beta).max(MIN_DAMPING);
            picard_retry = false;
            dx.clear();
            df.clear();
            x_new = x.iter().zip(&f).map(|(a, b)| a + beta * b).collect();
            f_new = residual_vec(g, &x_new);
            res_new = norm_inf(&f_new);
        }
        if res_new < res {
            beta = (2.0 * beta).min(cfg.damping);
        }
        if dx.len() == m {
            dx.pop_front();
            df.pop_front();
        }
        dx.push_back(x_new.iter().zip(&x).map(|(a, b)| a - b).collect());
        df.push_back(f_new.iter().zip(&f).map(|(a, b)| a - b).collect());
        x = x_new;
        f = f_new;
        res = res_new;
        iterations += 1;
    }
    FixedPointResult {
        converged: res <= cfg.tol && !diverged,
        z_star: x,
        residual: if diverged { f64::INFINITY } else { res },
        iterations,
        diverged,
        contraction_estimate: None,
    }
}

/// Least-squares weights `argmin |f - dF gamma|` through regularized normal equations.
fn mixing_weights(df: &VecDeque<Vec<f64>>, f: &[f64]) -> Option<Vec<f64>> {
    let k = df.len();
    let mut gram = Matrix::from_fn(k, k, |i, j| dot(&df[i], &df[j]));
    let scale = (0..k).fold(0.0_f64, |s, i| s.max(gram[(i, i)]));
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    gram = gram.scale(1.0 / scale);
    gram.add_diagonal(TIKHONOV);
    let rhs: Vec<f64> = df.iter().map(|d| dot(d, f) / scale).collect();
    let gamma = solve_spd(&gram, &rhs).ok()?;
    gamma.iter().all(|v| v.is_finite()).then_some(gamma)
}

/// Largest finite-difference stretch `|g(z + eps u) - g(z)| / eps` over probe
/// directions. Coordinate axes come first, then seeded random unit vectors.
pub fn contraction_estimate(g: &dyn Fn(&[f64]) -> Vec<f64>, z: &[f64], probes: usize, seed: u64) -> f64 {
    const EPS: f64 = 1e-5;
    let n = z.len();
    let base = g(z);
    let mut rng = RngStream::new(seed);
    let mut worst = 0.0_f64;
    for p in 0..probes {
        let u: Vec<f64> = if p < n {
            (0..n).map(|i| if i == p { 1.0 } else { 0.0 }).collect()
        } else {
            let v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
            let nv = norm2(&v);
            v.into_iter().map(|x| x / nv).collect()
        };
        let shifted: Vec<f64> = z.iter().zip(&u).map(|(a, b)| a + EPS * b).collect();
        let gs = g(&shifted);
        let stretch = gs.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / EPS;
        worst = worst.max(stretch);
    }
    worst
}
