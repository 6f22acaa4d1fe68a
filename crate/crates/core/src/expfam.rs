//! Scalar exponential families, admissibility checks and Bregman divergences.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::canonical::CanonicalMap;
use crate::error::{PedError, Result};
use crate::numkernel::linalg::{hermitian_asymmetry, min_eig_hermitian_tol, ComplexMatrix};
use crate::numkernel::quad::adaptive_simpson;
use crate::numkernel::rng::RngStream;
use crate::numkernel::special::{log_cosh, logistic, softplus};

/// Poisson canonical parameters above this value are clamped.
pub const POISSON_CLAMP: f64 = 30.0;

/// Minimal regular exponential family with sufficient statistic `T(y) = y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExpFamily {
    Gaussian,
    Bernoulli,
    Binomial { trials: u32 },
    Poisson,
    LogCosh,
    ContinuousBernoulli,
}

const CB_SERIES: f64 = 0.05;

impl ExpFamily {
    pub fn binomial(trials: u32) -> Result<Self> {
        if trials == 0 {
            return Err(PedError::Validation("binomial needs at least one trial".into()));
        }
        Ok(ExpFamily::Binomial { trials })
    }

    pub fn catalog() -> [ExpFamily; 6] {
        [
            ExpFamily::Gaussian,
            ExpFamily::Bernoulli,
            ExpFamily::Binomial { trials: 10 },
            ExpFamily::Poisson,
            ExpFamily::LogCosh,
            ExpFamily::ContinuousBernoulli,
        ]
    }

    /// Log partition function.
    pub fn a(&self, r: f64) -> f64 {
        match *self {
            ExpFamily::Gaussian => 0.5 * r * r,
            ExpFamily::Bernoulli => softplus(r),
            ExpFamily::Binomial { trials } => trials as f64 * softplus(r),
            ExpFamily::Poisson => r.exp(),
            ExpFamily::LogCosh => log_cosh(r),
            ExpFamily::ContinuousBernoulli => {
                if r.abs() < CB_SERIES {
                    let r2 = r * r;
                    r / 2.0 + r2 / 24.0 - r2 * r2 / 2880.0 + r2 * r2 * r2 / 181_440.0
                } else if r > 20.0 {
                    r + (-(-r).exp()).ln_1p() - r.ln()
                } else {
                    (r.exp_m1() / r).ln()
                }
            }
        }
    }

    /// Mean parameter `A'(r)`.
    pub fn a1(&self, r: f64) -> f64 {
        match *self {
            ExpFamily::Gaussian => r,
            ExpFamily::Bernoulli => logistic(r),
            ExpFamily::Binomial { trials } => trials as f64 * logistic(r),
            ExpFamily::Poisson => r.exp(),
            ExpFamily::LogCosh => r.tanh(),
            ExpFamily::ContinuousBernoulli => {
                if r.abs() < CB_SERIES {
                    let r2 = r * r;
                    0.5 + r / 12.0 - r * r2 / 720.0 + r * r2 * r2 / 30_240.0
                } else if r > 0.0 {
                    1.0 / -(-r).exp_m1() - 1.0 / r
                } else {
                    r.exp() / r.exp_m1() - 1.0 / r
                }
            }
        }
    }

    /// Variance function `A''(r)`.
    pub fn a2(&self, r: f64) -> f64 {
        match *self {
            ExpFamily::Gaussian => 1.0,
            ExpFamily::Bernoulli => {
                let p = logistic(r);
                p * (1.0 - p)
            }
            ExpFamily::Binomial { trials } => {
                let p = logistic(r);
                trials as f64 * p * (1.0 - p)
            }
            ExpFamily::Poisson => r.exp(),
            ExpFamily::LogCosh => {
                let s = 1.0 / r.cosh();
                s * s
            }
            ExpFamily::ContinuousBernoulli => {
                let r2 = r * r;
                if r.abs() < CB_SERIES {
                    1.0 / 12.0 - r2 / 240.0 + r2 * r2 / 6048.0 - r2 * r2 * r2 / 172_800.0
                } else {
                    let sh = (0.5 * r).sinh();
                    1.0 / r2 - 1.0 / (4.0 * sh * sh)
                }
            }
        }
    }

    /// Sufficient statistic.
    pub fn t(&self, y: f64) -> f64 {
        y
    }

    /// Lipschitz constant of `A'`, when one exists.
    pub fn lipschitz_a1(&self) -> Option<f64> {
        match *self {
            ExpFamily::Gaussian => Some(1.0),
            ExpFamily::Bernoulli => Some(0.25),
            ExpFamily::Binomial { trials } => Some(trials as f64 / 4.0),
            ExpFamily::Poisson => None,
            ExpFamily::LogCosh => Some(1.0),
            ExpFamily::ContinuousBernoulli => Some(1.0 / 12.0),
        }
    }

    pub fn canonical_clamp(&self) -> Option<f64> {
        match self {
            ExpFamily::Poisson => Some(POISSON_CLAMP),
            _ => None,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, ExpFamily::Gaussian)
    }

    /// Draws one observation at canonical parameter `r`. Gaussian noise has unit variance.
    pub fn sample(&self, r: f64, rng: &mut RngStream) -> f64 {
        match *self {
            ExpFamily::Gaussian => rng.gaussian(r, 1.0),
            ExpFamily::Bernoulli => rng.bernoulli(logistic(r)),
            ExpFamily::Binomial { trials } => rng.binomial(trials, logistic(r)),
            ExpFamily::Poisson => rng.poisson(r.exp()),
            ExpFamily::LogCosh => {
                if rng.uniform() < logistic(2.0 * r) {
                    1.0
                } else {
                    -1.0
                }
            }
            ExpFamily::ContinuousBernoulli => {
                let u = rng.uniform();
                if r.abs() < 1e-10 {
                    u
                } else if r > 0.0 {
                    1.0 + (u + (1.0 - u) * (-r).exp()).ln() / r
                } else {
                    (u * r.exp_m1()).ln_1p() / r
                }
            }
        }
    }

    /// `exp(A(i r) - A(0))`.
    pub fn char_form(&self, r: f64) -> Option<Complex64> {
        let i = Complex64::i();
        Some(match *self {
            ExpFamily::Gaussian => Complex64::new((-0.5 * r * r).exp(), 0.0),
            ExpFamily::Bernoulli => (1.0 + (i * r).exp()) / 2.0,
            ExpFamily::Binomial { trials } => ((1.0 + (i * r).exp()) / 2.0).powu(trials),
            ExpFamily::Poisson => ((i * r).exp() - 1.0).exp(),
            ExpFamily::LogCosh => Complex64::new(r.cos(), 0.0),
            ExpFamily::ContinuousBernoulli => {
                if r.abs() < 1e-4 {
                    1.0 + i * r / 2.0 - r * r / 6.0
                } else {
                    ((i * r).exp() - 1.0) / (i * r)
                }
            }
        })
    }
}

impl fmt::Display for ExpFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpFamily::Gaussian => write!(f, "gaussian"),
            ExpFamily::Bernoulli => write!(f, "bernoulli"),
            ExpFamily::Binomial { trials } => write!(f, "binomial:{trials}"),
            ExpFamily::Poisson => write!(f, "poisson"),
            ExpFamily::LogCosh => write!(f, "log_cosh"),
            ExpFamily::ContinuousBernoulli => write!(f, "continuous_bernoulli"),
        }
    }
}

impl FromStr for ExpFamily {
    type Err = PedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(ExpFamily::Gaussian),
            "bernoulli" => Ok(ExpFamily::Bernoulli),
            "poisson" => Ok(ExpFamily::Poisson),
            "log_cosh" => Ok(ExpFamily::LogCosh),
            "continuous_bernoulli" => Ok(ExpFamily::ContinuousBernoulli),
            _ => match s.strip_prefix("binomial:") {
                Some(t) => ExpFamily::binomial(
                    t.parse()
                        .map_err(|_| PedError::Validation(format!("bad trial count in '{s}'")))?,
                ),
                None => Err(PedError::Validation(format!("unknown family '{s}'"))),
            },
        }
    }
}

impl Serialize for ExpFamily {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ExpFamily {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Outcome of the Gram-matrix positive-definiteness probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissibilityReport {
    pub min_eigenvalue: f64,
    pub pass: bool,
}

/// Builds `M_jk = phi(r_j - r_k)` and reports its smallest eigenvalue.
pub fn check_admissible(phi: &dyn Fn(f64) -> Complex64, grid: &[f64], tol: f64) -> Result<AdmissibilityReport> {
    if grid.len() < 2 {
        return Err(PedError::Validation("admissibility grid needs at least two points".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(PedError::Validation("admissibility grid points must be distinct".into()));
    }
    let gram: ComplexMatrix = grid
        .iter()
        .map(|&a| grid.iter().map(|&b| phi(a - b)).collect())
        .collect();
    let asym = hermitian_asymmetry(&gram);
    if asym > 1e-10 {
        return Err(PedError::CharFormInconsistent { max_asymmetry: asym });
    }
    let min_eigenvalue = min_eig_hermitian_tol(&gram, 1e-10)?;
    Ok(AdmissibilityReport {
        min_eigenvalue,
        pass: min_eigenvalue >= -tol,
    })
}

/// A strictly convex function and its derivative.
#[derive(Clone, Copy)]
pub struct BregmanPair {
    pub phi: fn(f64) -> Result<f64>,
    pub phi1: fn(f64) -> Result<f64>,
}

fn require_nonneg(x: f64) -> Result<f64> {
    if x < 0.0 || !x.is_finite() {
        Err(PedError::Domain(format!("{x} is outside [0, inf)")))
    } else {
        Ok(x)
    }
}

fn require_unit(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        Err(PedError::Domain(format!("{x} is outside [0, 1]")))
    } else {
        Ok(x)
    }
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

impl BregmanPair {
    /// `phi(u) = u^2`
    pub fn squared() -> Self {
        Self {
            phi: |u| Ok(u * u),
            phi1: |u| Ok(2.0 * u),
        }
    }

    /// Convex conjugate of the gaussian log partition, `u^2 / 2`.
    pub fn half_squared() -> Self {
        Self {
            phi: |u| Ok(0.5 * u * u),
            phi1: |u| Ok(u),
        }
    }

    /// Poisson conjugate `u log u - u`.
    pub fn poisson() -> Self {
        Self {
            phi: |u| Ok(xlogx(require_nonneg(u)?) - u),
            phi1: |u| {
                if u <= 0.0 {
                    return Err(PedError::Domain(format!("log of nonpositive {u}")));
                }
                Ok(u.ln())
            },
        }
    }

    /// Bernoulli conjugate, negative binary entropy.
    pub fn bernoulli() -> Self {
        Self {
            phi: |u| Ok(xlogx(require_unit(u)?) + xlogx(1.0 - u)),
            phi1: |u| {
                if !(u > 0.0 && u < 1.0) {
                    return Err(PedError::Domain(format!("logit of {u}")));
                }
                Ok((u / (1.0 - u)).ln())
            },
        }
    }

    pub fn for_family(family: ExpFamily) -> Option<Self> {
        match family {
            ExpFamily::Gaussian => Some(Self::half_squared()),
            ExpFamily::Poisson => Some(Self::poisson()),
            ExpFamily::Bernoulli => Some(Self::bernoulli()),
            _ => None,
        }
    }

    /// Numerical convexity probe by second differences.
    pub fn is_convex_on(&self, grid: &[f64]) -> bool {
        let h = 1e-4;
        grid.iter().all(|&x| {
            match ((self.phi)(x - h), (self.phi)(x), (self.phi)(x + h)) {
                (Ok(a), Ok(b), Ok(c)) => a - 2.0 * b + c >= -1e-8,
                _ => true,
            }
        })
    }
}

/// `D(y, mu) = phi(y) - phi(mu) - phi'(mu)(y - mu)`
pub fn bregman(pair: &BregmanPair, y: f64, mu: f64) -> Result<f64> {
    let d = (pair.phi)(y)? - (pair.phi)(mu)? - (pair.phi1)(mu)? * (y - mu);
    Ok(d.max(0.0))
}

/// Map sampled on a grid by integrating an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeTable {
    pub eta: Vec<f64>,
    pub r: Vec<f64>,
    /// `None` where `R = 0`.
    pub rho: Vec<Option<f64>>,
}

/// Recovers `|R| = sqrt(2 * integral of sigma)` on a sorted grid.
///
/// `tail_mass` is the integral of `sigma` from minus infinity to the first grid point.
pub fn recipe_r(sigma: &dyn Fn(f64) -> f64, eta_grid: &[f64], quad_tol: f64, tail_mass: f64) -> Result<RecipeTable> {
    if eta_grid.is_empty() {
        return Err(PedError::Validation("empty recipe grid".into()));
    }
    if eta_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(PedError::Validation("recipe grid must be strictly increasing".into()));
    }
    if let Some(&bad) = eta_grid.iter().find(|&&e| sigma(e) < 0.0) {
        return Err(PedError::Domain(format!("activation is negative at {bad}")));
    }
    let n = eta_grid.len();
    let piece_tol = quad_tol / n as f64;
    let mut acc = tail_mass;
    let mut r = Vec::with_capacity(n);
    let mut rho = Vec::with_capacity(n);
    for (i, &e) in eta_grid.iter().enumerate() {
        if i > 0 {
            acc += adaptive_simpson(sigma, eta_grid[i - 1], e, piece_tol)?;
        }
        let ri = (2.0 * acc.max(0.0)).sqrt();
        r.push(ri);
        rho.push(if ri > 0.0 { Some(sigma(e) / ri) } else { None });
    }
    Ok(RecipeTable {
        eta: eta_grid.to_vec(),
        r,
        rho,
    })
}

/// Mean parameter `A'(R(eta))`.
pub fn mean_param(family: ExpFamily, map: &CanonicalMap, eta: f64) -> f64 {
    family.a1(map.r(eta))
}
