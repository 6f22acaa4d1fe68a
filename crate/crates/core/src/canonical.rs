//! Canonical nonlinearities and the activation/dropout pair they induce.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PedError, Result};
use crate::expfam::ExpFamily;
use crate::numkernel::special::{gaussian_cdf, gaussian_pdf};

/// Band around the ReLU kink treated as "on the boundary".
pub const KINK_TOL: f64 = 1e-9;

/// Gaussian-smoothed ReLU, `E[relu(eta + tau * eps)]` for standard normal `eps`.
pub fn trelu(eta: f64, tau: f64) -> f64 {
    let t = tau.abs();
    let x = eta / t;
    eta * gaussian_cdf(x) + t * gaussian_pdf(x)
}

pub fn trelu_rho(eta: f64, tau: f64) -> f64 {
    gaussian_cdf(eta / tau.abs())
}

pub fn trelu_rho1(eta: f64, tau: f64) -> f64 {
    let t = tau.abs();
    gaussian_pdf(eta / t) / t
}

pub fn leaky_trelu(eta: f64, tau: f64, slope: f64) -> f64 {
    (1.0 - slope) * trelu(eta, tau) + slope * eta
}

/// Piecewise-linear map sampled on a sorted grid, clamped outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct TableMap {
    pub eta: Vec<f64>,
    pub r: Vec<f64>,
    pub rho: Vec<f64>,
}

impl TableMap {
    pub fn new(eta: Vec<f64>, r: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if eta.len() < 2 || eta.len() != r.len() || eta.len() != rho.len() {
            return Err(PedError::Validation("table map needs >= 2 aligned samples".into()));
        }
        if eta.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(PedError::Validation("table grid must be strictly increasing".into()));
        }
        Ok(Self { eta, r, rho })
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let n = self.eta.len();
        if x <= self.eta[0] {
            return (0, 0.0);
        }
        if x >= self.eta[n - 1] {
            return (n - 2, 1.0);
        }
        let hi = self.eta.partition_point(|&e| e <= x).min(n - 1);
        let lo = hi - 1;
        (lo, (x - self.eta[lo]) / (self.eta[hi] - self.eta[lo]))
    }

    fn interp(&self, values: &[f64], x: f64) -> f64 {
        let (i, t) = self.locate(x);
        values[i] + t * (values[i + 1] - values[i])
    }

    fn slope(&self, values: &[f64], x: f64) -> f64 {
        if x < self.eta[0] || x > self.eta[self.eta.len() - 1] {
            return 0.0;
        }
        let (i, _) = self.locate(x);
        (values[i + 1] - values[i]) / (self.eta[i + 1] - self.eta[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CanonicalMap {
    Identity,
    Relu,
    TRelu { tau: f64 },
    LeakyTRelu { tau: f64, slope: f64 },
    Negate(Box<CanonicalMap>),
    Table(TableMap),
}

impl CanonicalMap {
    pub fn trelu(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(PedError::Validation(format!("trelu scale must be positive, got {tau}")));
        }
        Ok(CanonicalMap::TRelu { tau })
    }

    pub fn leaky_trelu(tau: f64, slope: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) || !(0.0..=1.0).contains(&slope) {
            return Err(PedError::Validation(format!(
                "leaky trelu needs tau > 0 and slope in [0, 1], got ({tau}, {slope})"
            )));
        }
        Ok(CanonicalMap::LeakyTRelu { tau, slope })
    }

    pub fn negate(inner: CanonicalMap) -> Self {
        CanonicalMap::Negate(Box::new(inner))
    }

    pub fn r(&self, eta: f64) -> f64 {
        match self {
            CanonicalMap::Identity => eta,
            CanonicalMap::Relu => eta.max(0.0),
            CanonicalMap::TRelu { tau } => trelu(eta, *tau),
            CanonicalMap::LeakyTRelu { tau, slope } => leaky_trelu(eta, *tau, *slope),
            CanonicalMap::Negate(inner) => -inner.r(eta),
            CanonicalMap::Table(t) => t.interp(&t.r, eta),
        }
    }

    /// First derivative. ReLU uses `rho(0) = 0`.
    pub fn rho(&self, eta: f64) -> f64 {
        match self {
            CanonicalMap::Identity => 1.0,
            CanonicalMap::Relu => {
                if eta > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            CanonicalMap::TRelu { tau } => trelu_rho(eta, *tau),
            CanonicalMap::LeakyTRelu { tau, slope } => (1.0 - slope) * trelu_rho(eta, *tau) + slope,
            CanonicalMap::Negate(inner) => -inner.rho(eta),
            CanonicalMap::Table(t) => t.interp(&t.rho, eta),
        }
    }

    /// Second derivative; zero away from the ReLU kink.
    pub fn rho1(&self, eta: f64) -> f64 {
        match self {
            CanonicalMap::Identity | CanonicalMap::Relu => 0.0,
            CanonicalMap::TRelu { tau } => trelu_rho1(eta, *tau),
            CanonicalMap::LeakyTRelu { tau, slope } => (1.0 - slope) * trelu_rho1(eta, *tau),
            CanonicalMap::Negate(inner) => -inner.rho1(eta),
            CanonicalMap::Table(t) => t.slope(&t.rho, eta),
        }
    }

    pub fn has_kink(&self) -> bool {
        match self {
            CanonicalMap::Relu => true,
            CanonicalMap::Negate(inner) => inner.has_kink(),
            _ => false,
        }
    }

    /// True when `eta` sits within the kink band of a ReLU-type map.
    pub fn on_kink(&self, eta: f64) -> bool {
        self.has_kink() && eta.abs() <= KINK_TOL
    }

    pub fn is_linear(&self) -> bool {
        match self {
            CanonicalMap::Identity => true,
            CanonicalMap::LeakyTRelu { slope, .. } => *slope == 1.0,
            CanonicalMap::Negate(inner) => inner.is_linear(),
            _ => false,
        }
    }

    /// Values the dropout `rho` can take, when that set is finite.
    pub fn finite_dropout_codomain(&self) -> Option<Vec<f64>> {
        match self {
            CanonicalMap::Identity => Some(vec![1.0]),
            CanonicalMap::Relu => Some(vec![0.0, 1.0]),
            CanonicalMap::Negate(inner) => inner
                .finite_dropout_codomain()
                .map(|v| v.into_iter().map(|x| -x).collect()),
            _ => None,
        }
    }
}

impl fmt::Display for CanonicalMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CanonicalMap::Identity => write!(f, "identity"),
            CanonicalMap::Relu => write!(f, "relu"),
            CanonicalMap::TRelu { tau } => write!(f, "trelu:{tau}"),
            CanonicalMap::LeakyTRelu { tau, slope } => write!(f, "leaky_trelu:{tau}:{slope}"),
            CanonicalMap::Negate(inner) => match inner.as_ref() {
                CanonicalMap::TRelu { tau } => write!(f, "neg_trelu:{tau}"),
                other => write!(f, "neg({other})"),
            },
            CanonicalMap::Table(t) => write!(f, "table[{}]", t.eta.len()),
        }
    }
}

fn parse_param(s: &str, what: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| PedError::Validation(format!("cannot parse {what} from '{s}'")))
}

impl FromStr for CanonicalMap {
    type Err = PedError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["identity"] => Ok(CanonicalMap::Identity),
            ["relu"] => Ok(CanonicalMap::Relu),
            ["trelu", tau] => CanonicalMap::trelu(parse_param(tau, "tau")?),
            ["leaky_trelu", tau, m] => {
                CanonicalMap::leaky_trelu(parse_param(tau, "tau")?, parse_param(m, "slope")?)
            }
            ["neg_trelu", tau] => Ok(CanonicalMap::negate(CanonicalMap::trelu(parse_param(tau, "tau")?)?)),
            _ => Err(PedError::Validation(format!("unknown canonical map '{s}'"))),
        }
    }
}

impl Serialize for CanonicalMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if let CanonicalMap::Table(_) = self {
            return Err(serde::ser::Error::custom("table maps are not serializable"));
        }
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CanonicalMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything the fixed-point map needs at one pre-activation coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    /// canonical parameter R(eta), after any clamp
    pub r: f64,
    pub rho: f64,
    pub rho1: f64,
    /// A(R(eta))
    pub a: f64,
    /// A'(R(eta)), the mean parameter
    pub a1: f64,
    pub a2: f64,
    /// (A o R)'
    pub sigma: f64,
    /// (A o R)''
    pub sigma1: f64,
    pub clamped: bool,
}

/// A family paired with a canonical map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationBundle {
    pub family: ExpFamily,
    pub map: CanonicalMap,
}

pub fn derive_bundle(family: ExpFamily, map: CanonicalMap) -> Result<ActivationBundle> {
    // every catalog family has the whole real line as its canonical domain,
    // so any real-valued map is compatible
    if let CanonicalMap::TRelu { tau } | CanonicalMap::LeakyTRelu { tau, .. } = &map {
        if !(*tau > 0.0) {
            return Err(PedError::Validation("trelu scale must be positive".into()));
        }
    }
    Ok(ActivationBundle { family, map })
}

impl ActivationBundle {
    pub fn eval(&self, eta: f64) -> Activation {
        let raw = self.map.r(eta);
        let rho = self.map.rho(eta);
        let rho1 = self.map.rho1(eta);
        let (a, a1, a2, r, clamped) = match self.family.canonical_clamp() {
            Some(c) if raw > c => {
                // linear continuation keeps A convex and C1 past the clamp
                let (ac, a1c) = (self.family.a(c), self.family.a1(c));
                (ac + a1c * (raw - c), a1c, 0.0, c, true)
            }
            _ => (self.family.a(raw), self.family.a1(raw), self.family.a2(raw), raw, false),
        };
        Activation {
            r,
            rho,
            rho1,
            a,
            a1,
            a2,
            sigma: a1 * rho,
            sigma1: a2 * rho * rho + a1 * rho1,
            clamped,
        }
    }

    pub fn sigma(&self, eta: f64) -> f64 {
        self.eval(eta).sigma
    }

    pub fn sigma1(&self, eta: f64) -> f64 {
        self.eval(eta).sigma1
    }

    pub fn rho(&self, eta: f64) -> f64 {
        self.map.rho(eta)
    }

    pub fn rho1(&self, eta: f64) -> f64 {
        self.map.rho1(eta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::quad::adaptive_simpson;
    use crate::numkernel::special::logistic;
    use proptest::prelude::*;

    fn trelu_oracle(eta: f64, tau: f64) -> f64 {
        let f = |e: f64| (eta + tau * e).max(0.0) * gaussian_pdf(e);
        // split at the kink so Simpson sees smooth pieces
        let k = -eta / tau;
        let lo = -40.0_f64;
        let hi = 40.0_f64;
        let k = k.clamp(lo, hi);
        adaptive_simpson(&f, lo, k, 1e-14).unwrap() + adaptive_simpson(&f, k, hi, 1e-14).unwrap()
    }

    #[test]
    fn trelu_examples() {
        let want = trelu_oracle(0.0, 1.0);
        assert!((trelu(0.0, 1.0) - want).abs() < 1e-12);
        assert!((want - 0.398_942_3).abs() < 1e-7);
        assert!((trelu(10.0, 0.5) - 10.0).abs() < 1e-12);
        for tau in [0.1, 0.5, 2.0] {
            assert_eq!(trelu_rho(0.0, tau), 0.5);
        }
        for &(eta, tau) in &[(1.0, 1.0), (-0.7, 0.3), (2.5, 1.7)] {
            assert!((trelu(eta, tau) - trelu_oracle(eta, tau)).abs() < 1e-11);
        }
    }

    #[test]
    fn leaky_examples() {
        for eta in [-3.0, -0.2, 0.0, 1.4] {
            assert!((leaky_trelu(eta, 0.5, 1.0) - eta).abs() < 1e-15);
            assert_eq!(leaky_trelu(eta, 0.5, 0.0), trelu(eta, 0.5));
        }
        let want = 0.7 * trelu_oracle(0.0, 0.5);
        assert!((leaky_trelu(0.0, 0.5, 0.3) - want).abs() < 1e-12);
        assert!((want - 0.139_630).abs() < 1e-6);
    }

    #[test]
    fn make_and_parse() {
        let id: CanonicalMap = "identity".parse().unwrap();
        assert_eq!((id.r(0.4), id.rho(0.4), id.rho1(0.4)), (0.4, 1.0, 0.0));
        let relu: CanonicalMap = "relu".parse().unwrap();
        assert_eq!((relu.r(-2.0), relu.rho(-2.0)), (0.0, 0.0));
        assert_eq!((relu.r(3.0), relu.rho(3.0)), (3.0, 1.0));
        assert_eq!(relu.rho(0.0), 0.0);
        let neg: CanonicalMap = "neg_trelu:0.5".parse().unwrap();
        assert!((neg.r(0.0) + trelu_oracle(0.0, 0.5)).abs() < 1e-12);
        assert!((neg.r(0.0) + 0.199_471).abs() < 1e-6);
        for s in ["identity", "relu", "trelu:0.5", "leaky_trelu:0.5:0.3", "neg_trelu:0.25"] {
            let m: CanonicalMap = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert!("gelu".parse::<CanonicalMap>().is_err());
        assert!("trelu:-1".parse::<CanonicalMap>().is_err());
        assert!("leaky_trelu:1:2".parse::<CanonicalMap>().is_err());
    }

    #[test]
    fn bundle_examples() {
        let g = derive_bundle(ExpFamily::Gaussian, CanonicalMap::trelu(0.5).unwrap()).unwrap();
        for eta in [-1.0, 0.0, 0.3, 2.0] {
            let want = gaussian_cdf(eta / 0.5) * trelu(eta, 0.5);
            assert!((g.sigma(eta) - want).abs() < 1e-15);
        }
        let b = derive_bundle(ExpFamily::Bernoulli, CanonicalMap::Identity).unwrap();
        assert_eq!(b.sigma(0.0), 0.5);
        assert!((b.sigma(1.3) - logistic(1.3)).abs() < 1e-15);
        let bin = derive_bundle(ExpFamily::Binomial { trials: 10 }, CanonicalMap::trelu(0.5).unwrap()).unwrap();
        let want = 10.0 * logistic(trelu_oracle(0.0, 0.5)) * 0.5;
        assert!((bin.sigma(0.0) - want).abs() < 1e-12);
        assert!((want - 2.748_515_5).abs() < 1e-7);
    }

    #[test]
    fn uniform_bound_and_monotone() {
        let mut prev = f64::INFINITY;
        for &tau in &[2.0, 1.0, 0.5, 0.1, 0.01] {
            let mut worst = 0.0_f64;
            for i in 0..10_000 {
                let eta = -20.0 + 40.0 * i as f64 / 9999.0;
                worst = worst.max((trelu(eta, tau) - eta.max(0.0)).abs());
            }
            assert!(worst <= tau * (2.0 / std::f64::consts::PI).sqrt());
            assert!(worst < prev);
            prev = worst;
        }
    }

    #[test]
    fn relu_codomain_exact() {
        let relu = CanonicalMap::Relu;
        for i in -500..500 {
            let eta = i as f64 * 0.013 + 1e-7;
            assert!([0.0, 1.0].contains(&relu.rho(eta)));
        }
        assert_eq!(relu.finite_dropout_codomain(), Some(vec![0.0, 1.0]));
    }

    fn smooth_maps() -> Vec<CanonicalMap> {
        vec![
            CanonicalMap::Identity,
            CanonicalMap::trelu(0.5).unwrap(),
            CanonicalMap::trelu(2.0).unwrap(),
            CanonicalMap::leaky_trelu(0.3, 0.2).unwrap(),
            CanonicalMap::negate(CanonicalMap::trelu(0.7).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn derivative_consistency(eta in -6.0f64..6.0) {
            let h = 1e-5;
            for m in smooth_maps() {
                let fd_r = (m.r(eta + h) - m.r(eta - h)) / (2.0 * h);
                prop_assert!((fd_r - m.rho(eta)).abs() < 1e-6);
                let fd_rho = (m.rho(eta + h) - m.rho(eta - h)) / (2.0 * h);
                prop_assert!((fd_rho - m.rho1(eta)).abs() < 1e-6);
            }
        }

        #[test]
        fn chain_rule(eta in -8.0f64..8.0) {
            for fam in ExpFamily::catalog() {
                for m in smooth_maps().into_iter().chain([CanonicalMap::Relu]) {
                    let b = derive_bundle(fam, m.clone()).unwrap();
                    let act = b.eval(eta);
                    if act.clamped { continue; }
                    prop_assert!((act.sigma - fam.a1(m.r(eta)) * m.rho(eta)).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn trelu_rho_bounded_increasing(a in -10.0f64..10.0, d in 1e-3f64..1.0, tau in 0.05f64..3.0) {
            let (r0, r1) = (trelu_rho(a, tau), trelu_rho(a + d, tau));
            prop_assert!((0.0..=1.0).contains(&r0));
            prop_assert!(r1 >= r0);
        }
    }
}
