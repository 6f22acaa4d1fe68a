use std::f64::consts::{LN_2, PI};
use std::sync::OnceLock;

use crate::error::{PedError, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal cumulative distribution function.
pub fn gaussian_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn gaussian_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(cosh(x))` without overflow.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Riemann zeta for real `s != 1`.
///
/// Positive arguments use the alternating eta series with Borwein's
/// acceleration; non-positive integers use Bernoulli numbers.
pub fn zeta(s: f64) -> Result<f64> {
    if s == 1.0 {
        return Err(PedError::Domain("zeta has a pole at 1".into()));
    }
    if s <= 0.0 {
        if s.fract() != 0.0 {
            return Err(PedError::Domain(format!("zeta({s}) for non-integer s <= 0 is unsupported")));
        }
        let n = (-s) as usize;
        if n == 0 {
            return Ok(-0.5);
        }
        return Ok(-bernoulli(n + 1) / (n as f64 + 1.0));
    }
    if s > 60.0 {
        return Ok(1.0 + 2f64.powf(-s) + 3f64.powf(-s));
    }
    Ok(borwein_eta(s) / (1.0 - 2f64.powf(1.0 - s)))
}

fn borwein_eta(s: f64) -> f64 {
    const N: usize = 40;
    let mut d = [0.0_f64; N + 1];
    let mut term = 1.0_f64;
    let mut acc = term;
    d[0] = acc;
    for i in 0..N {
        let fi = i as f64;
        let nf = N as f64;
        term *= 4.0 * (nf + fi) * (nf - fi) / ((2.0 * fi + 1.0) * (2.0 * fi + 2.0));
        acc += term;
        d[i + 1] = acc;
    }
    let dn = d[N];
    let mut sum = 0.0;
    for k in 0..N {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * (d[k] - dn) / ((k + 1) as f64).powf(s);
    }
    -sum / dn
}

const BERNOULLI_CACHED: usize = 64;

/// Bernoulli number `B_n` with the `B_1 = -1/2` convention.
pub fn bernoulli(n: usize) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    if n < BERNOULLI_CACHED {
        return TABLE.get_or_init(|| (0..BERNOULLI_CACHED).map(bernoulli_direct).collect())[n];
    }
    bernoulli_direct(n)
}

fn bernoulli_direct(n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => -0.5,
        2 => 1.0 / 6.0,
        _ if n % 2 == 1 => 0.0,
        _ => {
            // B_{2k} = (-1)^{k+1} 2 (2k)! zeta(2k) / (2 pi)^{2k}
            let k = n / 2;
            let mut ratio = 2.0;
            for j in 1..=n {
                ratio *= j as f64 / (2.0 * PI);
            }
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * ratio * borwein_eta(n as f64) / (1.0 - 2f64.powf(1.0 - n as f64))
        }
    }
}

/// Polylogarithm `Li_s(x)` for integer order `s >= 1`.
///
/// Order 1 and 2 accept every `x < 1` (and `x = 1` for order 2); higher
/// orders accept `-1 <= x <= 1`.
pub fn polylog(s: u32, x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(PedError::Domain(format!("polylog argument {x} is not finite")));
    }
    match s {
        0 => {
            if x == 1.0 {
                return Err(PedError::Domain("Li_0 has a pole at 1".into()));
            }
            Ok(x / (1.0 - x))
        }
        1 => {
            if x >= 1.0 {
                return Err(PedError::Domain(format!("Li_1({x}) needs x < 1")));
            }
            Ok(-(-x).ln_1p())
        }
        2 => dilog(x),
        _ => {
            if !(-1.0..=1.0).contains(&x) {
                return Err(PedError::Domain(format!("Li_{s}({x}) needs |x| <= 1")));
            }
            Ok(polylog_high(s, x))
        }
    }
}

fn dilog(x: f64) -> Result<f64> {
    const PI2_6: f64 = PI * PI / 6.0;
    if x > 1.0 {
        return Err(PedError::Domain(format!("Li_2({x}) needs x <= 1")));
    }
    if x == 1.0 {
        return Ok(PI2_6);
    }
    if x < -1.0 {
        let ly = (-x).ln();
        return Ok(-PI2_6 - 0.5 * ly * ly - dilog_core(1.0 / x));
    }
    if x > 0.5 {
        return Ok(PI2_6 - x.ln() * (1.0 - x).ln() - dilog_core(1.0 - x));
    }
    Ok(dilog_core(x))
}

/// Bernoulli series in `u = -ln(1 - x)`, valid for `-1 <= x <= 0.5`.
fn dilog_core(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let u = -(-x).ln_1p();
    let mut sum = u - 0.25 * u * u;
    // u^{n+1}/(n+1)! carried incrementally
    let mut pow_fact = u * u / 2.0;
    for n in 2..60 {
        pow_fact *= u / (n + 1) as f64;
        if n % 2 == 1 {
            continue;
        }
        let term = bernoulli(n) * pow_fact;
        sum += term;
        if term.abs() < 1e-17 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum
}

fn polylog_high(s: u32, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return zeta(s as f64).expect("s >= 3");
    }
    if x.abs() <= 0.5 {
        let mut sum = 0.0;
        let mut p = 1.0;
        for k in 1..200 {
            p *= x;
            let term = p / (k as f64).powi(s as i32);
            sum += term;
            if term.abs() < 1e-17 {
                break;
            }
        }
        return sum;
    }
    if x > 0.5 {
        return polylog_log_series(s, x.ln());
    }
    // x in [-1, -0.5): duplication Li_s(x) + Li_s(-x) = 2^{1-s} Li_s(x^2)
    2f64.powi(1 - s as i32) * polylog_high(s, x * x) - polylog_high(s, -x)
}

/// Expansion of `Li_s(e^mu)` around `mu = 0` for `mu < 0`.
fn polylog_log_series(s: u32, mu: f64) -> f64 {
    let s_i = s as i64;
    let harmonic: f64 = (1..s).map(|k| 1.0 / k as f64).sum();
    let mut sum = 0.0;
    let mut pow_fact = 1.0;
    // zeta vanishes at negative even integers, so no early exit on a zero term
    for k in 0..60_i64 {
        if k > 0 {
            pow_fact *= mu / k as f64;
        }
        let term = if k == s_i - 1 {
            pow_fact * (harmonic - (-mu).ln())
        } else {
            pow_fact * zeta((s_i - k) as f64).expect("argument != 1")
        };
        sum += term;
    }
    sum
}
