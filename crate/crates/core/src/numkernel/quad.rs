use crate::error::{PedError, Result};

const MAX_DEPTH: u32 = 60;

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) || tol <= 0.0 {
        return Err(PedError::Validation("quadrature needs finite limits and positive tolerance".into()));
    }
    if a == b {
        return Ok(0.0);
    }
    // split into panels so narrow features are not skipped by the first estimate
    let panels = 16;
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + h * p as f64;
        let hi = if p + 1 == panels { b } else { lo + h };
        let (flo, fmid, fhi) = (f(lo), f(0.5 * (lo + hi)), f(hi));
        let whole = simpson(lo, hi, flo, fmid, fhi);
        total += recurse(f, lo, hi, flo, fmid, fhi, whole, tol / panels as f64, MAX_DEPTH)?;
    }
    Ok(total)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if !delta.is_finite() {
        return Err(PedError::Domain(format!("non-finite integrand near {m}")));
    }
    if depth == 0 || delta.abs() <= 15.0 * tol || (b - a).abs() < 1e-14 * a.abs().max(1.0) {
        if depth == 0 && delta.abs() > 15.0 * tol {
            return Err(PedError::Internal(format!(
                "adaptive quadrature exhausted its depth near {m}"
            )));
        }
        return Ok(left + right + delta / 15.0);
    }
    Ok(recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
        + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_transcendental() {
        let v = adaptive_simpson(&|x| x * x * x, 0.0, 2.0, 1e-12).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        let v = adaptive_simpson(&f64::sin, 0.0, std::f64::consts::PI, 1e-12).unwrap();
        assert!((v - 2.0).abs() < 1e-11);
        let v = adaptive_simpson(&|x: f64| x.abs(), -1.0, 3.0, 1e-12).unwrap();
        assert!((v - 5.0).abs() < 1e-12);
    }
}
