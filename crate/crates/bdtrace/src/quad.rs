//! Panelled wrapper around the double-exponential rule from `quadrature`.
//!
//! The underlying rule stops after a few hundred evaluations, so intervals
//! are bisected until each piece meets its share of the tolerance.

use crate::error::{Error, Result};

const MAX_DEPTH: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quad {
    pub value: f64,
    pub err: f64,
}

fn adapt(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> Result<Quad> {
    let out = quadrature::double_exponential::integrate(f, a, b, tol);
    if out.error_estimate <= tol {
        return Ok(Quad {
            value: out.integral,
            err: out.error_estimate,
        });
    }
    if depth >= MAX_DEPTH {
        return Err(Error::QuadratureNotConverged {
            a,
            b,
            err: out.error_estimate,
        });
    }
    let m = 0.5 * (a + b);
    let l = adapt(f, a, m, 0.5 * tol, depth + 1)?;
    let r = adapt(f, m, b, 0.5 * tol, depth + 1)?;
    Ok(Quad {
        value: l.value + r.value,
        err: l.err + r.err,
    })
}

/// `∫_a^b f` to absolute tolerance `tol`, splitting at `breaks` inside `(a, b)`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64], tol: f64) -> Result<Quad> {
    if b <= a {
        return Ok(Quad { value: 0.0, err: 0.0 });
    }
    let mut pts = vec![a];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    inner.sort_by(|x, y| x.partial_cmp(y).unwrap());
    pts.extend(inner);
    pts.push(b);
    let share = tol / (pts.len() - 1) as f64;
    let mut acc = Quad { value: 0.0, err: 0.0 };
    for w in pts.windows(2) {
        if w[1] > w[0] {
            let q = adapt(f, w[0], w[1], share, 0)?;
            acc.value += q.value;
            acc.err += q.err;
        }
    }
    Ok(acc)
}

/// `∫_a^∞ f` for integrands that decay; panels double in width from 1 and
/// stop at `x_max` or once a panel contributes less than `tol * 1e-3`
/// after passing every breakpoint.
pub fn integrate_to_inf(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    breaks: &[f64],
    tol: f64,
    x_max: f64,
) -> Result<Quad> {
    let last_break = breaks.iter().copied().fold(a, f64::max);
    let mut acc = Quad { value: 0.0, err: 0.0 };
    let mut lo = a;
    let mut width = 1.0;
    let mut share = 0.5 * tol;
    while lo < x_max {
        let hi = (lo + width).min(x_max);
        let q = integrate(f, lo, hi, breaks, share)?;
        acc.value += q.value;
        acc.err += q.err;
        if lo >= last_break && q.value.abs() < tol * 1e-3 {
            break;
        }
        lo = hi;
        width *= 2.0;
        share *= 0.5;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_tail() {
        let q = integrate_to_inf(&|x: f64| (-x).exp(), 0.0, &[], 1e-12, 80.0).unwrap();
        assert!((q.value - 1.0).abs() < 1e-11);
    }

    #[test]
    fn kink_is_handled_with_a_break() {
        let q = integrate(&|x: f64| (x - 0.3).abs(), 0.0, 1.0, &[0.3], 1e-13).unwrap();
        assert!((q.value - (0.045 + 0.245)).abs() < 1e-12);
    }
}
