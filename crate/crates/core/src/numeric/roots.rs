use crate::error::{Error, Result};

/// Relative step tolerance used by every bracketed solve in the crate.
pub const XTOL_REL: f64 = 1e-12;
pub const MAX_ITER: usize = 200;

/// Finds a root of `f` in `[a, b]` given `f(a)` and `f(b)` of opposite sign (or zero).
///
/// Bisection refined by Illinois-secant steps. A bisection is forced whenever the
/// bracket fails to halve over three consecutive iterations. Stops when the
/// bracket is narrower than `XTOL_REL * (1 + |x|)` or `|f(x)| <= ftol`.
pub fn bracketed<F>(mut f: F, a: f64, b: f64, fa: f64, fb: f64, ftol: f64) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if !(fa.is_finite() && fb.is_finite()) || fa.signum() == fb.signum() {
        return Err(Error::Numerical {
            message: format!("root not bracketed in [{a}, {b}] (f = {fa:e}, {fb:e})"),
            achieved: (b - a).abs(),
        });
    }
    let (mut lo, mut hi, mut flo, mut fhi) = if a < b { (a, b, fa, fb) } else { (b, a, fb, fa) };
    let mut last_side = 0i8;
    let mut stalled = 0u32;
    let mut width_ref = hi - lo;

    for _ in 0..MAX_ITER {
        let width = hi - lo;
        let scale = 1.0 + lo.abs().max(hi.abs());
        if width <= XTOL_REL * scale {
            return Ok(if flo.abs() <= fhi.abs() { lo } else { hi });
        }
        let mut x = if stalled >= 3 {
            stalled = 0;
            width_ref = width;
            0.5 * (lo + hi)
        } else {
            lo - flo * (hi - lo) / (fhi - flo)
        };
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let fx = f(x);
        if !fx.is_finite() {
            return Err(Error::Numerical {
                message: format!("non-finite function value at {x}"),
                achieved: width,
            });
        }
        if fx.abs() <= ftol || fx == 0.0 {
            return Ok(x);
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
            if last_side == -1 {
                fhi *= 0.5;
            }
            last_side = -1;
        } else {
            hi = x;
            fhi = fx;
            if last_side == 1 {
                flo *= 0.5;
            }
            last_side = 1;
        }
        if hi - lo > 0.5 * width_ref {
            stalled += 1;
        } else {
            stalled = 0;
            width_ref = hi - lo;
        }
    }
    Err(Error::Numerical {
        message: "bracketed root search hit the iteration cap".into(),
        achieved: hi - lo,
    })
}

/// Newton iteration safeguarded by a bracket: falls back to bisection whenever
/// the Newton step leaves the current bracket.
pub fn safeguarded_newton<F, D>(mut f: F, mut df: D, a: f64, b: f64, x0: f64, xtol: f64) -> Result<f64>
where
    F: FnMut(f64) -> f64,
    D: FnMut(f64) -> f64,
{
    let (mut lo, mut hi) = if a < b { (a, b) } else { (b, a) };
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::Numerical {
            message: format!("root not bracketed in [{lo}, {hi}]"),
            achieved: hi - lo,
        });
    }
    let mut x = x0.clamp(lo, hi);
    for _ in 0..MAX_ITER {
        let fx = f(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
        } else {
            hi = x;
        }
        let d = df(x);
        let mut next = x - fx / d;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= xtol * (1.0 + x.abs()) || hi - lo <= xtol * (1.0 + x.abs()) {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::Numerical {
        message: "safeguarded Newton hit the iteration cap".into(),
        achieved: hi - lo,
    })
}
