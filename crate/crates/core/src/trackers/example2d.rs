use crate::error::{Error, Result};

/// Relative guard on `y₂ − y₁²`.
pub const DOMAIN_GUARD: f64 = 1e-12;
/// Relative round-trip tolerance on `(h, q)`.
pub const ROUND_TRIP_TOL: f64 = 1e-10;

/// `h(x) = e^{x₁} − e^{x₂}` and `q(x) = e^{2x₁} + e^{2x₂}`.
pub fn forward_2d_example(x: (f64, f64)) -> (f64, f64) {
    let (a, b) = (x.0.exp(), x.1.exp());
    (a - b, a * a + b * b)
}

fn formula(y1: f64, y2: f64) -> (f64, f64) {
    let s = (2.0 * y2 - y1 * y1).sqrt();
    (((s + y1) / 2.0).ln(), ((s - y1) / 2.0).ln())
}

/// Recovers `x` from the observation `y1 = h(x)` and its rate `y2 = q(x)`.
///
/// Requires `y2 > y1²`; the result is checked by evaluating `(h, q)` again.
pub fn invert_2d_example(y1: f64, y2: f64) -> Result<(f64, f64)> {
    if !y1.is_finite() || !y2.is_finite() {
        return Err(Error::param("non-finite input"));
    }
    if !(y2 - y1 * y1 > DOMAIN_GUARD * y2.abs().max(1.0)) {
        return Err(Error::Domain(format!("(y1, y2) = ({y1}, {y2}) violates y2 > y1²")));
    }
    let x = formula(y1, y2);
    check_round_trip(x, y1, y2, ROUND_TRIP_TOL)?;
    Ok(x)
}

/// Inverse for an estimated rate with relative noise scale `noise`: rates
/// that fall short of `y1²` by at most `3·noise·y2` are moved just inside the
/// domain instead of being rejected.
pub fn invert_2d_estimated(y1: f64, y2: f64, noise: f64) -> Result<(f64, f64)> {
    if !(noise >= 0.0) {
        return Err(Error::param("noise scale must be non-negative"));
    }
    let floor = y1 * y1 + DOMAIN_GUARD * 4.0 * y2.abs().max(1.0);
    let y2 = if y2 < floor && floor - y2 <= 3.0 * noise * y2.abs() { floor } else { y2 };
    invert_2d_example(y1, y2)
}

fn check_round_trip(x: (f64, f64), y1: f64, y2: f64, tol: f64) -> Result<()> {
    let (h, q) = forward_2d_example(x);
    // h is a difference of terms of size √q
    if !x.0.is_finite() || !x.1.is_finite() || (h - y1).abs() > tol * y2.sqrt() || (q - y2).abs() > tol * y2 {
        return Err(Error::Consistency(format!(
            "inverse of ({y1}, {y2}) maps back to ({h}, {q})"
        )));
    }
    Ok(())
}
