use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One Gauss–Kronrod 7/15 panel: (Kronrod estimate, |Kronrod − Gauss|).
pub fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss–Kronrod integration of `f` over `[a, b]` (signed) to absolute tolerance `tol`.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut stack = vec![(lo, hi, tol, 0u32)];
    let mut total = 0.0;
    let mut worst = 0.0f64;
    let mut failed = false;
    while let Some((x0, x1, t, depth)) = stack.pop() {
        let (v, err) = gk15(&mut f, x0, x1);
        if !v.is_finite() {
            return Err(Error::Numerical {
                message: format!("non-finite integrand on [{x0}, {x1}]"),
                achieved: f64::INFINITY,
            });
        }
        // panels whose error estimate is at roundoff level cannot improve
        let t = t.max(50.0 * f64::EPSILON * v.abs());
        if err <= t || depth >= 40 {
            if err > t {
                failed = true;
                worst = worst.max(err);
            }
            total += v;
        } else {
            let m = 0.5 * (x0 + x1);
            stack.push((x0, m, 0.5 * t, depth + 1));
            stack.push((m, x1, 0.5 * t, depth + 1));
        }
    }
    if failed {
        return Err(Error::Numerical {
            message: format!("quadrature on [{lo}, {hi}] did not reach tolerance {tol:e}"),
            achieved: worst,
        });
    }
    Ok(sign * total)
}

const GL5_X: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
const GL5_W: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Fixed five-point Gauss–Legendre rule; exact for polynomials of degree nine.
pub fn gauss_legendre5<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut s = 0.0;
    for i in 0..5 {
        s += GL5_W[i] * f(c + h * GL5_X[i]);
    }
    s * h
}
