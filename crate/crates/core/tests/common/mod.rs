//! Independent oracles for the integration tests.
#![allow(dead_code)]

use rand::Rng;

/// Taylor coefficients of a function of one variable about a point,
/// truncated at a fixed degree.
#[derive(Debug, Clone)]
pub struct Jet(pub Vec<f64>);

impl Jet {
    /// `exp(a·(x0 + t))` to degree `deg` in `t`.
    pub fn exp(a: f64, x0: f64, deg: usize) -> Jet {
        let mut c = vec![(a * x0).exp(); deg + 1];
        for k in 1..=deg {
            c[k] = c[k - 1] * a / k as f64;
        }
        Jet(c)
    }

    pub fn derivative(&self) -> Jet {
        Jet((1..self.0.len()).map(|k| k as f64 * self.0[k]).collect())
    }

    pub fn mul(&self, other: &Jet) -> Jet {
        let n = self.0.len().min(other.0.len());
        Jet((0..n).map(|k| (0..=k).map(|i| self.0[i] * other.0[k - i]).sum()).collect())
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet(self.0.iter().map(|v| v * s).collect())
    }

    pub fn value(&self) -> f64 {
        self.0[0]
    }
}

/// `h_1, …, h_N` at `x` from the recursion `h_1 = h`,
/// `h_n = (n−1)⁻¹ Σ_j ∂_j h · ∂_j h_{n−1}`, evaluated on Taylor jets. Every
/// term of `h` depends on one coordinate, so each coordinate is carried as
/// its own jet.
pub fn recursion_series(a: &[f64], x: &[f64], n_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_max);
    let mut cur: Vec<Jet> = a.iter().zip(x).map(|(&a, &x)| Jet::exp(a, x, n_max)).collect();
    let dh: Vec<Jet> = cur.iter().map(Jet::derivative).collect();
    out.push(cur.iter().map(Jet::value).sum());
    for n in 2..=n_max {
        cur = cur.iter().zip(&dh).map(|(hj, d)| d.mul(&hj.derivative()).scale(1.0 / (n - 1) as f64)).collect();
        out.push(cur.iter().map(Jet::value).sum());
    }
    out
}

/// `ln Σ_j a_j⁻² w_jⁿ` with `w_j = a_j² e^{a_j x_j}`, summed in the log domain.
pub fn log_power_sum(a: &[f64], x: &[f64], n: u32) -> f64 {
    let logs: Vec<f64> = a.iter().zip(x).map(|(&a, &x)| -(a * a).ln() + n as f64 * ((a * a).ln() + a * x)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
}

/// Smallest gap between distinct sorted subset sums of `a_j⁻²`, by brute
/// force over all pairs of masks.
pub fn subset_sum_gap(a: &[f64]) -> f64 {
    let inv: Vec<f64> = a.iter().map(|v| 1.0 / (v * v)).collect();
    let mut sums: Vec<f64> = (0usize..1 << a.len()).map(|m| (0..a.len()).filter(|j| m >> j & 1 == 1).map(|j| inv[j]).sum()).collect();
    sums.sort_by(f64::total_cmp);
    sums.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// Coefficients with `|a_j| ∈ [0.5, 2.5]`, random signs, whose subset sums
/// are at least `margin` apart.
pub fn random_admissible(rng: &mut impl Rng, d: usize, margin: f64) -> Vec<f64> {
    loop {
        let a: Vec<f64> = (0..d)
            .map(|_| {
                let m = rng.random_range(0.5..2.5);
                if rng.random::<bool>() { m } else { -m }
            })
            .collect();
        if subset_sum_gap(&a) >= margin {
            return a;
        }
    }
}

pub fn uniform_box(rng: &mut impl Rng, d: usize, bound: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// `(e^{x₁} − e^{x₂}, e^{2x₁} + e^{2x₂})`.
pub fn example2d_forward(x: (f64, f64)) -> (f64, f64) {
    ((x.0).exp() - (x.1).exp(), (2.0 * x.0).exp() + (2.0 * x.1).exp())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
