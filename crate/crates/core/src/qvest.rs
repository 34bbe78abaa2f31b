//! Quadratic-covariation rate estimation from sampled observation paths, and
//! exact power observables of the exponential-sum map.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::stats::order_free_sum;
use crate::obsmaps::{ExpSumMap, ObsPath};

/// Default half-width `max(20·dt, √dt / 5)`.
pub fn default_window(dt: f64) -> f64 {
    (20.0 * dt).max(dt.sqrt() / 5.0)
}

/// Grid indices `k0 < k1` of the stride-aligned window around `t`, truncated
/// at the path ends.
fn window_span(obs: &ObsPath, t: f64, window: f64, skip: usize) -> Result<(usize, usize, bool)> {
    if skip == 0 {
        return Err(Error::param("skip must be at least 1"));
    }
    if !(window >= 2.0 * skip as f64 * obs.dt * (1.0 - 1e-12)) {
        return Err(Error::param(format!(
            "window {window} is shorter than two strides ({} s)",
            2.0 * skip as f64 * obs.dt
        )));
    }
    let n = obs.len();
    if n < 2 {
        return Err(Error::param("observation path needs at least two points"));
    }
    let t0 = obs.times[0];
    let t_end = obs.times[n - 1];
    if !(t >= t0 - 1e-12 && t <= t_end + 1e-12) {
        return Err(Error::param(format!("t = {t} outside the path span [{t0}, {t_end}]")));
    }
    let lo = ((t - window - t0) / obs.dt - 1e-9).ceil().max(0.0) as usize;
    let hi = (((t + window - t0) / obs.dt + 1e-9).floor() as usize).min(n - 1);
    let one_sided = (t - window) < t0 - 1e-12 || (t + window) > t_end + 1e-12;
    let steps = (hi - lo) / skip;
    if steps == 0 {
        return Err(Error::param("window contains no complete stride"));
    }
    Ok((lo, lo + steps * skip, one_sided))
}

fn increments(values: &[f64], lo: usize, hi: usize, skip: usize) -> impl Iterator<Item = f64> + '_ {
    (lo..hi).step_by(skip).map(move |k| values[k + skip] - values[k])
}

fn check_scalar(obs: &ObsPath) -> Result<()> {
    if obs.dim != 1 {
        return Err(Error::param(format!("expected a scalar observation path, got dimension {}", obs.dim)));
    }
    Ok(())
}

/// Sum of squared stride-`skip` increments over `[t − window, t + window]`,
/// divided by the time the increments cover.
pub fn qv_rate(obs: &ObsPath, t: f64, window: f64, skip: usize) -> Result<f64> {
    check_scalar(obs)?;
    let (lo, hi, _) = window_span(obs, t, window, skip)?;
    let mut sq: Vec<f64> = increments(&obs.values, lo, hi, skip).map(|d| d * d).collect();
    Ok(order_free_sum(&mut sq) / ((hi - lo) as f64 * obs.dt))
}

/// Polarized covariation rate `¼[rate(Y₁+Y₂) − rate(Y₁−Y₂)]`, formed from
/// increment sums and differences on the same window.
pub fn covariation_rate(obs1: &ObsPath, obs2: &ObsPath, t: f64, window: f64, skip: usize) -> Result<f64> {
    check_scalar(obs1)?;
    check_scalar(obs2)?;
    if obs1.times != obs2.times {
        return Err(Error::param("covariation requires identical grids"));
    }
    let (lo, hi, _) = window_span(obs1, t, window, skip)?;
    Ok(polarized(&obs1.values, &obs2.values, 1, 0, 1, 0, lo, hi, skip) / ((hi - lo) as f64 * obs1.dt))
}

/// Polarized window sum for interleaved columns `i` of `a` and `j` of `b`.
#[allow(clippy::too_many_arguments)]
fn polarized(a: &[f64], b: &[f64], sa: usize, i: usize, sb: usize, j: usize, lo: usize, hi: usize, skip: usize) -> f64 {
    let mut plus = Vec::with_capacity((hi - lo) / skip);
    let mut minus = Vec::with_capacity((hi - lo) / skip);
    for k in (lo..hi).step_by(skip) {
        let da = a[(k + skip) * sa + i] - a[k * sa + i];
        let db = b[(k + skip) * sb + j] - b[k * sb + j];
        plus.push((da + db) * (da + db));
        minus.push((da - db) * (da - db));
    }
    0.25 * (order_free_sum(&mut plus) - order_free_sum(&mut minus))
}

/// Per-time `e × e` covariation-rate matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSeries {
    pub times: Vec<f64>,
    /// Row-major `e × e` matrices.
    pub rates: Vec<Vec<f64>>,
    pub dim: usize,
    pub window: f64,
    pub skip: usize,
    /// Window truncated at a path end.
    pub one_sided: Vec<bool>,
    /// Relative standard error `√(2/m)` of a rate from `m` increments.
    pub noise_scale: Vec<f64>,
    pub warnings: Vec<String>,
}

impl RateSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Entry `(i, j)` at output index `k`.
    pub fn entry(&self, k: usize, i: usize, j: usize) -> f64 {
        self.rates[k][i * self.dim + j]
    }

    /// CSV with header `t,r11,r12,...,ree` (upper triangle).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let e = self.dim;
        let mut header = vec!["t".to_string()];
        for i in 0..e {
            for j in i..e {
                header.push(format!("r{}{}", i + 1, j + 1));
            }
        }
        writeln!(out, "{}", header.join(","))?;
        for (t, m) in self.times.iter().zip(&self.rates) {
            write!(out, "{t:.16e}")?;
            for i in 0..e {
                for j in i..e {
                    write!(out, ",{:.16e}", m[i * e + j])?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Relative eigenvalue slack below which negative eigenvalues are clipped.
pub const PSD_CLIP_REL: f64 = 1e-8;

/// Rate matrices at every `skip`-th grid point.
pub fn rate_matrix(obs: &ObsPath, window: f64, skip: usize) -> Result<RateSeries> {
    if skip == 0 {
        return Err(Error::param("skip must be at least 1"));
    }
    let indices: Vec<usize> = (0..obs.len()).step_by(skip).collect();
    rate_matrix_at(obs, &indices, window, skip)
}

/// Rate matrices at the given grid indices.
pub fn rate_matrix_at(obs: &ObsPath, indices: &[usize], window: f64, skip: usize) -> Result<RateSeries> {
    let e = obs.dim;
    if let Some(&k) = indices.iter().find(|&&k| k >= obs.len()) {
        return Err(Error::param(format!("grid index {k} beyond the path")));
    }
    let cells: Vec<(Vec<f64>, bool, f64, Option<String>)> = indices
        .par_iter()
        .map(|&k| {
            let t = obs.times[k];
            let (lo, hi, one_sided) = window_span(obs, t, window, skip)?;
            let covered = (hi - lo) as f64 * obs.dt;
            let mut m = vec![0.0; e * e];
            for i in 0..e {
                for j in i..e {
                    let v = if i == j {
                        let mut sq: Vec<f64> = (lo..hi)
                            .step_by(skip)
                            .map(|k| (obs.values[(k + skip) * e + i] - obs.values[k * e + i]).powi(2))
                            .collect();
                        order_free_sum(&mut sq)
                    } else {
                        polarized(&obs.values, &obs.values, e, i, e, j, lo, hi, skip)
                    } / covered;
                    m[i * e + j] = v;
                    m[j * e + i] = v;
                }
            }
            let warning = if e > 1 { repair_psd(&mut m, e, t) } else { None };
            let n_inc = ((hi - lo) / skip) as f64;
            Ok((m, one_sided, (2.0 / n_inc).sqrt(), warning))
        })
        .collect::<Result<_>>()?;
    let mut series = RateSeries {
        times: indices.iter().map(|&k| obs.times[k]).collect(),
        rates: Vec::with_capacity(cells.len()),
        dim: e,
        window,
        skip,
        one_sided: Vec::with_capacity(cells.len()),
        noise_scale: Vec::with_capacity(cells.len()),
        warnings: Vec::new(),
    };
    for (m, side, noise, warning) in cells {
        series.rates.push(m);
        series.one_sided.push(side);
        series.noise_scale.push(noise);
        series.warnings.extend(warning);
    }
    Ok(series)
}

fn repair_psd(m: &mut [f64], e: usize, t: f64) -> Option<String> {
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(e, e, m));
    let lmin = eig.eigenvalues.min();
    if lmin >= 0.0 {
        return None;
    }
    let trace: f64 = (0..e).map(|i| m[i * e + i]).sum();
    if lmin.abs() > PSD_CLIP_REL * trace {
        return Some(format!("rate matrix at t={t} has eigenvalue {lmin:e} (trace {trace:e})"));
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    for i in 0..e {
        for j in i..e {
            let v = 0.5 * (r[(i, j)] + r[(j, i)]);
            m[i * e + j] = v;
            m[j * e + i] = v;
        }
    }
    None
}

/// Largest argument for which `exp` is finite.
pub const LOG_MAX: f64 = 709.782_712_893_384;

/// `ln h_n(x)` where `h_n(x) = Σ_j a_j^{2n−2} exp(n a_j x_j)`, by log-sum-exp.
pub fn power_observable_log(map: &ExpSumMap, x: &[f64], n: u32) -> Result<f64> {
    if n == 0 {
        return Err(Error::param("n must be at least 1"));
    }
    if x.len() != map.dim() {
        return Err(Error::param("state dimension does not match the coefficients"));
    }
    let nf = n as f64;
    let terms: Vec<f64> = map
        .coefficients()
        .iter()
        .zip(x)
        .map(|(a, x)| (2.0 * nf - 2.0) * a.abs().ln() + nf * a * x)
        .collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::OutOfRange { value: top, lo: -LOG_MAX, hi: LOG_MAX });
    }
    Ok(top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln())
}

/// `h_n(x)`; errors when the value overflows a double.
pub fn power_observable_oracle(map: &ExpSumMap, x: &[f64], n: u32) -> Result<f64> {
    let l = power_observable_log(map, x, n)?;
    if l > LOG_MAX {
        return Err(Error::OutOfRange { value: l, lo: f64::NEG_INFINITY, hi: LOG_MAX });
    }
    Ok(l.exp())
}

/// `ln h_1, …, ln h_N` at one state.
pub fn power_series_log(map: &ExpSumMap, x: &[f64], n_terms: u32) -> Result<Vec<f64>> {
    (1..=n_terms).map(|n| power_observable_log(map, x, n)).collect()
}
