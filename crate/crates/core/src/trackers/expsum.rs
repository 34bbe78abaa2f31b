//! State recovery for `h(x) = Σ exp(a_j x_j)` from its power observables.
//!
//! With `w_j = a_j² e^{a_j x_j}` the observables are the weighted power sums
//! `h_n = Σ_j a_j⁻² w_jⁿ`. Distinct values `w̄_k` and their weights `b_k` are
//! extracted from the series, each weight is decoded into the set of
//! coordinates sharing that value, and the coordinates are read off.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numeric::optim::brent_min;
use crate::obsmaps::ExpSumMap;
use crate::qvest::power_observable_log;

/// Distinct values and their weights, largest value first.
#[derive(Debug, Clone, PartialEq)]
pub struct PeelResult {
    /// `(w̄_k, b_k)` with `w̄` strictly decreasing.
    pub levels: Vec<(f64, f64)>,
    pub m: usize,
    /// Largest relative misfit of the series against the fitted levels.
    pub residual: f64,
}

/// Consecutive ratios that must agree before a value is accepted.
pub const STABLE_RUN: usize = 5;

/// Peels levels from the series `h̃_1, …, h̃_N` (linear values).
pub fn peel_levels(a: &[f64], series: &[f64], tol: f64) -> Result<PeelResult> {
    if series.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::param("series must be strictly positive"));
    }
    let logs: Vec<f64> = series.iter().map(|v| v.ln()).collect();
    peel_levels_log(a, &logs, tol)
}

/// [`peel_levels`] on `ln h̃_n`.
///
/// The top value is the stabilised ratio `h̃_{n+1}/h̃_n` (the run of
/// [`STABLE_RUN`] ratios with the smallest spread), its weight is
/// `h̃_n / w̄ⁿ`, and its contribution is subtracted from the series before the
/// next level is extracted. Peeling stops once the remaining weight is smaller
/// than half the smallest single-coordinate weight. Weights are finally refit
/// by least squares against the whole series.
pub fn peel_levels_log(a: &[f64], log_series: &[f64], tol: f64) -> Result<PeelResult> {
    validate(a, log_series, tol)?;
    let nodes = peel_nodes(a, log_series, tol, false)?;
    let res = fit_levels(log_series, nodes)?;
    let bbar: f64 = a.iter().map(|v| 1.0 / (v * v)).sum();
    let total: f64 = res.levels.iter().map(|l| l.1).sum();
    if (total - bbar).abs() > 1e-6 * bbar {
        return Err(Error::Consistency(format!("level weights sum to {total}, expected {bbar}")));
    }
    Ok(res)
}

/// Relative precision below which a peeled residual term is discarded.
const RESIDUAL_PRECISION: f64 = 1e-9;

/// `ln w̄` of each level. With `fallback`, a level run that will not
/// stabilise is handed to the matrix pencil on the remaining residual.
fn peel_nodes(a: &[f64], log_series: &[f64], tol: f64, fallback: bool) -> Result<Vec<f64>> {
    let inv: Vec<f64> = a.iter().map(|v| 1.0 / (v * v)).collect();
    let bbar: f64 = inv.iter().sum();
    let min_weight = inv.iter().copied().fold(f64::INFINITY, f64::min);
    let floor = RESIDUAL_PRECISION.ln();
    let mut cur = log_series.to_vec();
    let mut nodes: Vec<f64> = Vec::new();
    let mut total = 0.0;
    while bbar - total >= 0.5 * min_weight {
        if nodes.len() == a.len() {
            return Err(Error::Consistency("more levels than coordinates".into()));
        }
        let (i, spread) = stable_ratio(&cur)?;
        if spread > tol {
            if fallback {
                let valid: Vec<f64> = cur.iter().copied().take_while(|v| v.is_finite()).collect();
                nodes.extend(pencil_nodes(&valid, a.len() - nodes.len(), 1e-15 / RESIDUAL_PRECISION)?);
                return Ok(nodes);
            }
            return Err(Error::Convergence {
                message: format!("ratio of level {} did not stabilise", nodes.len() + 1),
                gap: spread,
            });
        }
        // ratio i is h̃_{i+2}/h̃_{i+1}
        let ln_w = cur[i + 1] - cur[i];
        let n = (i + 2) as f64;
        let ln_b = cur[i + 1] - n * ln_w;
        if let Some(&prev) = nodes.last() {
            if !(ln_w < prev - tol) {
                return Err(Error::Convergence { message: "levels are not strictly decreasing".into(), gap: prev - ln_w });
            }
        }
        nodes.push(ln_w);
        total += ln_b.exp();
        for (k, v) in cur.iter_mut().enumerate() {
            let rest = -(ln_b + (k + 1) as f64 * ln_w - *v).exp_m1();
            let next = if rest > 0.0 { *v + rest.ln() } else { f64::NAN };
            // drop terms where the subtraction has cancelled to noise
            *v = if next - log_series[k] >= floor { next } else { f64::NAN };
        }
    }
    Ok(nodes)
}

fn validate(a: &[f64], log_series: &[f64], tol: f64) -> Result<()> {
    if a.is_empty() || a.iter().any(|v| *v == 0.0 || !v.is_finite()) {
        return Err(Error::param("coefficients must be finite and nonzero"));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::param("tol must lie in (0, 1)"));
    }
    if log_series.len() < STABLE_RUN + 2 {
        return Err(Error::param(format!("need at least {} series terms", STABLE_RUN + 2)));
    }
    if log_series.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("series must be strictly positive and finite"));
    }
    Ok(())
}

/// Index of the last ratio in the most stable run, and its relative spread.
fn stable_ratio(cur: &[f64]) -> Result<(usize, f64)> {
    let ratios: Vec<f64> = cur.windows(2).map(|w| w[1] - w[0]).collect();
    let mut best: Option<(usize, f64)> = None;
    for end in STABLE_RUN - 1..ratios.len() {
        let run = &ratios[end + 1 - STABLE_RUN..=end];
        if run.iter().any(|r| !r.is_finite()) {
            continue;
        }
        let hi = run.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = run.iter().copied().fold(f64::INFINITY, f64::min);
        let spread = (hi - lo).exp_m1();
        if best.is_none_or(|(_, s)| spread <= s) {
            best = Some((end, spread));
        }
    }
    best.ok_or(Error::Convergence { message: "too few usable series terms".into(), gap: f64::INFINITY })
}

/// Refits weights for the given `ln w̄` nodes.
fn fit_levels(log_series: &[f64], mut nodes: Vec<f64>) -> Result<PeelResult> {
    nodes.sort_by(|x, y| y.total_cmp(x));
    let weights = fit_weights(log_series, &nodes)?;
    let levels: Vec<(f64, f64)> = nodes.iter().zip(&weights).map(|(l, b)| (l.exp(), *b)).collect();
    let residual = series_misfit(log_series, &levels);
    Ok(PeelResult { m: levels.len(), levels, residual })
}

/// Least-squares weights with each equation divided by `h̃_n`.
fn fit_weights(log_series: &[f64], nodes: &[f64]) -> Result<Vec<f64>> {
    let n = log_series.len();
    let m = nodes.len();
    let design = DMatrix::from_fn(n, m, |r, c| ((r + 1) as f64 * nodes[c] - log_series[r]).exp());
    let rhs = DVector::from_element(n, 1.0);
    let svd = design.svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Numerical { message: format!("weight fit failed: {e}"), achieved: f64::NAN })?;
    Ok(sol.iter().copied().collect())
}

fn series_misfit(log_series: &[f64], levels: &[(f64, f64)]) -> f64 {
    log_series
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let model: f64 = levels.iter().map(|(w, b)| b * ((k + 1) as f64 * w.ln() - l).exp()).sum();
            (model - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// `ln` of the nodes of `Σ b_k w̄_kⁿ` by the matrix-pencil method, for
/// values too close for ratio peeling to separate. `noise` is the relative
/// precision of the terms; at most `max_nodes` nodes are returned.
fn pencil_nodes(log_series: &[f64], max_nodes: usize, noise: f64) -> Result<Vec<f64>> {
    let n = log_series.len();
    if n < 3 {
        return Err(Error::Convergence { message: "too few precise terms for the pencil".into(), gap: f64::INFINITY });
    }
    let ln_rho = log_series[n - 1] - log_series[n - 2];
    let z: Vec<f64> = log_series.iter().enumerate().map(|(k, l)| (l - (k + 1) as f64 * ln_rho).exp()).collect();
    let pencil = n / 2;
    let y = DMatrix::from_fn(n - pencil, pencil + 1, |r, c| z[r + c]);
    let svd = y.svd(false, true);
    let vt = svd.v_t.ok_or(Error::Numerical { message: "pencil SVD failed".into(), achieved: f64::NAN })?;
    let s0 = svd.singular_values[0];
    let thresh = (1e-11f64).max(100.0 * noise) * s0;
    let m = svd.singular_values.iter().filter(|s| **s > thresh).count().min(max_nodes).min(pencil).max(1);
    let v = vt.rows(0, m).transpose();
    let v1 = v.rows(0, pencil).into_owned();
    let v2 = v.rows(1, pencil).into_owned();
    let pinv = v1
        .pseudo_inverse(1e-14)
        .map_err(|e| Error::Numerical { message: format!("pencil inverse failed: {e}"), achieved: f64::NAN })?;
    let eig = (pinv * v2).complex_eigenvalues();
    let mut nodes = Vec::with_capacity(m);
    for ev in eig.iter() {
        if !(ev.re > 0.0) || ev.im.abs() > 1e-6 * ev.re {
            return Err(Error::Convergence { message: format!("pencil produced node {ev}"), gap: ev.im.abs() });
        }
        nodes.push(ev.re.ln() + ln_rho);
    }
    Ok(nodes)
}

/// Level values for reconstruction: peeling with pencil fallback, else the
/// pencil on the whole series.
fn extract_levels(a: &[f64], log_series: &[f64], tol: f64) -> Result<PeelResult> {
    let nodes = match peel_nodes(a, log_series, tol, true) {
        Ok(n) => n,
        Err(e) if e.is_numerical() => pencil_nodes(log_series, a.len(), 1e-15)?,
        Err(e) => return Err(e),
    };
    fit_levels(log_series, nodes)
}

/// All `2^d` values `β(c) = Σ c_j a_j⁻²`, indexed by the bit mask of `c`.
#[derive(Debug, Clone)]
pub struct BetaTable {
    d: usize,
    sums: Vec<f64>,
}

impl BetaTable {
    pub fn new(a: &[f64]) -> Result<Self> {
        let d = a.len();
        if d == 0 || d > crate::obsmaps::MAX_ENUM_DIM {
            return Err(Error::Capacity(format!("d = {d} outside 1..={}", crate::obsmaps::MAX_ENUM_DIM)));
        }
        let inv: Vec<f64> = a.iter().map(|v| 1.0 / (v * v)).collect();
        let mut sums = vec![0.0; 1 << d];
        for mask in 1usize..1 << d {
            let low = mask.trailing_zeros() as usize;
            sums[mask] = sums[mask & (mask - 1)] + inv[low];
        }
        Ok(BetaTable { d, sums })
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    /// The unique indicator within `tol` of `b`.
    pub fn invert(&self, b: f64, tol: f64) -> Result<Vec<u8>> {
        let mut hit = None;
        let mut count = 0;
        let mut nearest = f64::INFINITY;
        for (mask, s) in self.sums.iter().enumerate() {
            let dist = (s - b).abs();
            nearest = nearest.min(dist);
            if dist <= tol {
                count += 1;
                hit = Some(mask);
            }
        }
        match (count, hit) {
            (1, Some(mask)) => Ok((0..self.d).map(|j| (mask >> j & 1) as u8).collect()),
            (0, _) => Err(Error::Mismatch { value: b, distance: nearest }),
            _ => Err(Error::MarginViolation { value: b, count }),
        }
    }
}

/// The indicator `c ∈ {0,1}^d` with `|Σ c_j a_j⁻² − b| ≤ tol`.
pub fn beta_inverse(a: &[f64], b_value: f64, tol: f64) -> Result<Vec<u8>> {
    BetaTable::new(a)?.invert(b_value, tol)
}

/// Recovers `x` from `h_1(x), …, h_N(x)` (linear values).
pub fn reconstruct_expsum(map: &ExpSumMap, series: &[f64], tol: f64) -> Result<Vec<f64>> {
    if series.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::param("series must be strictly positive"));
    }
    let logs: Vec<f64> = series.iter().map(|v| v.ln()).collect();
    reconstruct_expsum_log(map, &logs, tol)
}

/// [`reconstruct_expsum`] on `ln h_n`.
///
/// Starting states come from the peeled levels (pencil when peeling cannot
/// stabilise) and from deflation, which removes leading levels with their
/// exact decoded weights and solves the coordinates left over from the first
/// deflated terms. Weights are decoded with a tolerance of 0.4 times the
/// coefficient margin. Every start is refined by Levenberg–Marquardt on the
/// log series and the best fit must reproduce the series to `10·tol`.
///
/// Values hidden far below the leading ones show up in only a handful of
/// terms; when two states agree on every term to rounding, either may be
/// returned.
pub fn reconstruct_expsum_log(map: &ExpSumMap, log_series: &[f64], tol: f64) -> Result<Vec<f64>> {
    let a = map.coefficients();
    validate(a, log_series, tol)?;
    let report = map.admissibility();
    if !report.admissible {
        return Err(Error::param(format!("coefficients are not admissible (margin {:e})", report.margin)));
    }
    let mut starts = Vec::new();
    // deflation may still succeed where global level extraction does not
    let decoded = extract_levels(a, log_series, tol).and_then(|peel| decode_levels(a, &peel, 0.4 * report.margin));
    if let Ok(w) = &decoded {
        starts.push(w.clone());
    }
    starts.extend(deflation_starts(map, log_series, tol, 0.4 * report.margin, 12));
    let mut best: Option<(f64, Vec<f64>)> = None;
    for w in &starts {
        let x = polish_from_levels(map, w, log_series)?;
        let c = cost(map, &x, log_series)?;
        if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
            best = Some((c, x));
        }
    }
    let Some((_, x)) = best else {
        return Err(decoded.err().unwrap_or(Error::Consistency("no candidate state".into())));
    };
    let m = misfit(map, &x, log_series)?;
    if m > 10.0 * tol {
        return Err(Error::Consistency(format!("reconstruction reproduces the series only to {m:e}")));
    }
    Ok(x)
}

/// Assigns each level's value to the coordinates its decoded indicator selects.
fn decode_levels(a: &[f64], peel: &PeelResult, btol: f64) -> Result<Vec<f64>> {
    let table = BetaTable::new(a)?;
    let min_weight = a.iter().map(|v| 1.0 / (v * v)).fold(f64::INFINITY, f64::min);
    let mut w = vec![f64::NAN; a.len()];
    // spurious levels carry negligible weight
    for &(wbar, b) in peel.levels.iter().filter(|(_, b)| *b > 0.25 * min_weight) {
        let c = table.invert(b, btol)?;
        for (j, &cj) in c.iter().enumerate() {
            if cj == 1 {
                if !w[j].is_nan() {
                    return Err(Error::Consistency(format!("coordinate {} claimed by two levels", j + 1)));
                }
                w[j] = wbar;
            }
        }
    }
    if let Some(j) = w.iter().position(|v| v.is_nan()) {
        return Err(Error::Consistency(format!("coordinate {} claimed by no level", j + 1)));
    }
    Ok(w)
}

/// Smallest `h̃_n` fraction a deflated term may keep and still be used.
const SUBPROBLEM_PRECISION: f64 = 1e-10;

/// Leading levels of a (deflated) log series: `ln` values, weights, and the
/// index from which the terms are dominated by them.
struct TopLevels {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    from: usize,
}

/// Most terms fitted by the pencil when the leading value is not isolated.
const PENCIL_TAIL: usize = 40;

/// Candidate leading levels: a single stabilised ratio, else clusters of
/// `2..=max_nodes` values from the pencil on the late valid terms.
fn top_levels(cur: &[f64], tol: f64, max_nodes: usize) -> Vec<TopLevels> {
    if let Ok((i, spread)) = stable_ratio(cur) {
        if spread <= tol {
            let ln_w = cur[i + 1] - cur[i];
            let b = (cur[i + 1] - (i + 2) as f64 * ln_w).exp();
            return vec![TopLevels { nodes: vec![ln_w], weights: vec![b], from: i }];
        }
    }
    let valid = cur.iter().take_while(|v| v.is_finite()).count();
    if valid < 12 {
        return Vec::new();
    }
    let from = valid - (valid / 2).max(12).min(PENCIL_TAIL);
    let seg = &cur[from..valid];
    (2..=max_nodes)
        .filter_map(|k| {
            let nodes = pencil_nodes(seg, k, 1e-15).ok()?;
            if nodes.len() != k {
                return None;
            }
            // the segment starts at n = from + 1; rescale so its weights stay O(1)
            let shift = from as f64 * nodes[0];
            let seg: Vec<f64> = seg.iter().map(|v| v - shift).collect();
            let c = fit_weights(&seg, &nodes).ok()?;
            let weights: Vec<f64> = c.iter().zip(&nodes).map(|(c, l)| c * (shift - from as f64 * l).exp()).collect();
            weights.iter().all(|b| *b > 0.0).then_some(TopLevels { nodes, weights, from })
        })
        .collect()
}

/// Assigns each weight to a distinct set of the unclaimed coordinates `rest`,
/// as bit masks over `rest` with their exact weight.
fn decode_top(inv: &[f64], rest: &[usize], weights: &[f64], btol: f64) -> Option<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(weights.len());
    let mut used = 0usize;
    for b in weights {
        let (dist, mask, beta) = (1usize..1 << rest.len())
            .filter(|mask| mask & used == 0)
            .map(|mask| {
                let beta: f64 = rest.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, j)| inv[*j]).sum();
                ((beta - b).abs(), mask, beta)
            })
            .min_by(|p, q| p.0.total_cmp(&q.0))?;
        if dist > btol {
            return None;
        }
        used |= mask;
        out.push((mask, beta));
    }
    Some(out)
}

/// Starting points from deflation with exact weights: each stabilised top
/// level is decoded against the coordinates not yet claimed and removed from
/// the series using its exact weight. Coordinates left over are solved for
/// exactly from the first deflated terms, where they still carry information.
fn deflation_starts(map: &ExpSumMap, log_series: &[f64], tol: f64, btol: f64, keep: usize) -> Vec<Vec<f64>> {
    let job = Deflation { inv: map.inv_sq(), log_series, tol, btol, keep };
    let mut out = Vec::new();
    job.descend(vec![f64::NAN; map.dim()], log_series.to_vec(), &mut out);
    out
}

/// Most starting points collected by [`deflation_starts`].
const MAX_DEFLATION_STARTS: usize = 32;

struct Deflation<'a> {
    inv: &'a [f64],
    log_series: &'a [f64],
    tol: f64,
    btol: f64,
    keep: usize,
}

impl Deflation<'_> {
    /// Every decodable choice of leading levels is followed; wherever at most
    /// three coordinates remain they are also solved for directly.
    fn descend(&self, w: Vec<f64>, cur: Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if out.len() >= MAX_DEFLATION_STARTS {
            return;
        }
        let rest: Vec<usize> = (0..w.len()).filter(|j| w[*j].is_nan()).collect();
        if rest.is_empty() {
            out.push(w);
            return;
        }
        if rest.len() <= 3 {
            out.extend(self.solve_rest(&w, &rest, &cur));
        }
        for top in top_levels(&cur, self.tol, rest.len()) {
            let Some(masks) = decode_top(self.inv, &rest, &top.weights, self.btol) else { continue };
            let betas: Vec<f64> = masks.iter().map(|m| m.1).collect();
            let tail: Vec<(f64, f64, f64)> = (top.from..cur.len())
                .filter(|k| cur[*k].is_finite())
                .map(|k| ((k + 1) as f64, cur[k], (cur[k] - self.log_series[k]).exp()))
                .collect();
            let (nodes, _) = fit_log_nodes(&betas, top.nodes, &tail);
            let mut next_w = w.clone();
            for ((mask, _), ln_w) in masks.iter().zip(&nodes) {
                for (k, &j) in rest.iter().enumerate() {
                    if mask >> k & 1 == 1 {
                        next_w[j] = ln_w.exp();
                    }
                }
            }
            let floor = SUBPROBLEM_PRECISION.ln();
            let next: Vec<f64> = cur
                .iter()
                .zip(self.log_series)
                .enumerate()
                .map(|(k, (v, full))| {
                    let n = (k + 1) as f64;
                    let removed: f64 = betas.iter().zip(&nodes).map(|(b, l)| (b.ln() + n * l - v).exp()).sum();
                    let next = if removed < 1.0 { v + (-removed).ln_1p() } else { f64::NAN };
                    if next - full >= floor { next } else { f64::NAN }
                })
                .collect();
            self.descend(next_w, next, out);
        }
    }

    /// Solves the coordinates `rest` from the first deflated terms.
    fn solve_rest(&self, w: &[f64], rest: &[usize], cur: &[f64]) -> Vec<Vec<f64>> {
        // a deflated term is only as precise as the subtraction that produced it
        let terms: Vec<(f64, f64, f64)> = cur
            .iter()
            .enumerate()
            .take_while(|(_, v)| v.is_finite())
            .map(|(k, v)| {
                let n = (k + 1) as f64;
                (n, *v, (v - self.log_series[k]).exp() / n)
            })
            .collect();
        if terms.len() < rest.len() {
            return Vec::new();
        }
        let beta: Vec<f64> = rest.iter().map(|j| self.inv[*j]).collect();
        // later terms rank the solutions of the first ones
        let check = &terms[rest.len()..];
        let mut found: Vec<(f64, Vec<f64>)> = power_sum_solutions(&beta, &terms)
            .into_iter()
            .map(|u| {
                let lw: Vec<f64> = u.iter().map(|v| v.ln()).collect();
                let c: f64 = check
                    .iter()
                    .map(|(n, v, wt)| {
                        let s: f64 = beta.iter().zip(&lw).map(|(b, l)| b * (n * l).exp()).sum();
                        (wt * (s.ln() - v)).powi(2)
                    })
                    .sum();
                (c, lw)
            })
            .collect();
        found.sort_by(|p, q| p.0.total_cmp(&q.0));
        found.dedup_by(|p, q| p.1.iter().zip(&q.1).all(|(u, v)| (u - v).abs() < 1e-6));
        found
            .into_iter()
            .take(self.keep)
            .map(|(_, lw)| {
                let mut start = w.to_vec();
                for (j, l) in rest.iter().zip(&lw) {
                    start[*j] = l.exp();
                }
                start
            })
            .collect()
    }
}

/// Positive candidates `u` for `Σ_j β_j u_jⁿ = r_n`, at most three unknowns,
/// with the terms `(n, ln r_n, weight)` starting at `n = 1`. The first two
/// equations are solved exactly through a quadratic; with three unknowns each
/// value in turn is scanned, see [`scan_triple`].
fn power_sum_solutions(beta: &[f64], terms: &[(f64, f64, f64)]) -> Vec<Vec<f64>> {
    let r: Vec<f64> = terms.iter().take(2).map(|t| t.1.exp()).collect();
    match beta.len() {
        1 => vec![vec![r[0] / beta[0]]],
        2 => SIGNS.iter().filter_map(|s| pair_solution(beta[0], beta[1], r[0], r[1], *s)).map(|(u, v)| vec![u, v]).collect(),
        3 => (0..3).flat_map(|a| scan_triple(beta, terms, &r, a)).collect(),
        _ => Vec::new(),
    }
}

/// Scans the value of coordinate `a`, solves the other two from the first two
/// equations, and returns the local minima of the misfit of the remaining
/// terms along each branch. Minima rather than roots, since near-degenerate
/// cases only touch zero.
fn scan_triple(beta: &[f64], terms: &[(f64, f64, f64)], r: &[f64], a: usize) -> Vec<Vec<f64>> {
    let (b, c) = ((a + 1) % 3, (a + 2) % 3);
    let (ba, bb, bc) = (beta[a], beta[b], beta[c]);
    let solve = |la: f64, sign: f64| {
        let ua = la.exp();
        pair_solution(bb, bc, r[0] - ba * ua, r[1] - ba * ua * ua, sign).map(|(u, v)| {
            let mut out = vec![0.0; 3];
            out[a] = ua;
            out[b] = u;
            out[c] = v;
            out
        })
    };
    let misfit = |la: f64, sign: f64| -> f64 {
        let Some(u) = solve(la, sign) else { return f64::INFINITY };
        terms[2..]
            .iter()
            .map(|(n, v, wt)| {
                let s: f64 = beta.iter().zip(&u).map(|(b, u)| b * u.powf(*n)).sum();
                (wt * (s.ln() - v)).powi(2)
            })
            .sum()
    };
    const SCAN: usize = 400;
    let upper = (r[0] / ba).min((r[1] / ba).sqrt()).ln();
    let span = 1e-6f64.ln();
    let grid: Vec<f64> = (0..=SCAN).map(|i| upper + span * (1.0 - i as f64 / SCAN as f64)).collect();
    let mut out = Vec::new();
    for sign in SIGNS {
        let vals: Vec<f64> = grid.iter().map(|l| misfit(*l, sign)).collect();
        for i in 0..=SCAN {
            let left = if i == 0 { f64::INFINITY } else { vals[i - 1] };
            let right = if i == SCAN { f64::INFINITY } else { vals[i + 1] };
            if !(vals[i].is_finite() && vals[i] <= left && vals[i] < right) {
                continue;
            }
            let (lo, hi) = (grid[i.saturating_sub(1)], grid[(i + 1).min(SCAN)]);
            let (la, _) = brent_min(|l| misfit(l, sign), lo, hi, 1e-14, 200);
            out.extend(solve(la, sign));
        }
    }
    out
}

const SIGNS: [f64; 2] = [1.0, -1.0];

/// Positive `(u, v)` with `βu·u + βv·v = r1` and `βu·u² + βv·v² = r2`, taking
/// the root of the quadratic in `u` with the given sign.
fn pair_solution(bu: f64, bv: f64, r1: f64, r2: f64, sign: f64) -> Option<(f64, f64)> {
    let disc = bv / bu * ((bu + bv) * r2 - r1 * r1);
    if !(r1 > 0.0 && r2 > 0.0 && disc >= 0.0) {
        return None;
    }
    let u = (r1 + sign * disc.sqrt()) / (bu + bv);
    let v = (r1 - bu * u) / bv;
    (u > 0.0 && v > 0.0).then_some((u, v))
}

/// Polishes from the assembled state and, for every level shared by several
/// coordinates, from starts where those coordinates are slightly spread in
/// each order: the shared start is a saddle of the fit when the true values
/// are merely close.
fn polish_from_levels(map: &ExpSumMap, w: &[f64], log_series: &[f64]) -> Result<Vec<f64>> {
    let d = w.len();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for j in 0..d {
        match groups.iter_mut().find(|g| w[g[0]] == w[j]) {
            Some(g) => g.push(j),
            None => groups.push(vec![j]),
        }
    }
    groups.retain(|g| g.len() > 1);
    let mut best = polish(map, map.state_from_positive(w), log_series)?;
    let mut best_cost = cost(map, &best, log_series)?;
    if groups.is_empty() {
        return Ok(best);
    }
    let orders: Vec<Vec<Vec<usize>>> = groups.iter().map(|g| permutations(g.len())).collect();
    let combos: usize = orders.iter().map(|o| o.len()).product();
    for eps in [1e-3, 1e-2, 5e-2] {
        for mut idx in 0..combos {
            let mut start = w.to_vec();
            for (g, ord) in groups.iter().zip(&orders) {
                let perm = &ord[idx % ord.len()];
                idx /= ord.len();
                let mid = (g.len() - 1) as f64 / 2.0;
                for (slot, &j) in perm.iter().zip(g) {
                    start[j] *= 1.0 + eps * (*slot as f64 - mid);
                }
            }
            let x = polish(map, map.state_from_positive(&start), log_series)?;
            let c = cost(map, &x, log_series)?;
            if c < best_cost {
                best = x;
                best_cost = c;
            }
        }
    }
    Ok(best)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn cost(map: &ExpSumMap, x: &[f64], log_series: &[f64]) -> Result<f64> {
    let mut c = 0.0;
    for (k, l) in log_series.iter().enumerate() {
        c += (power_observable_log(map, x, (k + 1) as u32)? - l).powi(2);
    }
    Ok(c)
}

fn misfit(map: &ExpSumMap, x: &[f64], log_series: &[f64]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (k, l) in log_series.iter().enumerate() {
        let v = power_observable_log(map, x, (k + 1) as u32)?;
        worst = worst.max((v - l).exp_m1().abs());
    }
    Ok(worst)
}

/// Levenberg–Marquardt on `r_n(x) = ln h_n(x) − ln h̃_n`.
fn polish(map: &ExpSumMap, x: Vec<f64>, log_series: &[f64]) -> Result<Vec<f64>> {
    let a = map.coefficients();
    let inv = map.inv_sq();
    let terms: Vec<(f64, f64, f64)> = log_series.iter().enumerate().map(|(k, v)| ((k + 1) as f64, *v, 1.0)).collect();
    let lw: Vec<f64> = a.iter().zip(&x).map(|(a, x)| (a * a).ln() + a * x).collect();
    let (lw, _) = fit_log_nodes(inv, lw, &terms);
    Ok(a.iter().zip(&lw).map(|(a, l)| (l - (a * a).ln()) / a).collect())
}

/// Levenberg–Marquardt for `ln Σ β_j e^{n l_j} = v_n` over the log-values `l`,
/// each term `(n, v_n, weight)`. Returns the fitted values and the final
/// weighted sum of squared residuals.
fn fit_log_nodes(beta: &[f64], mut lw: Vec<f64>, terms: &[(f64, f64, f64)]) -> (Vec<f64>, f64) {
    let d = lw.len();
    let lb: Vec<f64> = beta.iter().map(|b| b.ln()).collect();
    let eval = |lw: &[f64]| -> (DVector<f64>, DMatrix<f64>) {
        let mut r = DVector::zeros(terms.len());
        let mut jac = DMatrix::zeros(terms.len(), d);
        let mut e = vec![0.0; d];
        for (k, (n, v, wt)) in terms.iter().enumerate() {
            let top = lb.iter().zip(lw).map(|(b, l)| b + n * l).fold(f64::NEG_INFINITY, f64::max);
            for j in 0..d {
                e[j] = (lb[j] + n * lw[j] - top).exp();
            }
            let s: f64 = e.iter().sum();
            r[k] = wt * (top + s.ln() - v);
            for j in 0..d {
                jac[(k, j)] = wt * n * e[j] / s;
            }
        }
        (r, jac)
    };
    let (mut r, mut jac) = eval(&lw);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..200 {
        // damped step as a stacked least-squares problem, so the valley
        // directions keep their precision instead of being squared away
        let m = terms.len();
        let mut aug = DMatrix::zeros(m + d, d);
        aug.view_mut((0, 0), (m, d)).copy_from(&jac);
        for j in 0..d {
            aug[(m + j, j)] = (lambda * jac.column(j).norm_squared()).sqrt().max(1e-150);
        }
        let mut rhs = DVector::zeros(m + d);
        rhs.rows_mut(0, m).copy_from(&(-&r));
        let Ok(step) = aug.svd(true, true).solve(&rhs, 0.0) else {
            lambda *= 10.0;
            continue;
        };
        let trial: Vec<f64> = lw.iter().zip(step.iter()).map(|(x, s)| x + s).collect();
        let (tr, tj) = eval(&trial);
        let tc = tr.norm_squared();
        if tc.is_finite() && tc < cost {
            let done = step.amax() <= 1e-15 * (1.0 + lw.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            lw = trial;
            r = tr;
            jac = tj;
            cost = tc;
            lambda = (lambda * 0.3).max(1e-12);
            if done {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (lw, cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qvest::power_series_log;
    use proptest::prelude::*;

    fn series(inv: &[f64], w: &[f64], n: usize) -> Vec<f64> {
        (1..=n).map(|k| inv.iter().zip(w).map(|(b, w)| b * w.powi(k as i32)).sum()).collect()
    }

    #[test]
    fn single_geometric_series() {
        let p = peel_levels(&[1.0], &series(&[1.0], &[3.0], 30), 1e-8).unwrap();
        assert_eq!(p.m, 1);
        assert!((p.levels[0].0 - 3.0).abs() < 1e-12 && (p.levels[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_values_merge() {
        let p = peel_levels(&[1.0, 2.0], &series(&[1.0, 0.25], &[5.0, 5.0], 30), 1e-8).unwrap();
        assert_eq!(p.m, 1);
        assert!((p.levels[0].0 - 5.0).abs() < 1e-10 && (p.levels[0].1 - 1.25).abs() < 1e-10);
    }

    #[test]
    fn two_levels() {
        let p = peel_levels(&[1.0, 2.0], &series(&[1.0, 0.25], &[5.0, 3.0], 60), 1e-6).unwrap();
        assert_eq!(p.m, 2);
        let expected = [(5.0, 1.0), (3.0, 0.25)];
        for (got, want) in p.levels.iter().zip(expected) {
            assert!((got.0 / want.0 - 1.0).abs() < 1e-4 && (got.1 / want.1 - 1.0).abs() < 1e-4);
        }
        let total: f64 = p.levels.iter().map(|l| l.1).sum();
        assert!((total - 1.25).abs() <= 1e-6 * 1.25);
    }

    #[test]
    fn unstable_ratio_reports_gap() {
        // values 1.01 apart by a hair need far more than 20 terms
        match peel_levels(&[1.0, 2.0], &series(&[1.0, 0.25], &[5.0, 4.99], 20), 1e-10) {
            Err(Error::Convergence { gap, .. }) => assert!(gap > 1e-10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn beta_examples() {
        let a = [1.0, 2f64.sqrt(), 3f64.sqrt()];
        assert_eq!(beta_inverse(&a, 0.0, 1e-6).unwrap(), vec![0, 0, 0]);
        assert_eq!(beta_inverse(&a, 1.0 + 0.5 + 1.0 / 3.0, 1e-6).unwrap(), vec![1, 1, 1]);
        assert_eq!(beta_inverse(&a, 1.0 + 1.0 / 3.0, 1e-6).unwrap(), vec![1, 0, 1]);
        assert!(matches!(beta_inverse(&a, 0.7, 1e-6), Err(Error::Mismatch { .. })));
        assert!(matches!(beta_inverse(&[1.0, 1.0], 1.0, 1e-6), Err(Error::MarginViolation { count: 2, .. })));
    }

    #[test]
    fn fixed_point_reconstruction() {
        let m = ExpSumMap::new(vec![1.0]).unwrap();
        assert_eq!(reconstruct_expsum(&m, &[1.0; 20], 1e-8).unwrap(), vec![0.0]);
    }

    #[test]
    fn two_dimensional_reconstruction() {
        let m = ExpSumMap::new(vec![1.0, 2.0]).unwrap();
        let x = [0.5, -0.3];
        let s = power_series_log(&m, &x, 80).unwrap();
        let got = reconstruct_expsum_log(&m, &s, 1e-8).unwrap();
        assert!((got[0] - x[0]).abs() <= 1e-4 && (got[1] - x[1]).abs() <= 1e-4);
    }

    #[test]
    fn merged_level_is_decoded() {
        let a = vec![1.0, 2f64.sqrt(), 3f64.sqrt()];
        let m = ExpSumMap::new(a.clone()).unwrap();
        // a1² e^{a1 x1} = a2² e^{a2 x2}
        let x1 = 0.4;
        let x2 = ((x1 as f64).exp() / 2.0).ln() / a[1];
        let x = [x1, x2, -1.5];
        let s = power_series_log(&m, &x, 60).unwrap();
        let p = peel_levels_log(&a, &s, 1e-8).unwrap();
        assert_eq!(p.m, 2);
        let merged = p.levels.iter().find(|l| (l.1 - 1.5).abs() < 1e-6).unwrap();
        assert_eq!(beta_inverse(&a, merged.1, 1e-6).unwrap(), vec![1, 1, 0]);
        let got = reconstruct_expsum_log(&m, &s, 1e-8).unwrap();
        for (g, w) in got.iter().zip(&x) {
            assert!((g - w).abs() <= 1e-6);
        }
    }

    #[test]
    fn close_values_fall_back_to_pencil() {
        let m = ExpSumMap::new(vec![1.0, 2f64.sqrt()]).unwrap();
        let x1: f64 = 0.3;
        // w2 = 1.001·w1
        let x2 = (1.001 * x1.exp() / 2.0).ln() / 2f64.sqrt();
        let s = power_series_log(&m, &[x1, x2], 100).unwrap();
        assert!(peel_levels_log(m.coefficients(), &s, 1e-8).is_err());
        let got = reconstruct_expsum_log(&m, &s, 1e-8).unwrap();
        assert!((got[0] - x1).abs() <= 1e-4 && (got[1] - x2).abs() <= 1e-4, "{got:?}");
    }

    #[test]
    fn inadmissible_coefficients_are_rejected() {
        let m = ExpSumMap::new(vec![1.0, 1.0]).unwrap();
        let s = power_series_log(&m, &[0.1, 0.2], 30).unwrap();
        assert!(matches!(reconstruct_expsum_log(&m, &s, 1e-8), Err(Error::Parameter(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn peel_conserves_weight(w1 in 1.0f64..10.0, f in 0.05f64..0.6) {
            let a = [1.0, 2.0];
            if let Ok(p) = peel_levels(&a, &series(&[1.0, 0.25], &[w1, w1 * f], 80), 1e-8) {
                let total: f64 = p.levels.iter().map(|l| l.1).sum();
                prop_assert!((total - 1.25).abs() <= 1e-6 * 1.25);
                prop_assert!(p.levels.windows(2).all(|l| l[0].0 > l[1].0));
            }
        }

        #[test]
        fn reconstruction_is_identity(x in prop::collection::vec(-2.0f64..2.0, 3)) {
            let m = ExpSumMap::new(vec![1.0, 2f64.sqrt(), 3f64.sqrt()]).unwrap();
            let s = power_series_log(&m, &x, 100).unwrap();
            let got = reconstruct_expsum_log(&m, &s, 1e-8).unwrap();
            for (g, w) in got.iter().zip(&x) {
                prop_assert!((g - w).abs() <= 1e-4, "{:?} vs {:?}", got, x);
            }
        }
    }
}
