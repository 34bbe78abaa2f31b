//! Forward tracker for scalar piecewise-monotone observation maps.
//!
//! Away from critical points the state is the inverse of the current branch.
//! When the observation comes within a band `δ` of a critical level `h(c)`
//! the branch identity is lost; each excursion back out of the band has two
//! candidate states, one on either side of `c`. Squared observation increments
//! are compared with the rates `h'(candidate)²` each candidate predicts, and
//! the accumulated contrast decides the side once it clears `η` bootstrap
//! standard deviations. Maps with `h'²` equal at both aliases give no
//! contrast; after repeated inconclusive windows the tracker declares the
//! state permanently ambiguous.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obsmaps::{branch_inverse, branch_inverse_near, ObsPath, PiecewiseMonotoneMap, RANGE_TOL};
use crate::rng;
use crate::sdesim::{Lamperti, ScalarFn, SdeSpec1D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerParams {
    /// Base decision window in grid steps.
    pub window_steps: usize,
    /// The window doubles up to `2^max_doublings` times before it counts as
    /// inconclusive.
    pub max_doublings: u32,
    /// Decision margin in bootstrap standard deviations.
    pub eta: f64,
    /// Consecutive inconclusive windows before ambiguity is declared.
    pub inconclusive_limit: usize,
    pub bootstrap_resamples: usize,
    pub seed: u64,
    /// Band half-width in one-step observation standard deviations.
    pub band_sigmas: f64,
    /// Band floor as a fraction of the bracket's observation range.
    pub band_floor_frac: f64,
    /// Increments averaged for the local rate used in the band width.
    pub rate_lookback: usize,
    /// Relative rate difference below which candidates count as identical.
    pub resolution: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            window_steps: 200,
            max_doublings: 3,
            eta: 3.0,
            inconclusive_limit: 3,
            bootstrap_resamples: 200,
            seed: 0,
            band_sigmas: 5.0,
            band_floor_frac: 1e-4,
            rate_lookback: 20,
            resolution: 1e-9,
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_steps == 0 || self.inconclusive_limit == 0 || self.bootstrap_resamples < 2 || self.rate_lookback == 0 {
            return Err(Error::param("tracker window, limit, resample and lookback counts must be positive"));
        }
        if self.max_doublings > 16 {
            return Err(Error::param("max_doublings must be at most 16"));
        }
        if !(self.eta > 0.0) || !(self.band_sigmas > 0.0) || !(self.band_floor_frac >= 0.0) || !(self.resolution >= 0.0) {
            return Err(Error::param("eta and band_sigmas must be positive; band_floor_frac and resolution non-negative"));
        }
        Ok(())
    }

    fn full_window(&self) -> usize {
        self.window_steps << self.max_doublings
    }

    fn is_checkpoint(&self, len: usize) -> bool {
        if len == 0 {
            return false;
        }
        let r = len % self.full_window();
        r == 0 || (0..self.max_doublings).any(|i| r == self.window_steps << i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    /// Continued on the branch it entered from.
    Stay,
    /// Moved to the branch on the other side of the critical point.
    Reflect,
    Ambiguous,
    /// The path ended before a decision.
    Unresolved,
}

/// One visit to a critical band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub critical: f64,
    /// Band entry time.
    pub time: f64,
    pub decision_time: Option<f64>,
    /// Left and right candidates at the decision (or last excursion step).
    pub candidates: (f64, f64),
    /// Signed contrast; positive favours the right candidate.
    pub statistic: f64,
    pub statistic_gap: f64,
    pub bootstrap_sd: f64,
    /// `gap / sd`; infinite when one candidate is out of range.
    pub margin: f64,
    pub decision: Decision,
    pub from_branch: usize,
    pub chosen_branch: Option<usize>,
    pub inconclusive_windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub times: Vec<f64>,
    /// `NaN` from `ambiguous_from` on.
    pub estimates: Vec<f64>,
    /// Branch index, `None` inside a band, over an excursion that ended
    /// undecided, or once ambiguous.
    pub branch: Vec<Option<usize>>,
    pub branch_log: Vec<BranchRecord>,
    pub ambiguous_from: Option<f64>,
}

impl TrackResult {
    /// CSV `t,estimate,branch,ambiguous`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,estimate,branch,ambiguous")?;
        for (k, t) in self.times.iter().enumerate() {
            let amb = self.ambiguous_from.is_some_and(|a| *t >= a);
            let branch = self.branch[k].map(|b| b.to_string()).unwrap_or_default();
            writeln!(out, "{t:.16e},{:.16e},{branch},{}", self.estimates[k], amb as u8)?;
        }
        Ok(())
    }

    pub fn write_log_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.branch_log)?;
        Ok(())
    }
}

/// Reconstructs `X` from `Y = h(X)` for `dX = f dt + g dW`.
///
/// For non-constant `g` the observation is tracked against `h∘Φ⁻¹` in the
/// Lamperti coordinate `Φ`, where the noise is unit, and mapped back.
pub fn track_piecewise(
    pmap: &PiecewiseMonotoneMap,
    spec: &SdeSpec1D,
    obs: &ObsPath,
    x0: f64,
    params: &TrackerParams,
) -> Result<TrackResult> {
    params.validate()?;
    if obs.dim != 1 {
        return Err(Error::param("the tracker needs a scalar observation path"));
    }
    if obs.len() < 2 {
        return Err(Error::param("observation path needs at least two points"));
    }
    if spec.is_unit_noise() {
        return track_unit(pmap, obs, x0, params);
    }
    let (lo, hi) = pmap.domain();
    let table = std::sync::Arc::new(Lamperti::new(spec, lo, hi)?);
    let (t1, t2, t3) = (table.clone(), table.clone(), table.clone());
    let (h, hp) = (pmap.h_fn(), pmap.hprime_fn());
    let g = spec.diffusion.clone();
    let h_t: ScalarFn = std::sync::Arc::new(move |z| h(t1.phi_inv(z)));
    let hp_t: ScalarFn = std::sync::Arc::new(move |z| {
        let x = t2.phi_inv(z);
        g(x) * hp(x)
    });
    let criticals = pmap.criticals().iter().map(|&c| t3.phi(c)).collect();
    let tmap = PiecewiseMonotoneMap::from_parts(h_t, hp_t, (table.phi(lo), table.phi(hi)), criticals)
        .map_err(|e| Error::Model(format!("transformed map is invalid: {e}")))?;
    let mut res = track_unit(&tmap, obs, table.phi(x0), params)?;
    for e in res.estimates.iter_mut().filter(|e| e.is_finite()) {
        *e = table.phi_inv(*e);
    }
    for r in &mut res.branch_log {
        r.critical = table.phi_inv(r.critical);
        r.candidates = (table.phi_inv(r.candidates.0), table.phi_inv(r.candidates.1));
    }
    Ok(res)
}

enum Outcome {
    Decided { branch: usize, next: usize },
    Ambiguous { from: usize },
    End,
}

struct Tracker<'a> {
    map: &'a PiecewiseMonotoneMap,
    branches: Vec<(f64, f64)>,
    y: &'a [f64],
    times: &'a [f64],
    dt: f64,
    params: &'a TrackerParams,
    est: Vec<f64>,
    branch: Vec<Option<usize>>,
    log: Vec<BranchRecord>,
}

fn track_unit(map: &PiecewiseMonotoneMap, obs: &ObsPath, x0: f64, params: &TrackerParams) -> Result<TrackResult> {
    let y = &obs.values;
    let n = y.len();
    if (map.h(x0) - y[0]).abs() > 1e-8 * (1.0 + y[0].abs()) {
        return Err(Error::param(format!("h(x0) = {} does not match the first observation {}", map.h(x0), y[0])));
    }
    let mut b = map.branch_of(x0).ok_or_else(|| Error::param(format!("x0 = {x0} is a critical point or outside the domain")))?;
    if map.criticals().iter().any(|c| (c - x0).abs() <= 1e-12 * (1.0 + c.abs())) {
        return Err(Error::param(format!("x0 = {x0} is a critical point")));
    }
    let mut t = Tracker {
        map,
        branches: map.branches(),
        y,
        times: &obs.times,
        dt: obs.dt,
        params,
        est: vec![f64::NAN; n],
        branch: vec![None; n],
        log: Vec::new(),
    };
    t.est[0] = x0;
    t.branch[0] = Some(b);
    let mut ambiguous_from = None;
    let mut k = 1;
    let mut sq_window = std::collections::VecDeque::with_capacity(params.rate_lookback);
    let mut sq_sum = 0.0;
    while k < n {
        let dy = y[k] - y[k - 1];
        sq_window.push_back(dy * dy);
        sq_sum += dy * dy;
        if sq_window.len() > params.rate_lookback {
            sq_sum -= sq_window.pop_front().unwrap_or(0.0);
        }
        let rate = sq_sum.max(0.0) / (sq_window.len() as f64 * t.dt);
        let entered = [b.checked_sub(1), (b < map.criticals().len()).then_some(b)].into_iter().flatten().find_map(|ci| {
            let delta = t.band(ci, rate);
            ((y[k] - map.h(map.criticals()[ci])).abs() < delta).then_some((ci, delta))
        });
        if let Some((ci, delta)) = entered {
            match t.episode(ci, b, k, delta)? {
                Outcome::Decided { branch, next } => {
                    b = branch;
                    k = next;
                    continue;
                }
                Outcome::Ambiguous { from } => {
                    ambiguous_from = Some(obs.times[from]);
                    for e in &mut t.est[from..] {
                        *e = f64::NAN;
                    }
                    for br in &mut t.branch[from..] {
                        *br = None;
                    }
                    break;
                }
                Outcome::End => break,
            }
        }
        let prev = t.est[k - 1];
        let radius = 4.0 * dy.abs() / map.hprime(prev).abs() + 1e-12 * (1.0 + prev.abs());
        t.est[k] = branch_inverse_near(map, t.branches[b], y[k], prev, radius)
            .map_err(|e| Error::Model(format!("observation at t={} left branch {b}: {e}", obs.times[k])))?;
        t.branch[k] = Some(b);
        k += 1;
    }
    Ok(TrackResult { times: obs.times.clone(), estimates: t.est, branch: t.branch, branch_log: t.log, ambiguous_from })
}

struct Excursion {
    start: usize,
    terms: Vec<f64>,
    cands: Vec<(f64, f64)>,
    rates: (f64, f64),
    stat: f64,
}

impl Tracker<'_> {
    fn band(&self, ci: usize, rate: f64) -> f64 {
        let noise = self.params.band_sigmas * (rate * self.dt).sqrt();
        noise.max(self.params.band_floor_frac * self.map.bracket_range(ci))
    }

    /// Candidate on branch `bi`, or `None` when `y` is outside its range.
    fn candidate(&self, bi: usize, y: f64, hint: f64) -> Option<f64> {
        let (lo, hi) = self.branches[bi];
        let (a, b) = (self.map.h(lo), self.map.h(hi));
        if y < a.min(b) - RANGE_TOL || y > a.max(b) + RANGE_TOL {
            return None;
        }
        let radius = 1e-3 * (hi - lo);
        branch_inverse_near(self.map, (lo, hi), y, hint, radius).ok()
    }

    fn clamped(&self, bi: usize, y: f64) -> Result<f64> {
        let (lo, hi) = self.branches[bi];
        let (a, b) = (self.map.h(lo), self.map.h(hi));
        branch_inverse(self.map, (lo, hi), y.clamp(a.min(b), a.max(b)))
    }

    fn bootstrap_sd(&self, terms: &[f64], crossing: usize) -> f64 {
        let n = terms.len();
        let seed = rng::derive_seed(rng::derive_seed(self.params.seed, crossing as u64), n as u64);
        let mut s = rng::stream(seed);
        let sums: Vec<f64> = (0..self.params.bootstrap_resamples)
            .map(|_| (0..n).map(|_| terms[s.random_range(0..n)]).sum())
            .collect();
        crate::numeric::stats::variance(&sums).sqrt()
    }

    /// Fills an excursion that ended without a decision.
    fn fill_undecided(&mut self, exc: &Excursion, from: usize, left: usize) {
        let right = left + 1;
        let pick = if exc.stat > 0.0 {
            right
        } else if exc.stat < 0.0 {
            left
        } else {
            from
        };
        self.fill(exc, pick, left);
        // the side is a guess, not a decision
        for br in &mut self.branch[exc.start..exc.start + exc.cands.len()] {
            *br = None;
        }
    }

    fn fill(&mut self, exc: &Excursion, pick: usize, left: usize) {
        for (i, &(l, r)) in exc.cands.iter().enumerate() {
            let v = if pick == left { l } else { r };
            // an out-of-range side falls back to the other candidate
            self.est[exc.start + i] = if v.is_nan() { if pick == left { r } else { l } } else { v };
            self.branch[exc.start + i] = Some(pick);
        }
    }

    fn episode(&mut self, ci: usize, from: usize, entry: usize, delta: f64) -> Result<Outcome> {
        let p = self.params;
        let c = self.map.criticals()[ci];
        let hc = self.map.h(c);
        let (left, right) = (ci, ci + 1);
        let crossing = self.log.len();
        let mut record = BranchRecord {
            critical: c,
            time: self.times[entry],
            decision_time: None,
            candidates: (c, c),
            statistic: 0.0,
            statistic_gap: 0.0,
            bootstrap_sd: 0.0,
            margin: 0.0,
            decision: Decision::Unresolved,
            from_branch: from,
            chosen_branch: None,
            inconclusive_windows: 0,
        };
        let mut inconclusive = 0;
        let mut exc: Option<Excursion> = None;
        let n = self.y.len();
        let mut k = entry;
        while k < n {
            let yk = self.y[k];
            if (yk - hc).abs() < delta {
                if let Some(e) = exc.take() {
                    self.fill_undecided(&e, from, left);
                }
                let (l, r) = (self.clamped(left, yk)?, self.clamped(right, yk)?);
                self.est[k] = 0.5 * (l + r);
                self.branch[k] = None;
                k += 1;
                continue;
            }
            let hints = exc.as_ref().and_then(|e| e.cands.last().copied()).unwrap_or((c, c));
            let cl = self.candidate(left, yk, hints.0);
            let cr = self.candidate(right, yk, hints.1);
            let (xl, xr) = match (cl, cr) {
                (Some(l), Some(r)) => (l, r),
                (None, None) => {
                    return Err(Error::Model(format!(
                        "observation {yk} at t={} is outside both branches around {c}",
                        self.times[k]
                    )))
                }
                (l, r) => {
                    // only one side can produce this observation
                    let pick = if l.is_some() { left } else { right };
                    let e = exc.get_or_insert_with(|| Excursion { start: k, terms: vec![], cands: vec![], rates: (0.0, 0.0), stat: 0.0 });
                    e.cands.push((l.unwrap_or(f64::NAN), r.unwrap_or(f64::NAN)));
                    let e = exc.take().expect("excursion present");
                    self.fill(&e, pick, left);
                    record.decision_time = Some(self.times[k]);
                    record.candidates = (l.unwrap_or(f64::NAN), r.unwrap_or(f64::NAN));
                    record.statistic = e.stat;
                    record.statistic_gap = f64::INFINITY;
                    record.margin = f64::INFINITY;
                    record.decision = if pick == from { Decision::Stay } else { Decision::Reflect };
                    record.chosen_branch = Some(pick);
                    record.inconclusive_windows = inconclusive;
                    self.log.push(record);
                    return Ok(Outcome::Decided { branch: pick, next: k + 1 });
                }
            };
            let rates = (self.map.hprime(xl).powi(2), self.map.hprime(xr).powi(2));
            if !rates.0.is_finite() || !rates.1.is_finite() {
                return Err(Error::Model(format!("predicted rates are not finite at t={}", self.times[k])));
            }
            let e = match exc.as_mut() {
                Some(e) => {
                    let (pl, pr) = e.rates;
                    let dy = yk - self.y[k - 1];
                    let r = dy * dy / self.dt;
                    let u = if (pl - pr).abs() <= p.resolution * (pl + pr) { 0.0 } else { (pl - pr) * (pl + pr - 2.0 * r) * self.dt };
                    e.terms.push(u);
                    e.stat += u;
                    e
                }
                None => exc.insert(Excursion { start: k, terms: vec![], cands: vec![], rates, stat: 0.0 }),
            };
            e.rates = rates;
            e.cands.push((xl, xr));
            let len = e.terms.len();
            if p.is_checkpoint(len) {
                let (stat, start) = (e.stat, e.start);
                let terms = std::mem::take(&mut e.terms);
                let sd = self.bootstrap_sd(&terms, crossing);
                let e = exc.as_mut().expect("excursion present");
                e.terms = terms;
                let gap = stat.abs();
                record.statistic = stat;
                record.statistic_gap = gap;
                record.bootstrap_sd = sd;
                record.margin = if sd > 0.0 { gap / sd } else { 0.0 };
                record.candidates = (xl, xr);
                if sd > 0.0 && gap > p.eta * sd {
                    let pick = if stat > 0.0 { right } else { left };
                    let e = exc.take().expect("excursion present");
                    self.fill(&e, pick, left);
                    record.decision_time = Some(self.times[k]);
                    record.decision = if pick == from { Decision::Stay } else { Decision::Reflect };
                    record.chosen_branch = Some(pick);
                    record.inconclusive_windows = inconclusive;
                    self.log.push(record);
                    return Ok(Outcome::Decided { branch: pick, next: k + 1 });
                }
                if len % p.full_window() == 0 {
                    inconclusive += 1;
                    record.inconclusive_windows = inconclusive;
                    if inconclusive >= p.inconclusive_limit {
                        record.decision = Decision::Ambiguous;
                        record.decision_time = Some(self.times[k]);
                        let _ = start;
                        self.log.push(record);
                        return Ok(Outcome::Ambiguous { from: entry });
                    }
                }
            }
            k += 1;
        }
        if let Some(e) = exc.take() {
            record.candidates = e.cands.last().copied().unwrap_or((c, c));
            record.statistic = e.stat;
            record.statistic_gap = e.stat.abs();
            self.fill_undecided(&e, from, left);
        }
        self.log.push(record);
        Ok(Outcome::End)
    }
}
