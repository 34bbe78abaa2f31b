//! Numerical search for affine isometries that leave an observation map
//! invariant, and the trackability verdicts drawn from it.
//!
//! Everything here is sampling evidence. A symmetry confined to a set that is
//! thin in the Euclidean sense will not be seen.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::optim::{brent_min, nelder_mead};
use crate::obsmaps::ObservationMap;
use crate::rng;

/// Tolerance on `‖OᵀO − I‖_max`.
pub const ORTHO_TOL: f64 = 1e-10;
/// Default relative residual below which a candidate counts as a symmetry.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Smallest fraction of samples that must map back into the domain.
pub const MIN_OVERLAP: f64 = 0.01;
/// Rejected minima within this factor of `tol` make the verdict inconclusive.
pub const INCONCLUSIVE_FACTOR: f64 = 100.0;
/// A rejected minimum only counts as near when at least this fraction of the
/// samples overlaps; mirrors hugging the boundary barely move anything.
pub const INCONCLUSIVE_MIN_OVERLAP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsometryKind {
    Translation,
    PointReflection,
    HyperplaneReflection,
    General,
}

/// `κ(x) = a + O x` with `O` orthogonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsometryCandidate {
    pub translation: Vec<f64>,
    /// Row-major rows of `O`.
    pub orthogonal: Vec<Vec<f64>>,
    pub kind: IsometryKind,
}

impl IsometryCandidate {
    pub fn new(translation: Vec<f64>, orthogonal: Vec<Vec<f64>>, kind: IsometryKind) -> Result<Self> {
        let d = translation.len();
        if d == 0 || orthogonal.len() != d || orthogonal.iter().any(|r| r.len() != d) {
            return Err(Error::param("isometry needs a d-vector and a d×d matrix"));
        }
        if translation.iter().chain(orthogonal.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::param("isometry entries must be finite"));
        }
        let mut worst = 0.0f64;
        let mut identity = true;
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| orthogonal[k][i] * orthogonal[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
                identity &= orthogonal[i][j] == target;
            }
        }
        if worst > ORTHO_TOL {
            return Err(Error::param(format!("matrix is not orthogonal (‖OᵀO − I‖ = {worst:e})")));
        }
        if identity && translation.iter().all(|v| *v == 0.0) {
            return Err(Error::param("the identity is not a candidate symmetry"));
        }
        Ok(IsometryCandidate { translation, orthogonal, kind })
    }

    pub fn translation(a: Vec<f64>) -> Result<Self> {
        let d = a.len();
        Self::new(a, identity(d), IsometryKind::Translation)
    }

    /// `x ↦ 2c − x`.
    pub fn point_reflection(center: &[f64]) -> Result<Self> {
        let d = center.len();
        let mut o = identity(d);
        for (i, row) in o.iter_mut().enumerate() {
            row[i] = -1.0;
        }
        Self::new(center.iter().map(|c| 2.0 * c).collect(), o, IsometryKind::PointReflection)
    }

    /// `ρ(x) = x − 2(⟨n, x⟩ − α) n`; `normal` is normalised here.
    pub fn hyperplane_reflection(normal: &[f64], alpha: f64) -> Result<Self> {
        let len = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(len > 0.0) || !alpha.is_finite() {
            return Err(Error::param("reflection needs a nonzero normal and a finite offset"));
        }
        let n: Vec<f64> = normal.iter().map(|v| v / len).collect();
        let d = n.len();
        let o = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 } - 2.0 * n[i] * n[j]).collect())
            .collect();
        let kind = if d == 1 { IsometryKind::PointReflection } else { IsometryKind::HyperplaneReflection };
        Self::new(n.iter().map(|v| 2.0 * alpha * v).collect(), o, kind)
    }

    /// `x ↦ (x_{perm[0]}, …, x_{perm[d−1]})`. A transposition is the
    /// reflection across `x_i = x_j` and is tagged as such.
    pub fn permutation(perm: &[usize]) -> Result<Self> {
        let d = perm.len();
        let mut seen = vec![false; d];
        for &p in perm {
            if p >= d || std::mem::replace(&mut seen[p], true) {
                return Err(Error::param(format!("{perm:?} is not a permutation")));
            }
        }
        let o: Vec<Vec<f64>> = perm.iter().map(|&p| (0..d).map(|j| if j == p { 1.0 } else { 0.0 }).collect()).collect();
        let moved = perm.iter().enumerate().filter(|(i, p)| *i != **p).count();
        let kind = if moved == 2 { IsometryKind::HyperplaneReflection } else { IsometryKind::General };
        Self::new(vec![0.0; d], o, kind)
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.translation[i] + self.orthogonal[i].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.apply_into(x, &mut out);
        out
    }

    /// `κ⁻¹(x) = Oᵀx − Oᵀa`.
    pub fn inverse(&self) -> Self {
        let d = self.dim();
        let ot: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| self.orthogonal[j][i]).collect()).collect();
        let translation = ot.iter().map(|row| -row.iter().zip(&self.translation).map(|(o, a)| o * a).sum::<f64>()).collect();
        IsometryCandidate { translation, orthogonal: ot, kind: self.kind }
    }

    /// `(n, α)` of a reflection `I − 2nnᵀ`, with the sign of `n` fixed so its
    /// first nonzero component is positive.
    pub fn normal_offset(&self) -> Option<(Vec<f64>, f64)> {
        let d = self.dim();
        // I − O = 2nnᵀ; take the column with the largest diagonal entry
        let k = (0..d).max_by(|&i, &j| (1.0 - self.orthogonal[i][i]).total_cmp(&(1.0 - self.orthogonal[j][j])))?;
        let dkk = 1.0 - self.orthogonal[k][k];
        if !(dkk > 1e-12) {
            return None;
        }
        let scale = (2.0 * dkk).sqrt();
        let mut n: Vec<f64> = (0..d).map(|i| ((if i == k { 1.0 } else { 0.0 }) - self.orthogonal[i][k]) / scale).collect();
        if n.iter().find(|v| v.abs() > 1e-12).is_some_and(|v| *v < 0.0) {
            n.iter_mut().for_each(|v| *v = -*v);
        }
        let alpha = n.iter().zip(&self.translation).map(|(a, b)| a * b).sum::<f64>() / 2.0;
        Some((n, alpha))
    }
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn check_domain(domain: &[(f64, f64)], d: usize) -> Result<()> {
    if domain.len() != d || domain.iter().any(|(lo, hi)| !(lo < hi && lo.is_finite() && hi.is_finite())) {
        return Err(Error::param(format!("domain must be {d} finite nondegenerate intervals")));
    }
    Ok(())
}

fn inside(domain: &[(f64, f64)], x: &[f64]) -> bool {
    domain.iter().zip(x).all(|((lo, hi), v)| lo <= v && v <= hi)
}

fn uniform_points(domain: &[(f64, f64)], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut s = rng::stream(seed);
    (0..n).map(|_| domain.iter().map(|&(lo, hi)| lo + (hi - lo) * s.random::<f64>()).collect()).collect()
}

/// Sums behind a residual estimate.
#[derive(Debug, Clone, Copy, Default)]
struct PairSums {
    diff: f64,
    norm: f64,
    pairs: usize,
}

impl PairSums {
    fn residual(&self) -> f64 {
        if self.norm > 0.0 {
            (self.diff / self.norm).sqrt()
        } else if self.diff > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

/// Accumulates the pairs `(x, κx)` for samples `x` with `κx` inside, and
/// `(κ⁻¹x, x)` for samples with `κ⁻¹x` inside. Both halves sample the same
/// set uniformly, and the pair set for `κ⁻¹` is the same as for `κ`.
fn pair_sums(h: &ObservationMap, kappa: &IsometryCandidate, inv: &IsometryCandidate, domain: &[(f64, f64)], points: &[Vec<f64>]) -> PairSums {
    let (d, e) = (h.dim_in(), h.dim_out());
    let mut y = vec![0.0; d];
    let (mut hx, mut hy) = (vec![0.0; e], vec![0.0; e]);
    let mut sums = PairSums::default();
    for x in points {
        h.eval_into(x, &mut hx);
        for map in [kappa, inv] {
            map.apply_into(x, &mut y);
            if !inside(domain, &y) {
                continue;
            }
            h.eval_into(&y, &mut hy);
            for (a, b) in hx.iter().zip(&hy) {
                sums.diff += (a - b) * (a - b);
                sums.norm += 0.5 * (a * a + b * b);
            }
            sums.pairs += 1;
        }
    }
    sums
}

/// Relative RMS of `h∘κ − h` over uniform samples of the domain, and the
/// fraction of samples whose image stays inside.
///
/// Samples are paired both as `(x, κx)` and `(κ⁻¹x, x)`; the normalisation
/// is the RMS of `‖h‖` over both ends of each pair. This makes the estimate
/// the same for `κ` and `κ⁻¹` on every sample set.
pub fn symmetry_residual(
    h: &ObservationMap,
    kappa: &IsometryCandidate,
    domain: &[(f64, f64)],
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_domain(domain, h.dim_in())?;
    if kappa.dim() != h.dim_in() {
        return Err(Error::param("isometry dimension does not match the map"));
    }
    if n_samples < 100 {
        return Err(Error::param("need at least 100 samples"));
    }
    let points = uniform_points(domain, n_samples, seed);
    let sums = pair_sums(h, kappa, &kappa.inverse(), domain, &points);
    let fraction = sums.pairs as f64 / (2 * n_samples) as f64;
    if fraction < MIN_OVERLAP {
        return Err(Error::InsufficientOverlap { fraction });
    }
    Ok((sums.residual(), fraction))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetryVerdict {
    NoSymmetryFound,
    Inconclusive,
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    #[serde(flatten)]
    pub candidate: IsometryCandidate,
    pub residual: f64,
    pub inside_fraction: f64,
}

/// A candidate that holds on a sub-box of the search domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalHit {
    /// 1, 2, 3 for sub-boxes of half, quarter and eighth side length.
    pub scale: usize,
    pub window: Vec<(f64, f64)>,
    #[serde(flatten)]
    pub entry: CandidateEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryReport {
    /// Accepted candidates, ascending by residual.
    pub candidates: Vec<CandidateEntry>,
    pub verdict: SymmetryVerdict,
    pub domain: Vec<(f64, f64)>,
    pub samples: usize,
    pub seed: u64,
    pub tol: f64,
    /// Smallest-residual local minimum that was rejected.
    pub nearest_rejected: Option<CandidateEntry>,
    /// Hits on sub-boxes, kept apart from the global candidates.
    pub local: Vec<LocalHit>,
    pub note: String,
}

impl SymmetryReport {
    pub fn new(domain: Vec<(f64, f64)>, samples: usize, seed: u64, tol: f64) -> Self {
        SymmetryReport {
            candidates: Vec::new(),
            verdict: SymmetryVerdict::NoSymmetryFound,
            domain,
            samples,
            seed,
            tol,
            nearest_rejected: None,
            local: Vec::new(),
            note: "sampling evidence, not a proof".into(),
        }
    }

    /// Records a searched candidate. The verdict never moves down:
    /// no_symmetry_found → inconclusive → symmetric.
    pub fn add_candidate(&mut self, entry: CandidateEntry) {
        if entry.residual <= self.tol {
            let at = self.candidates.partition_point(|c| c.residual <= entry.residual);
            self.candidates.insert(at, entry);
            self.verdict = SymmetryVerdict::Symmetric;
            return;
        }
        if entry.residual <= INCONCLUSIVE_FACTOR * self.tol && entry.inside_fraction >= INCONCLUSIVE_MIN_OVERLAP {
            self.verdict = self.verdict.max(SymmetryVerdict::Inconclusive);
        }
        if self.nearest_rejected.as_ref().is_none_or(|c| entry.residual < c.residual) {
            self.nearest_rejected = Some(entry);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Residual of `x ↦ x + p` on an evenly spaced grid of the overlap.
fn translation_residual(h: &(impl Fn(f64) -> f64 + ?Sized), lo: f64, hi: f64, p: f64, m: usize) -> f64 {
    let span = hi - lo - p.abs();
    if !(span > 0.0) {
        return f64::INFINITY;
    }
    let start = if p >= 0.0 { lo } else { lo - p };
    let mut sums = PairSums::default();
    for i in 0..m {
        let x = start + span * i as f64 / (m - 1) as f64;
        let (a, b) = (h(x), h(x + p));
        sums.diff += (a - b) * (a - b);
        sums.norm += 0.5 * (a * a + b * b);
    }
    sums.residual()
}

/// Residual of `x ↦ 2c − x` on an evenly spaced grid of the overlap.
fn evenness_residual(h: &(impl Fn(f64) -> f64 + ?Sized), lo: f64, hi: f64, c: f64, m: usize) -> f64 {
    let r = (c - lo).min(hi - c);
    if !(r > 0.0) {
        return f64::INFINITY;
    }
    let mut sums = PairSums::default();
    for i in 0..m {
        let t = r * i as f64 / (m - 1) as f64;
        let (a, b) = (h(c + t), h(c - t));
        sums.diff += (a - b) * (a - b);
        sums.norm += 0.5 * (a * a + b * b);
    }
    sums.residual()
}

/// Smallest overlap, as a fraction of the interval, that a 1-D candidate must keep.
const MIN_OVERLAP_1D: f64 = 0.1;
/// Autocorrelation peaks polished in the period search.
const MAX_PERIOD_PEAKS: usize = 10;
/// Centres scanned in the reflection search.
const CENTER_SCAN: usize = 400;

/// Local minima of `f` over `grid`, polished by Brent's method on `f²`.
fn polished_minima(f: &dyn Fn(f64) -> f64, grid: &[f64]) -> Vec<(f64, f64)> {
    let vals: Vec<f64> = grid.iter().map(|x| f(*x)).collect();
    let last = grid.len() - 1;
    let mut out = Vec::new();
    for i in 1..last {
        if !(vals[i].is_finite() && vals[i] <= vals[i - 1] && vals[i] < vals[i + 1]) {
            continue;
        }
        let (x, _) = brent_min(|x| f(x).powi(2), grid[i - 1], grid[i + 1], 1e-13, 500);
        out.push((x, f(x)));
    }
    out
}

/// Periods and reflection centres of a function of one variable.
///
/// Periods come from peaks of the autocorrelation of `h` sampled at `grid`
/// points; reflection centres from a scan of the evenness residual. Both are
/// polished by Brent's method on the squared residual, which is evaluated on
/// an evenly spaced grid of the overlap. A local scan at three window sizes
/// records centres that hold only on part of the interval.
pub fn detect_symmetries_1d(
    h: impl Fn(f64) -> f64 + Sync,
    domain: (f64, f64),
    grid: usize,
    tol: f64,
) -> Result<SymmetryReport> {
    let (lo, hi) = domain;
    check_domain(&[domain], 1)?;
    if grid < 1000 {
        return Err(Error::param("grid must have at least 1000 points"));
    }
    if !(tol > 0.0) {
        return Err(Error::param("tol must be positive"));
    }
    let len = hi - lo;
    let dx = len / (grid - 1) as f64;
    let ys: Vec<f64> = (0..grid).map(|i| h(lo + dx * i as f64)).collect();
    if ys.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("map is not finite on the grid"));
    }
    let mut report = SymmetryReport::new(vec![domain], grid, 0, tol);

    let t_res = |p: f64| translation_residual(&h, lo, hi, p, grid);
    let max_lag = ((1.0 - MIN_OVERLAP_1D) * (grid - 1) as f64) as usize;
    for lag in period_peaks(&ys, max_lag) {
        let p0 = lag as f64 * dx;
        let (p, _) = brent_min(|p| t_res(p).powi(2), p0 - 3.0 * dx, p0 + 3.0 * dx, 1e-13, 500);
        report.add_candidate(CandidateEntry {
            candidate: IsometryCandidate::translation(vec![p])?,
            residual: t_res(p),
            inside_fraction: 1.0 - p / len,
        });
    }

    let e_res = |c: f64| evenness_residual(&h, lo, hi, c, grid / 2);
    let margin = 0.5 * MIN_OVERLAP_1D * len;
    let centers: Vec<f64> = (0..=CENTER_SCAN).map(|i| lo + margin + (len - 2.0 * margin) * i as f64 / CENTER_SCAN as f64).collect();
    for (c, r) in polished_minima(&e_res, &centers) {
        report.add_candidate(CandidateEntry {
            candidate: IsometryCandidate::point_reflection(&[c])?,
            residual: r,
            inside_fraction: 2.0 * (c - lo).min(hi - c) / len,
        });
    }
    report.local = local_centers_1d(&h, domain, tol)?;
    Ok(report)
}

/// Lags of autocorrelation peaks of the centred samples, strongest first.
fn period_peaks(ys: &[f64], max_lag: usize) -> Vec<usize> {
    let n = ys.len();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let z: Vec<f64> = ys.iter().map(|y| y - mean).collect();
    let var = z.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(var > 0.0) {
        return Vec::new();
    }
    let ac: Vec<f64> = (0..=max_lag.min(n - 2))
        .map(|k| z[..n - k].iter().zip(&z[k..]).map(|(a, b)| a * b).sum::<f64>() / ((n - k) as f64 * var))
        .collect();
    let mut peaks: Vec<(usize, f64)> = (2..ac.len().saturating_sub(1))
        .filter(|&k| ac[k] > 0.5 && ac[k] >= ac[k - 1] && ac[k] > ac[k + 1])
        .map(|k| (k, ac[k]))
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.into_iter().take(MAX_PERIOD_PEAKS).map(|p| p.0).collect()
}

/// Points per window in the local scans.
const LOCAL_POINTS: usize = 200;
/// Centres scanned per window in the local 1-D scan.
const LOCAL_CENTERS: usize = 100;

fn local_centers_1d(h: &(impl Fn(f64) -> f64 + Sync), (lo, hi): (f64, f64), tol: f64) -> Result<Vec<LocalHit>> {
    let mut hits = Vec::new();
    for scale in 1..=3usize {
        let width = (hi - lo) / (1 << scale) as f64;
        let windows = (1 << (scale + 1)) - 1;
        for k in 0..windows {
            let wlo = lo + 0.5 * width * k as f64;
            let whi = wlo + width;
            let e_res = |c: f64| evenness_residual(h, wlo, whi, c, LOCAL_POINTS);
            let margin = 0.5 * MIN_OVERLAP_1D * width;
            let centers: Vec<f64> =
                (0..=LOCAL_CENTERS).map(|i| wlo + margin + (width - 2.0 * margin) * i as f64 / LOCAL_CENTERS as f64).collect();
            for (c, r) in polished_minima(&e_res, &centers) {
                if r <= tol {
                    hits.push(LocalHit {
                        scale,
                        window: vec![(wlo, whi)],
                        entry: CandidateEntry {
                            candidate: IsometryCandidate::point_reflection(&[c])?,
                            residual: r,
                            inside_fraction: 2.0 * (c - wlo).min(whi - c) / width,
                        },
                    });
                }
            }
        }
    }
    Ok(hits)
}

/// Samples used inside the reflection search; the report re-evaluates
/// accepted minima on a fresh set four times larger.
pub const SEARCH_SAMPLES: usize = 1000;
/// Largest dimension searched by [`detect_reflections_nd`].
pub const MAX_SEARCH_DIM: usize = 6;

/// Reflection `(n, α)` from search parameters `(v, α)` with `n = v/‖v‖`.
fn reflection_from(params: &[f64]) -> Option<IsometryCandidate> {
    let d = params.len() - 1;
    IsometryCandidate::hyperplane_reflection(&params[..d], params[d]).ok()
}

/// Hyperplane reflections leaving `h` invariant on `domain`.
///
/// Starts are every coordinate transposition, every coordinate-axis
/// reflection through the box centre, and `restarts` random `(n, α)`. Each
/// start is minimised by Nelder–Mead on the squared residual over a fixed
/// sample set, then refined by Levenberg–Marquardt on the residual vector.
/// Distinct minima are re-evaluated on fresh samples and recorded; the
/// nearest rejected one is also checked on sub-boxes at three scales.
pub fn detect_reflections_nd(
    h: &ObservationMap,
    domain: &[(f64, f64)],
    restarts: usize,
    tol: f64,
    seed: u64,
) -> Result<SymmetryReport> {
    let d = h.dim_in();
    check_domain(domain, d)?;
    if d > MAX_SEARCH_DIM {
        return Err(Error::param(format!("search dimension {d} exceeds {MAX_SEARCH_DIM}")));
    }
    if restarts < 10 {
        return Err(Error::param("need at least 10 restarts"));
    }
    if !(tol > 0.0) {
        return Err(Error::param("tol must be positive"));
    }
    let points = uniform_points(domain, SEARCH_SAMPLES, seed);
    let center: Vec<f64> = domain.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    let mut starts: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            let mut v = vec![0.0; d];
            v[i] = 1.0;
            v[j] = -1.0;
            let alpha = (center[i] - center[j]) / 2f64.sqrt();
            starts.push(v.into_iter().map(|x| x / 2f64.sqrt()).chain([alpha]).collect());
        }
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        starts.push(v.into_iter().chain([center[i]]).collect());
    }
    let mut s = rng::stream(rng::derive_seed(seed, 1));
    for _ in 0..restarts {
        let v: Vec<f64> = (0..d).map(|_| s.sample(StandardNormal)).collect();
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let n: Vec<f64> = v.iter().map(|x| x / len).collect();
        let p: Vec<f64> = domain.iter().map(|&(lo, hi)| lo + (hi - lo) * s.random::<f64>()).collect();
        let alpha = n.iter().zip(&p).map(|(a, b)| a * b).sum();
        starts.push(n.into_iter().chain([alpha]).collect());
    }
    let exact = starts.len() - restarts;
    let objective = |params: &[f64]| -> f64 {
        let Some(k) = reflection_from(params) else { return f64::INFINITY };
        let sums = pair_sums(h, &k, &k, domain, &points);
        if (sums.pairs as f64) < MIN_OVERLAP * (2 * points.len()) as f64 {
            return f64::INFINITY;
        }
        sums.residual().powi(2)
    };
    let minima: Vec<Vec<f64>> = starts
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            // the structured starts are exact candidates in their own right
            let mut best = x0.clone();
            if i >= exact || objective(x0) > 0.0 {
                let (x, f) = nelder_mead(&objective, x0, 0.1, 1e-15, 400 * (d + 1));
                if f < objective(&best) {
                    best = x;
                }
                best = refine_reflection(h, domain, &points, best);
            }
            best
        })
        .collect();

    let mut report = SymmetryReport::new(domain.to_vec(), 4 * SEARCH_SAMPLES, seed, tol);
    let mut seen: Vec<(Vec<f64>, f64)> = Vec::new();
    for params in minima {
        let Some(k) = reflection_from(&params) else { continue };
        let Some((n, alpha)) = k.normal_offset() else { continue };
        if seen.iter().any(|(m, a)| (a - alpha).abs() <= 1e-6 && m.iter().zip(&n).all(|(x, y)| (x - y).abs() <= 1e-6)) {
            continue;
        }
        seen.push((n, alpha));
        match symmetry_residual(h, &k, domain, 4 * SEARCH_SAMPLES, rng::derive_seed(seed, 2)) {
            Ok((residual, inside_fraction)) => report.add_candidate(CandidateEntry { candidate: k, residual, inside_fraction }),
            Err(Error::InsufficientOverlap { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if let Some(near) = report.nearest_rejected.clone() {
        report.local = windowed_residuals(h, &near.candidate, domain, 4 * SEARCH_SAMPLES / 10, rng::derive_seed(seed, 3), tol)?;
    }
    Ok(report)
}

/// Levenberg–Marquardt on `h(ρx_i) − h(x_i)` over the samples kept at the
/// start, with a central-difference Jacobian in `(v, α)`.
fn refine_reflection(h: &ObservationMap, domain: &[(f64, f64)], points: &[Vec<f64>], mut params: Vec<f64>) -> Vec<f64> {
    let Some(k0) = reflection_from(&params) else { return params };
    let kept: Vec<&Vec<f64>> = points.iter().filter(|x| inside(domain, &k0.apply(x))).collect();
    if kept.is_empty() {
        return params;
    }
    let e = h.dim_out();
    let base: Vec<Vec<f64>> = kept.iter().map(|x| h.eval(x)).collect();
    let scale = base.iter().flatten().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let resid = |p: &[f64]| -> Option<DVector<f64>> {
        let k = reflection_from(p)?;
        let mut r = DVector::zeros(kept.len() * e);
        let mut hy = vec![0.0; e];
        for (i, x) in kept.iter().enumerate() {
            h.eval_into(&k.apply(x), &mut hy);
            for c in 0..e {
                r[i * e + c] = (hy[c] - base[i][c]) / scale;
            }
        }
        Some(r)
    };
    let Some(mut r) = resid(&params) else { return params };
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let np = params.len();
    for _ in 0..50 {
        if cost == 0.0 {
            break;
        }
        let mut jac = DMatrix::zeros(r.len(), np);
        for j in 0..np {
            let step = 1e-7 * params[j].abs().max(1.0);
            let mut pp = params.clone();
            pp[j] += step;
            let mut pm = params.clone();
            pm[j] -= step;
            let (Some(rp), Some(rm)) = (resid(&pp), resid(&pm)) else { return params };
            jac.set_column(j, &((rp - rm) / (2.0 * step)));
        }
        let jt = jac.transpose();
        let mut lhs = &jt * &jac;
        for j in 0..np {
            lhs[(j, j)] *= 1.0 + lambda;
        }
        let Ok(step) = lhs.svd(true, true).solve(&(-(&jt * &r)), 1e-14) else { break };
        let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p + s).collect();
        match resid(&trial) {
            Some(tr) if tr.norm_squared() < cost => {
                cost = tr.norm_squared();
                r = tr;
                // keep v on the unit sphere
                let len = trial[..np - 1].iter().map(|v| v * v).sum::<f64>().sqrt();
                params = trial[..np - 1].iter().map(|v| v / len).chain([trial[np - 1]]).collect();
                lambda = (lambda * 0.3).max(1e-12);
                if step.amax() < 1e-15 {
                    break;
                }
            }
            _ => {
                lambda *= 10.0;
                if lambda > 1e10 {
                    break;
                }
            }
        }
    }
    params
}

/// Most sub-boxes evaluated per scale by [`windowed_residuals`].
pub const MAX_WINDOWS: usize = 64;

/// Residual of `kappa` on sliding sub-boxes with sides 1/2, 1/4 and 1/8 of
/// the domain, stepped by half a side. When a scale has more than
/// [`MAX_WINDOWS`] boxes, that many are drawn at random. Boxes where too few
/// samples map back inside are skipped; hits are those at or below `tol`.
pub fn windowed_residuals(
    h: &ObservationMap,
    kappa: &IsometryCandidate,
    domain: &[(f64, f64)],
    n_samples: usize,
    seed: u64,
    tol: f64,
) -> Result<Vec<LocalHit>> {
    let d = h.dim_in();
    check_domain(domain, d)?;
    let mut hits = Vec::new();
    let mut pick = rng::stream(seed);
    for scale in 1..=3usize {
        let per_axis = (1usize << (scale + 1)) - 1;
        let total = per_axis.checked_pow(d as u32).unwrap_or(usize::MAX);
        let boxes: Vec<Vec<usize>> = if total <= MAX_WINDOWS {
            (0..total)
                .map(|mut code| {
                    (0..d)
                        .map(|_| {
                            let k = code % per_axis;
                            code /= per_axis;
                            k
                        })
                        .collect()
                })
                .collect()
        } else {
            (0..MAX_WINDOWS).map(|_| (0..d).map(|_| pick.random_range(0..per_axis)).collect()).collect()
        };
        for (b, idx) in boxes.iter().enumerate() {
            let window: Vec<(f64, f64)> = domain
                .iter()
                .zip(idx)
                .map(|(&(lo, hi), &k)| {
                    let side = (hi - lo) / (1 << scale) as f64;
                    let start = lo + 0.5 * side * k as f64;
                    (start, start + side)
                })
                .collect();
            let sub_seed = rng::derive_seed(seed, (scale * 1_000_000 + b) as u64);
            match symmetry_residual(h, kappa, &window, n_samples.max(100), sub_seed) {
                Ok((residual, inside_fraction)) if residual <= tol => hits.push(LocalHit {
                    scale,
                    window,
                    entry: CandidateEntry { candidate: kappa.clone(), residual, inside_fraction },
                }),
                Ok(_) | Err(Error::InsufficientOverlap { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(hits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsymmetryVerdict {
    TrackableEvidence,
    Obstructed,
    Inconclusive,
}

impl fmt::Display for AsymmetryVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AsymmetryVerdict::TrackableEvidence => "trackable (evidence)",
            AsymmetryVerdict::Obstructed => "obstructed (symmetry detected)",
            AsymmetryVerdict::Inconclusive => "inconclusive",
        })
    }
}

/// Smallest Jacobian singular value accepted at a rank witness.
pub const RANK_TOL: f64 = 1e-6;

/// Trackability verdict from a symmetry report.
///
/// A detected symmetry means obstructed. Trackable needs an analytic map, no
/// symmetry found, no local hits, and a rank witness where the Jacobian of
/// `h` has full column rank. Anything else is inconclusive. The result is
/// numerical evidence only.
pub fn asymmetry_verdict(
    h: &ObservationMap,
    analytic: bool,
    report: &SymmetryReport,
    rank_witness: Option<&[f64]>,
) -> Result<AsymmetryVerdict> {
    if analytic && rank_witness.is_none() {
        return Err(Error::param("an analytic map needs a rank witness"));
    }
    if let Some(x) = rank_witness {
        let (d, e) = (h.dim_in(), h.dim_out());
        if x.len() != d {
            return Err(Error::param("rank witness has the wrong dimension"));
        }
        let jac = DMatrix::from_row_slice(e, d, &h.jacobian(x));
        let sv = jac.singular_values();
        let smallest = if e < d { 0.0 } else { sv.iter().copied().fold(f64::INFINITY, f64::min) };
        if !(smallest > RANK_TOL) {
            return Err(Error::param(format!("Jacobian at the rank witness is degenerate (smallest singular value {smallest:e})")));
        }
    }
    Ok(match report.verdict {
        SymmetryVerdict::Symmetric => AsymmetryVerdict::Obstructed,
        SymmetryVerdict::NoSymmetryFound if analytic && report.local.is_empty() => AsymmetryVerdict::TrackableEvidence,
        _ => AsymmetryVerdict::Inconclusive,
    })
}
