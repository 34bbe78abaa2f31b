//! Measurement maps and their structural metadata.
//!
//! Three families are provided: generic vector maps ([`ObservationMap`]),
//! piecewise-monotone scalar maps with declared critical points and the
//! left/right branch inverses around them ([`PiecewiseMonotoneMap`]), and the
//! exponential-sum family `h(x) = Σ exp(a_j x_j)` ([`ExpSumMap`]) together with
//! the coefficient admissibility check its reconstruction relies on.

use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::roots;
use crate::rng;
use crate::sdesim::{read_grid_csv, write_grid_csv, Path, ScalarFn};

pub type VecFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Generic,
    Piecewise1d,
    Expsum,
    Example2d,
}

/// A map `h: R^d → R^e` on a domain box, with an optional analytic Jacobian.
#[derive(Clone)]
pub struct ObservationMap {
    dim_in: usize,
    dim_out: usize,
    domain: Vec<(f64, f64)>,
    eval: VecFn,
    grad: Option<VecFn>,
    kind: MapKind,
}

impl fmt::Debug for ObservationMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObservationMap")
            .field("dim_in", &self.dim_in)
            .field("dim_out", &self.dim_out)
            .field("kind", &self.kind)
            .field("domain", &self.domain)
            .field("analytic_grad", &self.grad.is_some())
            .finish()
    }
}

const GRAD_CHECK_POINTS: usize = 100;
const GRAD_CHECK_SEED: u64 = 0x6772_6164;

impl ObservationMap {
    /// Wraps `eval` (writing `dim_out` values) and checks that it is finite on
    /// a sample of the domain box.
    pub fn new(
        dim_in: usize,
        dim_out: usize,
        domain: Vec<(f64, f64)>,
        eval: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim_in == 0 || dim_out == 0 {
            return Err(Error::param("map dimensions must be positive"));
        }
        if domain.len() != dim_in || domain.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::param(format!("domain must be {dim_in} nondegenerate intervals")));
        }
        let map = ObservationMap { dim_in, dim_out, domain, eval: Arc::new(eval), grad: None, kind: MapKind::Generic };
        let mut out = vec![0.0; dim_out];
        for x in map.sample_points(GRAD_CHECK_POINTS, GRAD_CHECK_SEED) {
            map.eval_into(&x, &mut out);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::param(format!("map is not finite at {x:?}")));
            }
        }
        Ok(map)
    }

    /// Attaches an analytic Jacobian (row-major `e × d`) after checking it
    /// against central differences at 100 random domain points.
    pub fn with_grad(mut self, grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Result<Self> {
        let grad: VecFn = Arc::new(grad);
        let mut analytic = vec![0.0; self.dim_in * self.dim_out];
        for x in self.sample_points(GRAD_CHECK_POINTS, GRAD_CHECK_SEED ^ 1) {
            grad(&x, &mut analytic);
            let numeric = self.fd_jacobian(&x);
            for (a, n) in analytic.iter().zip(&numeric) {
                if (a - n).abs() > 1e-5 * (a.abs() + n.abs()) + 1e-8 {
                    return Err(Error::param(format!(
                        "analytic Jacobian {a} disagrees with finite differences {n} at {x:?}"
                    )));
                }
            }
        }
        self.grad = Some(grad);
        Ok(self)
    }

    pub fn with_kind(mut self, kind: MapKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn identity(domain: Vec<(f64, f64)>) -> Result<Self> {
        let d = domain.len();
        Self::new(d, d, domain, |x, out| out.copy_from_slice(x))?.with_grad(move |_, j| {
            j.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..d {
                j[i * d + i] = 1.0;
            }
        })
    }

    /// Scalar map on an interval.
    pub fn scalar(h: impl Fn(f64) -> f64 + Send + Sync + 'static, lo: f64, hi: f64) -> Result<Self> {
        Self::new(1, 1, vec![(lo, hi)], move |x, out| out[0] = h(x[0]))
    }

    /// `h(x₁, x₂) = exp(x₁) − exp(x₂)`, whose quadratic-variation rate is
    /// `q = exp(2x₁) + exp(2x₂)`.
    pub fn example2d(domain: Vec<(f64, f64)>) -> Result<Self> {
        Ok(Self::new(2, 1, domain, |x, out| out[0] = x[0].exp() - x[1].exp())?
            .with_grad(|x, j| {
                j[0] = x[0].exp();
                j[1] = -x[1].exp();
            })?
            .with_kind(MapKind::Example2d))
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn domain(&self) -> &[(f64, f64)] {
        &self.domain
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_out];
        self.eval_into(x, &mut out);
        out
    }

    /// Row-major `e × d` Jacobian: analytic when available, else central differences.
    pub fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        match &self.grad {
            Some(g) => {
                let mut j = vec![0.0; self.dim_in * self.dim_out];
                g(x, &mut j);
                j
            }
            None => self.fd_jacobian(x),
        }
    }

    fn fd_jacobian(&self, x: &[f64]) -> Vec<f64> {
        let (d, e) = (self.dim_in, self.dim_out);
        let mut j = vec![0.0; d * e];
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; e];
        let mut fm = vec![0.0; e];
        for i in 0..d {
            let h = 1e-6 * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            self.eval_into(&xp, &mut fp);
            xp[i] = x[i] - h;
            self.eval_into(&xp, &mut fm);
            xp[i] = x[i];
            for r in 0..e {
                j[r * d + i] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        j
    }

    /// Uniform points in the domain box from a seeded stream.
    pub fn sample_points(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut s = rng::stream(seed);
        (0..n)
            .map(|_| self.domain.iter().map(|&(lo, hi)| lo + (hi - lo) * s.random::<f64>()).collect())
            .collect()
    }
}

/// Observations `Y_k = h(X_k)` on the grid of the hidden path. The hidden
/// states themselves are not carried along.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsPath {
    pub times: Vec<f64>,
    /// Row-major `len × dim` values.
    pub values: Vec<f64>,
    pub dim: usize,
    pub dt: f64,
}

impl ObsPath {
    /// A scalar observation path on the grid `k·dt`.
    pub fn from_scalar(values: Vec<f64>, dt: f64) -> Self {
        let times = (0..values.len()).map(|k| k as f64 * dt).collect();
        ObsPath { times, values, dim: 1, dt }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn component(&self, i: usize) -> ObsPath {
        ObsPath {
            times: self.times.clone(),
            values: self.values.iter().skip(i).step_by(self.dim).copied().collect(),
            dim: 1,
            dt: self.dt,
        }
    }

    /// Pointwise `a·self + b·other` for scalar paths on the same grid.
    pub fn combine(&self, a: f64, other: &ObsPath, b: f64) -> Result<ObsPath> {
        if self.times != other.times || self.dim != other.dim {
            return Err(Error::param("observation paths are on different grids"));
        }
        Ok(ObsPath {
            times: self.times.clone(),
            values: self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect(),
            dim: self.dim,
            dt: self.dt,
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write_grid_csv(&mut out, "y", &self.times, &self.values, self.dim)
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<ObsPath> {
        let (times, values, dim) = read_grid_csv(input, "y")?;
        let dt = times[1] - times[0];
        Ok(ObsPath { times, values, dim, dt })
    }
}

pub fn observe(map: &ObservationMap, path: &Path) -> Result<ObsPath> {
    if map.dim_in() != path.dim {
        return Err(Error::param(format!(
            "map expects dimension {}, path has dimension {}",
            map.dim_in(),
            path.dim
        )));
    }
    let e = map.dim_out();
    let mut values = vec![0.0; path.len() * e];
    for k in 0..path.len() {
        map.eval_into(path.state(k), &mut values[k * e..(k + 1) * e]);
    }
    Ok(ObsPath { times: path.times.clone(), values, dim: e, dt: path.dt })
}

/// Tolerance on `y` for the branch-inverse range check.
pub const RANGE_TOL: f64 = 1e-9;

/// A scalar `C¹` map, strictly monotone between declared critical points.
#[derive(Clone)]
pub struct PiecewiseMonotoneMap {
    h: ScalarFn,
    hprime: ScalarFn,
    criticals: Vec<f64>,
    brackets: Vec<(f64, f64)>,
    domain: (f64, f64),
}

impl fmt::Debug for PiecewiseMonotoneMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PiecewiseMonotoneMap")
            .field("criticals", &self.criticals)
            .field("brackets", &self.brackets)
            .field("domain", &self.domain)
            .finish()
    }
}

impl PiecewiseMonotoneMap {
    /// Validates the declared critical points and builds a level bracket
    /// `(l_c, r_c)` with `h(l_c) = h(r_c)` around each.
    pub fn new(
        h: impl Fn(f64) -> f64 + Send + Sync + 'static,
        hprime: impl Fn(f64) -> f64 + Send + Sync + 'static,
        domain: (f64, f64),
        criticals: Vec<f64>,
    ) -> Result<Self> {
        let mut map = Self::unchecked(Arc::new(h), Arc::new(hprime), domain, criticals)?;
        map.brackets = (0..map.criticals.len()).map(|i| map.build_bracket(i)).collect::<Result<_>>()?;
        Ok(map)
    }

    /// Like [`PiecewiseMonotoneMap::new`] with caller-chosen brackets.
    pub fn with_brackets(
        h: impl Fn(f64) -> f64 + Send + Sync + 'static,
        hprime: impl Fn(f64) -> f64 + Send + Sync + 'static,
        domain: (f64, f64),
        criticals: Vec<f64>,
        brackets: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let mut map = Self::unchecked(Arc::new(h), Arc::new(hprime), domain, criticals)?;
        if brackets.len() != map.criticals.len() {
            return Err(Error::param("one bracket per critical point is required"));
        }
        for (i, &(l, r)) in brackets.iter().enumerate() {
            map.check_bracket(i, l, r)?;
        }
        map.brackets = brackets;
        Ok(map)
    }

    /// Polynomial `Σ coeffs[i]·xⁱ` with user-declared critical points.
    pub fn polynomial(coeffs: Vec<f64>, domain: (f64, f64), criticals: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::param("polynomial needs at least one coefficient"));
        }
        let deriv: Vec<f64> = coeffs.iter().enumerate().skip(1).map(|(i, c)| i as f64 * c).collect();
        Self::new(move |x| horner(&coeffs, x), move |x| horner(&deriv, x), domain, criticals)
    }

    pub(crate) fn from_parts(h: ScalarFn, hprime: ScalarFn, domain: (f64, f64), criticals: Vec<f64>) -> Result<Self> {
        let mut map = Self::unchecked(h, hprime, domain, criticals)?;
        map.brackets = (0..map.criticals.len()).map(|i| map.build_bracket(i)).collect::<Result<_>>()?;
        Ok(map)
    }

    fn unchecked(h: ScalarFn, hprime: ScalarFn, domain: (f64, f64), criticals: Vec<f64>) -> Result<Self> {
        if !(domain.0 < domain.1) {
            return Err(Error::param(format!("empty domain {domain:?}")));
        }
        if criticals.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::param("critical points must be strictly increasing"));
        }
        if criticals.iter().any(|&c| !(c > domain.0 && c < domain.1)) {
            return Err(Error::param("critical points must lie inside the domain"));
        }
        let map = PiecewiseMonotoneMap { h, hprime, criticals, brackets: Vec::new(), domain };
        for (i, &c) in map.criticals.iter().enumerate() {
            let d = map.hprime(c);
            if d.abs() > 1e-8 {
                return Err(Error::param(format!("h'({c}) = {d:e} is not zero")));
            }
            let (lo, hi) = map.neighbours(i);
            let eps = (1e-3f64).min(0.25 * (c - lo)).min(0.25 * (hi - c));
            let (dl, dr) = (map.hprime(c - eps), map.hprime(c + eps));
            if dl.signum() == dr.signum() {
                return Err(Error::param(format!("h' does not change sign across {c}")));
            }
        }
        for (a, b) in map.branches() {
            let mut sign = 0.0;
            for k in 1..1000 {
                let d = map.hprime(a + (b - a) * k as f64 / 1000.0);
                if d.abs() <= 1e-12 {
                    continue;
                }
                if sign == 0.0 {
                    sign = d.signum();
                } else if d.signum() != sign {
                    return Err(Error::param(format!("h is not monotone on ({a}, {b})")));
                }
            }
        }
        Ok(map)
    }

    /// Neighbouring critical points (or domain ends) of critical point `i`.
    fn neighbours(&self, i: usize) -> (f64, f64) {
        let lo = if i == 0 { self.domain.0 } else { self.criticals[i - 1] };
        let hi = self.criticals.get(i + 1).copied().unwrap_or(self.domain.1);
        (lo, hi)
    }

    fn build_bracket(&self, i: usize) -> Result<(f64, f64)> {
        let c = self.criticals[i];
        let (lo, hi) = self.neighbours(i);
        // inner sides stop halfway so adjacent brackets stay disjoint
        let left = if i == 0 { lo } else { c - 0.5 * (c - lo) };
        let right = if i + 1 == self.criticals.len() { hi } else { c + 0.5 * (hi - c) };
        let hc = self.h(c);
        let (dl, dr) = ((self.h(left) - hc).abs(), (self.h(right) - hc).abs());
        let (l, r) = if dl <= dr {
            (left, branch_inverse(self, (c, right), self.h(left))?)
        } else {
            (branch_inverse(self, (left, c), self.h(right))?, right)
        };
        self.check_bracket(i, l, r)?;
        Ok((l, r))
    }

    fn check_bracket(&self, i: usize, l: f64, r: f64) -> Result<()> {
        let c = self.criticals[i];
        if !(l < c && c < r) {
            return Err(Error::param(format!("bracket ({l}, {r}) does not contain {c}")));
        }
        let gap = (self.h(l) - self.h(r)).abs();
        if gap > 1e-10 * (1.0 + self.h(l).abs()) {
            return Err(Error::param(format!("bracket ends differ in level by {gap:e}")));
        }
        if self.criticals.iter().any(|&o| o != c && o > l && o < r) {
            return Err(Error::param(format!("bracket ({l}, {r}) contains another critical point")));
        }
        Ok(())
    }

    pub fn h(&self, x: f64) -> f64 {
        (self.h)(x)
    }

    pub fn hprime(&self, x: f64) -> f64 {
        (self.hprime)(x)
    }

    pub fn h_fn(&self) -> ScalarFn {
        self.h.clone()
    }

    pub fn hprime_fn(&self) -> ScalarFn {
        self.hprime.clone()
    }

    pub fn criticals(&self) -> &[f64] {
        &self.criticals
    }

    pub fn brackets(&self) -> &[(f64, f64)] {
        &self.brackets
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    /// The monotone pieces, left to right.
    pub fn branches(&self) -> Vec<(f64, f64)> {
        let mut ends = vec![self.domain.0];
        ends.extend_from_slice(&self.criticals);
        ends.push(self.domain.1);
        ends.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Index of the branch containing `x` (critical points belong to neither).
    pub fn branch_of(&self, x: f64) -> Option<usize> {
        if !(x >= self.domain.0 && x <= self.domain.1) || self.criticals.contains(&x) {
            return None;
        }
        Some(self.criticals.partition_point(|&c| c < x))
    }

    /// `|h(l_c) − h(c)|` for critical point `i`.
    pub fn bracket_range(&self, i: usize) -> f64 {
        (self.h(self.brackets[i].0) - self.h(self.criticals[i])).abs()
    }

    pub fn to_observation_map(&self) -> Result<ObservationMap> {
        let (h, hp) = (self.h.clone(), self.hprime.clone());
        Ok(ObservationMap::new(1, 1, vec![self.domain], move |x, out| out[0] = h(x[0]))?
            .with_grad(move |x, j| j[0] = hp(x[0]))?
            .with_kind(MapKind::Piecewise1d))
    }
}

pub(crate) fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn range_on(pmap: &PiecewiseMonotoneMap, (lo, hi): (f64, f64)) -> (f64, f64, f64, f64) {
    let (hlo, hhi) = (pmap.h(lo), pmap.h(hi));
    (hlo, hhi, hlo.min(hhi), hlo.max(hhi))
}

/// Solves `h(x) = y` for `x ∈ [lo, hi]`, where `h` is monotone on that interval.
pub fn branch_inverse(pmap: &PiecewiseMonotoneMap, interval: (f64, f64), y: f64) -> Result<f64> {
    let (lo, hi) = (interval.0.min(interval.1), interval.0.max(interval.1));
    let (hlo, hhi, ymin, ymax) = range_on(pmap, (lo, hi));
    if !(y >= ymin - RANGE_TOL) || !(y <= ymax + RANGE_TOL) {
        return Err(Error::OutOfRange { value: y, lo: ymin, hi: ymax });
    }
    let y = y.clamp(ymin, ymax);
    solve_level(pmap, lo, hi, hlo - y, hhi - y, y)
}

/// [`branch_inverse`] that first searches `hint ± radius`, falling back to the
/// whole interval when the level is not bracketed there.
pub fn branch_inverse_near(
    pmap: &PiecewiseMonotoneMap,
    interval: (f64, f64),
    y: f64,
    hint: f64,
    radius: f64,
) -> Result<f64> {
    let (lo, hi) = (interval.0.min(interval.1), interval.0.max(interval.1));
    if hint.is_finite() && radius > 0.0 {
        let a = (hint - radius).max(lo);
        let b = (hint + radius).min(hi);
        if a < b {
            let (fa, fb) = (pmap.h(a) - y, pmap.h(b) - y);
            if fa == 0.0 {
                return Ok(a);
            }
            if fb == 0.0 {
                return Ok(b);
            }
            if fa.signum() != fb.signum() {
                return solve_level(pmap, a, b, fa, fb, y);
            }
        }
    }
    branch_inverse(pmap, interval, y)
}

fn solve_level(pmap: &PiecewiseMonotoneMap, lo: f64, hi: f64, flo: f64, fhi: f64, y: f64) -> Result<f64> {
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    roots::bracketed(|x| pmap.h(x) - y, lo, hi, flo, fhi, 1e-14 * (1.0 + y.abs()))
}

/// `γ_c(x) = (g h')²(x⁻) − (g h')²(x⁺)` where `x⁻ ≤ c ≤ x⁺` are the two
/// points of the bracket of `c` sharing the level `h(x)`.
pub fn gamma_c(pmap: &PiecewiseMonotoneMap, g: impl Fn(f64) -> f64, c: f64, x: f64) -> Result<f64> {
    let (xm, xp) = aliases(pmap, c, x)?;
    let rate = |z: f64| (g(z) * pmap.hprime(z)).powi(2);
    Ok(rate(xm) - rate(xp))
}

/// The alias pair `(x⁻, x⁺)` of `x` about critical point `c`.
pub fn aliases(pmap: &PiecewiseMonotoneMap, c: f64, x: f64) -> Result<(f64, f64)> {
    let i = pmap
        .criticals
        .iter()
        .position(|&k| (k - c).abs() <= 1e-12 * (1.0 + c.abs()))
        .ok_or_else(|| Error::param(format!("{c} is not a declared critical point")))?;
    let c = pmap.criticals[i];
    let (l, r) = pmap.brackets[i];
    if !(x > l && x < r) && x != c {
        return Err(Error::param(format!("{x} outside the bracket ({l}, {r}) of {c}")));
    }
    let y = pmap.h(x);
    let xm = if x <= c { x } else { branch_inverse(pmap, (l, c), y)? };
    let xp = if x >= c { x } else { branch_inverse(pmap, (c, r), y)? };
    Ok((xm, xp))
}

/// Result of the coefficient hyperplane test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    /// `min |Σ u_j a_j⁻²|` over nonzero `u ∈ {−1,0,1}^d` up to sign.
    pub margin: f64,
    pub eps: f64,
    /// A sign pattern attaining the margin.
    pub worst_pattern: Vec<i8>,
    /// Number of patterns enumerated, `(3^d − 1)/2`.
    pub patterns: u64,
}

pub const MAX_ENUM_DIM: usize = 20;

/// Enumerates every nonzero `u ∈ {−1,0,1}^d` whose first nonzero entry is `+1`
/// and reports the smallest `|Σ u_j a_j⁻²|`; admissible iff it exceeds `eps`.
pub fn check_coefficient_condition(a: &[f64], eps: f64) -> Result<AdmissibilityReport> {
    let d = a.len();
    if d == 0 {
        return Err(Error::param("empty coefficient vector"));
    }
    if d > MAX_ENUM_DIM {
        return Err(Error::Capacity(format!("d = {d} exceeds the enumeration bound {MAX_ENUM_DIM}")));
    }
    if !(eps > 0.0) {
        return Err(Error::param("eps must be positive"));
    }
    if a.iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::param("coefficients must be finite and nonzero"));
    }
    let w: Vec<f64> = a.iter().map(|v| 1.0 / (v * v)).collect();

    struct Search<'a> {
        w: &'a [f64],
        u: Vec<i8>,
        best: f64,
        best_u: Vec<i8>,
        count: u64,
    }
    fn walk(s: &mut Search, j: usize, sum: f64, started: bool) {
        if j == s.w.len() {
            if started {
                s.count += 1;
                if sum.abs() < s.best {
                    s.best = sum.abs();
                    s.best_u.clone_from(&s.u);
                }
            }
            return;
        }
        let choices: &[i8] = if started { &[-1, 0, 1] } else { &[0, 1] };
        for &c in choices {
            s.u[j] = c;
            walk(s, j + 1, sum + c as f64 * s.w[j], started || c != 0);
        }
        s.u[j] = 0;
    }

    let mut s = Search { w: &w, u: vec![0; d], best: f64::INFINITY, best_u: vec![0; d], count: 0 };
    walk(&mut s, 0, 0.0, false);
    Ok(AdmissibilityReport {
        admissible: s.best > eps,
        margin: s.best,
        eps,
        worst_pattern: s.best_u,
        patterns: s.count,
    })
}

/// Default admissibility margin recorded with an [`ExpSumMap`].
pub const DEFAULT_ADMISSIBILITY_EPS: f64 = 1e-9;

/// `h(x) = Σ_j exp(a_j x_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpSumMap {
    a: Vec<f64>,
    inv_sq: Vec<f64>,
    bbar: f64,
    admissibility: AdmissibilityReport,
}

impl ExpSumMap {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        Self::with_eps(a, DEFAULT_ADMISSIBILITY_EPS)
    }

    pub fn with_eps(a: Vec<f64>, eps: f64) -> Result<Self> {
        let admissibility = check_coefficient_condition(&a, eps)?;
        let inv_sq: Vec<f64> = a.iter().map(|v| 1.0 / (v * v)).collect();
        let bbar = inv_sq.iter().sum();
        Ok(ExpSumMap { a, inv_sq, bbar, admissibility })
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.a
    }

    /// `(a₁⁻², …, a_d⁻²)`.
    pub fn inv_sq(&self) -> &[f64] {
        &self.inv_sq
    }

    /// `Σ a_j⁻²`.
    pub fn bbar(&self) -> f64 {
        self.bbar
    }

    pub fn admissibility(&self) -> &AdmissibilityReport {
        &self.admissibility
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.a.iter().zip(x).map(|(a, x)| (a * x).exp()).sum()
    }

    /// Positive coordinates `w_j = a_j² exp(a_j x_j)`.
    pub fn positive_coords(&self, x: &[f64]) -> Vec<f64> {
        self.a.iter().zip(x).map(|(a, x)| a * a * (a * x).exp()).collect()
    }

    /// Inverse of [`ExpSumMap::positive_coords`].
    pub fn state_from_positive(&self, w: &[f64]) -> Vec<f64> {
        self.a.iter().zip(w).map(|(a, w)| (w / (a * a)).ln() / a).collect()
    }

    pub fn to_observation_map(&self, domain: Vec<(f64, f64)>) -> Result<ObservationMap> {
        if domain.len() != self.dim() {
            return Err(Error::param("domain dimension does not match the coefficients"));
        }
        let (a1, a2) = (self.a.clone(), self.a.clone());
        Ok(ObservationMap::new(self.dim(), 1, domain, move |x, out| {
            out[0] = a1.iter().zip(x).map(|(a, x)| (a * x).exp()).sum()
        })?
        .with_grad(move |x, j| {
            for (i, (a, x)) in a2.iter().zip(x).enumerate() {
                j[i] = a * (a * x).exp();
            }
        })?
        .with_kind(MapKind::Expsum))
    }

    /// `x ↦ (h_1(x), …, h_d(x))` with `h_n = Σ_j a_j⁻² w_jⁿ`: the observables
    /// that iterated rate estimation makes available from `h = h_1`. Its
    /// Jacobian `n w_jⁿ / a_j` has full rank when the `w_j` are distinct.
    pub fn power_map(&self, domain: Vec<(f64, f64)>) -> Result<ObservationMap> {
        if domain.len() != self.dim() {
            return Err(Error::param("domain dimension does not match the coefficients"));
        }
        let d = self.dim();
        let (m1, m2) = (self.clone(), self.clone());
        Ok(ObservationMap::new(d, d, domain, move |x, out| {
            let w = m1.positive_coords(x);
            for (n, o) in out.iter_mut().enumerate() {
                *o = m1.inv_sq.iter().zip(&w).map(|(b, w)| b * w.powi(n as i32 + 1)).sum();
            }
        })?
        .with_grad(move |x, j| {
            let w = m2.positive_coords(x);
            for n in 0..d {
                for (i, (a, w)) in m2.a.iter().zip(&w).enumerate() {
                    j[n * d + i] = (n + 1) as f64 * w.powi(n as i32 + 1) / a;
                }
            }
        })?
        .with_kind(MapKind::Expsum))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdesim::simulate_bm;
    use proptest::prelude::*;

    fn cubic() -> PiecewiseMonotoneMap {
        PiecewiseMonotoneMap::polynomial(vec![0.0, 0.0, 1.0, 0.5], (-6.0, 6.0), vec![-4.0 / 3.0, 0.0]).unwrap()
    }

    fn square() -> PiecewiseMonotoneMap {
        PiecewiseMonotoneMap::polynomial(vec![0.0, 0.0, 1.0], (-3.0, 3.0), vec![0.0]).unwrap()
    }

    #[test]
    fn identity_observation_copies_states() {
        let p = simulate_bm(2, 0.1, 0.01, 5).unwrap();
        let m = ObservationMap::identity(vec![(-10.0, 10.0); 2]).unwrap();
        let o = observe(&m, &p).unwrap();
        assert_eq!(o.values, p.states);
        assert_eq!(o.times, p.times);
    }

    #[test]
    fn pointwise_square() {
        let p = Path { times: vec![0.0, 1.0, 2.0], states: vec![-1.0, 0.0, 2.0], dim: 1, dt: 1.0, seed: 0 };
        let m = ObservationMap::scalar(|x| x * x, -5.0, 5.0).unwrap();
        assert_eq!(observe(&m, &p).unwrap().values, vec![1.0, 0.0, 4.0]);
    }

    #[test]
    fn example2d_at_origin_and_dimension_check() {
        let m = ObservationMap::example2d(vec![(-3.0, 3.0); 2]).unwrap();
        assert_eq!(m.eval(&[0.0, 0.0]), vec![0.0]);
        assert_eq!(m.kind(), MapKind::Example2d);
        let p = simulate_bm(1, 0.1, 0.01, 5).unwrap();
        assert!(matches!(observe(&m, &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn wrong_gradient_is_rejected() {
        let m = ObservationMap::scalar(|x| x.sin(), -2.0, 2.0).unwrap();
        assert!(m.clone().with_grad(|x, j| j[0] = x[0].cos()).is_ok());
        assert!(m.with_grad(|x, j| j[0] = 1.01 * x[0].cos()).is_err());
    }

    #[test]
    fn branch_inverse_examples() {
        let sq = square();
        assert_eq!(branch_inverse(&sq, (0.0, 2.0), 4.0).unwrap(), 2.0);
        assert_eq!(branch_inverse(&sq, (-2.0, 0.0), 4.0).unwrap(), -2.0);
        let cu = cubic();
        let y = cu.h(0.6);
        assert!((branch_inverse(&cu, (0.0, 1.0), y).unwrap() - 0.6).abs() < 1e-9);
    }

    #[test]
    fn branch_inverse_out_of_range() {
        match branch_inverse(&square(), (0.0, 2.0), 4.5) {
            Err(Error::OutOfRange { value, lo, hi }) => {
                assert_eq!(value, 4.5);
                assert_eq!((lo, hi), (0.0, 4.0));
            }
            other => panic!("{other:?}"),
        }
        // inside the inclusive tolerance
        assert_eq!(branch_inverse(&square(), (0.0, 2.0), 4.0 + 5e-10).unwrap(), 2.0);
    }

    #[test]
    fn brackets_are_level_and_disjoint() {
        let cu = cubic();
        let b = cu.brackets();
        assert_eq!(b.len(), 2);
        for (i, &(l, r)) in b.iter().enumerate() {
            assert!(l < cu.criticals()[i] && cu.criticals()[i] < r);
            assert!((cu.h(l) - cu.h(r)).abs() <= 1e-10);
        }
        assert!(b[0].1 <= b[1].0);
    }

    #[test]
    fn invalid_critical_points() {
        let h = |x: f64| x * x;
        let hp = |x: f64| 2.0 * x;
        assert!(PiecewiseMonotoneMap::new(h, hp, (-1.0, 1.0), vec![0.1]).is_err());
        // x³ has h'(0) = 0 without a sign change
        assert!(PiecewiseMonotoneMap::new(|x| x * x * x, |x| 3.0 * x * x, (-1.0, 1.0), vec![0.0]).is_err());
        // undeclared critical point breaks monotonicity
        assert!(PiecewiseMonotoneMap::new(h, hp, (-1.0, 1.0), vec![]).is_err());
        assert!(PiecewiseMonotoneMap::with_brackets(h, hp, (-1.0, 1.0), vec![0.0], vec![(-0.5, 0.6)]).is_err());
    }

    #[test]
    fn gamma_examples() {
        let sq = square();
        for i in 0..100 {
            let x = -0.99 + 1.98 * i as f64 / 99.0;
            assert!(gamma_c(&sq, |_| 1.0, 0.0, x).unwrap().abs() <= 1e-9);
        }
        assert_eq!(gamma_c(&sq, |_| 1.0, 0.0, 0.0).unwrap(), 0.0);

        // brute-force oracle: scan for the left alias of 0.3 on a fine grid
        let cu = cubic();
        let target = 0.09 + 0.5 * 0.027;
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=200_000 {
            let x = -0.6 + 0.6 * k as f64 / 200_000.0;
            let v = (x * x + 0.5 * x * x * x - target).abs();
            if v < best.0 {
                best = (v, x);
            }
        }
        let xm = best.1;
        let hp = |x: f64| 2.0 * x + 1.5 * x * x;
        let expected = hp(xm).powi(2) - hp(0.3).powi(2);
        let got = gamma_c(&cu, |_| 1.0, 0.0, 0.3).unwrap();
        assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
        assert!(got.abs() > 1e-3);
        assert!(matches!(gamma_c(&cu, |_| 1.0, 0.0, 3.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn even_map_and_even_g_have_zero_gamma() {
        let m = PiecewiseMonotoneMap::new(|x: f64| x.cosh(), |x: f64| x.sinh(), (-2.0, 2.0), vec![0.0]).unwrap();
        let (l, r) = m.brackets()[0];
        for i in 1..100 {
            let x = l + (r - l) * i as f64 / 100.0;
            assert!(gamma_c(&m, |x: f64| 1.0 + x * x, 0.0, x).unwrap().abs() <= 1e-9);
        }
    }

    #[test]
    fn admissibility_examples() {
        let r = check_coefficient_condition(&[1.0, 1.0], 1e-9).unwrap();
        assert!(!r.admissible);
        assert_eq!(r.margin, 0.0);
        assert_eq!(r.patterns, 4);
        let r = check_coefficient_condition(&[1.0], 0.999).unwrap();
        assert!(r.admissible && r.margin == 1.0);
        // a = (1, √2): sums over (1,0),(0,1),(1,1),(1,-1) are 1, 1/2, 3/2, 1/2
        let r = check_coefficient_condition(&[1.0, 2f64.sqrt()], 1e-9).unwrap();
        assert!(r.admissible);
        assert!((r.margin - 0.5).abs() < 1e-15);
        assert!(matches!(check_coefficient_condition(&[1.0; 21], 1e-9), Err(Error::Capacity(_))));
    }

    #[test]
    fn admissibility_matches_sorted_subset_sums() {
        // independent route: the closest pair of subset sums
        let a = [1.0, 2f64.sqrt(), 3f64.sqrt(), 1.7, 0.9];
        let w: Vec<f64> = a.iter().map(|v| 1.0 / (v * v)).collect();
        let mut sums: Vec<f64> = (0..1u32 << a.len())
            .map(|m| (0..a.len()).filter(|j| m >> j & 1 == 1).map(|j| w[j]).sum())
            .collect();
        sums.sort_by(f64::total_cmp);
        let gap = sums.windows(2).map(|p| p[1] - p[0]).fold(f64::INFINITY, f64::min);
        let r = check_coefficient_condition(&a, 1e-12).unwrap();
        assert!((r.margin - gap).abs() < 1e-12);
        assert_eq!(r.patterns, (3u64.pow(5) - 1) / 2);
    }

    proptest! {
        #[test]
        fn admissibility_is_sign_invariant(a in prop::collection::vec(0.2f64..3.0, 1..6), flips in prop::collection::vec(any::<bool>(), 6)) {
            let b: Vec<f64> = a.iter().zip(&flips).map(|(v, f)| if *f { -v } else { *v }).collect();
            let neg: Vec<f64> = a.iter().map(|v| -v).collect();
            let ra = check_coefficient_condition(&a, 1e-9).unwrap();
            prop_assert_eq!(&ra, &check_coefficient_condition(&b, 1e-9).unwrap());
            prop_assert_eq!(&ra, &check_coefficient_condition(&neg, 1e-9).unwrap());
        }

        #[test]
        fn branch_inverse_round_trip(t in 0.0f64..1.0, side in any::<bool>()) {
            let cu = cubic();
            let interval = if side { (0.0, 2.0) } else { (-4.0 / 3.0, 0.0) };
            let (lo, hi) = (cu.h(interval.0).min(cu.h(interval.1)), cu.h(interval.0).max(cu.h(interval.1)));
            let y = lo + t * (hi - lo);
            let x = branch_inverse(&cu, interval, y).unwrap();
            prop_assert!((cu.h(x) - y).abs() <= 1e-10 * (1.0 + y.abs()));
            prop_assert!(x >= interval.0 && x <= interval.1);
        }

        #[test]
        fn aliases_share_a_level(x in -0.9f64..0.5) {
            let cu = cubic();
            let (l, r) = cu.brackets()[1];
            prop_assume!(x > l && x < r);
            let (xm, xp) = aliases(&cu, 0.0, x).unwrap();
            prop_assert!((cu.h(xm) - cu.h(xp)).abs() <= 1e-9);
            prop_assert!(xm <= 0.0 && 0.0 <= xp);
        }
    }

    #[test]
    fn expsum_coordinates_round_trip() {
        let m = ExpSumMap::new(vec![1.0, -2.0]).unwrap();
        let x = [0.3, -0.7];
        let w = m.positive_coords(&x);
        let back = m.state_from_positive(&w);
        assert!((back[0] - x[0]).abs() < 1e-15 && (back[1] - x[1]).abs() < 1e-15);
        assert!((m.bbar() - 1.25).abs() < 1e-15);
        let om = m.to_observation_map(vec![(-2.0, 2.0); 2]).unwrap();
        assert!((om.eval(&x)[0] - m.eval(&x)).abs() < 1e-15);
    }

    #[test]
    fn obs_csv_round_trip() {
        let p = simulate_bm(1, 0.05, 0.01, 2).unwrap();
        let o = observe(&ObservationMap::scalar(|x| x.exp(), -9.0, 9.0).unwrap(), &p).unwrap();
        let mut buf = Vec::new();
        o.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"t,y1\n"));
        assert_eq!(ObsPath::read_csv(std::io::Cursor::new(buf)).unwrap(), o);
    }
}
