//! Discretized Brownian and one-dimensional diffusion paths, plus the Lamperti
//! change of coordinates `Φ(x) = ∫₀ˣ 1/g` that turns `dX = f dt + g dW` into a
//! unit-noise diffusion with drift `b = (f/g − g'/(2g²)) ∘ Φ⁻¹`.
//!
//! Pure Brownian paths use exact Gaussian increments; general diffusions use
//! Euler–Maruyama. Each path draws from its own ChaCha8 stream (see [`crate::rng`]),
//! so identical inputs reproduce bit-identical states.

use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numeric::{quad, roots};
use crate::rng;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A sampled path on a uniform grid `t_k = k·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub times: Vec<f64>,
    /// Row-major `len × dim` states.
    pub states: Vec<f64>,
    pub dim: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Path {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    /// Coordinate `i` along the whole path.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.iter().skip(i).step_by(self.dim).copied().collect()
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// Writes `t,x1,...,xd` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write_grid_csv(&mut out, "x", &self.times, &self.states, self.dim)
    }

    /// Reads a path written by [`Path::write_csv`]. The seed is not stored in
    /// the file and comes back as 0.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Path> {
        let (times, states, dim) = read_grid_csv(input, "x")?;
        let dt = times[1] - times[0];
        Ok(Path { times, states, dim, dt, seed: 0 })
    }
}

pub(crate) fn write_grid_csv<W: Write>(
    out: &mut W,
    prefix: &str,
    times: &[f64],
    values: &[f64],
    dim: usize,
) -> Result<()> {
    let mut header = String::from("t");
    for i in 1..=dim {
        header.push_str(&format!(",{prefix}{i}"));
    }
    writeln!(out, "{header}")?;
    for (k, t) in times.iter().enumerate() {
        let mut line = format!("{t:.16e}");
        for v in &values[k * dim..(k + 1) * dim] {
            line.push_str(&format!(",{v:.16e}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub(crate) fn read_grid_csv<R: BufRead>(input: R, prefix: &str) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::param("empty CSV"))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.first() != Some(&"t") || cols.len() < 2 {
        return Err(Error::param(format!("bad CSV header `{header}`")));
    }
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("{prefix}{}", i + 1) {
            return Err(Error::param(format!("bad CSV column `{c}`")));
        }
    }
    let dim = cols.len() - 1;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::param(format!("row {} has {} fields", n + 2, fields.len())));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::param(format!("row {}: {e}", n + 2)))
        };
        times.push(parse(fields[0])?);
        for f in &fields[1..] {
            values.push(parse(f)?);
        }
    }
    if times.len() < 2 {
        return Err(Error::param("CSV needs at least two rows"));
    }
    Ok((times, values, dim))
}

/// Number of steps of a grid over `[0, t_end]` with spacing `dt`.
pub fn grid_steps(t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::param(format!("dt must be positive, got {dt}")));
    }
    if !(t_end >= dt) || !t_end.is_finite() {
        return Err(Error::param(format!("t_end = {t_end} must be at least dt = {dt}")));
    }
    Ok((t_end / dt + 1e-9).floor() as usize)
}

fn grid(n_steps: usize, dt: f64) -> Vec<f64> {
    (0..=n_steps).map(|k| k as f64 * dt).collect()
}

/// Standard Brownian motion in `R^dim` started at the origin.
pub fn simulate_bm(dim: usize, t_end: f64, dt: f64, seed: u64) -> Result<Path> {
    simulate_bm_from(&vec![0.0; dim], t_end, dt, seed)
}

/// Brownian motion started at `start`, with exact `N(0, dt·I)` increments.
pub fn simulate_bm_from(start: &[f64], t_end: f64, dt: f64, seed: u64) -> Result<Path> {
    let dim = start.len();
    if dim == 0 {
        return Err(Error::param("dimension must be at least 1"));
    }
    let n = grid_steps(t_end, dt)?;
    let mut stream = rng::stream(seed);
    let sd = dt.sqrt();
    let mut states = Vec::with_capacity((n + 1) * dim);
    states.extend_from_slice(start);
    for k in 0..n {
        for i in 0..dim {
            let z: f64 = StandardNormal.sample(&mut stream);
            let prev = states[k * dim + i];
            states.push(prev + sd * z);
        }
    }
    Ok(Path { times: grid(n, dt), states, dim, dt, seed })
}

/// `dX = f(X) dt + g(X) dW` with user-supplied coefficient functions and the
/// bounds they are expected to respect on the simulation window.
#[derive(Clone)]
pub struct SdeSpec1D {
    pub drift: ScalarFn,
    pub diffusion: ScalarFn,
    pub diffusion_prime: Option<ScalarFn>,
    pub g_min: f64,
    pub g_max: f64,
    pub gprime_max: f64,
    pub x0: f64,
}

impl fmt::Debug for SdeSpec1D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeSpec1D")
            .field("g_min", &self.g_min)
            .field("g_max", &self.g_max)
            .field("gprime_max", &self.gprime_max)
            .field("x0", &self.x0)
            .field("analytic_gprime", &self.diffusion_prime.is_some())
            .finish()
    }
}

impl SdeSpec1D {
    pub fn new(
        drift: impl Fn(f64) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64) -> f64 + Send + Sync + 'static,
        g_min: f64,
        g_max: f64,
        gprime_max: f64,
        x0: f64,
    ) -> Result<Self> {
        if !(g_min > 0.0) {
            return Err(Error::param(format!("g_min must be positive, got {g_min}")));
        }
        if !(g_max >= g_min) || !g_max.is_finite() {
            return Err(Error::param(format!("g_max = {g_max} must be finite and >= g_min = {g_min}")));
        }
        if !(gprime_max >= 0.0) {
            return Err(Error::param(format!("gprime_max must be non-negative, got {gprime_max}")));
        }
        Ok(SdeSpec1D {
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            diffusion_prime: None,
            g_min,
            g_max,
            gprime_max,
            x0,
        })
    }

    /// Driftless unit-noise diffusion, i.e. Brownian motion from `x0`.
    pub fn brownian(x0: f64) -> Self {
        Self::new(|_| 0.0, |_| 1.0, 1.0, 1.0, 0.0, x0).expect("valid constant spec")
    }

    pub fn with_diffusion_prime(mut self, gp: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.diffusion_prime = Some(Arc::new(gp));
        self
    }

    pub fn with_x0(mut self, x0: f64) -> Self {
        self.x0 = x0;
        self
    }

    pub fn f(&self, x: f64) -> f64 {
        (self.drift)(x)
    }

    pub fn g(&self, x: f64) -> f64 {
        (self.diffusion)(x)
    }

    /// `g'(x)`: analytic if supplied, else a central difference with step `1e-6·max(1, |x|)`.
    pub fn g_prime(&self, x: f64) -> f64 {
        match &self.diffusion_prime {
            Some(gp) => gp(x),
            None => {
                let h = 1e-6 * x.abs().max(1.0);
                (self.g(x + h) - self.g(x - h)) / (2.0 * h)
            }
        }
    }

    pub fn is_unit_noise(&self) -> bool {
        self.g_min == 1.0 && self.g_max == 1.0
    }

    /// Checks the declared bounds at one state.
    pub fn check_bounds_at(&self, x: f64) -> Result<()> {
        let g = self.g(x);
        let slack = 1e-12 * self.g_max;
        if !(g >= self.g_min - slack) {
            return Err(Error::Bound(format!("g({x}) = {g} < g_min = {}", self.g_min)));
        }
        if !(g <= self.g_max + slack) {
            return Err(Error::Bound(format!("g({x}) = {g} > g_max = {}", self.g_max)));
        }
        if self.gprime_max > 0.0 || self.diffusion_prime.is_some() {
            let gp = self.g_prime(x);
            if !(gp.abs() <= self.gprime_max * (1.0 + 1e-6) + 1e-9) {
                return Err(Error::Bound(format!(
                    "|g'({x})| = {} > gprime_max = {}",
                    gp.abs(),
                    self.gprime_max
                )));
            }
        }
        Ok(())
    }

    /// Samples the bounds on `n` evenly spaced points of `[lo, hi]`.
    pub fn validate_on(&self, lo: f64, hi: f64, n: usize) -> Result<()> {
        let n = n.max(2);
        (0..n).try_for_each(|i| self.check_bounds_at(lo + (hi - lo) * i as f64 / (n - 1) as f64))
    }
}

/// Euler–Maruyama path of `spec` from `spec.x0`.
pub fn simulate_sde_1d(spec: &SdeSpec1D, t_end: f64, dt: f64, seed: u64) -> Result<Path> {
    let n = grid_steps(t_end, dt)?;
    let mut stream = rng::stream(seed);
    let sd = dt.sqrt();
    let mut states = Vec::with_capacity(n + 1);
    let mut x = spec.x0;
    states.push(x);
    for _ in 0..n {
        spec.check_bounds_at(x)?;
        let z: f64 = StandardNormal.sample(&mut stream);
        x += spec.f(x) * dt + spec.g(x) * sd * z;
        if !x.is_finite() {
            return Err(Error::Numerical { message: "Euler–Maruyama state diverged".into(), achieved: x });
        }
        states.push(x);
    }
    Ok(Path { times: grid(n, dt), states, dim: 1, dt, seed })
}

const LAMPERTI_TOL: f64 = 1e-10;

/// `Φ(x) = ∫₀ˣ 1/g`, by adaptive quadrature.
pub fn lamperti_transform(spec: &SdeSpec1D, x: f64) -> Result<f64> {
    if spec.is_unit_noise() {
        return Ok(x);
    }
    quad::integrate(|s| 1.0 / spec.g(s), 0.0, x, LAMPERTI_TOL)
}

/// `Φ⁻¹(y)`. Since `x/g_max ≤ Φ(x) ≤ x/g_min` for `x ≥ 0` (and symmetrically
/// below zero), the root is always bracketed by `[y·g_min, y·g_max]`.
pub fn lamperti_inverse(spec: &SdeSpec1D, y: f64) -> Result<f64> {
    if spec.is_unit_noise() {
        return Ok(y);
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    // Φ is monotone with slope in [1/g_max, 1/g_min]; expand outward from 0
    // so Φ is never evaluated far outside the region the bounds describe
    let far = y * spec.g_max;
    let pad = 1e-9 * (1.0 + y.abs());
    let far = far + far.signum() * pad;
    let mut near = 0.0;
    let mut step = y * spec.g(0.0);
    let mut x1 = step;
    loop {
        if x1.abs() >= far.abs() {
            x1 = far;
            break;
        }
        let v = lamperti_transform(spec, x1)? - y;
        if v == 0.0 {
            return Ok(x1);
        }
        if v.signum() == y.signum() {
            break;
        }
        near = x1;
        step *= 2.0;
        x1 = near + step;
    }
    let (lo, hi) = (near.min(x1), near.max(x1));
    let mut failure = None;
    let x = roots::safeguarded_newton(
        |x| match lamperti_transform(spec, x) {
            Ok(v) => v - y,
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        },
        |x| 1.0 / spec.g(x),
        lo,
        hi,
        0.5 * (lo + hi),
        1e-14,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(x),
    }
}

/// Drift of the unit-noise process `Φ(X)` at `y`.
pub fn lamperti_drift(spec: &SdeSpec1D, y: f64) -> Result<f64> {
    let x = lamperti_inverse(spec, y)?;
    Ok(transformed_drift_at(spec, x))
}

fn transformed_drift_at(spec: &SdeSpec1D, x: f64) -> f64 {
    let g = spec.g(x);
    spec.f(x) / g - spec.g_prime(x) / (2.0 * g * g)
}

/// Tabulated Lamperti map for repeated evaluation on a fixed window.
///
/// Node values of `Φ` come from per-panel Gauss–Kronrod sums anchored at 0;
/// off-node values add a five-point Gauss–Legendre partial panel. Panels are
/// 1/256 wide, far below the scale on which a bounded-derivative `g` varies.
#[derive(Clone)]
pub struct Lamperti {
    spec: SdeSpec1D,
    h: f64,
    first: i64,
    nodes: Vec<f64>,
    values: Vec<f64>,
}

impl fmt::Debug for Lamperti {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Lamperti")
            .field("window", &(self.nodes[0], self.nodes[self.nodes.len() - 1]))
            .field("panels", &(self.nodes.len() - 1))
            .finish()
    }
}

impl Lamperti {
    pub fn new(spec: &SdeSpec1D, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::param(format!("empty Lamperti window [{lo}, {hi}]")));
        }
        let h = 1.0 / 256.0;
        let first = (lo.min(0.0) / h).floor() as i64;
        let last = (hi.max(0.0) / h).ceil() as i64;
        let nodes: Vec<f64> = (first..=last).map(|k| k as f64 * h).collect();
        let zero = (-first) as usize;
        let mut values = vec![0.0; nodes.len()];
        let inv_g = |s: f64| 1.0 / spec.g(s);
        for i in zero + 1..nodes.len() {
            values[i] = values[i - 1] + panel(&inv_g, nodes[i - 1], nodes[i])?;
        }
        for i in (0..zero).rev() {
            values[i] = values[i + 1] - panel(&inv_g, nodes[i], nodes[i + 1])?;
        }
        Ok(Lamperti { spec: spec.clone(), h, first, nodes, values })
    }

    pub fn spec(&self) -> &SdeSpec1D {
        &self.spec
    }

    pub fn window(&self) -> (f64, f64) {
        (self.nodes[0], self.nodes[self.nodes.len() - 1])
    }

    pub fn phi(&self, x: f64) -> f64 {
        let (lo, hi) = self.window();
        if x < lo || x > hi {
            return lamperti_transform(&self.spec, x).unwrap_or(f64::NAN);
        }
        let i = (((x / self.h).floor() as i64 - self.first).max(0) as usize).min(self.nodes.len() - 2);
        let x0 = self.nodes[i];
        self.values[i] + quad::gauss_legendre5(|s| 1.0 / self.spec.g(s), x0, x)
    }

    pub fn phi_inv(&self, y: f64) -> f64 {
        let n = self.values.len();
        if y < self.values[0] || y > self.values[n - 1] {
            return lamperti_inverse(&self.spec, y).unwrap_or(f64::NAN);
        }
        let i = self.values.partition_point(|v| *v <= y).clamp(1, n - 1) - 1;
        let (a, b) = (self.nodes[i], self.nodes[i + 1]);
        let t = (y - self.values[i]) / (self.values[i + 1] - self.values[i]);
        let guess = a + t * (b - a);
        roots::safeguarded_newton(|x| self.phi(x) - y, |x| 1.0 / self.spec.g(x), a, b, guess, 1e-15)
            .unwrap_or(f64::NAN)
    }

    /// Drift `b(y)` of the transformed process.
    pub fn drift(&self, y: f64) -> f64 {
        transformed_drift_at(&self.spec, self.phi_inv(y))
    }
}

fn panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Result<f64> {
    let mut g = |s: f64| f(s);
    let (v, err) = quad::gk15(&mut g, a, b);
    if err > 1e-13 {
        return quad::integrate(g, a, b, 1e-14);
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::stats;

    fn exp_spec() -> SdeSpec1D {
        SdeSpec1D::new(|_| 0.0, |x: f64| x.exp(), (-3f64).exp(), 3f64.exp(), 3f64.exp(), 0.0)
            .unwrap()
            .with_diffusion_prime(|x: f64| x.exp())
    }

    fn sine_spec() -> SdeSpec1D {
        SdeSpec1D::new(|_| 0.0, |x: f64| 2.0 + x.sin(), 1.0, 3.0, 1.0, 1.0)
            .unwrap()
            .with_diffusion_prime(|x: f64| x.cos())
    }

    #[test]
    fn bm_is_reproducible_and_starts_at_origin() {
        let a = simulate_bm(1, 1.0, 0.01, 7).unwrap();
        let b = simulate_bm(1, 1.0, 0.01, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 101);
        assert_eq!(a.state(0), &[0.0]);
        let c = simulate_bm(3, 1.0, 0.01, 8).unwrap();
        assert_eq!(c.state(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn grid_is_uniform() {
        let p = simulate_bm(2, 0.37, 1e-3, 1).unwrap();
        for w in p.times.windows(2) {
            assert!(((w[1] - w[0]) - p.dt).abs() <= 1e-9 * p.dt);
        }
    }

    #[test]
    fn bad_parameters_are_rejected() {
        assert!(matches!(simulate_bm(1, 1.0, 0.0, 1), Err(Error::Parameter(_))));
        assert!(matches!(simulate_bm(1, 0.001, 0.01, 1), Err(Error::Parameter(_))));
        assert!(matches!(simulate_bm(0, 1.0, 0.01, 1), Err(Error::Parameter(_))));
        assert!(SdeSpec1D::new(|_| 0.0, |_| 1.0, 0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn terminal_variance_matches_t_end() {
        // Var(B_T) = T; the sample variance has standard error T·sqrt(2/(n-1)).
        let t_end = 1.0;
        let n = 10_000;
        let finals: Vec<f64> = (0..n)
            .map(|s| simulate_bm(1, t_end, 0.05, s as u64).unwrap().states[20])
            .collect();
        let var = stats::variance(&finals);
        let se = t_end * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - t_end).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn unit_sde_matches_bm_and_respects_x0() {
        let spec = SdeSpec1D::brownian(0.0);
        let sde = simulate_sde_1d(&spec, 1.0, 0.01, 3).unwrap();
        let bm = simulate_bm(1, 1.0, 0.01, 3).unwrap();
        for (a, b) in sde.states.iter().zip(&bm.states) {
            assert!((a - b).abs() < 1e-12);
        }
        let shifted = simulate_sde_1d(&spec.with_x0(5.0), 1.0, 0.01, 3).unwrap();
        assert_eq!(shifted.states[0], 5.0);
    }

    #[test]
    fn ou_stationary_moments() {
        // dX = -X dt + dW: X_10 ~ N(0, (1 - e^{-20})/2) up to O(dt) bias.
        let spec = SdeSpec1D::new(|x| -x, |_| 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let n = 1000;
        let finals: Vec<f64> = (0..n)
            .map(|s| *simulate_sde_1d(&spec, 10.0, 0.01, 1000 + s).unwrap().states.last().unwrap())
            .collect();
        let mean = stats::mean(&finals);
        let var = stats::variance(&finals);
        let se_mean = (0.5 / n as f64).sqrt();
        let se_var = 0.5 * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - 0.5).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn bound_violation_is_reported() {
        let spec = SdeSpec1D::new(|_| 5.0, |x: f64| 1.0 + x.abs(), 1.0, 2.0, 1.0, 0.0).unwrap();
        match simulate_sde_1d(&spec, 1.0, 0.01, 1) {
            Err(Error::Bound(msg)) => assert!(msg.contains("g_max"), "{msg}"),
            other => panic!("expected bound error, got {other:?}"),
        }
    }

    #[test]
    fn lamperti_closed_forms() {
        let unit = SdeSpec1D::brownian(0.0);
        assert_eq!(lamperti_transform(&unit, 1.7).unwrap(), 1.7);
        let two = SdeSpec1D::new(|_| 0.0, |_| 2.0, 2.0, 2.0, 0.0, 0.0).unwrap();
        assert!((lamperti_transform(&two, 3.0).unwrap() - 1.5).abs() < 1e-12);
        // g = e^x: Φ(x) = 1 - e^{-x}
        let phi1 = lamperti_transform(&exp_spec(), 1.0).unwrap();
        assert!((phi1 - (1.0 - (-1f64).exp())).abs() < 1e-10);
        assert!((phi1 - 0.63212).abs() < 1e-5);
    }

    #[test]
    fn lamperti_round_trip_and_monotone() {
        for spec in [exp_spec(), sine_spec()] {
            let xs: Vec<f64> = (0..=60).map(|i| -3.0 + 0.1 * i as f64).collect();
            let ys: Vec<f64> = xs.iter().map(|&x| lamperti_transform(&spec, x).unwrap()).collect();
            for w in ys.windows(2) {
                assert!(w[1] > w[0]);
            }
            for (&x, &y) in xs.iter().zip(&ys) {
                assert!((lamperti_inverse(&spec, y).unwrap() - x).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn table_agrees_with_adaptive_quadrature() {
        let spec = sine_spec();
        let table = Lamperti::new(&spec, -4.0, 4.0).unwrap();
        for i in 0..=97 {
            let x = -3.9 + 0.08 * i as f64;
            let exact = lamperti_transform(&spec, x).unwrap();
            assert!((table.phi(x) - exact).abs() < 1e-11, "x={x}");
            assert!((table.phi_inv(exact) - x).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn lamperti_drift_trivial_cases() {
        let unit = SdeSpec1D::brownian(0.0);
        assert_eq!(lamperti_drift(&unit, 0.3).unwrap(), 0.0);
        let pushed = SdeSpec1D::new(|_| 1.0, |_| 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(lamperti_drift(&pushed, -2.0).unwrap(), 1.0);
        // g = e^x, f = 0: b(y) = -e^{-x}/2 at x = Φ⁻¹(y).
        let spec = exp_spec();
        let y = lamperti_transform(&spec, 0.4).unwrap();
        let b = lamperti_drift(&spec, y).unwrap();
        assert!((b + 0.5 * (-0.4f64).exp()).abs() < 1e-9);
        // finite-difference g' agrees with the analytic one
        let mut fd = exp_spec();
        fd.diffusion_prime = None;
        assert!((lamperti_drift(&fd, y).unwrap() - b).abs() < 1e-8);
    }

    #[test]
    fn lamperti_drift_matches_empirical_drift() {
        // Regress the mean increment of Φ(X) over a short horizon.
        let spec = SdeSpec1D::new(|_| 0.0, |x: f64| x.exp(), (-2f64).exp(), 2f64.exp(), 2f64.exp(), 0.0).unwrap();
        let tau = 0.01;
        let n = 40_000;
        let incs: Vec<f64> = (0..n)
            .map(|s| {
                let p = simulate_sde_1d(&spec, tau, 1e-3, 50_000 + s).unwrap();
                lamperti_transform(&spec, *p.states.last().unwrap()).unwrap() / tau
            })
            .collect();
        let est = stats::mean(&incs);
        let se = (stats::variance(&incs) / n as f64).sqrt();
        let b = lamperti_drift(&spec, 0.0).unwrap();
        assert!((b + 0.5).abs() < 1e-9);
        assert!((est - b).abs() < 4.0 * se + 0.02, "empirical {est} vs {b} (se {se})");
    }

    #[test]
    fn quadratic_variation_converges_with_dt() {
        let mut errs = Vec::new();
        for dt in [1e-2, 2.5e-3, 6.25e-4] {
            let e: Vec<f64> = (0..200)
                .map(|s| {
                    let p = simulate_bm(1, 1.0, dt, 900 + s).unwrap();
                    let qv: f64 = p.states.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
                    (qv - 1.0).abs()
                })
                .collect();
            errs.push(stats::mean(&e));
        }
        for w in errs.windows(2) {
            let ratio = w[1] / w[0];
            assert!(ratio > 0.35 && ratio < 0.65, "{errs:?}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let p = simulate_bm(2, 0.05, 0.01, 11).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x1,x2\n"));
        let q = Path::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(q.states, p.states);
        assert_eq!(q.times, p.times);
    }
}
