//! One cell of each experiment: a pure function of `(config, dt, seed)`.

use rand::Rng;

use super::config::{ExperimentConfig, ExperimentKind};
use super::metrics::{crossing_metrics, first_crossing};
use crate::error::{Error, Result};
use crate::obsmaps::{observe, ExpSumMap, PiecewiseMonotoneMap};
use crate::qvest::{power_series_log, qv_rate};
use crate::rng;
use crate::sdesim::{simulate_bm_from, simulate_sde_1d, Path};
use crate::symmetry::{self, AsymmetryVerdict, SymmetryVerdict};
use crate::trackers::{invert_2d_estimated, reconstruct_expsum_log, track_piecewise, Decision, TrackerParams};

/// Column names of the per-cell metrics, in CSV order.
pub fn metric_names(kind: ExperimentKind) -> &'static [&'static str] {
    match kind {
        ExperimentKind::TrackerConvergence | ExperimentKind::EvenMapObstruction => &[
            "redraws",
            "crossing_time",
            "decided",
            "correct",
            "ambiguous",
            "statistic_gap",
            "margin",
            "sup_error",
            "sojourn_sup_error",
        ],
        ExperimentKind::ExpsumReconstruction => &["error"],
        ExperimentKind::Example2dPipeline => &["error", "rate_rel_error"],
        ExperimentKind::SymmetryScan => &["verdict", "candidates", "best_residual", "nearest_rejected", "local_hits", "asymmetry"],
    }
}

/// Runs one cell; the metrics follow [`metric_names`].
pub fn run_cell(cfg: &ExperimentConfig, dt: f64, seed: u64) -> Result<Vec<f64>> {
    match cfg.experiment {
        ExperimentKind::TrackerConvergence | ExperimentKind::EvenMapObstruction => tracker_cell(cfg, dt, seed),
        ExperimentKind::ExpsumReconstruction => expsum_cell(cfg, seed),
        ExperimentKind::Example2dPipeline => example2d_cell(cfg, dt, seed),
        ExperimentKind::SymmetryScan => symmetry_cell(cfg, seed),
    }
}

/// The critical point nearest `x0` and its index.
pub fn watched_critical(pmap: &PiecewiseMonotoneMap, x0: f64) -> Result<(usize, f64)> {
    pmap.criticals()
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| (a.1 - x0).abs().total_cmp(&(b.1 - x0).abs()))
        .ok_or_else(|| Error::Config("the map has no critical point to cross".into()))
}

/// Draws paths from `seed`'s children until one crosses `c` at least
/// `post` seconds before the horizon and stays in `domain` up to then; the
/// path is cut `post` seconds after its first crossing.
pub fn crossing_path(
    spec: &crate::sdesim::SdeSpec1D,
    t_end: f64,
    dt: f64,
    seed: u64,
    c: f64,
    post: f64,
    domain: (f64, f64),
    max_redraws: usize,
) -> Result<(Path, usize)> {
    for attempt in 0..max_redraws {
        let path = simulate_sde_1d(spec, t_end, dt, rng::derive_seed(seed, attempt as u64))?;
        let Some(kc) = first_crossing(&path, c) else { continue };
        let cut = kc + (post / dt).round() as usize;
        if cut >= path.len() {
            continue;
        }
        if path.states[..=cut].iter().any(|x| !(domain.0 < *x && *x < domain.1)) {
            continue;
        }
        let mut p = path;
        p.times.truncate(cut + 1);
        p.states.truncate(cut + 1);
        return Ok((p, attempt));
    }
    Err(Error::Numerical { message: format!("no path crossed {c} in time after {max_redraws} draws"), achieved: max_redraws as f64 })
}

fn tracker_cell(cfg: &ExperimentConfig, dt: f64, seed: u64) -> Result<Vec<f64>> {
    let sde = cfg.sde.as_ref().ok_or_else(|| Error::Config("missing sde section".into()))?;
    let spec = sde.spec()?;
    let pmap = cfg.map.piecewise()?;
    let (ci, c) = watched_critical(&pmap, sde.x0)?;
    let est = &cfg.estimator;
    let (path, redraws) = crossing_path(&spec, sde.t_end, dt, seed, c, est.post_crossing, pmap.domain(), est.max_redraws)?;
    let obs = observe(&pmap.to_observation_map()?, &path)?;
    let params = TrackerParams { seed: rng::derive_seed(seed, u64::MAX), ..est.tracker.clone() };
    let res = track_piecewise(&pmap, &spec, &obs, sde.x0, &params)?;
    let m = crossing_metrics(&path, &res, ci, c)?.ok_or_else(|| Error::Model("selected path does not cross".into()))?;
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    Ok(vec![
        redraws as f64,
        m.crossing_time,
        flag(matches!(m.decision, Decision::Stay | Decision::Reflect)),
        flag(m.correct),
        flag(m.ambiguous),
        m.statistic_gap,
        m.margin,
        m.sup_error,
        m.sojourn_sup_error,
    ])
}

fn uniform_state(seed: u64, d: usize, bound: f64) -> Vec<f64> {
    let mut s = rng::stream(seed);
    (0..d).map(|_| s.random_range(-bound..=bound)).collect()
}

fn expsum_cell(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    let map: ExpSumMap = cfg.map.expsum()?;
    let est = &cfg.estimator;
    let x = uniform_state(seed, map.dim(), est.state_bound);
    let series = power_series_log(&map, &x, est.terms)?;
    let xr = reconstruct_expsum_log(&map, &series, est.tol)?;
    Ok(vec![x.iter().zip(&xr).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)])
}

fn example2d_cell(cfg: &ExperimentConfig, dt: f64, seed: u64) -> Result<Vec<f64>> {
    let est = &cfg.estimator;
    let start = uniform_state(seed, 2, est.state_bound);
    let w = est.window;
    let path = simulate_bm_from(&start, 2.0 * w, dt, rng::derive_seed(seed, 1))?;
    // the box only matters for sampling; evaluation is unrestricted
    let b = est.state_bound + 5.0;
    let h = cfg.map.observation_map(Some(vec![(-b, b); 2]))?;
    let obs = observe(&h, &path)?;
    let mid = ((w / dt).round() as usize).min(path.len() - 1);
    let t = path.times[mid];
    let q = qv_rate(&obs, t, w, 1)?;
    let x = path.state(mid);
    let q_true = (2.0 * x[0]).exp() + (2.0 * x[1]).exp();
    let m = (2.0 * w / dt).round();
    let (x1, x2) = invert_2d_estimated(obs.values[mid], q, (2.0 / m).sqrt())?;
    Ok(vec![(x1 - x[0]).abs().max((x2 - x[1]).abs()), (q - q_true).abs() / q_true])
}

/// Grid used for scalar maps in the symmetry scan.
pub const SCAN_GRID: usize = 2000;

fn symmetry_cell(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    let est = &cfg.estimator;
    let h = cfg.map.observation_map(None)?;
    let domain = h.domain().to_vec();
    let report = if h.dim_in() == 1 && h.dim_out() == 1 {
        let f = |x: f64| h.eval(&[x])[0];
        symmetry::detect_symmetries_1d(f, domain[0], SCAN_GRID, est.symmetry_tol)?
    } else {
        symmetry::detect_reflections_nd(&h, &domain, est.restarts, est.symmetry_tol, seed)?
    };
    // the rank test needs as many outputs as inputs; the exponential sum uses its power observables
    let witness_map = match &cfg.map {
        super::config::MapSpec::Expsum { .. } => cfg.map.expsum()?.power_map(domain.clone())?,
        _ => h.clone(),
    };
    let witness = h.sample_points(1, rng::derive_seed(seed, 7)).remove(0);
    let asym = match symmetry::asymmetry_verdict(&witness_map, cfg.map.is_analytic(), &report, Some(&witness)) {
        Ok(AsymmetryVerdict::TrackableEvidence) => 0.0,
        Ok(AsymmetryVerdict::Obstructed) => 1.0,
        Ok(AsymmetryVerdict::Inconclusive) => 2.0,
        Err(_) => f64::NAN,
    };
    Ok(vec![
        verdict_code(report.verdict),
        report.candidates.len() as f64,
        report.candidates.first().map_or(f64::NAN, |c| c.residual),
        report.nearest_rejected.as_ref().map_or(f64::NAN, |c| c.residual),
        report.local.len() as f64,
        asym,
    ])
}

pub fn verdict_code(v: SymmetryVerdict) -> f64 {
    match v {
        SymmetryVerdict::NoSymmetryFound => 0.0,
        SymmetryVerdict::Inconclusive => 1.0,
        SymmetryVerdict::Symmetric => 2.0,
    }
}
