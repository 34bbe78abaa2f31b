//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obsmaps::{ExpSumMap, ObservationMap, PiecewiseMonotoneMap};
use crate::sdesim::SdeSpec1D;
use crate::trackers::TrackerParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "E1_tracker_convergence")]
    TrackerConvergence,
    #[serde(rename = "E2_even_map_obstruction")]
    EvenMapObstruction,
    #[serde(rename = "E3_expsum_reconstruction")]
    ExpsumReconstruction,
    #[serde(rename = "E4_example2d_pipeline")]
    Example2dPipeline,
    #[serde(rename = "E5_symmetry_scan")]
    SymmetryScan,
}

impl ExperimentKind {
    pub fn tag(self) -> &'static str {
        match self {
            ExperimentKind::TrackerConvergence => "E1_tracker_convergence",
            ExperimentKind::EvenMapObstruction => "E2_even_map_obstruction",
            ExperimentKind::ExpsumReconstruction => "E3_expsum_reconstruction",
            ExperimentKind::Example2dPipeline => "E4_example2d_pipeline",
            ExperimentKind::SymmetryScan => "E5_symmetry_scan",
        }
    }

    /// The result each experiment exercises, quoted in the text report.
    pub fn exercises(self) -> &'static str {
        match self {
            ExperimentKind::TrackerConvergence => {
                "tracking through critical points of a piecewise-monotone map (detectable aliases, with Lamperti reduction for non-unit noise)"
            }
            ExperimentKind::EvenMapObstruction => "reflection obstruction: an even map leaves the branch permanently ambiguous after a crossing",
            ExperimentKind::ExpsumReconstruction => "exponential-sum reconstruction by power peeling and indicator inversion",
            ExperimentKind::Example2dPipeline => "closed-form inverse of the two-dimensional example from (h, q) with q estimated from the path",
            ExperimentKind::SymmetryScan => "asymmetry test: symmetry found means obstructed, none found for an analytic map is trackability evidence",
        }
    }
}

/// Observation maps by registry name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    /// `Σ exp(a_j x_j)`.
    Expsum { a: Vec<f64> },
    /// `e^{x₁} − e^{x₂}`.
    Example2d,
    /// `Σ coeffs[i] xⁱ` with declared critical points.
    PiecewisePoly { coeffs: Vec<f64>, criticals: Vec<f64>, domain: (f64, f64) },
    Identity { dim: usize },
    Cosine,
}

impl MapSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MapSpec::Expsum { .. } => "expsum",
            MapSpec::Example2d => "example2d",
            MapSpec::PiecewisePoly { .. } => "piecewise_poly",
            MapSpec::Identity { .. } => "identity",
            MapSpec::Cosine => "cosine",
        }
    }

    pub fn expsum(&self) -> Result<ExpSumMap> {
        match self {
            MapSpec::Expsum { a } => ExpSumMap::new(a.clone()),
            _ => Err(Error::Config(format!("map '{}' is not an exponential sum", self.name()))),
        }
    }

    pub fn piecewise(&self) -> Result<PiecewiseMonotoneMap> {
        match self {
            MapSpec::PiecewisePoly { coeffs, criticals, domain } => PiecewiseMonotoneMap::polynomial(coeffs.clone(), *domain, criticals.clone()),
            MapSpec::Cosine => {
                let pi = std::f64::consts::PI;
                PiecewiseMonotoneMap::new(f64::cos, |x: f64| -x.sin(), (-10.0, 10.0), vec![-3.0 * pi, -2.0 * pi, -pi, 0.0, pi, 2.0 * pi, 3.0 * pi])
            }
            _ => Err(Error::Config(format!("map '{}' is not a scalar piecewise-monotone map", self.name()))),
        }
    }

    /// The map as a generic observation map on `domain` (its own domain for
    /// scalar maps when `domain` is `None`).
    pub fn observation_map(&self, domain: Option<Vec<(f64, f64)>>) -> Result<ObservationMap> {
        let box_of = |d: usize, default: (f64, f64)| domain.clone().unwrap_or_else(|| vec![default; d]);
        match self {
            MapSpec::Expsum { a } => self.expsum()?.to_observation_map(box_of(a.len(), (-2.0, 2.0))),
            MapSpec::Example2d => ObservationMap::example2d(box_of(2, (-2.0, 2.0))),
            MapSpec::Identity { dim } => ObservationMap::identity(box_of(*dim, (-1.0, 1.0))),
            MapSpec::PiecewisePoly { domain: own, .. } => {
                let m = self.piecewise()?.to_observation_map()?;
                match domain {
                    Some(d) if d != vec![*own] => Err(Error::Config("a piecewise map is used on its own domain".into())),
                    _ => Ok(m),
                }
            }
            MapSpec::Cosine => {
                let d = box_of(1, (-10.0, 10.0));
                ObservationMap::new(1, 1, d, |x, o| o[0] = x[0].cos())?.with_grad(|x, j| j[0] = -x[0].sin())
            }
        }
    }

    pub fn is_analytic(&self) -> bool {
        // every registry map is a finite sum of exponentials, polynomials or cosines
        true
    }
}

/// Diffusion coefficients by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionSpec {
    /// `g ≡ 1`.
    Unit,
    /// `g(x) = 2 + sin x`.
    TwoPlusSin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftSpec {
    Zero,
    /// `f(x) = −x`.
    OrnsteinUhlenbeck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub x0: f64,
    #[serde(default = "default_drift")]
    pub drift: DriftSpec,
    #[serde(default = "default_diffusion")]
    pub diffusion: DiffusionSpec,
    /// Simulation horizon in seconds.
    pub t_end: f64,
}

fn default_drift() -> DriftSpec {
    DriftSpec::Zero
}

fn default_diffusion() -> DiffusionSpec {
    DiffusionSpec::Unit
}

impl SdeConfig {
    pub fn spec(&self) -> Result<SdeSpec1D> {
        let f = match self.drift {
            DriftSpec::Zero => |_: f64| 0.0,
            DriftSpec::OrnsteinUhlenbeck => |x: f64| -x,
        };
        Ok(match self.diffusion {
            DiffusionSpec::Unit => SdeSpec1D::new(f, |_| 1.0, 1.0, 1.0, 0.0, self.x0)?,
            DiffusionSpec::TwoPlusSin => SdeSpec1D::new(f, |x: f64| 2.0 + x.sin(), 1.0, 3.0, 1.0, self.x0)?.with_diffusion_prime(f64::cos),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub count: usize,
    pub master: u64,
}

/// Estimator and reconstructor settings; which ones apply depends on the
/// experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub tracker: TrackerParams,
    /// Time kept after the first hidden crossing before the path is cut (E1, E2).
    pub post_crossing: f64,
    /// Fresh paths drawn per cell until one crosses in time (E1, E2).
    pub max_redraws: usize,
    /// Rate window half-width in seconds (E4).
    pub window: f64,
    /// Series terms (E3).
    pub terms: u32,
    /// Reconstruction tolerance (E3).
    pub tol: f64,
    /// State box half-width (E3, E4).
    pub state_bound: f64,
    /// Search restarts (E5).
    pub restarts: usize,
    /// Symmetry tolerance (E5).
    pub symmetry_tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            tracker: TrackerParams::default(),
            post_crossing: 0.5,
            max_redraws: 64,
            window: 0.02,
            terms: 100,
            tol: 1e-8,
            state_bound: 2.0,
            restarts: 10,
            symmetry_tol: crate::symmetry::DEFAULT_TOL,
        }
    }
}

/// Pass/fail thresholds checked against the aggregates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub min_correct_rate: Option<f64>,
    pub max_median_sup_error: Option<f64>,
    pub min_ambiguity_rate: Option<f64>,
    pub max_error: Option<f64>,
    pub max_median_error: Option<f64>,
    /// Expected symmetry verdict (E5), in report spelling.
    pub expected_verdict: Option<crate::symmetry::SymmetryVerdict>,
    /// Median error must fall strictly as dt falls (E1).
    #[serde(default)]
    pub decreasing_in_dt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub map: MapSpec,
    pub sde: Option<SdeConfig>,
    /// Strictly decreasing. E3 and E5 do not simulate; their cells are still
    /// keyed by dt.
    pub dt: Vec<f64>,
    pub seeds: SeedConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dt.is_empty() || self.dt.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return bad("dt list must be non-empty and positive".into());
        }
        if self.dt.windows(2).any(|w| !(w[1] < w[0])) {
            return bad("dt list must be strictly decreasing".into());
        }
        if self.seeds.count == 0 {
            return bad("seed count must be at least 1".into());
        }
        self.estimator.tracker.validate().map_err(|e| Error::Config(e.to_string()))?;
        let est = &self.estimator;
        if !(est.window > 0.0) || !(est.tol > 0.0) || !(est.state_bound > 0.0) || !(est.post_crossing > 0.0) || est.terms == 0 {
            return bad("estimator window, tol, state_bound, post_crossing and terms must be positive".into());
        }
        let needs_sde = matches!(self.experiment, ExperimentKind::TrackerConvergence | ExperimentKind::EvenMapObstruction);
        match (needs_sde, &self.sde) {
            (true, None) => return bad(format!("{} needs an sde section", self.experiment.tag())),
            (true, Some(s)) if !(s.t_end > 0.0) => return bad("sde.t_end must be positive".into()),
            _ => {}
        }
        let map_ok = match self.experiment {
            ExperimentKind::TrackerConvergence | ExperimentKind::EvenMapObstruction => self.map.piecewise().map(|_| ()),
            ExperimentKind::ExpsumReconstruction => self.map.expsum().map(|_| ()),
            ExperimentKind::Example2dPipeline => match self.map {
                MapSpec::Example2d => Ok(()),
                _ => Err(Error::Config("E4 runs on the example2d map".into())),
            },
            ExperimentKind::SymmetryScan => self.map.observation_map(None).map(|_| ()),
        };
        map_ok.map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(format!("map '{}': {other}", self.map.name())),
        })
    }
}
