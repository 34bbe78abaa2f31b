//! Reproducible Monte Carlo experiments over the simulation, estimation and
//! reconstruction routines.
//!
//! A run is a grid of cells, one per `(dt, seed)` pair. Cells are pure
//! functions of the configuration and their derived seed, run in parallel,
//! and merged in grid order, so outputs do not depend on scheduling. A cell
//! that fails is recorded with its error and does not touch the others.

pub mod config;
pub mod experiments;
pub mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path as FsPath, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{EstimatorConfig, ExperimentConfig, ExperimentKind, MapSpec, SdeConfig};
pub use experiments::{metric_names, run_cell};
pub use metrics::{crossing_metrics, CrossingMetrics};

use crate::error::{Error, Result};
use crate::numeric::stats::{mean, quantile};
use crate::rng;

/// JSON has no NaN; it is written as `null` and read back here.
mod nan {
    use serde::{Deserialize, Deserializer};

    pub fn one<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub fn many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub dt: f64,
    pub seed_index: usize,
    pub seed: u64,
    /// `NaN`s when the cell failed.
    #[serde(deserialize_with = "nan::many")]
    pub metrics: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub count: usize,
    #[serde(deserialize_with = "nan::one")]
    pub median: f64,
    #[serde(deserialize_with = "nan::one")]
    pub q25: f64,
    #[serde(deserialize_with = "nan::one")]
    pub q75: f64,
    #[serde(deserialize_with = "nan::one")]
    pub mean: f64,
}

impl Quartiles {
    fn of(values: &[f64]) -> Self {
        let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Quartiles { count: 0, median: f64::NAN, q25: f64::NAN, q75: f64::NAN, mean: f64::NAN };
        }
        Quartiles { count: v.len(), median: quantile(&v, 0.5), q25: quantile(&v, 0.25), q75: quantile(&v, 0.75), mean: mean(&v) }
    }
}

/// Aggregates over the cells sharing one dt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtGroup {
    pub dt: f64,
    pub cells: usize,
    pub failed: usize,
    /// Per metric, in [`metric_names`] order.
    pub metrics: Vec<(String, Quartiles)>,
    /// The error the convergence table reports.
    pub primary: Quartiles,
    /// Experiment-specific rates (correct, ambiguity, ...).
    pub rates: Vec<Rate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub name: String,
    #[serde(deserialize_with = "nan::one")]
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    #[serde(deserialize_with = "nan::one")]
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub experiment: ExperimentKind,
    pub map: String,
    pub master_seed: u64,
    pub metric_names: Vec<String>,
    pub primary_metric: String,
    pub cells: Vec<CellResult>,
    pub groups: Vec<DtGroup>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl ExperimentSummary {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    pub fn group(&self, dt: f64) -> Option<&DtGroup> {
        self.groups.iter().find(|g| g.dt == dt)
    }

    pub fn rate(&self, dt: f64, name: &str) -> Option<f64> {
        self.group(dt)?.rates.iter().find(|r| r.name == name).map(|r| r.value)
    }

    /// Values of one metric over the successful cells at `dt`.
    pub fn column(&self, dt: f64, name: &str) -> Vec<f64> {
        let Some(i) = self.metric_names.iter().position(|n| n == name) else { return Vec::new() };
        self.cells.iter().filter(|c| c.dt == dt && c.error.is_none()).map(|c| c.metrics[i]).collect()
    }

    /// `dt,seed_index,seed,status,<metrics>,error`, full precision.
    pub fn cells_csv(&self) -> String {
        let mut s = format!("dt,seed_index,seed,status,{},error\n", self.metric_names.join(","));
        for c in &self.cells {
            let status = if c.error.is_some() { "failed" } else { "ok" };
            let _ = write!(s, "{:e},{},{},{status}", c.dt, c.seed_index, c.seed);
            for v in &c.metrics {
                let _ = write!(s, ",{}", fmt_f64(*v));
            }
            let err = c.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
            let _ = writeln!(s, ",\"{err}\"");
        }
        s
    }

    pub fn report_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment: {}", self.experiment.tag());
        let _ = writeln!(s, "exercises: {}", self.experiment.exercises());
        let _ = writeln!(s, "map: {}", self.map);
        let _ = writeln!(s, "master seed: {}", self.master_seed);
        let _ = writeln!(s, "cells: {} ({} failed)", self.cells.len(), self.failed_cells());
        for g in &self.groups {
            let _ = writeln!(s, "\ndt = {:e}: {} cells, {} failed", g.dt, g.cells, g.failed);
            for (name, q) in &g.metrics {
                let _ = writeln!(s, "  {name:<18} median {:<12.4e} q25 {:<12.4e} q75 {:<12.4e} (n={})", q.median, q.q25, q.q75, q.count);
            }
            for r in &g.rates {
                let _ = writeln!(s, "  {:<18} {:.4}", r.name, r.value);
            }
        }
        if !self.checks.is_empty() {
            let _ = writeln!(s, "\nchecks:");
            for c in &self.checks {
                let _ = writeln!(s, "  [{}] {} = {:.6e} (threshold {:.6e})", if c.pass { "pass" } else { "FAIL" }, c.name, c.value, c.threshold);
            }
        }
        let _ = writeln!(s, "\noverall: {}", if self.pass { "pass" } else { "fail" });
        s
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:e}")
    }
}

fn primary_metric(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::TrackerConvergence | ExperimentKind::EvenMapObstruction => "sojourn_sup_error",
        ExperimentKind::ExpsumReconstruction | ExperimentKind::Example2dPipeline => "error",
        ExperimentKind::SymmetryScan => "best_residual",
    }
}

/// Seed of cell `(dt index, seed index)`. The same seed index gets the same
/// seed at every dt.
pub fn cell_seed(master: u64, seed_index: usize) -> u64 {
    rng::derive_seed(master, seed_index as u64)
}

/// Runs every cell on the current rayon pool and merges the results.
pub fn run_cells(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let names = metric_names(cfg.experiment);
    let grid: Vec<(f64, usize)> = cfg.dt.iter().flat_map(|&dt| (0..cfg.seeds.count).map(move |i| (dt, i))).collect();
    let cells: Vec<CellResult> = grid
        .par_iter()
        .map(|&(dt, i)| {
            let seed = cell_seed(cfg.seeds.master, i);
            let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run_cell(cfg, dt, seed)));
            let (metrics, error) = match outcome {
                Ok(Ok(m)) => (m, None),
                Ok(Err(e)) => (vec![f64::NAN; names.len()], Some(e.to_string())),
                Err(_) => (vec![f64::NAN; names.len()], Some("cell panicked".to_string())),
            };
            CellResult { dt, seed_index: i, seed, metrics, error }
        })
        .collect();
    Ok(summarize(cfg, cells))
}

fn summarize(cfg: &ExperimentConfig, cells: Vec<CellResult>) -> ExperimentSummary {
    let names: Vec<String> = metric_names(cfg.experiment).iter().map(|s| s.to_string()).collect();
    let primary = primary_metric(cfg.experiment).to_string();
    let mut summary = ExperimentSummary {
        experiment: cfg.experiment,
        map: serde_json::to_string(&cfg.map).unwrap_or_default(),
        master_seed: cfg.seeds.master,
        metric_names: names.clone(),
        primary_metric: primary.clone(),
        cells,
        groups: Vec::new(),
        checks: Vec::new(),
        pass: true,
    };
    for &dt in &cfg.dt {
        let in_dt: Vec<&CellResult> = summary.cells.iter().filter(|c| c.dt == dt).collect();
        let failed = in_dt.iter().filter(|c| c.error.is_some()).count();
        let metrics: Vec<(String, Quartiles)> = names.iter().map(|n| (n.clone(), Quartiles::of(&summary.column(dt, n)))).collect();
        let rates = group_rates(cfg.experiment, &summary, dt, in_dt.len());
        let primary_q = Quartiles::of(&summary.column(dt, &primary));
        summary.groups.push(DtGroup { dt, cells: in_dt.len(), failed, metrics, primary: primary_q, rates });
    }
    summary.checks = checks(cfg, &summary);
    summary.pass = summary.checks.iter().all(|c| c.pass);
    summary
}

/// Rates are over all configured cells; failures count against them.
fn group_rates(kind: ExperimentKind, s: &ExperimentSummary, dt: f64, cells: usize) -> Vec<Rate> {
    let n = cells.max(1) as f64;
    let frac = |name: &str, pred: &dyn Fn(f64) -> bool| s.column(dt, name).into_iter().filter(|v| pred(*v)).count() as f64 / n;
    let rate = |name: &str, value: f64| Rate { name: name.into(), value };
    match kind {
        ExperimentKind::TrackerConvergence | ExperimentKind::EvenMapObstruction => {
            let correct = frac("correct", &|v| v == 1.0);
            let ambiguous = frac("ambiguous", &|v| v == 1.0);
            let decided = frac("decided", &|v| v == 1.0);
            // sup-error among the runs that chose the right branch
            let ci = s.metric_names.iter().position(|m| m == "correct");
            let si = s.metric_names.iter().position(|m| m == "sup_error");
            let sup: Vec<f64> = match (ci, si) {
                (Some(ci), Some(si)) => s
                    .cells
                    .iter()
                    .filter(|c| c.dt == dt && c.error.is_none() && c.metrics[ci] == 1.0)
                    .map(|c| c.metrics[si])
                    .collect(),
                _ => Vec::new(),
            };
            vec![
                rate("correct_rate", correct),
                rate("ambiguity_rate", ambiguous),
                rate("decided_rate", decided),
                rate("median_sup_error_correct", Quartiles::of(&sup).median),
            ]
        }
        ExperimentKind::SymmetryScan => vec![
            rate("symmetric_rate", frac("verdict", &|v| v == 2.0)),
            rate("no_symmetry_rate", frac("verdict", &|v| v == 0.0)),
        ],
        _ => vec![rate("success_rate", s.column(dt, "error").len() as f64 / n)],
    }
}

fn checks(cfg: &ExperimentConfig, s: &ExperimentSummary) -> Vec<Check> {
    let th = &cfg.thresholds;
    let mut out = Vec::new();
    let mut push = |name: String, value: f64, threshold: f64, pass: bool| out.push(Check { name, value, threshold, pass });
    for g in &s.groups {
        let rate = |n: &str| g.rates.iter().find(|r| r.name == n).map_or(f64::NAN, |r| r.value);
        let dt = g.dt;
        if let Some(t) = th.min_correct_rate {
            let v = rate("correct_rate");
            push(format!("correct_rate@dt={dt:e}"), v, t, v >= t);
        }
        if let Some(t) = th.max_median_sup_error {
            let v = rate("median_sup_error_correct");
            push(format!("median_sup_error_correct@dt={dt:e}"), v, t, v <= t);
        }
        if let Some(t) = th.min_ambiguity_rate {
            let v = rate("ambiguity_rate");
            push(format!("ambiguity_rate@dt={dt:e}"), v, t, v >= t);
        }
        if let Some(t) = th.max_error {
            let errs = s.column(dt, "error");
            let v = if errs.len() < g.cells { f64::INFINITY } else { errs.iter().copied().fold(0.0, f64::max) };
            push(format!("max_error@dt={dt:e}"), v, t, v <= t);
        }
        if let Some(t) = th.max_median_error {
            let v = g.primary.median;
            push(format!("median_{}@dt={dt:e}", s.primary_metric), v, t, v <= t);
        }
        if let Some(v) = th.expected_verdict {
            let code = experiments::verdict_code(v);
            let hits = s.column(dt, "verdict").iter().filter(|x| **x == code).count() as f64 / g.cells.max(1) as f64;
            push(format!("verdict_{v:?}_rate@dt={dt:e}"), hits, 1.0, hits == 1.0);
        }
    }
    if th.decreasing_in_dt && s.groups.len() > 1 {
        let meds: Vec<f64> = s.groups.iter().map(|g| g.primary.median).collect();
        let ok = meds.windows(2).all(|w| w[1] < w[0]);
        let worst = meds.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
        push("median_error_ratio_between_levels".into(), worst, 1.0, ok);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dt: f64,
    #[serde(deserialize_with = "nan::one")]
    pub median_error: f64,
    #[serde(deserialize_with = "nan::one")]
    pub q25: f64,
    #[serde(deserialize_with = "nan::one")]
    pub q75: f64,
    /// `None` on the first row.
    pub empirical_order: Option<f64>,
}

/// Median error per dt with the empirical order between consecutive levels,
/// `ln(m_{i−1}/m_i) / ln(dt_{i−1}/dt_i)`.
pub fn convergence_table(summary: &ExperimentSummary) -> Vec<TableRow> {
    convergence_rows(summary.groups.iter().map(|g| (g.dt, g.primary.median, g.primary.q25, g.primary.q75)))
}

pub fn convergence_rows(levels: impl IntoIterator<Item = (f64, f64, f64, f64)>) -> Vec<TableRow> {
    let mut rows: Vec<TableRow> = Vec::new();
    for (dt, median_error, q25, q75) in levels {
        let empirical_order = rows.last().map(|p| {
            let num = (p.median_error / median_error).ln();
            // equal errors give order 0 even when both are 0
            if p.median_error == median_error {
                0.0
            } else {
                num / (p.dt / dt).ln()
            }
        });
        rows.push(TableRow { dt, median_error, q25, q75, empirical_order });
    }
    rows
}

/// CSV `dt,median_error,q25,q75[,empirical_order]`; the order column is
/// dropped for a single level.
pub fn table_csv(rows: &[TableRow]) -> String {
    let with_order = rows.len() > 1;
    let mut s = String::from("dt,median_error,q25,q75");
    s.push_str(if with_order { ",empirical_order\n" } else { "\n" });
    for r in rows {
        let _ = write!(s, "{:e},{},{},{}", r.dt, fmt_f64(r.median_error), fmt_f64(r.q25), fmt_f64(r.q75));
        if with_order {
            let _ = write!(s, ",{}", r.empirical_order.map_or(String::new(), fmt_f64));
        }
        s.push('\n');
    }
    s
}

/// Files written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
    pub cells_csv: PathBuf,
    pub summary_json: PathBuf,
    pub report_txt: PathBuf,
    pub table_csv: PathBuf,
    pub metadata_json: PathBuf,
}

fn write_atomic(path: &FsPath, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs the experiment with at most `jobs` worker threads (0: rayon's
/// default) and writes `cells.csv`, `table.csv`, `summary.json`,
/// `report.txt` and `metadata.json` to `out_dir` (else the config's
/// `output_dir`). Only `metadata.json` carries timestamps.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&FsPath>, jobs: usize) -> Result<(ExperimentSummary, Option<RunOutputs>)> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::Config(e.to_string()))?;
    let started = std::time::SystemTime::now();
    let summary = pool.install(|| run_cells(cfg))?;
    let finished = std::time::SystemTime::now();
    let Some(dir) = out_dir.map(FsPath::to_path_buf).or_else(|| cfg.output_dir.clone()) else { return Ok((summary, None)) };
    fs::create_dir_all(&dir)?;
    let out = RunOutputs {
        cells_csv: dir.join("cells.csv"),
        summary_json: dir.join("summary.json"),
        report_txt: dir.join("report.txt"),
        table_csv: dir.join("table.csv"),
        metadata_json: dir.join("metadata.json"),
        dir,
    };
    write_atomic(&out.cells_csv, summary.cells_csv().as_bytes())?;
    write_atomic(&out.table_csv, table_csv(&convergence_table(&summary)).as_bytes())?;
    write_atomic(&out.summary_json, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    write_atomic(&out.report_txt, summary.report_text().as_bytes())?;
    let secs = |t: std::time::SystemTime| t.duration_since(std::time::UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let meta = serde_json::json!({
        "started_unix": secs(started),
        "finished_unix": secs(finished),
        "jobs": jobs,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
    });
    write_atomic(&out.metadata_json, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok((summary, Some(out)))
}

/// Reads a `summary.json` written by [`run_experiment`].
pub fn load_summary(path: &FsPath) -> Result<ExperimentSummary> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_orders() {
        let rows = convergence_rows([(4e-4, 0.4, 0.3, 0.5), (1e-4, 0.1, 0.05, 0.2)]);
        assert!((rows[1].empirical_order.unwrap() - 1.0).abs() < 1e-12);
        let flat = convergence_rows([(1e-3, 0.2, 0.1, 0.3), (1e-4, 0.2, 0.1, 0.3)]);
        assert_eq!(flat[1].empirical_order, Some(0.0));
        let single = convergence_rows([(1e-3, 0.2, 0.1, 0.3)]);
        assert_eq!(table_csv(&single), "dt,median_error,q25,q75\n1e-3,2e-1,1e-1,3e-1\n");
    }

    #[test]
    fn unknown_keys_and_bad_dt_are_config_errors() {
        let ok = r#"{"experiment":"E3_expsum_reconstruction","map":{"name":"expsum","a":[1.0]},"dt":[1e-3],"seeds":{"count":2,"master":1}}"#;
        assert!(ExperimentConfig::from_json(ok).is_ok());
        let typo = ok.replace("\"seeds\"", "\"seed\"");
        assert!(matches!(ExperimentConfig::from_json(&typo), Err(Error::Config(_))));
        let extra = ok.replace("\"a\":[1.0]", "\"a\":[1.0],\"b\":2");
        assert!(matches!(ExperimentConfig::from_json(&extra), Err(Error::Config(_))));
        let up = ok.replace("[1e-3]", "[1e-4, 1e-3]");
        assert!(matches!(ExperimentConfig::from_json(&up), Err(Error::Config(_))));
        let wrong_map = ok.replace("\"name\":\"expsum\",\"a\":[1.0]", "\"name\":\"example2d\"");
        assert!(matches!(ExperimentConfig::from_json(&wrong_map), Err(Error::Config(_))));
        let unknown_map = ok.replace("\"name\":\"expsum\"", "\"name\":\"sombrero\"");
        assert!(matches!(ExperimentConfig::from_json(&unknown_map), Err(Error::Config(_))));
    }

    #[test]
    fn single_term_reconstruction_is_exact() {
        let cfg = ExperimentConfig::from_json(
            r#"{"experiment":"E3_expsum_reconstruction","map":{"name":"expsum","a":[1.0]},"dt":[1e-3],
                "seeds":{"count":8,"master":3},"estimator":{"terms":30},"thresholds":{"max_error":1e-10}}"#,
        )
        .unwrap();
        let s = run_cells(&cfg).unwrap();
        assert!(s.pass, "{}", s.report_text());
        assert_eq!(s.cells.len(), 8);
    }

    #[test]
    fn failing_cells_are_isolated() {
        // a tiny redraw budget makes some tracker cells fail
        let text = r#"{"experiment":"E2_even_map_obstruction",
            "map":{"name":"piecewise_poly","coeffs":[0.0,0.0,1.0],"criticals":[0.0],"domain":[-3.0,3.0]},
            "sde":{"x0":0.3,"t_end":0.3},"dt":[1e-4],"seeds":{"count":6,"master":5},
            "estimator":{"max_redraws":1,"post_crossing":0.05}}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        let s = run_cells(&cfg).unwrap();
        assert!(s.failed_cells() > 0 && s.failed_cells() < 6, "{}", s.cells_csv());
        let alone: Vec<CellResult> = s
            .cells
            .iter()
            .filter(|c| c.error.is_none())
            .map(|c| {
                let m = run_cell(&cfg, c.dt, c.seed).unwrap();
                CellResult { metrics: m, ..c.clone() }
            })
            .collect();
        for a in alone {
            let b = s.cells.iter().find(|c| c.seed_index == a.seed_index).unwrap();
            assert_eq!(format!("{:?}", a.metrics), format!("{:?}", b.metrics));
        }
    }

    #[test]
    fn outputs_are_reproducible() {
        let cfg = ExperimentConfig::from_json(
            r#"{"experiment":"E4_example2d_pipeline","map":{"name":"example2d"},"dt":[1e-3,2.5e-4],
                "seeds":{"count":4,"master":9},"estimator":{"window":0.05,"state_bound":1.0}}"#,
        )
        .unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (_, oa) = run_experiment(&cfg, Some(a.path()), 1).unwrap();
        let (_, ob) = run_experiment(&cfg, Some(b.path()), 2).unwrap();
        let (oa, ob) = (oa.unwrap(), ob.unwrap());
        for (x, y) in [(&oa.cells_csv, &ob.cells_csv), (&oa.summary_json, &ob.summary_json), (&oa.table_csv, &ob.table_csv)] {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let back = load_summary(&oa.summary_json).unwrap();
        assert_eq!(back.cells.len(), 8);
    }
}
