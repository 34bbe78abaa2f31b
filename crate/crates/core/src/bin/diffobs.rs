//! Command-line front end. Maps and SDEs are given as JSON, either inline or
//! as a path to a file, using the same schema as experiment configs.

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use diffobs::harness::{self, ExperimentConfig, MapSpec, SdeConfig};
use diffobs::obsmaps::{observe, ObsPath};
use diffobs::qvest::{power_series_log, qv_rate, rate_matrix};
use diffobs::sdesim::{simulate_bm, simulate_sde_1d, Path};
use diffobs::symmetry;
use diffobs::trackers::{reconstruct_expsum_log, track_piecewise, TrackerParams};
use diffobs::Error;

#[derive(Parser)]
#[command(name = "diffobs", version, about = "Diffusions observed through non-injective maps")]
struct Cli {
    /// Master seed for anything random.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file, or directory for `experiment run`. Defaults to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress and summaries on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    /// Parallel cells for experiments (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a hidden path: a scalar SDE, or d-dimensional Brownian motion.
    Simulate {
        /// SDE as JSON, e.g. '{"x0":1,"t_end":3,"diffusion":"two_plus_sin"}'.
        #[arg(long, conflicts_with = "bm_dim")]
        sde: Option<String>,
        /// Dimension of a Brownian motion started at the origin.
        #[arg(long)]
        bm_dim: Option<usize>,
        /// Horizon for `--bm-dim`.
        #[arg(long, default_value_t = 1.0)]
        t_end: f64,
        #[arg(long)]
        dt: f64,
    },
    /// Push a path CSV through a map.
    Observe {
        #[command(flatten)]
        map: MapArg,
        #[arg(long)]
        path: PathBuf,
    },
    /// Quadratic-covariation rate of an observation CSV.
    Qv {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        window: f64,
        #[arg(long, default_value_t = 1)]
        skip: usize,
        /// Single scalar rate at this time instead of the full matrix series.
        #[arg(long)]
        at: Option<f64>,
    },
    /// Track the hidden state of a scalar SDE through a piecewise-monotone map.
    Track {
        #[command(flatten)]
        map: MapArg,
        #[arg(long)]
        sde: String,
        /// Observation CSV.
        #[arg(long)]
        input: PathBuf,
        /// Tracker parameters as JSON (unknown keys rejected).
        #[arg(long)]
        params: Option<String>,
        /// Where to write the branch log (JSON).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Recover the state of an exponential-sum map from its power observables.
    Reconstruct {
        /// Coefficients `a`, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        a: Vec<f64>,
        /// File with one `ln h_n` per line.
        #[arg(long, conflicts_with = "state")]
        series: Option<PathBuf>,
        /// Generate the series from this state instead.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        state: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100)]
        terms: u32,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Search a map for rigid-motion symmetries.
    Symmetry {
        #[command(flatten)]
        map: MapArg,
        #[arg(long, default_value_t = symmetry::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
    },
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Run every cell of a config and write the result files.
    Run { config: PathBuf },
    /// Print the convergence table of a saved summary.
    Table { summary: PathBuf },
}

#[derive(Args)]
struct MapArg {
    /// Map as JSON, e.g. '{"name":"expsum","a":[1,2]}'.
    #[arg(long)]
    map: String,
    /// Box `lo,hi` used for every coordinate when the map needs one.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    domain: Option<Vec<f64>>,
}

enum Failure {
    Lib(Error),
    Partial(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Lib(Error::from(e))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Partial(n)) => {
            eprintln!("{n} cells failed");
            ExitCode::from(4)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() {
                3
            } else if matches!(e, Error::Config(_) | Error::Parameter(_) | Error::Io(_)) {
                2
            } else {
                1
            })
        }
    }
}

/// Inline JSON if it looks like an object, else a file to read.
fn json_arg<T: DeserializeOwned>(arg: &str) -> Result<T, Error> {
    let text = if arg.trim_start().starts_with('{') { arg.to_string() } else { std::fs::read_to_string(arg)? };
    Ok(serde_json::from_str(&text)?)
}

fn open(path: &FsPath) -> Result<BufReader<File>, Error> {
    Ok(BufReader::new(File::open(path)?))
}

fn emit(out: &Option<PathBuf>, write: impl FnOnce(&mut dyn Write) -> diffobs::Result<()>) -> Result<(), Failure> {
    match out {
        Some(p) => {
            let mut f = io::BufWriter::new(File::create(p)?);
            write(&mut f)?;
            f.flush()?;
        }
        None => {
            let mut lock = io::stdout().lock();
            write(&mut lock)?;
        }
    }
    Ok(())
}

impl MapArg {
    fn spec(&self) -> Result<MapSpec, Error> {
        json_arg(&self.map)
    }

    fn domain(&self, dim: usize) -> Result<Option<Vec<(f64, f64)>>, Error> {
        match self.domain.as_deref() {
            None => Ok(None),
            Some(&[lo, hi]) => Ok(Some(vec![(lo, hi); dim])),
            Some(_) => Err(Error::Config("--domain takes exactly lo,hi".into())),
        }
    }
}

fn map_dim(spec: &MapSpec) -> usize {
    match spec {
        MapSpec::Expsum { a } => a.len(),
        MapSpec::Example2d => 2,
        MapSpec::Identity { dim } => *dim,
        MapSpec::PiecewisePoly { .. } | MapSpec::Cosine => 1,
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::Simulate { sde, bm_dim, t_end, dt } => {
            let path = match (sde, bm_dim) {
                (Some(s), _) => {
                    let cfg: SdeConfig = json_arg(s)?;
                    simulate_sde_1d(&cfg.spec()?, cfg.t_end, *dt, cli.seed)?
                }
                (None, Some(d)) => simulate_bm(*d, *t_end, *dt, cli.seed)?,
                (None, None) => return Err(Error::Config("give --sde or --bm-dim".into()).into()),
            };
            emit(&cli.out, |w| path.write_csv(w))
        }
        Cmd::Observe { map, path } => {
            let spec = map.spec()?;
            let h = spec.observation_map(map.domain(map_dim(&spec))?)?;
            let p = Path::read_csv(open(path)?)?;
            let obs = observe(&h, &p)?;
            emit(&cli.out, |w| obs.write_csv(w))
        }
        Cmd::Qv { input, window, skip, at } => {
            let obs = ObsPath::read_csv(open(input)?)?;
            match at {
                Some(t) => {
                    let r = qv_rate(&obs, *t, *window, *skip)?;
                    emit(&cli.out, |w| Ok(writeln!(w, "{r:.16e}")?))
                }
                None => {
                    let rates = rate_matrix(&obs, *window, *skip)?;
                    emit(&cli.out, |w| rates.write_csv(w))
                }
            }
        }
        Cmd::Track { map, sde, input, params, log } => {
            let pmap = map.spec()?.piecewise()?;
            let cfg: SdeConfig = json_arg(sde)?;
            let mut p: TrackerParams = match params {
                Some(s) => json_arg(s)?,
                None => TrackerParams::default(),
            };
            p.seed = cli.seed;
            let obs = ObsPath::read_csv(open(input)?)?;
            let res = track_piecewise(&pmap, &cfg.spec()?, &obs, cfg.x0, &p)?;
            if let Some(l) = log {
                res.write_log_json(File::create(l)?)?;
            }
            if !cli.quiet {
                for r in &res.branch_log {
                    eprintln!("critical {} at t={:.6}: {:?}", r.critical, r.time, r.decision);
                }
            }
            emit(&cli.out, |w| res.write_csv(w))
        }
        Cmd::Reconstruct { a, series, state, terms, tol } => {
            let map = diffobs::obsmaps::ExpSumMap::new(a.clone())?;
            let logs: Vec<f64> = match (series, state) {
                (Some(f), _) => std::fs::read_to_string(f)?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| l.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad series value '{l}': {e}"))))
                    .collect::<Result<_, _>>()?,
                (None, Some(x)) => power_series_log(&map, x, *terms)?,
                (None, None) => return Err(Error::Config("give --series or --state".into()).into()),
            };
            let x = reconstruct_expsum_log(&map, &logs, *tol)?;
            emit(&cli.out, |w| Ok(writeln!(w, "{}", serde_json::to_string(&x)?)?))
        }
        Cmd::Symmetry { map, tol, restarts } => {
            let spec = map.spec()?;
            let h = spec.observation_map(map.domain(map_dim(&spec))?)?;
            let domain = h.domain().to_vec();
            let report = if h.dim_in() == 1 && h.dim_out() == 1 {
                symmetry::detect_symmetries_1d(|x| h.eval(&[x])[0], domain[0], harness::experiments::SCAN_GRID, *tol)?
            } else {
                symmetry::detect_reflections_nd(&h, &domain, *restarts, *tol, cli.seed)?
            };
            if !cli.quiet {
                eprintln!("verdict: {:?}, {} candidate(s)", report.verdict, report.candidates.len());
            }
            emit(&cli.out, |w| Ok(writeln!(w, "{}", report.to_json()?)?))
        }
        Cmd::Experiment(ExperimentCmd::Run { config }) => {
            let cfg = ExperimentConfig::load(config)?;
            let dir = cli.out.clone().or_else(|| cfg.output_dir.clone());
            let jobs = if cli.jobs == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { cli.jobs };
            let (summary, outputs) = harness::run_experiment(&cfg, dir.as_deref(), jobs)?;
            if !cli.quiet {
                eprint!("{}", summary.report_text());
                if let Some(o) = &outputs {
                    eprintln!("results in {}", o.dir.display());
                }
            }
            match summary.failed_cells() {
                0 => Ok(()),
                n => Err(Failure::Partial(n)),
            }
        }
        Cmd::Experiment(ExperimentCmd::Table { summary }) => {
            let s = harness::load_summary(summary)?;
            let rows = harness::convergence_table(&s);
            emit(&cli.out, |w| Ok(w.write_all(harness::table_csv(&rows).as_bytes())?))
        }
    }
}
