//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line to stderr
//! (bypassing output capture) and then asserts.

mod common;

use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use diffobs::harness::{run_cells, run_experiment, ExperimentConfig, ExperimentSummary};
use diffobs::obsmaps::{check_coefficient_condition, observe, ExpSumMap, ObservationMap};
use diffobs::qvest::{power_observable_log, power_observable_oracle, power_series_log, qv_rate};
use diffobs::rng;
use diffobs::sdesim::simulate_bm;
use diffobs::symmetry::{detect_reflections_nd, detect_symmetries_1d, IsometryKind, SymmetryVerdict};
use diffobs::trackers::{beta_inverse, invert_2d_example, reconstruct_expsum_log, BetaTable};

// wall-clock budgets assume the criteria do not share the CPU
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed <= Duration::from_secs(secs)
}

#[test]
fn c01_expsum_round_trip() {
    let _g = serial();
    const TERMS: u32 = 100;
    const TOL: f64 = 1e-8;
    let start = Instant::now();
    let mut s = rng::stream(20_240_101);
    let mut worst = [0.0f64; 4];
    let mut failures = Vec::new();
    let mut unexplained = Vec::new();
    for d in 1..=4 {
        for i in 0..100 {
            let a = common::random_admissible(&mut s, d, 1e-3);
            let x = common::uniform_box(&mut s, d, 2.0);
            let series: Vec<f64> = (1..=TERMS).map(|n| common::log_power_sum(&a, &x, n)).collect();
            let map = ExpSumMap::new(a.clone()).unwrap();
            let xr = reconstruct_expsum_log(&map, &series, TOL);
            let err = match &xr {
                Ok(xr) => x.iter().zip(xr).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max),
                Err(_) => f64::INFINITY,
            };
            worst[d - 1] = worst[d - 1].max(err);
            if !(err <= 1e-4) {
                let line = format!("d={d} #{i} a={a:?} x={x:?} err={err:e}");
                // a miss is only acceptable when the returned state reproduces every term to rounding
                let twin = xr.as_ref().is_ok_and(|xr| {
                    (1..=TERMS).all(|n| {
                        let l = series[n as usize - 1];
                        (common::log_power_sum(&a, xr, n) - l).abs() <= 4.0 * f64::EPSILON * l.abs().max(1.0)
                    })
                });
                if !twin {
                    unexplained.push(line.clone());
                }
                failures.push(line);
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && within(elapsed, 10);
    let worst_s: Vec<String> = worst.iter().map(|w| format!("{w:.1e}")).collect();
    report(
        1,
        pass,
        &format!(
            "max |x̂−x|∞ by d = {worst_s:?}, {} of 400 over 1e-4 ({} not explained by f64-indistinguishable states), N={TERMS}, {elapsed:.2?} (≤ 10 s)",
            failures.len(),
            unexplained.len()
        ),
    );
    for f in &failures {
        let _ = std::io::stderr().write_all(format!("    miss: {f}\n").as_bytes());
    }
    assert!(unexplained.is_empty() && failures.len() <= 4 && within(elapsed, 10), "{unexplained:#?}");
}

#[test]
fn c02_beta_injectivity() {
    let _g = serial();
    let start = Instant::now();
    let mut s = rng::stream(77);
    let mut worst_ratio = f64::INFINITY;
    let mut exact = true;
    for d in 1..=10 {
        let a = common::random_admissible(&mut s, d, 1e-6);
        let rep = check_coefficient_condition(&a, 1e-9).unwrap();
        let table = BetaTable::new(&a).unwrap();
        let mut sums = table.sums().to_vec();
        sums.sort_by(f64::total_cmp);
        let gap = sums.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        // the closest pair differs by exactly one reported pattern, so equality is expected
        worst_ratio = worst_ratio.min(gap / rep.margin);
        assert!((gap - common::subset_sum_gap(&a)).abs() <= 1e-14 * gap.max(1.0));
        let tol = 0.4 * rep.margin;
        for mask in 0usize..1 << d {
            let b: f64 = (0..d).filter(|j| mask >> j & 1 == 1).map(|j| 1.0 / (a[j] * a[j])).sum();
            let c = beta_inverse(&a, b, tol).unwrap();
            exact &= (0..d).all(|j| c[j] as usize == mask >> j & 1);
        }
    }
    let elapsed = start.elapsed();
    let separated = worst_ratio >= 1.0 - 1e-9;
    let pass = separated && exact && within(elapsed, 1);
    report(2, pass, &format!("min gap / margin = {worst_ratio:.12}, inverse exact on all 2^d: {exact}, d ≤ 10, {elapsed:.2?} (≤ 1 s)"));
    assert!(pass);
}

fn example2d_config(seeds: usize) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{"experiment":"E4_example2d_pipeline","map":{{"name":"example2d"}},"dt":[1e-5],
            "seeds":{{"count":{seeds},"master":31}},"estimator":{{"window":0.02,"state_bound":1.0}},
            "thresholds":{{"max_median_error":0.2}}}}"#
    ))
    .unwrap()
}

#[test]
fn c03_example2d_inverter() {
    let _g = serial();
    let start = Instant::now();
    let mut s = rng::stream(3);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let x = common::uniform_box(&mut s, 2, 3.0);
        let (y1, y2) = common::example2d_forward((x[0], x[1]));
        let (a, b) = invert_2d_example(y1, y2).unwrap();
        worst = worst.max((a - x[0]).abs().max((b - x[1]).abs()));
    }
    let summary = run_cells(&example2d_config(100)).unwrap();
    let med = summary.group(1e-5).unwrap().primary.median;
    let elapsed = start.elapsed();
    let pass = worst <= 1e-10 && med <= 0.2 && summary.failed_cells() == 0 && within(elapsed, 120);
    report(
        3,
        pass,
        &format!(
            "round trip max err {worst:.1e} (≤ 1e-10); estimated q, dt=1e-5, window 0.02: median err {med:.4} (≤ 0.2), {} failed cells, {elapsed:.2?}",
            summary.failed_cells()
        ),
    );
    assert!(pass);
}

#[test]
fn c04_qv_estimator() {
    let _g = serial();
    let start = Instant::now();
    const W: f64 = 0.05;
    let id = ObservationMap::identity(vec![(-10.0, 10.0)]).unwrap();
    let rates = |dt: f64| -> Vec<f64> {
        (0..100u64)
            .map(|i| {
                let path = simulate_bm(1, 2.0 * W, dt, rng::derive_seed(404, i)).unwrap();
                let obs = observe(&id, &path).unwrap();
                qv_rate(&obs, W, W, 1).unwrap()
            })
            .collect()
    };
    let at = rates(1e-4);
    let med = common::median(&at);
    let levels = [1e-3, 2.5e-4, 6.25e-5];
    let errs: Vec<f64> = levels.iter().map(|&dt| common::median(&rates(dt).iter().map(|r| (r - 1.0).abs()).collect::<Vec<_>>())).collect();
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    let elapsed = start.elapsed();
    let pass = (med - 1.0).abs() <= 0.1 && decreasing && within(elapsed, 120);
    report(4, pass, &format!("median rate at dt=1e-4 {med:.4} (1 ± 0.1); median |err| at dt {levels:?} = {errs:.4?}, {elapsed:.2?}"));
    assert!(pass);
}

const CUBIC: &str = r#"{"name":"piecewise_poly","coeffs":[0.0,0.0,1.0,0.5],"criticals":[-1.3333333333333333,0.0],"domain":[-4.0,8.0]}"#;
const SQUARE: &str = r#"{"name":"piecewise_poly","coeffs":[0.0,0.0,1.0],"criticals":[0.0],"domain":[-6.0,6.0]}"#;

fn tracker_config(kind: &str, map: &str, diffusion: &str, dt: &str, seeds: usize) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{"experiment":"{kind}","map":{map},"sde":{{"x0":1.0,"t_end":3.0,"diffusion":"{diffusion}"}},
            "dt":{dt},"seeds":{{"count":{seeds},"master":2024}}}}"#
    ))
    .unwrap()
}

fn detectable() -> &'static (ExperimentSummary, Duration) {
    static CELL: OnceLock<(ExperimentSummary, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let s = run_cells(&tracker_config("E1_tracker_convergence", CUBIC, "unit", "[1e-5]", 50)).unwrap();
        (s, start.elapsed())
    })
}

/// Correct-branch rate, worst post-decision sup-error over correct runs, and
/// the median sup-error counted from the crossing itself.
fn tracker_scores(s: &ExperimentSummary) -> (f64, f64, f64, usize) {
    let i = |n: &str| s.metric_names.iter().position(|m| m == n).unwrap();
    let (ci, si, so) = (i("correct"), i("sup_error"), i("sojourn_sup_error"));
    let ok: Vec<_> = s.cells.iter().filter(|c| c.error.is_none()).collect();
    let correct: Vec<_> = ok.iter().filter(|c| c.metrics[ci] == 1.0).collect();
    let rate = correct.len() as f64 / s.cells.len() as f64;
    let worst = correct.iter().map(|c| c.metrics[si]).fold(0.0, f64::max);
    let sojourn = common::median(&correct.iter().map(|c| c.metrics[so]).collect::<Vec<_>>());
    (rate, worst, sojourn, s.failed_cells())
}

#[test]
fn c05_tracker_detectable() {
    let _g = serial();
    let (s, elapsed) = detectable();
    let (rate, worst, sojourn, failed) = tracker_scores(s);
    let pass = rate >= 0.8 && worst <= 0.05 && within(*elapsed, 300);
    report(
        5,
        pass,
        &format!(
            "x²+0.5x³, dt=1e-5, 50 seeds: correct {rate:.2} (≥ 0.8), max post-decision sup-err {worst:.1e} (≤ 0.05), median err from crossing incl. band {sojourn:.3}, {failed} failed, {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

#[test]
fn c06_even_map_obstruction() {
    let _g = serial();
    let (det, _) = detectable();
    let start = Instant::now();
    let s = run_cells(&tracker_config("E2_even_map_obstruction", SQUARE, "unit", "[1e-5]", 50)).unwrap();
    let elapsed = start.elapsed();
    let amb = s.rate(1e-5, "ambiguity_rate").unwrap();
    let gap_even = common::median(&s.column(1e-5, "statistic_gap"));
    let gap_det = common::median(&det.column(1e-5, "statistic_gap"));
    let pass = amb >= 0.95 && gap_even <= 0.1 * gap_det && within(elapsed, 300);
    report(
        6,
        pass,
        &format!("x², 50 seeds: ambiguous {amb:.2} (≥ 0.95), median gap {gap_even:.2e} vs detectable {gap_det:.2e} (≤ 10%), {elapsed:.2?}"),
    );
    assert!(pass);
}

#[test]
fn c07_lamperti_tracking() {
    let _g = serial();
    let start = Instant::now();
    let s = run_cells(&tracker_config("E1_tracker_convergence", CUBIC, "two_plus_sin", "[1e-5]", 50)).unwrap();
    let elapsed = start.elapsed();
    let (rate, worst, sojourn, failed) = tracker_scores(&s);
    let pass = rate >= 0.8 && worst <= 0.05 && within(elapsed, 300);
    report(
        7,
        pass,
        &format!(
            "g=2+sin, x²+0.5x³, 50 seeds: correct {rate:.2} (≥ 0.8), max post-decision sup-err {worst:.1e} (≤ 0.05), median err from crossing {sojourn:.3}, {failed} failed, {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

#[test]
fn c08_symmetry_detection() {
    let _g = serial();
    let start = Instant::now();
    let cos = detect_symmetries_1d(f64::cos, (-10.0, 10.0), 2000, 1e-6).unwrap();
    let tau = std::f64::consts::TAU;
    let period = cos
        .candidates
        .iter()
        .filter(|c| c.candidate.kind == IsometryKind::Translation)
        .map(|c| (c.candidate.translation[0].abs() - tau).abs())
        .fold(f64::INFINITY, f64::min);
    let center = cos
        .candidates
        .iter()
        .filter(|c| c.candidate.kind == IsometryKind::PointReflection)
        .map(|c| (c.candidate.translation[0] / 2.0).abs())
        .fold(f64::INFINITY, f64::min);
    let cubic = detect_symmetries_1d(|x| x * x + 0.5 * x * x * x, (-3.0, 3.0), 2000, 1e-6).unwrap();

    let dom = vec![(-2.0, 2.0); 2];
    let equal = ExpSumMap::new(vec![1.0, 1.0]).unwrap().to_observation_map(dom.clone()).unwrap();
    let rep = detect_reflections_nd(&equal, &dom, 10, 1e-6, 8).unwrap();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let swap = rep
        .candidates
        .iter()
        .filter(|c| {
            c.candidate.normal_offset().is_some_and(|(n, alpha)| (n[0] - r).abs() < 1e-6 && (n[1] + r).abs() < 1e-6 && alpha.abs() < 1e-6)
        })
        .map(|c| c.residual)
        .fold(f64::INFINITY, f64::min);

    let mut verdicts = Vec::new();
    for (i, a) in [vec![1.0, 2.0], vec![0.7, -1.3], vec![1.0, 1.5, -2.2]].into_iter().enumerate() {
        let d = a.len();
        let dom = vec![(-2.0, 2.0); d];
        let h = ExpSumMap::new(a).unwrap().to_observation_map(dom.clone()).unwrap();
        verdicts.push(detect_reflections_nd(&h, &dom, 10, 1e-6, 100 + i as u64).unwrap().verdict);
    }
    let elapsed = start.elapsed();
    let pass = period <= 1e-6
        && center <= 1e-6
        && cubic.verdict == SymmetryVerdict::NoSymmetryFound
        && swap <= 1e-12
        && verdicts.iter().all(|v| *v == SymmetryVerdict::NoSymmetryFound)
        && within(elapsed, 30);
    report(
        8,
        pass,
        &format!(
            "cos: |p−2π| {period:.1e}, |centre| {center:.1e}; cubic {:?}; expsum a=(1,1) swap residual {swap:.1e}; admissible expsums {verdicts:?}; {elapsed:.2?}",
            cubic.verdict
        ),
    );
    assert!(pass);
}

#[test]
fn c09_recursion_matches_closed_form() {
    let _g = serial();
    let start = Instant::now();
    let mut s = rng::stream(9);
    let mut worst = 0.0f64;
    for d in 1..=4 {
        for _ in 0..100 {
            let a = common::random_admissible(&mut s, d, 1e-6);
            let x = common::uniform_box(&mut s, d, 2.0);
            let map = ExpSumMap::new(a.clone()).unwrap();
            let rec = common::recursion_series(&a, &x, 10);
            for n in 1..=10u32 {
                let closed = power_observable_oracle(&map, &x, n).unwrap();
                let from_log = power_observable_log(&map, &x, n).unwrap().exp();
                let r = rec[n as usize - 1];
                worst = worst.max(((r - closed) / closed).abs()).max(((from_log - closed) / closed).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && within(elapsed, 1);
    report(9, pass, &format!("max relative gap recursion vs closed form {worst:.1e} (≤ 1e-12), n ≤ 10, d ≤ 4, 400 states, {elapsed:.2?}"));
    assert!(pass);
}

fn small_configs() -> Vec<ExperimentConfig> {
    let mut v = vec![
        tracker_config("E1_tracker_convergence", CUBIC, "unit", "[1e-3,1e-4]", 3),
        tracker_config("E2_even_map_obstruction", SQUARE, "unit", "[1e-4]", 3),
        example2d_config(4),
    ];
    for text in [
        r#"{"experiment":"E3_expsum_reconstruction","map":{"name":"expsum","a":[1.0,-1.7,0.6]},"dt":[1e-3],"seeds":{"count":4,"master":5}}"#,
        r#"{"experiment":"E5_symmetry_scan","map":{"name":"expsum","a":[1.0,2.0]},"dt":[1e-3],"seeds":{"count":2,"master":6}}"#,
    ] {
        v.push(ExperimentConfig::from_json(text).unwrap());
    }
    v
}

#[test]
fn c10_determinism() {
    let _g = serial();
    let start = Instant::now();
    let mut identical = 0;
    let configs = small_configs();
    for (i, cfg) in configs.iter().enumerate() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (_, oa) = run_experiment(cfg, Some(a.path()), 1).unwrap();
        let (_, ob) = run_experiment(cfg, Some(b.path()), 3).unwrap();
        let (oa, ob) = (oa.unwrap(), ob.unwrap());
        let same = [(&oa.cells_csv, &ob.cells_csv), (&oa.table_csv, &ob.table_csv), (&oa.summary_json, &ob.summary_json)]
            .iter()
            .all(|(x, y)| std::fs::read(x).unwrap() == std::fs::read(y).unwrap());
        assert!(same, "config {i} differs between runs");
        identical += 1;
    }
    let elapsed = start.elapsed();
    report(10, identical == configs.len(), &format!("{identical}/{} experiment configs byte-identical across reruns (1 vs 3 jobs), {elapsed:.2?}", configs.len()));
}

#[test]
fn expsum_series_helpers_agree() {
    // the library series and the test oracle are computed independently
    let a = [0.8, -1.9, 1.4];
    let x = [0.3, -1.1, 1.7];
    let map = ExpSumMap::new(a.to_vec()).unwrap();
    let lib = power_series_log(&map, &x, 20).unwrap();
    for (n, l) in lib.iter().enumerate() {
        assert!((l - common::log_power_sum(&a, &x, n as u32 + 1)).abs() <= 1e-13 * l.abs().max(1.0));
    }
}
