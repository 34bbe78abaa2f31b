//! Runs an experiment config in memory and prints the text report.
//!
//! `cargo run --release --example run_experiment -- configs/e3_expsum.json`
use diffobs::harness::{convergence_table, run_cells, table_csv, ExperimentConfig};

fn main() -> diffobs::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/e3_expsum.json").into());
    let cfg = ExperimentConfig::load(path.as_ref())?;
    let summary = run_cells(&cfg)?;
    print!("{}", summary.report_text());
    print!("{}", table_csv(&convergence_table(&summary)));
    Ok(())
}
