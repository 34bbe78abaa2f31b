//! Rolling quadratic-variation rates. Observing BM through `h(x) = x²`
//! gives `d⟨h(B)⟩/dt = 4B²`, which the estimate follows along the path.
use diffobs::obsmaps::{observe, ObservationMap};
use diffobs::qvest::rate_matrix_at;
use diffobs::sdesim::simulate_bm;

fn main() -> diffobs::Result<()> {
    let path = simulate_bm(1, 2.0, 1e-5, 11)?;
    let h = ObservationMap::scalar(|x| x * x, -10.0, 10.0)?;
    let obs = observe(&h, &path)?;
    let at: Vec<usize> = (1..20).map(|k| k * 10_000).collect();
    let rates = rate_matrix_at(&obs, &at, 0.02, 1)?;
    println!("{:>6} {:>10} {:>10}", "t", "estimate", "4x²");
    for k in 0..rates.len() {
        let t = rates.times[k];
        let x = path.states[at[k]];
        println!("{t:6.2} {:10.4} {:10.4}", rates.entry(k, 0, 0), 4.0 * x * x);
    }
    for w in &rates.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
