//! `h(x) = Σ e^{a_j x_j}` loses the ordering of its terms, but the power
//! observables `h_n = Σ a_j^{-2} (a_j² e^{a_j x_j})ⁿ` pin down `x` whenever no
//! signed subset sum of the `a_j^{-2}` vanishes.
use diffobs::obsmaps::{check_coefficient_condition, ExpSumMap};
use diffobs::qvest::power_series_log;
use diffobs::trackers::reconstruct_expsum_log;

fn main() -> diffobs::Result<()> {
    for a in [vec![1.0, 1.0], vec![1.0, 2.0_f64.sqrt()]] {
        let r = check_coefficient_condition(&a, 1e-9)?;
        println!("a = {a:?}: admissible {}, margin {:.4}", r.admissible, r.margin);
    }
    let a = vec![1.0, -1.7, 0.6];
    let x = vec![0.5, 0.2, -1.1];
    let map = ExpSumMap::new(a.clone())?;
    let series = power_series_log(&map, &x, 100)?;
    let xr = reconstruct_expsum_log(&map, &series, 1e-8)?;
    println!("x = {x:?}\nx̂ = {xr:?}");
    Ok(())
}
