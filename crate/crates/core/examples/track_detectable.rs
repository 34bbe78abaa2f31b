//! Tracking `X` through `h(x) = x² + x³/2`. At a critical point the two
//! candidate continuations differ in `h''`, which shows up in the drift of
//! `Y`, so the tracker can tell which side the path went.
use diffobs::harness::metrics::first_crossing;
use diffobs::obsmaps::{observe, PiecewiseMonotoneMap};
use diffobs::sdesim::{simulate_sde_1d, SdeSpec1D};
use diffobs::trackers::{track_piecewise, TrackerParams};

fn main() -> diffobs::Result<()> {
    let pmap = PiecewiseMonotoneMap::polynomial(vec![0.0, 0.0, 1.0, 0.5], (-4.0, 8.0), vec![-4.0 / 3.0, 0.0])?;
    let spec = SdeSpec1D::brownian(0.3);
    // first seed whose path reaches the critical point at 0
    let path = (0..)
        .map(|seed| simulate_sde_1d(&spec, 1.0, 1e-5, seed))
        .find(|p| p.as_ref().map_or(true, |p| first_crossing(p, 0.0).is_some()))
        .unwrap()?;
    let obs = observe(&pmap.to_observation_map()?, &path)?;
    let res = track_piecewise(&pmap, &spec, &obs, 0.3, &TrackerParams::default())?;
    for r in &res.branch_log {
        println!(
            "crossed {:+.3} at t={:.4}: {:?} (statistic gap {:.2e}, margin {:.2e})",
            r.critical, r.time, r.decision, r.statistic_gap, r.margin
        );
    }
    let (mut outside, mut inside) = (0.0f64, 0.0f64);
    for (k, (x, e)) in path.states.iter().zip(&res.estimates).enumerate() {
        let d = (x - e).abs();
        if res.branch[k].is_some() { outside = outside.max(d) } else if d.is_finite() { inside = inside.max(d) }
    }
    println!("{} crossings; sup |x̂ − x| on decided branches {outside:.3e}, in bands and undecided excursions {inside:.3e}", res.branch_log.len());
    Ok(())
}
