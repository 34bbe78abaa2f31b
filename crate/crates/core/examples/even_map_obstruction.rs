//! `h(x) = x²` is invariant under `x ↦ −x`, so after the first visit to 0 the
//! sign of `X` cannot be recovered from `Y`: the tracker marks the rest of
//! the path ambiguous instead of guessing.
use diffobs::obsmaps::{observe, PiecewiseMonotoneMap};
use diffobs::sdesim::{simulate_sde_1d, SdeSpec1D};
use diffobs::trackers::{track_piecewise, TrackerParams};

fn main() -> diffobs::Result<()> {
    let pmap = PiecewiseMonotoneMap::polynomial(vec![0.0, 0.0, 1.0], (-6.0, 6.0), vec![0.0])?;
    let spec = SdeSpec1D::brownian(0.2);
    let path = simulate_sde_1d(&spec, 1.0, 1e-5, 4)?;
    let obs = observe(&pmap.to_observation_map()?, &path)?;
    let res = track_piecewise(&pmap, &spec, &obs, 0.2, &TrackerParams::default())?;
    for r in &res.branch_log {
        println!("t={:.4}: {:?}, gap {:.2e}, candidates {:?}", r.time, r.decision, r.statistic_gap, r.candidates);
    }
    match res.ambiguous_from {
        Some(t) => println!("ambiguous from t = {t:.4}; |x̂| still equals |x| there"),
        None => println!("path never reached 0"),
    }
    Ok(())
}
