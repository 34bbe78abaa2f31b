//! Euler–Maruyama paths: Brownian motion in 2-D and a scalar SDE with
//! state-dependent noise. The sample variance of `B_1` should be close to 1.
use diffobs::harness::SdeConfig;
use diffobs::rng::derive_seed;
use diffobs::sdesim::{simulate_bm, simulate_sde_1d};

fn main() -> diffobs::Result<()> {
    let ends: Vec<f64> = (0..2000)
        .map(|i| simulate_bm(2, 1.0, 1e-2, derive_seed(1, i)).map(|p| p.state(p.len() - 1)[0]))
        .collect::<Result<_, _>>()?;
    let mean = ends.iter().sum::<f64>() / ends.len() as f64;
    let var = ends.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (ends.len() - 1) as f64;
    println!("B_1 over 2000 paths: mean {mean:+.4}, variance {var:.4}");

    let sde: SdeConfig = serde_json::from_str(r#"{"x0":0.5,"t_end":2.0,"drift":"ornstein_uhlenbeck","diffusion":"two_plus_sin"}"#)?;
    let path = simulate_sde_1d(&sde.spec()?, sde.t_end, 1e-3, 7)?;
    for k in (0..path.len()).step_by(400) {
        println!("t = {:.1}  x = {:+.4}", path.times[k], path.states[k]);
    }
    Ok(())
}
