//! Lamperti coordinate `Φ(x) = ∫ 1/g` for `g = 2 + sin x`: `Φ(X)` has unit
//! noise, so its realised quadratic variation grows like `t`.
use diffobs::obsmaps::ObsPath;
use diffobs::qvest::qv_rate;
use diffobs::sdesim::{simulate_sde_1d, Lamperti, SdeSpec1D};

fn main() -> diffobs::Result<()> {
    let spec = SdeSpec1D::new(|_| 0.0, |x: f64| 2.0 + x.sin(), 1.0, 3.0, 1.0, 0.3)?.with_diffusion_prime(f64::cos);
    let lam = Lamperti::new(&spec, -20.0, 20.0)?;
    for x in [-2.0, 0.0, 1.5, 4.0] {
        let y = lam.phi(x);
        println!("x = {x:+.2}  Φ(x) = {y:+.6}  Φ⁻¹(Φ(x)) − x = {:+.1e}", lam.phi_inv(y) - x);
    }
    let dt = 1e-4;
    let path = simulate_sde_1d(&spec, 1.0, dt, 3)?;
    let raw = ObsPath::from_scalar(path.states.clone(), dt);
    let flat = ObsPath::from_scalar(path.states.iter().map(|&x| lam.phi(x)).collect(), dt);
    let x = path.states[5000];
    println!("at t = 0.5: rate of X {:.3} (g² = {:.3}), rate of Φ(X) {:.3}", qv_rate(&raw, 0.5, 0.1, 1)?, (2.0 + x.sin()).powi(2), qv_rate(&flat, 0.5, 0.1, 1)?);
    Ok(())
}
