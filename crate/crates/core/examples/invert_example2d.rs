//! `h(x) = e^{x₁} − e^{x₂}` is not injective, but `h` together with its
//! quadratic-variation rate `q = e^{2x₁} + e^{2x₂}` determines `x`.
use diffobs::obsmaps::{observe, ObservationMap};
use diffobs::qvest::qv_rate;
use diffobs::sdesim::simulate_bm_from;
use diffobs::trackers::{invert_2d_estimated, invert_2d_example};

fn main() -> diffobs::Result<()> {
    let x = (0.4_f64, -0.7_f64);
    let (y, q) = (x.0.exp() - x.1.exp(), (2.0 * x.0).exp() + (2.0 * x.1).exp());
    println!("exact (h, q) = ({y:.6}, {q:.6}) -> {:?}", invert_2d_example(y, q)?);

    let (dt, w) = (1e-5, 0.02);
    let path = simulate_bm_from(&[x.0, x.1], 2.0 * w, dt, 5)?;
    let h = ObservationMap::example2d(vec![(-6.0, 6.0); 2])?;
    let obs = observe(&h, &path)?;
    let mid = (w / dt).round() as usize;
    let q_hat = qv_rate(&obs, path.times[mid], w, 1)?;
    let noise = (dt / w).sqrt();
    let est = invert_2d_estimated(obs.values[mid], q_hat, noise)?;
    println!("estimated q {q_hat:.4}; hidden {:?}; recovered ({:.4}, {:.4})", path.state(mid), est.0, est.1);
    Ok(())
}
