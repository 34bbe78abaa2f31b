//! Symmetry search: `cos` has a period and a mirror, the cubic has neither,
//! and an exponential sum is symmetric exactly when two coefficients agree.
use diffobs::obsmaps::ExpSumMap;
use diffobs::symmetry::{asymmetry_verdict, detect_reflections_nd, detect_symmetries_1d};

fn main() -> diffobs::Result<()> {
    let cos = detect_symmetries_1d(f64::cos, (-10.0, 10.0), 2000, 1e-6)?;
    for c in cos.candidates.iter().take(4) {
        println!("cos: {:?} shift {:+.8} residual {:.1e}", c.candidate.kind, c.candidate.translation[0], c.residual);
    }
    let cubic = detect_symmetries_1d(|x| x * x + 0.5 * x * x * x, (-3.0, 3.0), 2000, 1e-6)?;
    println!("x² + x³/2: {:?}", cubic.verdict);

    let dom = vec![(-2.0, 2.0); 2];
    for a in [vec![1.0, 1.0], vec![1.0, 2.0]] {
        let map = ExpSumMap::new(a.clone())?;
        let h = map.to_observation_map(dom.clone())?;
        let rep = detect_reflections_nd(&h, &dom, 10, 1e-6, 1)?;
        let witness = map.power_map(dom.clone())?;
        let v = asymmetry_verdict(&witness, true, &rep, Some(&[0.3, -0.4]));
        println!("a = {a:?}: {:?}, best residual {:?}, asymmetry {:?}", rep.verdict, rep.candidates.first().map(|c| c.residual), v);
    }
    Ok(())
}
