//! Optimal transport between empirical measures: the W2 distance, the
//! optimal permutation coupling, and the two interpolation notions. The
//! displacement geodesic keeps constant speed; the classical mixture does
//! not move any mass at all.

use mfglab::measures::{
    classical_interpolate, displacement_interpolate, w2_brute_force, w2_distance,
    EmpiricalMeasure,
};

fn main() -> mfglab::Result<()> {
    let mu = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, -1.0, -1.0])?;
    let nu = EmpiricalMeasure::new(2, vec![2.0, 1.0, 0.5, -0.5, -1.5, 0.5, 1.0, 2.0])?;

    let (w, coupling) = w2_distance(&mu, &nu)?;
    let (wb, _) = w2_brute_force(&mu, &nu)?;
    println!("m = {}, d = {}", mu.len(), mu.dim());
    println!("W2(mu, nu)      = {w:.12}");
    println!("brute force     = {wb:.12}  (gap {:.1e})", (w - wb).abs());
    println!("coupling        = {:?}, cost {:.12}", coupling.permutation, coupling.cost);

    // Interior points of the geodesic split the distance proportionally.
    println!("\ndisplacement geodesic:");
    for &s in &[0.0, 0.25, 0.5, 0.75, 1.0] {
        let mid = displacement_interpolate(&mu, &nu, s)?;
        let (a, _) = w2_distance(&mu, &mid)?;
        let (b, _) = w2_distance(&mid, &nu)?;
        println!(
            "  s = {s:.2}: W2(mu, .) = {a:.6} = {:.6} * W2, W2(., nu) = {b:.6}",
            a / w
        );
    }

    // The vertical mixture keeps both supports and reweights them.
    let mix = classical_interpolate(&mu, &nu, 0.5)?;
    println!("\nclassical mixture at s = 0.5:");
    println!("  support size    = {}", mix.len());
    println!("  second moment   = {:.6}", mix.second_moment());
    println!(
        "  vs displacement = {:.6}",
        displacement_interpolate(&mu, &nu, 0.5)?.second_moment()
    );
    Ok(())
}
