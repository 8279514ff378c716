//! The Hopf-Lax counterexample: concave terminal data `-sqrt(1 + q^2)`
//! under quadratic transport in dimension one. Up to horizon 1 the value
//! stays differentiable; beyond it two symmetric minimizers coexist at the
//! origin and the superdifferential opens a gap of width `2 sqrt(t^2-1)/t`.

use mfglab::master::counterexample_hopf_lax;

fn main() -> mfglab::Result<()> {
    println!("value at q = 0 across the horizon:");
    println!(
        "{:>5} {:>18} {:>18} {:>12} {:>24}",
        "t", "value", "closed form", "minimizers", "superdifferential"
    );
    for &t in &[0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0] {
        let s = counterexample_hopf_lax(t, 0.0)?;
        let exact = if t >= 1.0 { -0.5 * t - 0.5 / t } else { -1.0 };
        let mins: Vec<String> = s.minimizers.iter().map(|y| format!("{y:+.4}")).collect();
        let slopes: Vec<String> = s.superdifferential.iter().map(|p| format!("{p:+.4}")).collect();
        println!(
            "{t:>5.2} {:>18.12} {exact:>18.12} {:>12} {:>24}",
            s.value,
            mins.join(" "),
            slopes.join(" ")
        );
    }

    // At t > 1 the minimizers are +- sqrt(t^2 - 1) exactly.
    let t = 2.0;
    let s = counterexample_hopf_lax(t, 0.0)?;
    let y = (t * t - 1.0f64).sqrt();
    println!("\nt = {t}: minimizers vs +-sqrt(t^2-1):");
    println!("  computed  {:?}", s.minimizers);
    println!("  exact     [{:.12}, {:.12}]", -y, y);
    println!("  slope gap {:.12} vs 2 sqrt(t^2-1)/t = {:.12}", s.slope_gap(), 2.0 * y / t);

    // Away from the origin the value is smooth again; a short scan in q.
    println!("\nprofile at t = 2:");
    for &q in &[-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0] {
        let s = counterexample_hopf_lax(t, q)?;
        println!(
            "  q = {q:+.1}: value {:>16.12}, {} minimizer(s), slope gap {:.3e}",
            s.value,
            s.minimizers.len(),
            s.slope_gap()
        );
    }
    Ok(())
}
