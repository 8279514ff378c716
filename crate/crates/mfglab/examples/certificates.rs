//! Convexity certificates for interaction kernels, and the dichotomy
//! between the two notions. A Gaussian kernel has nonnegative transform,
//! hence is monotone, but its displacement modulus can be negative; a
//! plateau kernel fails monotonicity outright yet a strong enough
//! quadratic term certifies displacement convexity around it.

use mfglab::data::{bump_phi1, DataModel};
use mfglab::fields::Field;

fn describe(name: &str, data: &DataModel) -> mfglab::Result<()> {
    let mono = data.fourier_monotonicity()?;
    let disp = data.displacement_modulus();
    println!("{name}:");
    println!(
        "  monotone               = {:<5}  transform min {:+.3e} at xi = {:?}",
        mono.verdict,
        mono.witness,
        mono.frequency.as_deref().unwrap_or(&[])
    );
    println!(
        "  displacement convex    = {:<5}  kappa = {:+.4} (lambda {}, lambda1 {:.4})",
        disp.verdict,
        disp.witness,
        disp.lambda.unwrap_or(f64::NAN),
        disp.lambda1.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn main() -> mfglab::Result<()> {
    let d = 1;

    // Monotone but not displacement certified: the Gaussian transform is a
    // Gaussian, positive everywhere, while the kernel curvature -2 swamps
    // lambda = 1.
    let gaussian = DataModel::new(
        d,
        1.0,
        Field::Zero,
        Field::Gaussian { amplitude: 0.5, width: 1.0 },
        Field::Zero,
        Field::Zero,
    )?;
    describe("gaussian kernel, lambda = 1", &gaussian)?;

    // Displacement convex but not monotone: the plateau transform
    // oscillates, and lambda = 12 clears twice the curvature scan.
    let bump = DataModel::new(d, 12.0, Field::Zero, bump_phi1(1.0, 2.0)?, Field::Zero, Field::Zero)?;
    describe("plateau kernel, lambda = 12", &bump)?;

    // The same plateau kernel with a weak quadratic term certifies
    // neither.
    let weak = DataModel::new(d, 1.0, Field::Zero, bump_phi1(1.0, 2.0)?, Field::Zero, Field::Zero)?;
    describe("plateau kernel, lambda = 1", &weak)?;
    Ok(())
}
