//! Builds a non-diagonal mechanical model and audits its structure: the
//! Legendre transform round trip between Hamiltonian and Lagrangian, and
//! the analytic derivatives against central differences.

use mfglab::fields::Field;
use mfglab::model::{AuditRegion, Kinetic, Model};

fn main() -> mfglab::Result<()> {
    let kinetic = Kinetic::Matrix(vec![vec![2.0, 0.5], vec![0.5, 1.0]]);
    let potential = Field::SoftNorm { alpha: 0.8 };
    let model = Model::new(2, kinetic, potential)?;

    let region = AuditRegion::default();
    let legendre = model.legendre_check(&region);
    let derivs = model.derivative_check(&region);

    println!("model: d = {}, A = {:?}", model.dim(), model.kinetic());
    println!("audit over {} sampled phase points of radius {}:", region.samples, region.radius);
    println!("  legendre defect      {:.3e}  pass = {}", legendre.max_defect, legendre.pass);
    println!("  velocity round trip  {:.3e}", legendre.max_roundtrip);
    println!("  first derivatives    {:.3e}  pass = {}", derivs.max_first, derivs.pass);
    println!("  second derivatives   {:.3e}", derivs.max_second);
    println!("  third derivatives    {:.3e}", derivs.max_third);
    println!("  DqH growth constant  {:.3}", derivs.growth_constant);
    println!("  min lagrangian       {:.3}", derivs.min_lagrangian);

    // One concrete phase point for orientation.
    let q = [0.3, -0.4];
    let p = [1.0, 0.5];
    println!("H(q, p) = {:.12} at q = {q:?}, p = {p:?}", model.hamiltonian(&q, &p));
    println!("L(q, v) = {:.12} at the same coordinates", model.lagrangian(&q, &p));
    Ok(())
}
