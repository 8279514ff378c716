//! Evaluates the particle value function two independent ways and compares
//! both against the dilation closed form of the purely quadratic game,
//! where `U^m(t, q) = |q|^2 / (2 m (1 + t))`. Then switches to a smooth
//! interacting instance and reports the Hamilton-Jacobi residual.

use mfglab::data::DataModel;
use mfglab::fields::Field;
use mfglab::flow::default_steps;
use mfglab::model::{Kinetic, Model};
use mfglab::value::{hj_residual, value, Method};

fn main() -> mfglab::Result<()> {
    let d = 2;
    let free = Model::new(d, Kinetic::Scalar(1.0), Field::Zero)?;
    let quadratic = DataModel::new(d, 1.0, Field::Zero, Field::Zero, Field::Zero, Field::Zero)?;

    let t = 1.0;
    let steps = default_steps(t);
    let q = vec![0.8, -0.3, -0.5, 0.6, 0.2, 0.9];
    let m = q.len() as f64 / d as f64;

    let chars = value(&free, &quadratic, t, &q, Method::Characteristics, steps)?;
    let direct = value(&free, &quadratic, t, &q, Method::DirectMinimization, steps)?;
    let exact: f64 = q.iter().map(|v| v * v).sum::<f64>() / (2.0 * m * (1.0 + t));
    println!("quadratic game, m = {m}, t = {t}:");
    println!("  characteristics  U = {:.15}", chars.value);
    println!("  direct minimize  U = {:.15}", direct.value);
    println!("  closed form      U = {exact:.15}");
    println!("  method gap         = {:.3e}", (chars.value - direct.value).abs());
    let ggap = chars
        .gradient
        .iter()
        .zip(&direct.gradient)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("  gradient gap       = {ggap:.3e}");

    // A genuinely nonlinear instance: interaction in the data, interaction
    // in the running cost, a potential in the Hamiltonian.
    let model = Model::new(d, Kinetic::Scalar(1.0), Field::Gaussian { amplitude: 0.3, width: 1.2 })?;
    let data = DataModel::new(
        d,
        1.0,
        Field::Gaussian { amplitude: 0.2, width: 1.0 },
        Field::Gaussian { amplitude: 0.25, width: 1.1 },
        Field::Gaussian { amplitude: 0.15, width: 1.3 },
        Field::Gaussian { amplitude: 0.1, width: 0.9 },
    )?;
    let t = 0.5;
    let steps = default_steps(t);
    let a = value(&model, &data, t, &q, Method::Characteristics, steps)?;
    let b = value(&model, &data, t, &q, Method::DirectMinimization, steps)?;
    println!("\ninteracting game, t = {t}:");
    println!("  characteristics  U = {:.15}", a.value);
    println!("  direct minimize  U = {:.15}", b.value);
    println!("  method gap         = {:.3e}", (a.value - b.value).abs());
    println!("  HJ residual        = {:.3e}", hj_residual(&model, &data, t, &q, steps)?);
    Ok(())
}
