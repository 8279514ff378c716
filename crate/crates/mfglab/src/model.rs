//! Mechanical Hamiltonians on `R^d x R^d` and their audits.
//!
//! The laboratory works with the separable family
//!
//! ```text
//! H(q, p) = p . A^-1 p / 2 - g(q),      L(q, v) = v . A v / 2 + g(q),
//! ```
//!
//! where `A` is symmetric positive definite and `g` is a smooth potential
//! drawn from the field catalog. For this family the Legendre transform is
//! exact, `D_p H` and `D_v L` are mutually inverse linear maps, the mixed
//! second derivative `D^2_qp H` vanishes, and all derivative tensors are
//! available in closed form. The audits exist to certify exactly that: a
//! model whose analytic derivatives drift from finite differences, or whose
//! Legendre defect is visible at machine scale, must fail loudly before any
//! flow is integrated against it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::Field;
use crate::sampling;

/// Kinetic matrix specification: a scalar multiple of the identity or a full
/// symmetric matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Kinetic {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl Default for Kinetic {
    fn default() -> Self {
        Kinetic::Scalar(1.0)
    }
}

/// Mechanical model `H = p . A^-1 p / 2 - g(q)`.
#[derive(Debug, Clone)]
pub struct Model {
    d: usize,
    /// Row-major `d x d` kinetic matrix.
    a: Vec<f64>,
    /// Row-major inverse.
    a_inv: Vec<f64>,
    potential: Field,
}

/// Sampling region for audits: `samples` draws from the ball of `radius` in
/// each of the position and momentum slots.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AuditRegion {
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for AuditRegion {
    fn default() -> Self {
        AuditRegion { radius: 3.0, samples: 64, seed: 1 }
    }
}

/// Outcome of the Legendre duality audit.
#[derive(Debug, Clone, Serialize)]
pub struct LegendreReport {
    /// Worst `|H(q, D_v L) - (v . D_v L - L)|` over the sample set.
    pub max_defect: f64,
    /// Worst mismatch of the mutually inverse velocity and momentum maps.
    pub max_roundtrip: f64,
    pub pass: bool,
}

/// Outcome of the derivative consistency audit.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeReport {
    /// Worst scaled error of analytic first derivatives against central
    /// differences, `|fd - an| / (1 + |an|)`.
    pub max_first: f64,
    pub max_second: f64,
    pub max_third: f64,
    /// Fitted growth constant `max |D_q H| / (1 + |q| + |p|)`.
    pub growth_constant: f64,
    /// Smallest sampled Lagrangian value; negative values are reported, not
    /// rejected, since `g >= 0` is a convention rather than a requirement.
    pub min_lagrangian: f64,
    pub pass: bool,
}

impl Model {
    pub fn new(d: usize, kinetic: Kinetic, potential: Field) -> Result<Model> {
        if d == 0 || d > 3 {
            return Err(Error::invalid(format!("dimension must be 1..=3, got {d}")));
        }
        potential.validate()?;
        let a = match kinetic {
            Kinetic::Scalar(c) => {
                if !(c.is_finite() && c > 0.0) {
                    return Err(Error::KineticMatrix(format!("scalar kinetic {c} must be > 0")));
                }
                let mut m = vec![0.0; d * d];
                for k in 0..d {
                    m[k * d + k] = c;
                }
                m
            }
            Kinetic::Matrix(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::KineticMatrix(format!("matrix must be {d} x {d}")));
                }
                let mut m = vec![0.0; d * d];
                for (i, row) in rows.iter().enumerate() {
                    for (j, &x) in row.iter().enumerate() {
                        if !x.is_finite() {
                            return Err(Error::KineticMatrix("entries must be finite".into()));
                        }
                        m[i * d + j] = x;
                    }
                }
                for i in 0..d {
                    for j in 0..i {
                        if (m[i * d + j] - m[j * d + i]).abs() > 1e-12 {
                            return Err(Error::KineticMatrix("matrix is not symmetric".into()));
                        }
                    }
                }
                m
            }
        };
        let am = DMatrix::from_row_slice(d, d, &a);
        let chol = am
            .clone()
            .cholesky()
            .ok_or_else(|| Error::KineticMatrix("matrix is not positive definite".into()))?;
        let inv = chol.inverse();
        let mut a_inv = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a_inv[i * d + j] = inv[(i, j)];
            }
        }
        Ok(Model { d, a, a_inv, potential })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn potential(&self) -> &Field {
        &self.potential
    }

    /// Kinetic matrix `A`, row major.
    pub fn kinetic(&self) -> &[f64] {
        &self.a
    }

    /// Inverse kinetic matrix, row major.
    pub fn kinetic_inv(&self) -> &[f64] {
        &self.a_inv
    }

    pub fn hamiltonian(&self, q: &[f64], p: &[f64]) -> f64 {
        0.5 * quad_form(&self.a_inv, p) - self.potential.value(q)
    }

    pub fn lagrangian(&self, q: &[f64], v: &[f64]) -> f64 {
        0.5 * quad_form(&self.a, v) + self.potential.value(q)
    }

    /// `D_p H(q, p) = A^-1 p`, written into `out`.
    pub fn dp_h(&self, p: &[f64], out: &mut [f64]) {
        matvec(&self.a_inv, p, out);
    }

    /// `D_q H(q, p) = -D g(q)`, written into `out`.
    pub fn dq_h(&self, q: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.potential.add_gradient(q, -1.0, out);
    }

    /// `D_v L(q, v) = A v`, written into `out`.
    pub fn dv_l(&self, v: &[f64], out: &mut [f64]) {
        matvec(&self.a, v, out);
    }

    /// `D_q L(q, v) = D g(q)`, written into `out`.
    pub fn dq_l(&self, q: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.potential.add_gradient(q, 1.0, out);
    }

    /// Potential gradient `D g(q)` as a fresh vector.
    pub fn grad_g(&self, q: &[f64]) -> Vec<f64> {
        self.potential.gradient(q)
    }

    /// Potential Hessian `D^2 g(q)`, row major.
    pub fn hess_g(&self, q: &[f64]) -> Vec<f64> {
        self.potential.hessian(q)
    }

    /// Legendre duality audit on a sampled region.
    ///
    /// The mechanical family satisfies the duality identities exactly, so the
    /// tolerances are near machine precision: defect below `1e-10`, map
    /// round-trip below `1e-8`.
    pub fn legendre_check(&self, region: &AuditRegion) -> LegendreReport {
        let d = self.d;
        let mut rng = sampling::rng(sampling::mix(region.seed, 0x4c45_47_45));
        let mut max_defect = 0.0f64;
        let mut max_roundtrip = 0.0f64;
        let mut buf = vec![0.0; d];
        let mut buf2 = vec![0.0; d];
        for _ in 0..region.samples {
            let q = sampling::ball_point(&mut rng, d, region.radius);
            let v = sampling::ball_point(&mut rng, d, region.radius);
            let p = sampling::ball_point(&mut rng, d, region.radius);

            self.dv_l(&v, &mut buf);
            let lhs = self.hamiltonian(&q, &buf);
            let rhs = dot(&v, &buf) - self.lagrangian(&q, &v);
            max_defect = max_defect.max((lhs - rhs).abs());

            self.dp_h(&buf, &mut buf2);
            for k in 0..d {
                max_roundtrip = max_roundtrip.max((buf2[k] - v[k]).abs());
            }
            self.dp_h(&p, &mut buf);
            self.dv_l(&buf, &mut buf2);
            for k in 0..d {
                max_roundtrip = max_roundtrip.max((buf2[k] - p[k]).abs());
            }
        }
        LegendreReport {
            max_defect,
            max_roundtrip,
            pass: max_defect < 1e-10 && max_roundtrip < 1e-8,
        }
    }

    /// Central-difference audit of the analytic derivatives of `H`, `L` and
    /// the potential, with the standard step ladder `1e-4`, `1e-3`, `5e-3`
    /// for first, second and third order.
    pub fn derivative_check(&self, region: &AuditRegion) -> DerivativeReport {
        let d = self.d;
        let mut rng = sampling::rng(sampling::mix(region.seed, 0x4445_52_49));
        let mut max_first = 0.0f64;
        let mut max_second = 0.0f64;
        let mut max_third = 0.0f64;
        let mut growth = 0.0f64;
        let mut min_l = f64::INFINITY;
        let mut grad = vec![0.0; d];
        for _ in 0..region.samples {
            let q = sampling::ball_point(&mut rng, d, region.radius);
            let p = sampling::ball_point(&mut rng, d, region.radius);
            let v = sampling::ball_point(&mut rng, d, region.radius);

            // First order, h = 1e-4.
            let h1 = 1e-4;
            self.dq_h(&q, &mut grad);
            for a in 0..d {
                let fd = central(h1, |s| {
                    let mut qq = q.clone();
                    qq[a] += s;
                    self.hamiltonian(&qq, &p)
                });
                max_first = max_first.max(scaled_err(fd, grad[a]));
            }
            self.dp_h(&p, &mut grad);
            for a in 0..d {
                let fd = central(h1, |s| {
                    let mut pp = p.clone();
                    pp[a] += s;
                    self.hamiltonian(&q, &pp)
                });
                max_first = max_first.max(scaled_err(fd, grad[a]));
            }
            self.dv_l(&v, &mut grad);
            for a in 0..d {
                let fd = central(h1, |s| {
                    let mut vv = v.clone();
                    vv[a] += s;
                    self.lagrangian(&q, &vv)
                });
                max_first = max_first.max(scaled_err(fd, grad[a]));
            }

            // Second order, h = 1e-3: D^2_qq H = -D^2 g, D^2_pp H = A^-1.
            let h2 = 1e-3;
            let hg = self.potential.hessian(&q);
            for a in 0..d {
                for b in 0..d {
                    let fd = central(h2, |s| {
                        let mut qq = q.clone();
                        qq[a] += s;
                        let mut g = vec![0.0; d];
                        self.dq_h(&qq, &mut g);
                        g[b]
                    });
                    max_second = max_second.max(scaled_err(fd, -hg[b * d + a]));
                    let fdp = central(h2, |s| {
                        let mut pp = p.clone();
                        pp[a] += s;
                        let mut g = vec![0.0; d];
                        self.dp_h(&pp, &mut g);
                        g[b]
                    });
                    max_second = max_second.max(scaled_err(fdp, self.a_inv[b * d + a]));
                }
            }

            // Third order, h = 5e-3, potential only.
            let h3 = 5e-3;
            let third = self.potential.third(&q);
            for a in 0..d {
                let fdh = {
                    let mut qp = q.clone();
                    qp[a] += h3;
                    let hp = self.potential.hessian(&qp);
                    qp[a] = q[a] - h3;
                    let hm = self.potential.hessian(&qp);
                    (hp, hm)
                };
                for i in 0..d {
                    for j in 0..d {
                        let fd = (fdh.0[i * d + j] - fdh.1[i * d + j]) / (2.0 * h3);
                        max_third = max_third.max(scaled_err(fd, third[i * d * d + j * d + a]));
                    }
                }
            }

            self.dq_h(&q, &mut grad);
            let gn = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
            growth = growth.max(gn / (1.0 + norm(&q) + norm(&p)));
            min_l = min_l.min(self.lagrangian(&q, &v));
        }
        DerivativeReport {
            max_first,
            max_second,
            max_third,
            growth_constant: growth,
            min_lagrangian: min_l,
            pass: max_first < 1e-5 && max_second < 1e-5 && max_third < 2e-4,
        }
    }
}

fn central(h: f64, f: impl Fn(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

fn scaled_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / (1.0 + an.abs())
}

pub(crate) fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    debug_assert_eq!(m.len(), d * d);
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += m[i * d + j] * x[j];
        }
        out[i] = s;
    }
}

pub(crate) fn quad_form(m: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += x[i] * m[i * d + j] * x[j];
        }
    }
    s
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn soft_model() -> Model {
        Model::new(2, Kinetic::Scalar(2.0), Field::SoftNorm { alpha: 0.8 }).unwrap()
    }

    #[test]
    fn frozen_hamiltonian_value() {
        // A = 2 I in d = 2, p = (2, 0), zero potential: H = p . A^-1 p / 2 = 1.
        let m = Model::new(2, Kinetic::Scalar(2.0), Field::Zero).unwrap();
        assert_abs_diff_eq!(m.hamiltonian(&[0.3, -0.4], &[2.0, 0.0]), 1.0, epsilon = 1e-15);
        // Same point with the soft well: H = 1 + 0.8 sqrt(1.25).
        let ms = soft_model();
        assert_abs_diff_eq!(
            ms.hamiltonian(&[0.3, -0.4], &[2.0, 0.0]),
            1.0 + 0.8 * 1.25f64.sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn legendre_audit_passes_mechanical_family() {
        let region = AuditRegion { radius: 3.0, samples: 128, seed: 5 };
        for model in [
            soft_model(),
            Model::new(1, Kinetic::Scalar(1.0), Field::CosineRidge { alpha: 0.5 }).unwrap(),
            Model::new(
                2,
                Kinetic::Matrix(vec![vec![2.0, 0.5], vec![0.5, 1.5]]),
                Field::Gaussian { amplitude: 1.0, width: 1.0 },
            )
            .unwrap(),
        ] {
            let rep = model.legendre_check(&region);
            assert!(rep.pass, "defect {} roundtrip {}", rep.max_defect, rep.max_roundtrip);
        }
    }

    #[test]
    fn derivative_audit_passes_mechanical_family() {
        let region = AuditRegion { radius: 2.5, samples: 32, seed: 9 };
        for model in [
            soft_model(),
            Model::new(3, Kinetic::Scalar(1.5), Field::CosineRidge { alpha: 0.4 }).unwrap(),
        ] {
            let rep = model.derivative_check(&region);
            assert!(
                rep.pass,
                "first {} second {} third {}",
                rep.max_first, rep.max_second, rep.max_third
            );
        }
    }

    #[test]
    fn growth_constant_is_bounded_for_soft_norm() {
        // |D g| <= alpha everywhere for the soft well, so the fitted constant
        // stays below alpha.
        let rep = soft_model().derivative_check(&AuditRegion { radius: 4.0, samples: 64, seed: 3 });
        assert!(rep.growth_constant <= 0.8 + 1e-12, "C = {}", rep.growth_constant);
    }

    #[test]
    fn rejects_bad_kinetic_matrices() {
        assert!(Model::new(2, Kinetic::Scalar(0.0), Field::Zero).is_err());
        assert!(Model::new(2, Kinetic::Scalar(-1.0), Field::Zero).is_err());
        let asym = Kinetic::Matrix(vec![vec![1.0, 0.3], vec![0.2, 1.0]]);
        assert!(Model::new(2, asym, Field::Zero).is_err());
        let indef = Kinetic::Matrix(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(Model::new(2, indef, Field::Zero).is_err());
        assert!(Model::new(0, Kinetic::Scalar(1.0), Field::Zero).is_err());
        assert!(Model::new(4, Kinetic::Scalar(1.0), Field::Zero).is_err());
    }

    #[test]
    fn kinetic_inverse_is_exact() {
        let m = Model::new(
            2,
            Kinetic::Matrix(vec![vec![2.0, 0.5], vec![0.5, 1.5]]),
            Field::Zero,
        )
        .unwrap();
        let a = m.kinetic();
        let ai = m.kinetic_inv();
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..2 {
                    s += a[i * 2 + k] * ai[k * 2 + j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(s, want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn lagrangian_nonnegative_with_nonnegative_potential() {
        let m = Model::new(2, Kinetic::Scalar(1.0), Field::Bump { inner: 1.0, outer: 2.0 })
            .unwrap();
        let rep = m.derivative_check(&AuditRegion { radius: 3.0, samples: 32, seed: 17 });
        assert!(rep.min_lagrangian >= 0.0, "min L = {}", rep.min_lagrangian);
    }
}
