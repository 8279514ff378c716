//! Scalar fields on R^d with analytic derivatives through third order.
//!
//! Every coefficient the laboratory manipulates (kinetic potentials,
//! interaction kernels, coupling densities) is drawn from a small catalog of
//! closed-form families. Each family exposes its value, gradient, Hessian and
//! third derivative analytically, so finite differences are only ever used as
//! an independent cross-check, never as the primary evaluation path.
//!
//! All families are even, `f(-q) = f(q)`, which the interaction kernels
//! require. Radial families share one chassis: a profile `f(r)` with
//! derivatives up to third order in the radius, expanded to Cartesian tensors
//! by the usual chain rule. Writing `u = q/r`,
//!
//! ```text
//! D phi    = f' u
//! D2 phi   = (f'' - f'/r) u u^T + (f'/r) I
//! D3 phi   = c3 u_i u_j u_k + c1 (d_ij u_k + d_ik u_j + d_jk u_i)
//! ```
//!
//! with `c1 = (f'' - f'/r)/r` and `c3 = f''' - 3 c1`. At the origin the
//! gradient and third derivative vanish and the Hessian is `f''(0) I` for any
//! smooth even profile; the evaluators switch to those limits below a small
//! radius cutoff.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radius below which radial evaluators use their origin limits.
const RADIAL_CUTOFF: f64 = 1e-12;

/// Closed-form scalar field family.
///
/// Serialized form is tagged by `name`, e.g.
/// `{"name": "gaussian", "amplitude": 0.5, "width": 1.0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Field {
    /// Identically zero.
    Zero,
    /// `lambda/2 |q|^2`.
    Quadratic { lambda: f64 },
    /// `-alpha sqrt(1 + |q|^2)`, a smooth concave well with bounded slope.
    SoftNorm { alpha: f64 },
    /// `alpha sum_k cos(q_k)`, the one non-radial family.
    CosineRidge { alpha: f64 },
    /// `amplitude exp(-|q|^2 / width^2)`.
    Gaussian { amplitude: f64, width: f64 },
    /// C^2 plateau kernel: 1 on `|q| <= inner`, 0 on `|q| >= outer`,
    /// quintic smoothstep in between.
    Bump { inner: f64, outer: f64 },
}

/// Profile derivatives `(f, f', f'', f''')` at a radius.
#[derive(Debug, Clone, Copy)]
struct Profile {
    f: f64,
    df: f64,
    d2f: f64,
    d3f: f64,
}

impl Field {
    /// Checks the family parameters. Called by every model constructor so a
    /// bad kernel is rejected before any integration starts.
    pub fn validate(&self) -> Result<()> {
        match *self {
            Field::Zero | Field::Quadratic { .. } | Field::SoftNorm { .. } => Ok(()),
            Field::CosineRidge { alpha } => {
                if alpha.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid("cosine ridge amplitude must be finite"))
                }
            }
            Field::Gaussian { amplitude, width } => {
                if !amplitude.is_finite() {
                    return Err(Error::invalid("gaussian amplitude must be finite"));
                }
                if !(width.is_finite() && width > 0.0) {
                    return Err(Error::invalid("gaussian width must be positive"));
                }
                Ok(())
            }
            Field::Bump { inner, outer } => {
                if !(inner.is_finite() && outer.is_finite() && 0.0 < inner && inner < outer) {
                    return Err(Error::invalid("bump requires 0 < inner < outer"));
                }
                Ok(())
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Field::Zero)
    }

    /// True for families whose value only depends on `|q|`.
    pub fn is_radial(&self) -> bool {
        !matches!(self, Field::CosineRidge { .. })
    }

    /// Radius beyond which the field is negligible or fully resolved; used to
    /// size quadrature boxes and Hessian scans.
    pub fn support_radius(&self) -> f64 {
        match *self {
            Field::Zero => 1.0,
            Field::Quadratic { .. } => 1.0,
            Field::SoftNorm { .. } => 10.0,
            Field::CosineRidge { .. } => std::f64::consts::PI,
            Field::Gaussian { width, .. } => 5.0 * width,
            Field::Bump { outer, .. } => outer,
        }
    }

    fn profile(&self, r: f64) -> Profile {
        match *self {
            Field::Zero => Profile { f: 0.0, df: 0.0, d2f: 0.0, d3f: 0.0 },
            Field::Quadratic { lambda } => Profile {
                f: 0.5 * lambda * r * r,
                df: lambda * r,
                d2f: lambda,
                d3f: 0.0,
            },
            Field::SoftNorm { alpha } => {
                let s = (1.0 + r * r).sqrt();
                Profile {
                    f: -alpha * s,
                    df: -alpha * r / s,
                    d2f: -alpha / (s * s * s),
                    d3f: 3.0 * alpha * r / (s * s * s * s * s),
                }
            }
            Field::Gaussian { amplitude, width } => {
                let w2 = width * width;
                let e = (-r * r / w2).exp();
                Profile {
                    f: amplitude * e,
                    df: amplitude * e * (-2.0 * r / w2),
                    d2f: amplitude * e * (4.0 * r * r / (w2 * w2) - 2.0 / w2),
                    d3f: amplitude * e * (12.0 * r / (w2 * w2) - 8.0 * r * r * r / (w2 * w2 * w2)),
                }
            }
            Field::Bump { inner, outer } => {
                if r <= inner {
                    Profile { f: 1.0, df: 0.0, d2f: 0.0, d3f: 0.0 }
                } else if r >= outer {
                    Profile { f: 0.0, df: 0.0, d2f: 0.0, d3f: 0.0 }
                } else {
                    let w = outer - inner;
                    let x = (r - inner) / w;
                    let s = x * x * x * (10.0 + x * (-15.0 + 6.0 * x));
                    let ds = 30.0 * x * x * (1.0 + x * (-2.0 + x));
                    let d2s = 60.0 * x * (1.0 + x * (-3.0 + 2.0 * x));
                    let d3s = 60.0 * (1.0 + x * (-6.0 + 6.0 * x));
                    Profile {
                        f: 1.0 - s,
                        df: -ds / w,
                        d2f: -d2s / (w * w),
                        d3f: -d3s / (w * w * w),
                    }
                }
            }
            Field::CosineRidge { .. } => unreachable!("cosine ridge has no radial profile"),
        }
    }

    /// Field value at `q`.
    pub fn value(&self, q: &[f64]) -> f64 {
        match *self {
            Field::Zero => 0.0,
            Field::CosineRidge { alpha } => alpha * q.iter().map(|x| x.cos()).sum::<f64>(),
            _ => self.profile(norm(q)).f,
        }
    }

    /// Adds `scale * D phi(q)` into `out`. `out.len() == q.len()`.
    pub fn add_gradient(&self, q: &[f64], scale: f64, out: &mut [f64]) {
        debug_assert_eq!(q.len(), out.len());
        match *self {
            Field::Zero => {}
            Field::CosineRidge { alpha } => {
                for (o, x) in out.iter_mut().zip(q) {
                    *o += scale * (-alpha * x.sin());
                }
            }
            _ => {
                let r = norm(q);
                if r < RADIAL_CUTOFF {
                    return;
                }
                let p = self.profile(r);
                let c = scale * p.df / r;
                for (o, x) in out.iter_mut().zip(q) {
                    *o += c * x;
                }
            }
        }
    }

    /// Gradient as a fresh vector.
    pub fn gradient(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; q.len()];
        self.add_gradient(q, 1.0, &mut out);
        out
    }

    /// Adds `scale * D^2 phi(q)` into `out`, row major `d x d`.
    pub fn add_hessian(&self, q: &[f64], scale: f64, out: &mut [f64]) {
        let d = q.len();
        debug_assert_eq!(out.len(), d * d);
        match *self {
            Field::Zero => {}
            Field::CosineRidge { alpha } => {
                for k in 0..d {
                    out[k * d + k] += scale * (-alpha * q[k].cos());
                }
            }
            _ => {
                let r = norm(q);
                if r < RADIAL_CUTOFF {
                    let p = self.profile(0.0);
                    for k in 0..d {
                        out[k * d + k] += scale * p.d2f;
                    }
                    return;
                }
                let p = self.profile(r);
                let g1 = p.df / r;
                let g2 = p.d2f - g1;
                for i in 0..d {
                    let ui = q[i] / r;
                    for j in 0..d {
                        let uj = q[j] / r;
                        let mut h = g2 * ui * uj;
                        if i == j {
                            h += g1;
                        }
                        out[i * d + j] += scale * h;
                    }
                }
            }
        }
    }

    /// Hessian as a fresh row-major buffer.
    pub fn hessian(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; q.len() * q.len()];
        self.add_hessian(q, 1.0, &mut out);
        out
    }

    /// Adds `scale * D^3 phi(q)` into `out`, layout `[i*d*d + j*d + k]`.
    pub fn add_third(&self, q: &[f64], scale: f64, out: &mut [f64]) {
        let d = q.len();
        debug_assert_eq!(out.len(), d * d * d);
        match *self {
            Field::Zero => {}
            Field::CosineRidge { alpha } => {
                for k in 0..d {
                    out[k * d * d + k * d + k] += scale * alpha * q[k].sin();
                }
            }
            _ => {
                let r = norm(q);
                if r < RADIAL_CUTOFF {
                    return;
                }
                let p = self.profile(r);
                let c1 = (p.d2f - p.df / r) / r;
                let c3 = p.d3f - 3.0 * c1;
                let u: Vec<f64> = q.iter().map(|x| x / r).collect();
                for i in 0..d {
                    for j in 0..d {
                        for k in 0..d {
                            let mut t = c3 * u[i] * u[j] * u[k];
                            if i == j {
                                t += c1 * u[k];
                            }
                            if i == k {
                                t += c1 * u[j];
                            }
                            if j == k {
                                t += c1 * u[i];
                            }
                            out[i * d * d + j * d + k] += scale * t;
                        }
                    }
                }
            }
        }
    }

    /// Third derivative tensor as a fresh buffer.
    pub fn third(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; q.len().pow(3)];
        self.add_third(q, 1.0, &mut out);
        out
    }

    /// Minimum Hessian eigenvalue over a radial scan, a lower bound for the
    /// semiconvexity modulus of the field.
    ///
    /// For a radial field the Hessian at radius `r > 0` has eigenvalues
    /// `f''(r)` (radial direction) and `f'(r)/r` (tangential, when `d >= 2`).
    /// The scan covers 201 radii on `[0, support_radius]`.
    pub fn hessian_min_eig(&self, d: usize) -> f64 {
        match *self {
            Field::Zero => 0.0,
            Field::CosineRidge { alpha } => -alpha.abs(),
            _ => {
                let rmax = self.support_radius();
                let n = 201;
                let mut lo = f64::INFINITY;
                for k in 0..n {
                    let r = rmax * k as f64 / (n - 1) as f64;
                    let p = self.profile(r);
                    lo = lo.min(p.d2f);
                    if d >= 2 {
                        let tang = if r < RADIAL_CUTOFF { p.d2f } else { p.df / r };
                        lo = lo.min(tang);
                    }
                }
                lo
            }
        }
    }

    /// Maximum of `|D phi|` over the same radial scan; a Lipschitz constant
    /// on the scanned ball.
    pub fn gradient_sup(&self, _d: usize) -> f64 {
        match *self {
            Field::Zero => 0.0,
            Field::CosineRidge { alpha } => alpha.abs(),
            _ => {
                let rmax = self.support_radius();
                let n = 201;
                (0..n)
                    .map(|k| {
                        let r = rmax * k as f64 / (n - 1) as f64;
                        self.profile(r).df.abs()
                    })
                    .fold(0.0, f64::max)
            }
        }
    }
}

fn norm(q: &[f64]) -> f64 {
    q.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const FAMILIES: &[Field] = &[
        Field::Quadratic { lambda: 1.7 },
        Field::SoftNorm { alpha: 0.8 },
        Field::CosineRidge { alpha: 0.6 },
        Field::Gaussian { amplitude: 0.5, width: 1.3 },
        Field::Bump { inner: 1.0, outer: 2.0 },
    ];

    fn probes(d: usize) -> Vec<Vec<f64>> {
        let base: &[&[f64]] = &[
            &[0.3, -0.7, 1.1],
            &[1.4, 0.2, -0.5],
            &[-1.15, 1.6, 0.4],
            &[0.05, -0.02, 0.07],
            &[1.52, -1.49, 0.9],
        ];
        base.iter().map(|b| b[..d].to_vec()).collect()
    }

    /// Fourth-order central difference; keeps the oracle truncation error
    /// negligible even for the bump family, whose fifth derivative is large.
    fn stencil5(h: f64, f: impl Fn(f64) -> f64) -> f64 {
        (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
    }

    fn fd_gradient(field: &Field, q: &[f64], h: f64) -> Vec<f64> {
        let d = q.len();
        (0..d)
            .map(|a| {
                stencil5(h, |s| {
                    let mut qp = q.to_vec();
                    qp[a] += s;
                    field.value(&qp)
                })
            })
            .collect()
    }

    fn fd_hessian(field: &Field, q: &[f64], h: f64) -> Vec<f64> {
        let d = q.len();
        let mut out = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                out[b * d + a] = stencil5(h, |s| {
                    let mut qp = q.to_vec();
                    qp[a] += s;
                    field.gradient(&qp)[b]
                });
            }
        }
        out
    }

    fn fd_third(field: &Field, q: &[f64], h: f64) -> Vec<f64> {
        let d = q.len();
        let mut out = vec![0.0; d * d * d];
        for c in 0..d {
            for i in 0..d {
                for j in 0..d {
                    out[i * d * d + j * d + c] = stencil5(h, |s| {
                        let mut qp = q.to_vec();
                        qp[c] += s;
                        field.hessian(&qp)[i * d + j]
                    });
                }
            }
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for field in FAMILIES {
            for d in 1..=3 {
                for q in probes(d) {
                    let g = field.gradient(&q);
                    let fd = fd_gradient(field, &q, 1e-4);
                    for a in 0..d {
                        assert!(
                            (g[a] - fd[a]).abs() <= 1e-5 * (1.0 + fd[a].abs()),
                            "{field:?} d={d} q={q:?} grad[{a}]: {} vs fd {}",
                            g[a],
                            fd[a]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        for field in FAMILIES {
            for d in 1..=3 {
                for q in probes(d) {
                    let hs = field.hessian(&q);
                    let fd = fd_hessian(field, &q, 1e-3);
                    for (a, (x, y)) in hs.iter().zip(&fd).enumerate() {
                        assert!(
                            (x - y).abs() <= 1e-5 * (1.0 + y.abs()),
                            "{field:?} d={d} q={q:?} hess[{a}]: {x} vs fd {y}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn third_matches_finite_differences() {
        for field in FAMILIES {
            for d in 1..=3 {
                for q in probes(d) {
                    let t = field.third(&q);
                    let fd = fd_third(field, &q, 5e-3);
                    for (a, (x, y)) in t.iter().zip(&fd).enumerate() {
                        assert!(
                            (x - y).abs() <= 2e-4 * (1.0 + y.abs()),
                            "{field:?} d={d} q={q:?} third[{a}]: {x} vs fd {y}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn families_are_even() {
        for field in FAMILIES {
            for d in 1..=3 {
                for q in probes(d) {
                    let neg: Vec<f64> = q.iter().map(|x| -x).collect();
                    assert_abs_diff_eq!(field.value(&q), field.value(&neg), epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn frozen_values() {
        let g = Field::Gaussian { amplitude: 2.0, width: 1.0 };
        // 2 exp(-1) at |q| = 1.
        assert_abs_diff_eq!(g.value(&[1.0, 0.0]), 0.7357588823428847, epsilon = 1e-15);

        let s = Field::SoftNorm { alpha: 1.0 };
        // -sqrt(1 + 4) at q = (2, 0).
        assert_abs_diff_eq!(s.value(&[2.0, 0.0]), -2.23606797749979, epsilon = 1e-15);
        // D phi = -q / sqrt(1 + |q|^2).
        let grad = s.gradient(&[2.0, 0.0]);
        assert_abs_diff_eq!(grad[0], -0.8944271909999159, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[1], 0.0, epsilon = 1e-15);

        let q = Field::Quadratic { lambda: 3.0 };
        assert_abs_diff_eq!(q.value(&[1.0, 2.0]), 7.5, epsilon = 1e-15);
    }

    #[test]
    fn bump_plateau_and_support() {
        let b = Field::Bump { inner: 1.0, outer: 2.0 };
        assert_eq!(b.value(&[0.5, 0.0]), 1.0);
        assert_eq!(b.value(&[0.0, 0.0]), 1.0);
        assert_eq!(b.value(&[2.5, 0.0]), 0.0);
        let mid = b.value(&[1.5, 0.0]);
        // Smoothstep midpoint: 1 - s(1/2) = 1/2.
        assert_abs_diff_eq!(mid, 0.5, epsilon = 1e-15);
        // C^1 junctions: gradient vanishes at both edges.
        assert_abs_diff_eq!(b.gradient(&[1.0, 0.0])[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.gradient(&[2.0, 0.0])[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn origin_limits_are_finite() {
        for field in FAMILIES {
            let q = [0.0, 0.0];
            let g = field.gradient(&q);
            assert!(g.iter().all(|x| x.abs() < 1e-10), "{field:?} gradient at 0: {g:?}");
            let h = field.hessian(&q);
            assert!(h.iter().all(|x| x.is_finite()), "{field:?} hessian at 0: {h:?}");
            // Radial families: Hessian at 0 is f''(0) I.
            if field.is_radial() {
                assert_abs_diff_eq!(h[1], 0.0, epsilon = 1e-14);
                assert_abs_diff_eq!(h[0], h[3], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn hessian_min_eig_matches_known_cases() {
        let q = Field::Quadratic { lambda: 2.5 };
        assert_abs_diff_eq!(q.hessian_min_eig(2), 2.5, epsilon = 1e-12);
        let s = Field::SoftNorm { alpha: 1.0 };
        // Most negative curvature sits at the origin, -alpha.
        assert_abs_diff_eq!(s.hessian_min_eig(2), -1.0, epsilon = 1e-12);
        let g = Field::Gaussian { amplitude: 1.0, width: 1.0 };
        // f''(0) = -2 a / w^2.
        assert_abs_diff_eq!(g.hessian_min_eig(1), -2.0, epsilon = 1e-9);
        let c = Field::CosineRidge { alpha: 0.7 };
        assert_abs_diff_eq!(c.hessian_min_eig(3), -0.7, epsilon = 1e-12);
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(Field::Bump { inner: 2.0, outer: 1.0 }.validate().is_err());
        assert!(Field::Bump { inner: 0.0, outer: 1.0 }.validate().is_err());
        assert!(Field::Gaussian { amplitude: 1.0, width: 0.0 }.validate().is_err());
        assert!(Field::Gaussian { amplitude: 1.0, width: -1.0 }.validate().is_err());
        assert!(Field::Bump { inner: 1.0, outer: 2.0 }.validate().is_ok());
    }

    #[test]
    fn serde_round_trip() {
        for field in FAMILIES {
            let s = serde_json::to_string(field).unwrap();
            let back: Field = serde_json::from_str(&s).unwrap();
            assert_eq!(*field, back);
        }
        let parsed: Field =
            serde_json::from_str(r#"{"name": "gaussian", "amplitude": 0.5, "width": 1.0}"#)
                .unwrap();
        assert_eq!(parsed, Field::Gaussian { amplitude: 0.5, width: 1.0 });
    }
}
