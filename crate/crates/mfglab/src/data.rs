//! Generating functionals of interaction type and their discrete projections.
//!
//! The terminal cost and the running coupling are both built from the same
//! convolution structure. With `phi(q) = lambda/2 |q|^2 + phi0(q)` and an even
//! interaction kernel `phi1`,
//!
//! ```text
//! U0(mu)      = int phi dmu + 1/2 int (phi1 * mu) dmu,
//! u0(q, mu)   = phi(q) + (phi1 * mu)(q),
//! U0^m(q)     = 1/m sum_i phi(q_i) + 1/(2 m^2) sum_ij phi1(q_i - q_j),
//! ```
//!
//! and the coupling `F`, `f`, `F^m` repeats the pattern with `fphi`, `fphi1`.
//! The closed-form derivative tables of `U0^m` and `F^m` are the exact
//! oracles for every finite-difference estimator in the crate; their entries
//! scale as `1/m` on the particle diagonal and `1/m^2` off it, which is the
//! seed of every m-uniform estimate checked downstream.
//!
//! Two certificates probe the generating data. The Fourier certificate tests
//! monotonicity (classical convexity of the interaction energy) through the
//! sign of the transform of `phi1` on a truncated grid. The displacement
//! certificate reports `kappa = lambda - 2 |lambda1|` where `lambda1` is the
//! smallest Hessian eigenvalue of `phi1` over a radial scan; `kappa > 0`
//! certifies displacement convexity even when the Fourier test fails, which
//! is exactly the dichotomy the bump kernel exhibits.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::Field;
use crate::measures::WeightedMeasure;
use crate::num;
use crate::sampling;

/// Nonnegativity slack for the Fourier certificate.
pub const EPS_FFT: f64 = 1e-8;

/// Generating data: terminal `phi`, `phi1` and coupling `fphi`, `fphi1`.
#[derive(Debug, Clone)]
pub struct DataModel {
    d: usize,
    lambda: f64,
    phi0: Field,
    phi1: Field,
    f_phi: Field,
    f_phi1: Field,
    /// Smallest Hessian eigenvalue of `phi1` over the radial scan.
    lambda1: f64,
}

/// Certificate record emitted by the convexity probes.
#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub kind: CertificateKind,
    pub verdict: bool,
    /// Grid minimum of the transform, or the modulus `kappa`.
    pub witness: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequency: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertificateKind {
    Monotonicity,
    DisplacementConvexity,
}

/// Sampled configurations for the discrete convexity probe.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConvexityRegion {
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for ConvexityRegion {
    fn default() -> Self {
        ConvexityRegion { radius: 2.0, samples: 8, seed: 1 }
    }
}

/// Worst-case eigenvalue report from `discrete_convexity_check`.
#[derive(Debug, Clone, Serialize)]
pub struct ConvexityReport {
    pub m: usize,
    /// Functional-level modulus; the particle bar is `lambda / m`.
    pub lambda: f64,
    pub bar: f64,
    pub min_eig: f64,
    /// `min_eig - bar`; the check passes when this is above `-1e-5`.
    pub margin: f64,
    pub worst_config: Vec<f64>,
    pub pass: bool,
}

/// Maxima of the third derivative tensor of `U0^m` by index class.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ThirdClasses {
    pub diagonal: f64,
    pub two_equal: f64,
    pub distinct: f64,
}

impl DataModel {
    pub fn new(
        d: usize,
        lambda: f64,
        phi0: Field,
        phi1: Field,
        f_phi: Field,
        f_phi1: Field,
    ) -> Result<DataModel> {
        if d == 0 || d > 3 {
            return Err(Error::invalid(format!("dimension must be 1..=3, got {d}")));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        for f in [&phi0, &phi1, &f_phi, &f_phi1] {
            f.validate()?;
        }
        for (name, kernel) in [("phi1", &phi1), ("fphi1", &f_phi1)] {
            check_even(kernel, d, name)?;
        }
        let lambda1 = phi1.hessian_min_eig(d);
        Ok(DataModel { d, lambda, phi0, phi1, f_phi, f_phi1, lambda1 })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Recorded modulus of `phi1`: smallest Hessian eigenvalue over the scan.
    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn phi1(&self) -> &Field {
        &self.phi1
    }

    pub fn has_coupling(&self) -> bool {
        !(self.f_phi.is_zero() && self.f_phi1.is_zero())
    }

    /// `phi(x) = lambda/2 |x|^2 + phi0(x)`.
    pub fn phi_value(&self, x: &[f64]) -> f64 {
        0.5 * self.lambda * x.iter().map(|v| v * v).sum::<f64>() + self.phi0.value(x)
    }

    fn phi_add_grad(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o += scale * self.lambda * v;
        }
        self.phi0.add_gradient(x, scale, out);
    }

    fn phi_add_hess(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.d;
        for k in 0..d {
            out[k * d + k] += scale * self.lambda;
        }
        self.phi0.add_hessian(x, scale, out);
    }

    /// Terminal functional on a weighted measure.
    pub fn eval_u0(&self, mu: &WeightedMeasure) -> f64 {
        self.eval_functional(mu, true)
    }

    /// Coupling functional `F(mu)` on a weighted measure.
    pub fn eval_f(&self, mu: &WeightedMeasure) -> f64 {
        self.eval_functional(mu, false)
    }

    /// `U0^m` on a flat configuration (uniform weights).
    pub fn eval_u0m(&self, q: &[f64]) -> f64 {
        self.eval_config(q, true)
    }

    /// `F^m` on a flat configuration.
    pub fn eval_fm(&self, q: &[f64]) -> f64 {
        self.eval_config(q, false)
    }

    /// Shared evaluator; `terminal` selects `(phi, phi1)` or `(fphi, fphi1)`.
    ///
    /// Addends are canonicalized and summed in sorted order so that particle
    /// permutations give bitwise identical values.
    fn eval_functional(&self, mu: &WeightedMeasure, terminal: bool) -> f64 {
        let m = mu.len();
        let kernel = if terminal { &self.phi1 } else { &self.f_phi1 };
        let mut terms = Vec::with_capacity(m + m * (m + 1) / 2);
        for i in 0..m {
            let x = mu.point(i);
            let single =
                if terminal { self.phi_value(x) } else { self.f_phi.value(x) };
            terms.push(mu.weight(i) * single);
        }
        if !kernel.is_zero() {
            let zero_val = kernel.value(&vec![0.0; self.d]);
            let mut delta = vec![0.0; self.d];
            for i in 0..m {
                terms.push(0.5 * mu.weight(i) * mu.weight(i) * zero_val);
                for j in (i + 1)..m {
                    canonical_delta(mu.point(i), mu.point(j), &mut delta);
                    terms.push(mu.weight(i) * mu.weight(j) * kernel.value(&delta));
                }
            }
        }
        sorted_sum(terms)
    }

    fn eval_config(&self, q: &[f64], terminal: bool) -> f64 {
        let (d, m) = self.shape(q);
        let kernel = if terminal { &self.phi1 } else { &self.f_phi1 };
        let inv_m = 1.0 / m as f64;
        let inv_m2 = inv_m * inv_m;
        let mut terms = Vec::with_capacity(m + m * (m + 1) / 2);
        for i in 0..m {
            let x = &q[i * d..(i + 1) * d];
            let single = if terminal { self.phi_value(x) } else { self.f_phi.value(x) };
            terms.push(inv_m * single);
        }
        if !kernel.is_zero() {
            let zero_val = kernel.value(&vec![0.0; d]);
            let mut delta = vec![0.0; d];
            for i in 0..m {
                terms.push(0.5 * inv_m2 * zero_val);
                for j in (i + 1)..m {
                    canonical_delta(&q[i * d..(i + 1) * d], &q[j * d..(j + 1) * d], &mut delta);
                    terms.push(inv_m2 * kernel.value(&delta));
                }
            }
        }
        sorted_sum(terms)
    }

    /// Agent terminal cost `u0(q0, mu) = phi(q0) + (phi1 * mu)(q0)`.
    pub fn agent_u0(&self, q0: &[f64], mu: &WeightedMeasure) -> f64 {
        let mut s = self.phi_value(q0);
        let mut delta = vec![0.0; self.d];
        for i in 0..mu.len() {
            for (a, (x, y)) in q0.iter().zip(mu.point(i)).enumerate() {
                delta[a] = x - y;
            }
            s += mu.weight(i) * self.phi1.value(&delta);
        }
        s
    }

    /// Agent running cost `f(q0, mu) = fphi(q0) + (fphi1 * mu)(q0)`.
    pub fn agent_f(&self, q0: &[f64], mu: &WeightedMeasure) -> f64 {
        let mut s = self.f_phi.value(q0);
        if !self.f_phi1.is_zero() {
            let mut delta = vec![0.0; self.d];
            for i in 0..mu.len() {
                for (a, (x, y)) in q0.iter().zip(mu.point(i)).enumerate() {
                    delta[a] = x - y;
                }
                s += mu.weight(i) * self.f_phi1.value(&delta);
            }
        }
        s
    }

    /// Wasserstein gradient of the terminal functional,
    /// `grad_w U0(mu)(x) = D phi(x) + (D phi1 * mu)(x)`, which also equals
    /// the agent gradient `D_{q0} u0(x, mu)`.
    pub fn grad_w_u0(&self, mu: &WeightedMeasure, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.phi_add_grad(x, 1.0, &mut out);
        self.add_convolved_gradient(&self.phi1, mu, x, &mut out);
        out
    }

    /// Wasserstein gradient of the coupling, `grad_w F(mu)(x) = D_q f(x, mu)`.
    pub fn grad_w_f(&self, mu: &WeightedMeasure, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.f_phi.add_gradient(x, 1.0, &mut out);
        self.add_convolved_gradient(&self.f_phi1, mu, x, &mut out);
        out
    }

    fn add_convolved_gradient(
        &self,
        kernel: &Field,
        mu: &WeightedMeasure,
        x: &[f64],
        out: &mut [f64],
    ) {
        if kernel.is_zero() {
            return;
        }
        let mut delta = vec![0.0; self.d];
        for i in 0..mu.len() {
            for (a, (p, y)) in x.iter().zip(mu.point(i)).enumerate() {
                delta[a] = p - y;
            }
            kernel.add_gradient(&delta, mu.weight(i), out);
        }
    }

    /// Spatial Hessian of `grad_w U0`, `D^2 phi(x) + (D^2 phi1 * mu)(x)`,
    /// row major `d x d`.
    pub fn hess_w_u0(&self, mu: &WeightedMeasure, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; d * d];
        self.phi_add_hess(x, 1.0, &mut out);
        if !self.phi1.is_zero() {
            let mut delta = vec![0.0; d];
            for i in 0..mu.len() {
                for (a, (p, y)) in x.iter().zip(mu.point(i)).enumerate() {
                    delta[a] = p - y;
                }
                self.phi1.add_hessian(&delta, mu.weight(i), &mut out);
            }
        }
        out
    }

    /// Spatial Hessian of the coupling force `D_q^2 f(x, mu)`.
    pub fn hess_w_f(&self, mu: &WeightedMeasure, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; d * d];
        self.f_phi.add_hessian(x, 1.0, &mut out);
        if !self.f_phi1.is_zero() {
            let mut delta = vec![0.0; d];
            for i in 0..mu.len() {
                for (a, (p, y)) in x.iter().zip(mu.point(i)).enumerate() {
                    delta[a] = p - y;
                }
                self.f_phi1.add_hessian(&delta, mu.weight(i), &mut out);
            }
        }
        out
    }

    /// Full gradient of `U0^m`: the length `m d` vector of `D_{q_i} U0^m`.
    pub fn grad_u0m(&self, q: &[f64]) -> Vec<f64> {
        self.grad_config(q, true)
    }

    /// Full gradient of `F^m`, written additively into `out` scaled by
    /// `scale`; this is the flow's coupling force assembled in one pass.
    pub fn add_grad_fm(&self, q: &[f64], scale: f64, out: &mut [f64]) {
        let (d, m) = self.shape(q);
        debug_assert_eq!(out.len(), m * d);
        let inv_m = scale / m as f64;
        let inv_m2 = inv_m / m as f64;
        if !self.f_phi.is_zero() {
            for i in 0..m {
                self.f_phi.add_gradient(&q[i * d..(i + 1) * d], inv_m, &mut out[i * d..(i + 1) * d]);
            }
        }
        if !self.f_phi1.is_zero() {
            let mut delta = vec![0.0; d];
            let mut g = vec![0.0; d];
            for i in 0..m {
                for j in (i + 1)..m {
                    for a in 0..d {
                        delta[a] = q[i * d + a] - q[j * d + a];
                    }
                    g.fill(0.0);
                    self.f_phi1.add_gradient(&delta, inv_m2, &mut g);
                    for a in 0..d {
                        out[i * d + a] += g[a];
                        out[j * d + a] -= g[a];
                    }
                }
            }
        }
    }

    fn grad_config(&self, q: &[f64], terminal: bool) -> Vec<f64> {
        let (d, m) = self.shape(q);
        let mut out = vec![0.0; m * d];
        let inv_m = 1.0 / m as f64;
        let inv_m2 = inv_m * inv_m;
        if terminal {
            for i in 0..m {
                self.phi_add_grad(&q[i * d..(i + 1) * d], inv_m, &mut out[i * d..(i + 1) * d]);
            }
        } else if !self.f_phi.is_zero() {
            for i in 0..m {
                self.f_phi.add_gradient(&q[i * d..(i + 1) * d], inv_m, &mut out[i * d..(i + 1) * d]);
            }
        }
        let kernel = if terminal { &self.phi1 } else { &self.f_phi1 };
        if !kernel.is_zero() {
            let mut delta = vec![0.0; d];
            let mut g = vec![0.0; d];
            for i in 0..m {
                for j in (i + 1)..m {
                    for a in 0..d {
                        delta[a] = q[i * d + a] - q[j * d + a];
                    }
                    g.fill(0.0);
                    kernel.add_gradient(&delta, inv_m2, &mut g);
                    for a in 0..d {
                        out[i * d + a] += g[a];
                        out[j * d + a] -= g[a];
                    }
                }
            }
        }
        out
    }

    /// Hessian of `U0^m` as a dense `md x md` matrix.
    pub fn hess_u0m(&self, q: &[f64]) -> DMatrix<f64> {
        self.hess_config(q, true)
    }

    /// Hessian of `F^m`; the flow's variational system adds this to the
    /// block-diagonal potential curvature each stage.
    pub fn hess_fm(&self, q: &[f64]) -> DMatrix<f64> {
        self.hess_config(q, false)
    }

    fn hess_config(&self, q: &[f64], terminal: bool) -> DMatrix<f64> {
        let (d, m) = self.shape(q);
        let n = m * d;
        let mut out = DMatrix::zeros(n, n);
        let inv_m = 1.0 / m as f64;
        let inv_m2 = inv_m * inv_m;
        let mut block = vec![0.0; d * d];
        for i in 0..m {
            block.fill(0.0);
            if terminal {
                self.phi_add_hess(&q[i * d..(i + 1) * d], inv_m, &mut block);
            } else if !self.f_phi.is_zero() {
                self.f_phi.add_hessian(&q[i * d..(i + 1) * d], inv_m, &mut block);
            }
            for a in 0..d {
                for b in 0..d {
                    out[(i * d + a, i * d + b)] += block[a * d + b];
                }
            }
        }
        let kernel = if terminal { &self.phi1 } else { &self.f_phi1 };
        if !kernel.is_zero() {
            let mut delta = vec![0.0; d];
            for i in 0..m {
                for j in (i + 1)..m {
                    for a in 0..d {
                        delta[a] = q[i * d + a] - q[j * d + a];
                    }
                    block.fill(0.0);
                    kernel.add_hessian(&delta, inv_m2, &mut block);
                    for a in 0..d {
                        for b in 0..d {
                            let h = block[a * d + b];
                            out[(i * d + a, i * d + b)] += h;
                            out[(j * d + a, j * d + b)] += h;
                            out[(i * d + a, j * d + b)] -= h;
                            out[(j * d + a, i * d + b)] -= h;
                        }
                    }
                }
            }
        }
        out
    }

    /// Full third derivative tensor of `U0^m`, layout `[r, s, t]` flattened
    /// as `r n^2 + s n + t` with `n = m d`. Intended for small oracle runs.
    pub fn third_u0m(&self, q: &[f64]) -> Vec<f64> {
        let (d, m) = self.shape(q);
        let n = m * d;
        let mut out = vec![0.0; n * n * n];
        let inv_m = 1.0 / m as f64;
        let inv_m2 = inv_m * inv_m;
        let mut tens = vec![0.0; d * d * d];
        for i in 0..m {
            tens.fill(0.0);
            self.phi0.add_third(&q[i * d..(i + 1) * d], inv_m, &mut tens);
            scatter_third(&mut out, n, d, i, i, i, &tens, 1.0);
        }
        if !self.phi1.is_zero() {
            let mut delta = vec![0.0; d];
            for i in 0..m {
                for j in (i + 1)..m {
                    for a in 0..d {
                        delta[a] = q[i * d + a] - q[j * d + a];
                    }
                    tens.fill(0.0);
                    self.phi1.add_third(&delta, inv_m2, &mut tens);
                    // Pure particle diagonals.
                    scatter_third(&mut out, n, d, i, i, i, &tens, 1.0);
                    scatter_third(&mut out, n, d, j, j, j, &tens, -1.0);
                    // Two slots on the doubled particle, one on the other;
                    // the sign is minus when the doubled particle is i.
                    for (pi, pj, pk, s) in [
                        (i, i, j, -1.0),
                        (i, j, i, -1.0),
                        (j, i, i, -1.0),
                        (i, j, j, 1.0),
                        (j, i, j, 1.0),
                        (j, j, i, 1.0),
                    ] {
                        scatter_third(&mut out, n, d, pi, pj, pk, &tens, s);
                    }
                }
            }
        }
        out
    }

    /// Per-class maxima of the third derivative tensor of `U0^m`, computed
    /// without materializing the full tensor.
    pub fn third_u0m_classes(&self, q: &[f64]) -> ThirdClasses {
        let (d, m) = self.shape(q);
        let inv_m = 1.0 / m as f64;
        let inv_m2 = inv_m * inv_m;
        let mut diagonal = 0.0f64;
        let mut two_equal = 0.0f64;
        let mut tens = vec![0.0; d * d * d];
        let mut delta = vec![0.0; d];
        for i in 0..m {
            tens.fill(0.0);
            self.phi0.add_third(&q[i * d..(i + 1) * d], inv_m, &mut tens);
            if !self.phi1.is_zero() {
                for l in 0..m {
                    if l == i {
                        continue;
                    }
                    for a in 0..d {
                        delta[a] = q[i * d + a] - q[l * d + a];
                    }
                    self.phi1.add_third(&delta, inv_m2, &mut tens);
                }
            }
            diagonal = diagonal.max(num::sup_norm(&tens));
        }
        if !self.phi1.is_zero() {
            for i in 0..m {
                for j in (i + 1)..m {
                    for a in 0..d {
                        delta[a] = q[i * d + a] - q[j * d + a];
                    }
                    tens.fill(0.0);
                    self.phi1.add_third(&delta, inv_m2, &mut tens);
                    two_equal = two_equal.max(num::sup_norm(&tens));
                }
            }
        }
        ThirdClasses { diagonal, two_equal, distinct: 0.0 }
    }

    /// Monotonicity certificate: sign of the transform of `phi1` on a
    /// truncated symmetric grid.
    ///
    /// Box half-width is eight times the kernel's support radius, with 2^8
    /// quadrature points per axis in dimension one and 2^6 in dimension two.
    /// Fails with a resolution error when the kernel carries mass near the
    /// box boundary (non-integrable or under-resolved kernels).
    pub fn fourier_monotonicity(&self) -> Result<Certificate> {
        if self.phi1.is_zero() {
            return Ok(Certificate {
                kind: CertificateKind::Monotonicity,
                verdict: true,
                witness: 0.0,
                frequency: Some(vec![0.0; self.d]),
                lambda: None,
                lambda1: None,
            });
        }
        let (min, freq) = match self.d {
            1 => transform_min_1d(&self.phi1)?,
            2 => transform_min_2d(&self.phi1)?,
            d => {
                return Err(Error::Resolution(format!(
                    "fourier grid is sized for d <= 2, got d = {d}"
                )))
            }
        };
        Ok(Certificate {
            kind: CertificateKind::Monotonicity,
            verdict: min >= -EPS_FFT,
            witness: min,
            frequency: Some(freq),
            lambda: None,
            lambda1: None,
        })
    }

    /// Displacement convexity certificate
    /// `kappa = lambda + min(0, eig(D^2 phi0)) - 2 |lambda1|`.
    ///
    /// The bounded self term only ever weakens the modulus here: a positive
    /// scan minimum is not extrapolated beyond the scanned radii.
    pub fn displacement_modulus(&self) -> Certificate {
        let floor = self.phi0.hessian_min_eig(self.d).min(0.0);
        let kappa = self.lambda + floor - 2.0 * self.lambda1.abs();
        Certificate {
            kind: CertificateKind::DisplacementConvexity,
            verdict: kappa > 0.0,
            witness: kappa,
            frequency: None,
            lambda: Some(self.lambda),
            lambda1: Some(self.lambda1),
        }
    }

    fn shape(&self, q: &[f64]) -> (usize, usize) {
        let d = self.d;
        assert!(
            !q.is_empty() && q.len() % d == 0,
            "configuration length {} is not a positive multiple of d = {d}",
            q.len()
        );
        (d, q.len() / d)
    }
}

/// C^2 plateau kernel: 1 on the inner ball, 0 outside the outer ball.
pub fn bump_phi1(inner: f64, outer: f64) -> Result<Field> {
    let f = Field::Bump { inner, outer };
    f.validate()?;
    Ok(f)
}

/// Finite-difference convexity probe for a scalar configuration functional.
///
/// Samples configurations in a ball, builds the central-difference Hessian
/// with steps `1e-3 (1 + |x_a|)`, and reports the worst eigenvalue against
/// the bar `lambda / m`.
pub fn discrete_convexity_check(
    eval: impl Fn(&[f64]) -> f64,
    d: usize,
    m: usize,
    lambda: f64,
    region: &ConvexityRegion,
) -> ConvexityReport {
    let n = m * d;
    let bar = lambda / m as f64;
    let mut min_eig = f64::INFINITY;
    let mut worst = vec![0.0; n];
    let mut rng = sampling::rng(sampling::mix(region.seed, 0x434f_4e56));
    for _ in 0..region.samples.max(1) {
        let x = sampling::cloud(&mut rng, m, d, region.radius);
        let h = fd_hessian_scalar(&eval, &x);
        let eig = num::min_eigenvalue(&h);
        if eig < min_eig {
            min_eig = eig;
            worst = x;
        }
    }
    ConvexityReport {
        m,
        lambda,
        bar,
        min_eig,
        margin: min_eig - bar,
        worst_config: worst,
        pass: min_eig - bar >= -1e-5,
    }
}

/// Central-difference Hessian of a scalar function of a flat configuration.
pub fn fd_hessian_scalar(eval: &impl Fn(&[f64]) -> f64, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let steps: Vec<f64> = x.iter().map(|v| 1e-3 * (1.0 + v.abs())).collect();
    let f0 = eval(x);
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for a in 0..n {
        xp[a] = x[a] + steps[a];
        let fp = eval(&xp);
        xp[a] = x[a] - steps[a];
        let fm = eval(&xp);
        xp[a] = x[a];
        h[(a, a)] = (fp - 2.0 * f0 + fm) / (steps[a] * steps[a]);
    }
    for a in 0..n {
        for b in (a + 1)..n {
            xp[a] = x[a] + steps[a];
            xp[b] = x[b] + steps[b];
            let fpp = eval(&xp);
            xp[b] = x[b] - steps[b];
            let fpm = eval(&xp);
            xp[a] = x[a] - steps[a];
            let fmm = eval(&xp);
            xp[b] = x[b] + steps[b];
            let fmp = eval(&xp);
            xp[a] = x[a];
            xp[b] = x[b];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * steps[a] * steps[b]);
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    h
}

fn scatter_third(
    out: &mut [f64],
    n: usize,
    d: usize,
    pi: usize,
    pj: usize,
    pk: usize,
    tens: &[f64],
    sign: f64,
) {
    for a in 0..d {
        for b in 0..d {
            for c in 0..d {
                let r = pi * d + a;
                let s = pj * d + b;
                let t = pk * d + c;
                out[(r * n + s) * n + t] += sign * tens[(a * d + b) * d + c];
            }
        }
    }
}

/// Difference `x - y` flipped so its first nonzero component is positive;
/// even kernels give identical values on `delta` and `-delta`, so this makes
/// pair terms independent of particle order.
fn canonical_delta(x: &[f64], y: &[f64], delta: &mut [f64]) {
    for (a, (xi, yi)) in x.iter().zip(y).enumerate() {
        delta[a] = xi - yi;
    }
    for v in delta.iter() {
        if *v > 0.0 {
            return;
        }
        if *v < 0.0 {
            for w in delta.iter_mut() {
                *w = -*w;
            }
            return;
        }
    }
}

/// Kahan-free deterministic sum: sorting addends fixes the addition order for
/// any permutation of the inputs.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn check_even(kernel: &Field, d: usize, name: &str) -> Result<()> {
    let mut rng = sampling::rng(0x4556_454e);
    for _ in 0..8 {
        let x = sampling::ball_point(&mut rng, d, 2.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let a = kernel.value(&x);
        let b = kernel.value(&neg);
        if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
            return Err(Error::invalid(format!("{name} must be even")));
        }
    }
    Ok(())
}

fn transform_min_1d(phi1: &Field) -> Result<(f64, Vec<f64>)> {
    let n = 256usize;
    let l = 8.0 * phi1.support_radius();
    let dx = 2.0 * l / n as f64;
    let xs: Vec<f64> = (0..n).map(|k| -l + (k as f64 + 0.5) * dx).collect();
    let vals: Vec<f64> = xs.iter().map(|&x| phi1.value(&[x])).collect();
    check_boundary(&[vals[0], vals[n - 1]], &vals)?;
    let mut min = f64::INFINITY;
    let mut arg = 0.0;
    for j in 0..=n / 2 {
        let xi = j as f64 / (2.0 * l);
        let mut s = 0.0;
        for (x, v) in xs.iter().zip(&vals) {
            s += v * (2.0 * std::f64::consts::PI * x * xi).cos();
        }
        s *= dx;
        if s < min {
            min = s;
            arg = xi;
        }
    }
    Ok((min, vec![arg]))
}

fn transform_min_2d(phi1: &Field) -> Result<(f64, Vec<f64>)> {
    let n = 64usize;
    let l = 8.0 * phi1.support_radius();
    let dx = 2.0 * l / n as f64;
    let axis: Vec<f64> = (0..n).map(|k| -l + (k as f64 + 0.5) * dx).collect();
    let mut vals = vec![0.0; n * n];
    let mut boundary = Vec::new();
    for (k1, &x1) in axis.iter().enumerate() {
        for (k2, &x2) in axis.iter().enumerate() {
            let v = phi1.value(&[x1, x2]);
            vals[k1 * n + k2] = v;
            if k1 == 0 || k1 == n - 1 || k2 == 0 || k2 == n - 1 {
                boundary.push(v);
            }
        }
    }
    check_boundary(&boundary, &vals)?;
    let mut min = f64::INFINITY;
    let mut arg = vec![0.0, 0.0];
    let tau = 2.0 * std::f64::consts::PI;
    for j1 in 0..=n / 2 {
        let xi1 = j1 as f64 / (2.0 * l);
        for j2 in 0..=n / 2 {
            let xi2 = j2 as f64 / (2.0 * l);
            let mut s = 0.0;
            for (k1, &x1) in axis.iter().enumerate() {
                for (k2, &x2) in axis.iter().enumerate() {
                    s += vals[k1 * n + k2] * (tau * (x1 * xi1 + x2 * xi2)).cos();
                }
            }
            s *= dx * dx;
            if s < min {
                min = s;
                arg = vec![xi1, xi2];
            }
        }
    }
    Ok((min, arg))
}

fn check_boundary(boundary: &[f64], all: &[f64]) -> Result<()> {
    let scale = all.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let worst = boundary.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if worst > 1e-9 * scale {
        return Err(Error::Resolution(format!(
            "kernel mass {worst:.3e} at the truncation boundary (scale {scale:.3e})"
        )));
    }
    Ok(())
}
