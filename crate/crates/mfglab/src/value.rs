//! The value function of the m-particle control problem.
//!
//! `U^m(t, q)` is the infimum of
//!
//! ```text
//! U0^m(gamma(0)) + int_0^t [ L^m(gamma, gamma') + F^m(gamma) ] ds
//! ```
//!
//! over configuration paths ending at `q`. Two evaluation routes are
//! implemented and cross-checked: solving the characteristic boundary-value
//! problem and integrating the action along the optimal trajectory, or
//! minimizing the discretized action directly over piecewise-linear paths.
//! Along characteristics the momentum `eta(t)` is `D_q U^m(t, q)`, so the
//! same solve yields values, gradients and the Wasserstein gradient
//! `m eta_i` of the lifted functional at once.
//!
//! Second derivatives are estimated by central differences of the gradient
//! map, never by a second variational solve: one inversion at the base
//! configuration is reused for every perturbed target through a
//! frozen-Jacobian Newton iteration, which keeps the Hessian and scaling
//! probes at a few forward integrations per column. The scaled kernels
//!
//! ```text
//! Lambda0(q_i) = m   D^2_{q_i q_i} U^m,
//! Lambda1(q_i, q_j) = m^2 D^2_{q_i q_j} U^m,   i != j,
//! ```
//!
//! stay bounded as m grows; `scaling_study` measures the decay exponents of
//! the raw blocks and of the third-derivative classes against their targets.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataModel;
use crate::error::{Error, Result};
use crate::flow::{self, PhaseTrajectory};
use crate::measures::EmpiricalMeasure;
use crate::model::{matvec, quad_form, Model};
use crate::num;
use crate::sampling;

/// Relative step for central differences of gradient maps.
const HESS_STEP: f64 = 1e-4;

/// Relative step for differencing Hessians into third derivative classes.
const THIRD_STEP: f64 = 5e-3;

/// Relative half width of the time stencil in `hj_residual` and the
/// time-derivative scaling probes.
const TIME_STEP: f64 = 1e-3;

/// Segments in the direct path discretization.
const DIRECT_SEGMENTS: usize = 64;

/// Gradient norm at which the direct minimization stops.
const DIRECT_TOL: f64 = 1e-7;

const DIRECT_MAX_ITERS: usize = 10_000;

/// Allowed distance between a fitted decay exponent and its target.
pub const SLOPE_TOL: f64 = 0.35;

/// Slack granted to the smallest Hessian eigenvalue in convexity checks.
pub const MIN_EIG_SLACK: f64 = 1e-5;

/// How a value sample was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Invert the characteristic flow and integrate the action along it.
    Characteristics,
    /// Minimize the discretized action over piecewise-linear paths.
    DirectMinimization,
}

/// One evaluation of the value function together with its configuration
/// gradient `D_q U^m(t, q)`.
#[derive(Debug, Clone, Serialize)]
pub struct ValueSample {
    pub t: f64,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub method: Method,
}

fn validate_point(model: &Model, data: &DataModel, t: f64, q: &[f64]) -> Result<usize> {
    if data.dim() != model.dim() {
        return Err(Error::invalid(format!(
            "model dimension {} does not match data dimension {}",
            model.dim(),
            data.dim()
        )));
    }
    let d = model.dim();
    if q.is_empty() || q.len() % d != 0 {
        return Err(Error::invalid(format!(
            "configuration length {} is not a nonzero multiple of d = {d}",
            q.len()
        )));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("configuration has non-finite entries".to_string()));
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::invalid(format!("time must be finite and >= 0, got {t}")));
    }
    Ok(q.len() / d)
}

/// Evaluates `U^m(t, q)` and `D_q U^m(t, q)` by the requested method.
///
/// At `t = 0` both methods return the terminal data exactly. The direct
/// method reports the discrete co-state at the endpoint as its gradient, so
/// the two routes can be compared component by component.
pub fn value(
    model: &Model,
    data: &DataModel,
    t: f64,
    q: &[f64],
    method: Method,
    steps: usize,
) -> Result<ValueSample> {
    validate_point(model, data, t, q)?;
    if t == 0.0 {
        return Ok(ValueSample {
            t,
            value: data.eval_u0m(q),
            gradient: data.grad_u0m(q),
            method,
        });
    }
    match method {
        Method::Characteristics => {
            let traj = flow::solve_bvp(model, data, q, t, steps)?;
            Ok(ValueSample {
                t,
                value: action_along(model, data, &traj),
                gradient: traj.terminal_eta().to_vec(),
                method,
            })
        }
        Method::DirectMinimization => {
            let problem = ActionProblem::new(model, data, t, q);
            let (val, nodes) = problem.minimize()?;
            Ok(ValueSample { t, value: val, gradient: problem.endpoint_gradient(&nodes), method })
        }
    }
}

/// `U0^m` at the foot plus the running cost along a stored trajectory.
fn action_along(model: &Model, data: &DataModel, traj: &PhaseTrajectory) -> f64 {
    let d = traj.dim();
    let m = traj.particles();
    let mf = m as f64;
    if traj.len() < 2 {
        return data.eval_u0m(traj.initial_xi());
    }
    let h = traj.terminal_time() / (traj.len() - 1) as f64;
    let mut p = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut running = Vec::with_capacity(traj.len());
    for k in 0..traj.len() {
        let xi = traj.xi_at(k);
        let eta = traj.eta_at(k);
        let mut acc = 0.0;
        for i in 0..m {
            for a in 0..d {
                p[a] = mf * eta[i * d + a];
            }
            model.dp_h(&p, &mut v);
            acc += model.lagrangian(&xi[i * d..(i + 1) * d], &v);
        }
        running.push(acc / mf + data.eval_fm(xi));
    }
    data.eval_u0m(traj.initial_xi()) + num::integrate_uniform(&running, h)
}

/// Discretized action over piecewise-linear paths with `DIRECT_SEGMENTS`
/// segments and a fixed endpoint. Free unknowns are the nodes
/// `x_0, ..., x_{n-1}`; node `n` is the target configuration. The running
/// coupling is integrated with Simpson's rule on each segment, the kinetic
/// part is exact for linear pieces.
struct ActionProblem<'a> {
    model: &'a Model,
    data: &'a DataModel,
    q: &'a [f64],
    h: f64,
    n: usize,
    m: usize,
    d: usize,
    md: usize,
}

impl<'a> ActionProblem<'a> {
    fn new(model: &'a Model, data: &'a DataModel, t: f64, q: &'a [f64]) -> ActionProblem<'a> {
        let d = model.dim();
        let m = q.len() / d;
        ActionProblem {
            model,
            data,
            q,
            h: t / DIRECT_SEGMENTS as f64,
            n: DIRECT_SEGMENTS,
            m,
            d,
            md: q.len(),
        }
    }

    fn node<'b>(&'b self, x: &'b [f64], k: usize) -> &'b [f64] {
        if k < self.n {
            &x[k * self.md..(k + 1) * self.md]
        } else {
            self.q
        }
    }

    /// `(1/m) sum_i g(x_i) + F^m(x)`, the spatial part of the running cost.
    fn coupling(&self, cfg: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.m {
            acc += self.model.potential().value(&cfg[i * self.d..(i + 1) * self.d]);
        }
        acc / self.m as f64 + self.data.eval_fm(cfg)
    }

    fn add_coupling_grad(&self, cfg: &[f64], scale: f64, out: &mut [f64]) {
        let w = scale / self.m as f64;
        for i in 0..self.m {
            self.model
                .potential()
                .add_gradient(&cfg[i * self.d..(i + 1) * self.d], w, &mut out[i * self.d..(i + 1) * self.d]);
        }
        self.data.add_grad_fm(cfg, scale, out);
    }

    fn action(&self, x: &[f64]) -> f64 {
        let mf = self.m as f64;
        let mut total = self.data.eval_u0m(self.node(x, 0));
        let mut diff = vec![0.0; self.d];
        let mut mid = vec![0.0; self.md];
        for k in 0..self.n {
            let a = self.node(x, k);
            let b = self.node(x, k + 1);
            let mut kin = 0.0;
            for i in 0..self.m {
                for c in 0..self.d {
                    diff[c] = b[i * self.d + c] - a[i * self.d + c];
                }
                kin += quad_form(self.model.kinetic(), &diff);
            }
            total += kin / (2.0 * self.h * mf);
            for (mv, (av, bv)) in mid.iter_mut().zip(a.iter().zip(b)) {
                *mv = 0.5 * (av + bv);
            }
            total += self.h / 6.0
                * (self.coupling(a) + 4.0 * self.coupling(&mid) + self.coupling(b));
        }
        total
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mf = self.m as f64;
        let g0 = self.data.grad_u0m(self.node(x, 0));
        for (o, g) in out[..self.md].iter_mut().zip(&g0) {
            *o += g;
        }
        let coef = 1.0 / (self.h * mf);
        let mut diff = vec![0.0; self.d];
        let mut av = vec![0.0; self.d];
        let mut mid = vec![0.0; self.md];
        let mut gm = vec![0.0; self.md];
        for k in 0..self.n {
            let a = self.node(x, k);
            let b = self.node(x, k + 1);
            for i in 0..self.m {
                for c in 0..self.d {
                    diff[c] = b[i * self.d + c] - a[i * self.d + c];
                }
                matvec(self.model.kinetic(), &diff, &mut av);
                let col = i * self.d;
                if k < self.n {
                    for c in 0..self.d {
                        out[k * self.md + col + c] -= coef * av[c];
                    }
                }
                if k + 1 < self.n {
                    for c in 0..self.d {
                        out[(k + 1) * self.md + col + c] += coef * av[c];
                    }
                }
            }
            for (mv, (x0, x1)) in mid.iter_mut().zip(a.iter().zip(b)) {
                *mv = 0.5 * (x0 + x1);
            }
            // Endpoint Simpson weight h/6; the midpoint passes h/3 to each
            // neighbor through the chain rule.
            if k < self.n {
                let lo = k * self.md;
                self.add_coupling_grad(a, self.h / 6.0, &mut out[lo..lo + self.md]);
            }
            if k + 1 < self.n {
                let lo = (k + 1) * self.md;
                self.add_coupling_grad(b, self.h / 6.0, &mut out[lo..lo + self.md]);
            }
            gm.fill(0.0);
            self.add_coupling_grad(&mid, self.h / 3.0, &mut gm);
            if k < self.n {
                let lo = k * self.md;
                for (o, g) in out[lo..lo + self.md].iter_mut().zip(&gm) {
                    *o += g;
                }
            }
            if k + 1 < self.n {
                let lo = (k + 1) * self.md;
                for (o, g) in out[lo..lo + self.md].iter_mut().zip(&gm) {
                    *o += g;
                }
            }
        }
    }

    /// Derivative of the discrete action with respect to the fixed endpoint,
    /// the discrete analogue of `D_q U^m`.
    fn endpoint_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mf = self.m as f64;
        let last = self.node(x, self.n - 1);
        let mut out = vec![0.0; self.md];
        let mut diff = vec![0.0; self.d];
        let mut av = vec![0.0; self.d];
        for i in 0..self.m {
            for c in 0..self.d {
                diff[c] = self.q[i * self.d + c] - last[i * self.d + c];
            }
            matvec(self.model.kinetic(), &diff, &mut av);
            for c in 0..self.d {
                out[i * self.d + c] = av[c] / (self.h * mf);
            }
        }
        let mut mid = vec![0.0; self.md];
        for (mv, (x0, x1)) in mid.iter_mut().zip(last.iter().zip(self.q)) {
            *mv = 0.5 * (x0 + x1);
        }
        self.add_coupling_grad(self.q, self.h / 6.0, &mut out);
        self.add_coupling_grad(&mid, self.h / 3.0, &mut out);
        out
    }

    /// Barzilai-Borwein gradient descent with a monotone Armijo backtrack.
    /// Starts from the constant path sitting at the endpoint.
    fn minimize(&self) -> Result<(f64, Vec<f64>)> {
        let len = self.n * self.md;
        let mut x = Vec::with_capacity(len);
        for _ in 0..self.n {
            x.extend_from_slice(self.q);
        }
        let mut g = vec![0.0; len];
        self.gradient(&x, &mut g);
        let mut f = self.action(&x);
        let sup_a = num::sup_norm(self.model.kinetic());
        let mut alpha = 0.25 * self.m as f64 * self.h / (1.0 + sup_a);
        let mut gnew = vec![0.0; len];
        for _ in 0..DIRECT_MAX_ITERS {
            let gn = num::l2(&g);
            if gn <= DIRECT_TOL {
                return Ok((f, x));
            }
            let mut step = alpha.clamp(1e-12, 1e6);
            let mut accepted = None;
            for _ in 0..60 {
                let xn: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
                let fn_ = self.action(&xn);
                if fn_.is_finite() && fn_ <= f - 1e-4 * step * gn * gn {
                    accepted = Some((xn, fn_));
                    break;
                }
                step *= 0.5;
            }
            let Some((xn, fx)) = accepted else {
                if gn <= 1e-4 {
                    return Ok((f, x));
                }
                return Err(Error::OptimizationFailure(
                    "line search stalled in direct action minimization".to_string(),
                ));
            };
            // Decrease below roundoff with a small gradient means the
            // iterate sits at the precision floor of the objective.
            if fx >= f - 1e-15 * (1.0 + f.abs()) && gn <= 1e-4 {
                return Ok((fx, xn));
            }
            self.gradient(&xn, &mut gnew);
            let mut sy = 0.0;
            let mut ss = 0.0;
            for j in 0..len {
                let s = xn[j] - x[j];
                let y = gnew[j] - g[j];
                sy += s * y;
                ss += s * s;
            }
            alpha = if sy > 1e-300 && (ss / sy).is_finite() { ss / sy } else { 2.0 * step };
            x = xn;
            f = fx;
            std::mem::swap(&mut g, &mut gnew);
        }
        Err(Error::OptimizationFailure(format!(
            "direct action minimization did not reach gradient norm {DIRECT_TOL:.1e} in {DIRECT_MAX_ITERS} iterations"
        )))
    }
}

/// Wasserstein gradient of the lifted value function along the support of
/// `mu`: the block at particle `i` is `m D_{q_i} U^m(t, q) = m eta_i(t)`.
pub fn wasserstein_gradient(
    model: &Model,
    data: &DataModel,
    t: f64,
    mu: &EmpiricalMeasure,
    steps: usize,
) -> Result<Vec<f64>> {
    let q = mu.flat();
    let m = validate_point(model, data, t, q)?;
    let mf = m as f64;
    if t == 0.0 {
        return Ok(data.grad_u0m(q).iter().map(|g| mf * g).collect());
    }
    let traj = flow::solve_bvp(model, data, q, t, steps)?;
    Ok(traj.terminal_eta().iter().map(|e| mf * e).collect())
}

/// The map `p -> D_q U^m(t, p)` around a base configuration, with the flow
/// inverted once. Perturbed targets are resolved by Newton steps that reuse
/// the base terminal Jacobian, so each call costs a few forward
/// integrations and no further variational solves.
struct GradientMap<'a> {
    model: &'a Model,
    data: &'a DataModel,
    t: f64,
    steps: usize,
    z: Vec<f64>,
    lu: LU<f64, Dyn, Dyn>,
}

impl<'a> GradientMap<'a> {
    fn new(
        model: &'a Model,
        data: &'a DataModel,
        t: f64,
        q: &[f64],
        steps: usize,
    ) -> Result<GradientMap<'a>> {
        validate_point(model, data, t, q)?;
        let z = flow::invert_flow(model, data, q, t, steps)?;
        let traj = flow::integrate_with_jacobian(model, data, &z, t, steps)?;
        let lu = traj.terminal_dxi().expect("jacobian carried").clone().lu();
        Ok(GradientMap { model, data, t, steps, z, lu })
    }

    /// Terminal momentum over the preimage of `p`. The frozen-Jacobian
    /// iteration is pushed to a much tighter tolerance than a fresh
    /// inversion would use, because these gradients are later divided by
    /// finite-difference steps.
    fn gradient_at(&self, p: &[f64]) -> Result<Vec<f64>> {
        if self.t == 0.0 {
            return Ok(self.data.grad_u0m(p));
        }
        let scale = 1.0 + num::l2(p);
        let tol = 1e-12 * scale;
        let mut z = self.z.clone();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..24 {
            let traj = flow::integrate_forward(self.model, self.data, &z, self.t, self.steps)?;
            let r: Vec<f64> =
                traj.terminal_xi().iter().zip(p).map(|(a, b)| a - b).collect();
            let rn = num::l2(&r);
            if best.as_ref().map_or(true, |(b, _)| rn < *b) {
                best = Some((rn, traj.terminal_eta().to_vec()));
            }
            if rn <= tol {
                return Ok(traj.terminal_eta().to_vec());
            }
            let Some(dz) = self.lu.solve(&DVector::from_column_slice(&r)) else {
                break;
            };
            for (zi, di) in z.iter_mut().zip(dz.iter()) {
                *zi -= di;
            }
        }
        if let Some((rn, eta)) = best {
            if rn <= 1e-9 * scale {
                return Ok(eta);
            }
        }
        // The frozen Jacobian stopped contracting; fall back to a full
        // inversion warm started at the base preimage.
        let z = flow::invert_flow_guess(self.model, self.data, p, self.t, self.steps, &self.z)?;
        let traj = flow::integrate_forward(self.model, self.data, &z, self.t, self.steps)?;
        Ok(traj.terminal_eta().to_vec())
    }
}

/// Central-difference Jacobian of a gradient map; columns are filled in
/// parallel and depend only on their own evaluations, so the result does
/// not change with the thread count.
fn fd_gradient_jacobian<F>(map: F, q: &[f64], step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let n = q.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|a| -> Result<Vec<f64>> {
            let h = step * (1.0 + q[a].abs());
            let mut pert = q.to_vec();
            pert[a] = q[a] + h;
            let gp = map(&pert)?;
            pert[a] = q[a] - h;
            let gm = map(&pert)?;
            Ok(gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * h)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut jac = DMatrix::zeros(n, n);
    for (a, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            jac[(r, a)] = *v;
        }
    }
    Ok(jac)
}

/// Scaled second derivative kernels of the value function at a
/// configuration, stored blockwise.
#[derive(Debug, Clone, Serialize)]
pub struct HessianKernel {
    pub m: usize,
    pub d: usize,
    /// `Lambda0(q_i)`, `m` row-major `d x d` blocks.
    pub lambda0: Vec<f64>,
    /// `Lambda1(q_i, q_j)` for `i != j`, indexed `(i m + j) d^2`; the
    /// diagonal pair slots stay zero.
    pub lambda1: Vec<f64>,
    /// Largest deviation from blockwise symmetry before symmetrization;
    /// the stored blocks satisfy the symmetries exactly.
    pub symmetry_defect: f64,
}

impl HessianKernel {
    pub fn lambda0_block(&self, i: usize) -> &[f64] {
        let s = self.d * self.d;
        &self.lambda0[i * s..(i + 1) * s]
    }

    pub fn lambda1_block(&self, i: usize, j: usize) -> &[f64] {
        let s = self.d * self.d;
        &self.lambda1[(i * self.m + j) * s..(i * self.m + j + 1) * s]
    }
}

/// Estimates `Lambda0`, `Lambda1` at the support of `mu` by central
/// differences of the gradient map.
///
/// The raw Hessian satisfies `B_{ij} = B_{ji}'`; the largest violation in
/// the scaled blocks is reported as `symmetry_defect` before the blocks are
/// averaged into exact symmetry.
pub fn hessian_kernel(
    model: &Model,
    data: &DataModel,
    t: f64,
    mu: &EmpiricalMeasure,
    steps: usize,
) -> Result<HessianKernel> {
    let q = mu.flat();
    let m = validate_point(model, data, t, q)?;
    let d = model.dim();
    let map = GradientMap::new(model, data, t, q, steps)?;
    let b = fd_gradient_jacobian(|p| map.gradient_at(p), q, HESS_STEP)?;
    let mf = m as f64;
    let m2 = mf * mf;
    let s = d * d;
    let mut lambda0 = vec![0.0; m * s];
    let mut lambda1 = vec![0.0; m * m * s];
    let mut defect = 0.0f64;
    for i in 0..m {
        for a in 0..d {
            for c in 0..d {
                let v = mf * b[(i * d + a, i * d + c)];
                let w = mf * b[(i * d + c, i * d + a)];
                defect = defect.max((v - w).abs());
                lambda0[i * s + a * d + c] = 0.5 * (v + w);
            }
        }
        for j in (i + 1)..m {
            for a in 0..d {
                for c in 0..d {
                    let v = m2 * b[(i * d + a, j * d + c)];
                    let w = m2 * b[(j * d + c, i * d + a)];
                    defect = defect.max((v - w).abs());
                    let sym = 0.5 * (v + w);
                    lambda1[(i * m + j) * s + a * d + c] = sym;
                    lambda1[(j * m + i) * s + c * d + a] = sym;
                }
            }
        }
    }
    Ok(HessianKernel { m, d, lambda0, lambda1, symmetry_defect: defect })
}

/// Residual of the Hamilton-Jacobi equation
/// `d_t U^m + H^m(q, D_q U^m) - F^m(q) = 0` at `(t, q)`, with the time
/// derivative taken by a central difference of characteristic values.
pub fn hj_residual(model: &Model, data: &DataModel, t: f64, q: &[f64], steps: usize) -> Result<f64> {
    let m = validate_point(model, data, t, q)?;
    if t <= 0.0 {
        return Err(Error::invalid("hj_residual needs t > 0".to_string()));
    }
    let d = model.dim();
    let mf = m as f64;
    let dt = TIME_STEP * t;
    let up = value(model, data, t + dt, q, Method::Characteristics, steps)?;
    let um = value(model, data, t - dt, q, Method::Characteristics, steps)?;
    let base = value(model, data, t, q, Method::Characteristics, steps)?;
    let dudt = (up.value - um.value) / (2.0 * dt);
    let mut p = vec![0.0; d];
    let mut ham = 0.0;
    for i in 0..m {
        for a in 0..d {
            p[a] = mf * base.gradient[i * d + a];
        }
        ham += model.hamiltonian(&q[i * d..(i + 1) * d], &p);
    }
    Ok((dudt + ham / mf - data.eval_fm(q)).abs())
}

/// Knobs for `scaling_study`.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingParams {
    /// Evaluation time, strictly positive.
    pub t: f64,
    /// Particle counts, strictly increasing, at least three of them.
    pub ms: Vec<usize>,
    /// Configurations are drawn from the centered ball of this radius.
    pub radius: f64,
    /// Sampled configurations per particle count; maxima are reported.
    pub seeds: usize,
    /// Base seed; clouds are nested across `ms` within one seed.
    pub seed: u64,
    /// Also estimate the third derivative classes (slower).
    pub with_third: bool,
    /// RK4 steps per flow solve.
    pub steps: usize,
}

impl ScalingParams {
    pub fn new(t: f64, ms: Vec<usize>) -> ScalingParams {
        let steps = flow::default_steps(t);
        ScalingParams { t, ms, radius: 1.0, seeds: 16, seed: 1, with_third: false, steps }
    }
}

/// Decay of one derivative class across particle counts.
#[derive(Debug, Clone, Serialize)]
pub struct ClassScaling {
    pub label: &'static str,
    /// Expected exponent of the m-power law.
    pub target: f64,
    /// Fitted log-log slope of `per_m` against `ms`.
    pub slope: f64,
    /// Class maximum over seeds, one entry per particle count.
    pub per_m: Vec<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub t: f64,
    pub radius: f64,
    pub seeds: usize,
    pub ms: Vec<usize>,
    pub classes: Vec<ClassScaling>,
}

impl ScalingReport {
    pub fn all_pass(&self) -> bool {
        self.classes.iter().all(|c| c.pass)
    }
}

struct ProbeMax {
    diag: f64,
    off: f64,
    energy: f64,
    third: Option<[f64; 3]>,
}

fn warm_gradient(
    model: &Model,
    data: &DataModel,
    t: f64,
    q: &[f64],
    steps: usize,
    guess: &[f64],
) -> Result<Vec<f64>> {
    let z = flow::invert_flow_guess(model, data, q, t, steps, guess)?;
    let traj = flow::integrate_forward(model, data, &z, t, steps)?;
    Ok(traj.terminal_eta().to_vec())
}

/// Symmetrized `D^2_q U^m(t, q)` through the variational terminal blocks,
/// `Deta Dxi^{-1}`. Used only where a whole Hessian per evaluation point is
/// needed, as in the third-derivative probes.
fn analytic_hessian(
    model: &Model,
    data: &DataModel,
    t: f64,
    q: &[f64],
    steps: usize,
    guess: &[f64],
) -> Result<DMatrix<f64>> {
    if t == 0.0 {
        return Ok(data.hess_u0m(q));
    }
    let z = flow::invert_flow_guess(model, data, q, t, steps, guess)?;
    let traj = flow::integrate_with_jacobian(model, data, &z, t, steps)?;
    let dxi = traj.terminal_dxi().expect("jacobian carried");
    let deta = traj.terminal_deta().expect("jacobian carried");
    let lu = dxi.transpose().lu();
    let x = lu
        .solve(&deta.transpose())
        .ok_or_else(|| Error::SingularMatrix("terminal flow Jacobian".to_string()))?;
    let h = x.transpose();
    Ok(0.5 * (&h + h.transpose()))
}

fn third_probe(
    model: &Model,
    data: &DataModel,
    params: &ScalingParams,
    q: &[f64],
    guess: &[f64],
) -> Result<[f64; 3]> {
    let d = model.dim();
    let m = q.len() / d;
    let mut classes = [0.0f64; 3];
    let mut pert = q.to_vec();
    for b in 0..d {
        let h = THIRD_STEP * (1.0 + q[b].abs());
        pert[b] = q[b] + h;
        let hp = analytic_hessian(model, data, params.t, &pert, params.steps, guess)?;
        pert[b] = q[b] - h;
        let hm = analytic_hessian(model, data, params.t, &pert, params.steps, guess)?;
        pert[b] = q[b];
        // Differentiation is along a coordinate of particle 0, so the class
        // of entry (i, j) is set by the multiset {0, i, j}.
        for i in 0..m {
            for j in 0..m {
                let class = if i == 0 && j == 0 {
                    0
                } else if i == j || i == 0 || j == 0 {
                    1
                } else {
                    2
                };
                for a in 0..d {
                    for c in 0..d {
                        let v =
                            (hp[(i * d + a, j * d + c)] - hm[(i * d + a, j * d + c)]) / (2.0 * h);
                        classes[class] = classes[class].max(v.abs());
                    }
                }
            }
        }
    }
    Ok(classes)
}

fn scaling_probe(
    model: &Model,
    data: &DataModel,
    params: &ScalingParams,
    m: usize,
    seed_idx: usize,
) -> Result<ProbeMax> {
    let d = model.dim();
    let m_max = *params.ms.iter().max().expect("ms nonempty");
    let q = sampling::nested_cloud(
        sampling::mix(params.seed, seed_idx as u64),
        m,
        m_max,
        d,
        params.radius,
    );
    let map = GradientMap::new(model, data, params.t, &q, params.steps)?;
    let b = fd_gradient_jacobian(|p| map.gradient_at(p), &q, HESS_STEP)?;
    let mut diag = 0.0f64;
    let mut off = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let mut sup = 0.0f64;
            for a in 0..d {
                for c in 0..d {
                    sup = sup.max(b[(i * d + a, j * d + c)].abs());
                }
            }
            if i == j {
                diag = diag.max(sup);
            } else {
                off = off.max(sup);
            }
        }
    }
    let dt = TIME_STEP * params.t;
    let gp = warm_gradient(model, data, params.t + dt, &q, params.steps, &map.z)?;
    let gm = warm_gradient(model, data, params.t - dt, &q, params.steps, &map.z)?;
    let mf = m as f64;
    let mut energy = 0.0;
    for i in 0..m {
        let mut block = 0.0;
        for a in 0..d {
            let tg = (gp[i * d + a] - gm[i * d + a]) / (2.0 * dt);
            block += tg * tg;
        }
        energy += mf * block;
    }
    let third = if params.with_third {
        Some(third_probe(model, data, params, &q, &map.z)?)
    } else {
        None
    };
    Ok(ProbeMax { diag, off, energy, third })
}

/// Floor below which a class is considered to vanish identically; such a
/// class decays faster than any power and is reported at its target slope.
const CLASS_FLOOR: f64 = 1e-13;

fn fit_class(label: &'static str, target: f64, ms: &[usize], per_m: Vec<f64>) -> ClassScaling {
    let xs: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
    let degenerate = per_m.iter().all(|v| *v <= CLASS_FLOOR);
    let slope = if degenerate { target } else { crate::report::fit_loglog(&xs, &per_m) };
    // The targets are upper bounds, so decaying faster than the target is
    // compliant; only a slope noticeably above it refutes the bound.
    let pass = degenerate || slope <= target + SLOPE_TOL;
    ClassScaling { label, target, slope, per_m, pass }
}

/// Measures how derivative classes of `U^m(t, .)` decay with the particle
/// count.
///
/// For each `m` and seed a configuration is drawn in the radius-`r` ball
/// (nested across `m` within a seed), the Hessian of `U^m` is estimated by
/// differencing the gradient map, and the time derivative of the gradient
/// is probed on a central time stencil. Reported classes and targets:
///
/// - `hessian_diagonal`: `sup |D^2_{q_i q_i} U^m|`, target `m^-1`;
/// - `hessian_off_diagonal`: `sup |D^2_{q_i q_j} U^m|`, `i != j`, target `m^-2`;
/// - `time_gradient_energy`: `sum_i m |D_{q_i} d_t U^m|^2`, target `m^0`;
/// - with `with_third`: classes of `D^3 U^m` by index multiset, targets
///   `m^-1` (all equal), `m^-2` (two equal), `m^-2` (all distinct).
///
/// Each target is the exponent of an upper bound, so `pass` only rejects
/// slopes above `target + SLOPE_TOL`. Classes can genuinely decay faster:
/// for interaction-type data the all-distinct class vanishes at `t = 0` and
/// comes out near `m^-3` under the flow, one order inside its bound. A
/// class that vanishes to rounding at every `m` is reported at the target
/// slope and passes.
pub fn scaling_study(model: &Model, data: &DataModel, params: &ScalingParams) -> Result<ScalingReport> {
    let d = model.dim();
    if data.dim() != d {
        return Err(Error::invalid("model and data dimensions differ".to_string()));
    }
    if params.ms.len() < 3 {
        return Err(Error::invalid("scaling fit needs at least three particle counts".to_string()));
    }
    if !params.ms.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::invalid("particle counts must be strictly increasing".to_string()));
    }
    let min_m = if params.with_third { 3 } else { 2 };
    if params.ms[0] < min_m {
        return Err(Error::invalid(format!(
            "smallest particle count must be at least {min_m} for the requested classes"
        )));
    }
    if params.ms.iter().any(|&m| m * d > 256) {
        return Err(Error::invalid("particle count times dimension exceeds 256".to_string()));
    }
    if !(params.t.is_finite() && params.t > 0.0) {
        return Err(Error::invalid("scaling study needs t > 0".to_string()));
    }
    if !(params.radius.is_finite() && params.radius > 0.0) {
        return Err(Error::invalid("sampling radius must be positive".to_string()));
    }
    if params.seeds == 0 || params.steps == 0 {
        return Err(Error::invalid("seeds and steps must be positive".to_string()));
    }
    let tasks: Vec<(usize, usize)> = (0..params.ms.len())
        .flat_map(|mi| (0..params.seeds).map(move |s| (mi, s)))
        .collect();
    let probes: Vec<ProbeMax> = tasks
        .par_iter()
        .map(|&(mi, s)| scaling_probe(model, data, params, params.ms[mi], s))
        .collect::<Result<Vec<_>>>()?;
    let nm = params.ms.len();
    let mut diag = vec![0.0f64; nm];
    let mut off = vec![0.0f64; nm];
    let mut energy = vec![0.0f64; nm];
    let mut third = vec![[0.0f64; 3]; nm];
    for (&(mi, _), probe) in tasks.iter().zip(&probes) {
        diag[mi] = diag[mi].max(probe.diag);
        off[mi] = off[mi].max(probe.off);
        energy[mi] = energy[mi].max(probe.energy);
        if let Some(t3) = probe.third {
            for c in 0..3 {
                third[mi][c] = third[mi][c].max(t3[c]);
            }
        }
    }
    let mut classes = vec![
        fit_class("hessian_diagonal", -1.0, &params.ms, diag),
        fit_class("hessian_off_diagonal", -2.0, &params.ms, off),
        fit_class("time_gradient_energy", 0.0, &params.ms, energy),
    ];
    if params.with_third {
        let pick = |c: usize| third.iter().map(|t| t[c]).collect::<Vec<f64>>();
        classes.push(fit_class("third_diagonal", -1.0, &params.ms, pick(0)));
        classes.push(fit_class("third_two_equal", -2.0, &params.ms, pick(1)));
        classes.push(fit_class("third_distinct", -2.0, &params.ms, pick(2)));
    }
    Ok(ScalingReport {
        t: params.t,
        radius: params.radius,
        seeds: params.seeds,
        ms: params.ms.clone(),
        classes,
    })
}

/// Smallest eigenvalue of `D^2_q U^m(t, .)` at one time.
#[derive(Debug, Clone, Serialize)]
pub struct ConvexityRow {
    pub t: f64,
    pub min_eig: f64,
    pub pass: bool,
}

/// Tracks the smallest Hessian eigenvalue of the value function along a
/// time grid at a fixed configuration. Displacement convexity of the data
/// propagates: every row should clear `-MIN_EIG_SLACK`.
pub fn convexity_evolution(
    model: &Model,
    data: &DataModel,
    ts: &[f64],
    mu: &EmpiricalMeasure,
    steps: usize,
) -> Result<Vec<ConvexityRow>> {
    if ts.is_empty() {
        return Err(Error::invalid("empty time grid".to_string()));
    }
    let q = mu.flat();
    let mut rows = Vec::with_capacity(ts.len());
    for &t in ts {
        validate_point(model, data, t, q)?;
        let map = GradientMap::new(model, data, t, q, steps)?;
        let b = fd_gradient_jacobian(|p| map.gradient_at(p), q, HESS_STEP)?;
        let sym = 0.5 * (&b + b.transpose());
        let min_eig = num::min_eigenvalue(&sym);
        rows.push(ConvexityRow { t, min_eig, pass: min_eig >= -MIN_EIG_SLACK });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Field;
    use crate::model::Kinetic;
    use approx::assert_abs_diff_eq;

    fn free_model(d: usize) -> Model {
        Model::new(d, Kinetic::Scalar(1.0), Field::Zero).unwrap()
    }

    fn quadratic_data(d: usize) -> DataModel {
        DataModel::new(d, 1.0, Field::Zero, Field::Zero, Field::Zero, Field::Zero).unwrap()
    }

    /// Gentle smooth instance with interaction and running coupling.
    fn mild_instance(d: usize) -> (Model, DataModel) {
        let model = Model::new(
            d,
            Kinetic::Scalar(1.0),
            Field::Gaussian { amplitude: 0.3, width: 1.2 },
        )
        .unwrap();
        let data = DataModel::new(
            d,
            1.0,
            Field::Gaussian { amplitude: 0.2, width: 1.0 },
            Field::Gaussian { amplitude: 0.25, width: 1.1 },
            Field::Gaussian { amplitude: 0.15, width: 1.3 },
            Field::Gaussian { amplitude: 0.1, width: 0.9 },
        )
        .unwrap();
        (model, data)
    }

    fn measure(d: usize, q: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::new(d, q.to_vec()).unwrap()
    }

    #[test]
    fn value_at_zero_is_terminal_data() {
        let (model, data) = mild_instance(2);
        let q = [0.3, -0.4, 0.8, 0.1];
        for method in [Method::Characteristics, Method::DirectMinimization] {
            let s = value(&model, &data, 0.0, &q, method, 16).unwrap();
            assert_abs_diff_eq!(s.value, data.eval_u0m(&q), epsilon = 0.0);
            let g = data.grad_u0m(&q);
            for (a, b) in s.gradient.iter().zip(&g) {
                assert_abs_diff_eq!(a, b, epsilon = 0.0);
            }
        }
    }

    #[test]
    fn quadratic_value_matches_closed_form() {
        // U^m(t, q) = sum_i |q_i|^2 / (2 m (1 + t)).
        let model = free_model(1);
        let data = quadratic_data(1);
        let s = value(&model, &data, 1.0, &[2.0], Method::Characteristics, 256).unwrap();
        assert_abs_diff_eq!(s.value, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.gradient[0], 1.0, epsilon = 1e-10);

        let model = free_model(2);
        let data = quadratic_data(2);
        let q = [0.5, -1.0, 2.0, 0.25, -0.75, 1.5];
        let t = 0.75;
        let m = 3.0;
        let expect: f64 =
            q.iter().map(|v| v * v).sum::<f64>() / (2.0 * m * (1.0 + t));
        let s = value(&model, &data, t, &q, Method::Characteristics, 256).unwrap();
        assert_abs_diff_eq!(s.value, expect, epsilon = 1e-9);
        for (k, v) in q.iter().enumerate() {
            assert_abs_diff_eq!(s.gradient[k], v / (m * (1.0 + t)), epsilon = 1e-10);
        }
    }

    #[test]
    fn quadratic_direct_matches_closed_form() {
        let model = free_model(2);
        let data = quadratic_data(2);
        let q = [0.5, -1.0, 2.0, 0.25];
        let t = 1.0;
        let expect: f64 = q.iter().map(|v| v * v).sum::<f64>() / (2.0 * 2.0 * (1.0 + t));
        let s = value(&model, &data, t, &q, Method::DirectMinimization, 256).unwrap();
        assert_abs_diff_eq!(s.value, expect, epsilon = 1e-6);
        for (k, v) in q.iter().enumerate() {
            assert_abs_diff_eq!(s.gradient[k], v / (2.0 * (1.0 + t)), epsilon = 1e-5);
        }
    }

    #[test]
    fn methods_agree_on_mild_instance() {
        let (model, data) = mild_instance(1);
        let q = [0.6, -0.3, 1.1];
        let t = 0.5;
        let a = value(&model, &data, t, &q, Method::Characteristics, 256).unwrap();
        let b = value(&model, &data, t, &q, Method::DirectMinimization, 256).unwrap();
        assert!(
            (a.value - b.value).abs() <= 5e-5,
            "characteristics {} vs direct {}",
            a.value,
            b.value
        );
        for (x, y) in a.gradient.iter().zip(&b.gradient) {
            assert!((x - y).abs() <= 5e-4, "gradients {x} vs {y}");
        }
    }

    #[test]
    fn value_is_permutation_invariant() {
        let (model, data) = mild_instance(2);
        let q = [0.3, -0.4, 0.8, 0.1, -0.6, 0.5];
        let swapped = [0.8, 0.1, -0.6, 0.5, 0.3, -0.4];
        let a = value(&model, &data, 0.5, &q, Method::Characteristics, 128).unwrap();
        let b = value(&model, &data, 0.5, &swapped, Method::Characteristics, 128).unwrap();
        assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-10);
    }

    #[test]
    fn value_respects_the_lift() {
        // Duplicating every particle leaves the lifted value unchanged.
        let (model, data) = mild_instance(1);
        let q = [0.4, -0.7];
        let qq = [0.4, -0.7, 0.4, -0.7];
        let a = value(&model, &data, 0.5, &q, Method::Characteristics, 128).unwrap();
        let b = value(&model, &data, 0.5, &qq, Method::Characteristics, 128).unwrap();
        assert!((a.value - b.value).abs() <= 1e-7, "{} vs {}", a.value, b.value);
    }

    #[test]
    fn gradient_matches_value_differences() {
        let (model, data) = mild_instance(1);
        let q = [0.6, -0.2];
        let t = 0.5;
        let s = value(&model, &data, t, &q, Method::Characteristics, 128).unwrap();
        for k in 0..q.len() {
            let h = 1e-5;
            let mut qp = q;
            qp[k] += h;
            let mut qm = q;
            qm[k] -= h;
            let vp = value(&model, &data, t, &qp, Method::Characteristics, 128).unwrap();
            let vm = value(&model, &data, t, &qm, Method::Characteristics, 128).unwrap();
            let fd = (vp.value - vm.value) / (2.0 * h);
            assert!((fd - s.gradient[k]).abs() <= 1e-5, "fd {fd} vs {}", s.gradient[k]);
        }
    }

    #[test]
    fn wasserstein_gradient_quadratic_closed_form() {
        let model = free_model(2);
        let data = quadratic_data(2);
        let q = [0.5, -1.0, 2.0, 0.25];
        let mu = measure(2, &q);
        let t = 1.0;
        let g = wasserstein_gradient(&model, &data, t, &mu, 256).unwrap();
        for (k, v) in q.iter().enumerate() {
            assert_abs_diff_eq!(g[k], v / (1.0 + t), epsilon = 1e-9);
        }
    }

    #[test]
    fn wasserstein_gradient_at_zero_matches_measure_derivative() {
        let (model, data) = mild_instance(2);
        let q = [0.3, -0.4, 0.8, 0.1, -0.6, 0.5];
        let mu = measure(2, &q);
        let g = wasserstein_gradient(&model, &data, 0.0, &mu, 16).unwrap();
        let weighted = crate::measures::WeightedMeasure::uniform(&mu);
        for i in 0..3 {
            let gw = data.grad_w_u0(&weighted, &q[2 * i..2 * i + 2]);
            for a in 0..2 {
                assert_abs_diff_eq!(g[2 * i + a], gw[a], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn hessian_kernel_quadratic_closed_form() {
        // Lambda0 = I / (1 + t), Lambda1 = 0.
        let model = free_model(2);
        let data = quadratic_data(2);
        let q = [0.5, -1.0, 2.0, 0.25, -0.75, 1.5];
        let mu = measure(2, &q);
        let t = 1.0;
        let k = hessian_kernel(&model, &data, t, &mu, 256).unwrap();
        assert!(k.symmetry_defect <= 1e-8);
        for i in 0..3 {
            let b = k.lambda0_block(i);
            assert_abs_diff_eq!(b[0], 0.5, epsilon = 1e-6);
            assert_abs_diff_eq!(b[3], 0.5, epsilon = 1e-6);
            assert!(b[1].abs() <= 1e-6 && b[2].abs() <= 1e-6);
            for j in 0..3 {
                if i != j {
                    assert!(num::sup_norm(k.lambda1_block(i, j)) <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn hessian_kernel_at_zero_matches_interaction_table() {
        // At t = 0: Lambda0(q_i) = D^2 phi(q_i) + (1/m) sum_{l != i}
        // D^2 phi1(q_i - q_l) and Lambda1(q_i, q_j) = -D^2 phi1(q_i - q_j).
        let d = 1;
        let data = DataModel::new(
            d,
            1.0,
            Field::Zero,
            Field::Gaussian { amplitude: 0.5, width: 1.0 },
            Field::Zero,
            Field::Zero,
        )
        .unwrap();
        let model = free_model(d);
        let q = [0.4, -0.3, 0.9];
        let mu = measure(d, &q);
        let k = hessian_kernel(&model, &data, 0.0, &mu, 16).unwrap();
        assert!(k.symmetry_defect <= 1e-6);
        let phi1 = Field::Gaussian { amplitude: 0.5, width: 1.0 };
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let expect = -phi1.hessian(&[q[i] - q[j]])[0];
                assert_abs_diff_eq!(k.lambda1_block(i, j)[0], expect, epsilon = 1e-4);
            }
            let mut diag = data.lambda();
            for l in 0..3 {
                if l != i {
                    diag += phi1.hessian(&[q[i] - q[l]])[0] / 3.0;
                }
            }
            assert_abs_diff_eq!(k.lambda0_block(i)[0], diag, epsilon = 1e-4);
        }
    }

    #[test]
    fn hessian_kernel_symmetry_on_mild_flow() {
        let (model, data) = mild_instance(2);
        let q = [0.3, -0.4, 0.8, 0.1, -0.6, 0.5];
        let mu = measure(2, &q);
        let k = hessian_kernel(&model, &data, 0.5, &mu, 128).unwrap();
        assert!(k.symmetry_defect <= 1e-6, "defect {}", k.symmetry_defect);
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let ij = k.lambda1_block(i, j);
                let ji = k.lambda1_block(j, i);
                for a in 0..2 {
                    for c in 0..2 {
                        assert_abs_diff_eq!(ij[a * 2 + c], ji[c * 2 + a], epsilon = 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn fd_kernel_agrees_with_variational_hessian() {
        let (model, data) = mild_instance(1);
        let q = [0.6, -0.3, 1.1];
        let mu = measure(1, &q);
        let t = 0.5;
        let k = hessian_kernel(&model, &data, t, &mu, 128).unwrap();
        let hess = analytic_hessian(&model, &data, t, &q, 128, &q).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(k.lambda0_block(i)[0], 3.0 * hess[(i, i)], epsilon = 1e-5);
            for j in 0..3 {
                if i != j {
                    assert_abs_diff_eq!(
                        k.lambda1_block(i, j)[0],
                        9.0 * hess[(i, j)],
                        epsilon = 1e-4
                    );
                }
            }
        }
    }

    #[test]
    fn hj_residual_quadratic() {
        let model = free_model(2);
        let data = quadratic_data(2);
        let q = [0.5, -1.0, 2.0, 0.25];
        let r = hj_residual(&model, &data, 1.0, &q, 256).unwrap();
        assert!(r <= 1e-5, "residual {r}");
    }

    #[test]
    fn hj_residual_with_interaction() {
        let (model, data) = mild_instance(2);
        let q = [0.3, -0.4, 0.8, 0.1];
        let r = hj_residual(&model, &data, 0.5, &q, 256).unwrap();
        assert!(r <= 1e-4, "residual {r}");
    }

    #[test]
    fn constant_coupling_shifts_value_and_keeps_residual() {
        // A coupling that is constant on the visited region adds t * c to
        // the value, leaves the flow alone, and cancels in the residual.
        let d = 1;
        let model = free_model(d);
        let base = quadratic_data(d);
        let shifted = DataModel::new(
            d,
            1.0,
            Field::Zero,
            Field::Zero,
            Field::Bump { inner: 6.0, outer: 8.0 },
            Field::Zero,
        )
        .unwrap();
        let q = [0.8, -0.5];
        let t = 0.5;
        let a = value(&model, &base, t, &q, Method::Characteristics, 128).unwrap();
        let b = value(&model, &shifted, t, &q, Method::Characteristics, 128).unwrap();
        assert_abs_diff_eq!(b.value - a.value, t, epsilon = 1e-9);
        let r = hj_residual(&model, &shifted, t, &q, 128).unwrap();
        assert!(r <= 1e-5, "residual {r}");
    }

    #[test]
    fn hj_residual_rejects_zero_time() {
        let model = free_model(1);
        let data = quadratic_data(1);
        assert!(hj_residual(&model, &data, 0.0, &[0.5], 16).is_err());
    }

    #[test]
    fn scaling_study_on_interacting_data() {
        let d = 1;
        let model = free_model(d);
        let data = DataModel::new(
            d,
            1.0,
            Field::Gaussian { amplitude: 0.3, width: 1.2 },
            Field::Gaussian { amplitude: 0.8, width: 2.5 },
            Field::Zero,
            Field::Zero,
        )
        .unwrap();
        let mut params = ScalingParams::new(0.5, vec![4, 8, 16]);
        params.seeds = 4;
        params.with_third = true;
        let report = scaling_study(&model, &data, &params).unwrap();
        assert_eq!(report.classes.len(), 6);
        for class in &report.classes {
            assert!(class.per_m.iter().all(|v| v.is_finite() && *v > 0.0));
            assert!(class.pass, "{}: slope {} target {}", class.label, class.slope, class.target);
        }
        // The Hessian and leading third classes track their targets from
        // both sides on this instance; the all-distinct class runs ahead.
        let slope = |label: &str| {
            report.classes.iter().find(|c| c.label == label).map(|c| c.slope).unwrap()
        };
        assert!((slope("hessian_diagonal") + 1.0).abs() <= SLOPE_TOL);
        assert!((slope("hessian_off_diagonal") + 2.0).abs() <= SLOPE_TOL);
        assert!(slope("time_gradient_energy").abs() <= SLOPE_TOL);
        assert!((slope("third_diagonal") + 1.0).abs() <= SLOPE_TOL);
        assert!((slope("third_two_equal") + 2.0).abs() <= SLOPE_TOL);
        assert!(slope("third_distinct") <= -2.0 + SLOPE_TOL);
    }

    #[test]
    fn scaling_study_rejects_bad_params() {
        let model = free_model(1);
        let data = quadratic_data(1);
        let short = ScalingParams::new(0.5, vec![4, 8]);
        assert!(scaling_study(&model, &data, &short).is_err());
        let unsorted = ScalingParams::new(0.5, vec![8, 4, 16]);
        assert!(scaling_study(&model, &data, &unsorted).is_err());
        let mut tiny = ScalingParams::new(0.5, vec![2, 4, 8]);
        tiny.with_third = true;
        assert!(scaling_study(&model, &data, &tiny).is_err());
        let huge = ScalingParams::new(0.5, vec![4, 8, 512]);
        assert!(scaling_study(&model, &data, &huge).is_err());
    }

    #[test]
    fn convexity_evolution_quadratic_closed_form() {
        // min eig D^2 U^m = 1 / (m (1 + t)).
        let model = free_model(1);
        let data = quadratic_data(1);
        let q = [0.5, -1.0, 2.0];
        let mu = measure(1, &q);
        let rows = convexity_evolution(&model, &data, &[0.0, 0.5, 1.0], &mu, 256).unwrap();
        for row in &rows {
            let expect = 1.0 / (3.0 * (1.0 + row.t));
            assert_abs_diff_eq!(row.min_eig, expect, epsilon = 1e-6);
            assert!(row.pass);
        }
    }

    #[test]
    fn convexity_evolution_displacement_convex_interaction() {
        // kappa = lambda - 2 |lambda1| > 0 propagates to every time.
        let d = 1;
        let data = DataModel::new(
            d,
            12.0,
            Field::Zero,
            crate::data::bump_phi1(1.0, 2.0).unwrap(),
            Field::Zero,
            Field::Zero,
        )
        .unwrap();
        let model = free_model(d);
        let q = [0.6, -0.2, 1.0, 0.2];
        let mu = measure(d, &q);
        let rows = convexity_evolution(&model, &data, &[0.0, 0.25], &mu, 64).unwrap();
        for row in &rows {
            assert!(row.pass, "t = {} min eig {}", row.t, row.min_eig);
        }
        let kappa = data.displacement_modulus().witness;
        assert!(rows[0].min_eig >= kappa / 4.0 - MIN_EIG_SLACK);
    }

    #[test]
    fn value_rejects_bad_input() {
        let model = free_model(2);
        let data = quadratic_data(2);
        assert!(value(&model, &data, 0.5, &[0.1], Method::Characteristics, 16).is_err());
        assert!(value(&model, &data, -0.5, &[0.1, 0.2], Method::Characteristics, 16).is_err());
        assert!(value(&model, &data, f64::NAN, &[0.1, 0.2], Method::Characteristics, 16).is_err());
        let mismatched = quadratic_data(1);
        assert!(value(&model, &mismatched, 0.5, &[0.1, 0.2], Method::Characteristics, 16).is_err());
    }
}
