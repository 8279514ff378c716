//! The m-particle characteristic flow and its linearization.
//!
//! The state is `(xi, eta)` with one position and one scaled momentum per
//! particle. For a mechanical Hamiltonian `H(q, p) = p' A^{-1} p / 2 - g(q)`
//! the system reads
//!
//! ```text
//! xi_i'  = A^{-1} (m eta_i),
//! eta_i' = (1/m) Dg(xi_i) + D_{q_i} F^m(xi),
//! ```
//!
//! started from `xi(0) = z`, `eta_i(0) = D_{q_i} U0^m(z)`. Along such
//! trajectories `eta` transports the gradient of the value function, so the
//! chain inversion, boundary-value solve, Jacobian determinant and the
//! block systems below are all the same object viewed at different angles.
//!
//! Everything integrates with fixed-step RK4 (default 256 steps per unit
//! time): reproducible runs, clean Richardson order checks, and exact reuse
//! of the base trajectory inside the linearized equations.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::data::DataModel;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::num;

/// Any phase coordinate beyond this magnitude aborts the integration.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

/// Default RK4 resolution.
pub const STEPS_PER_UNIT: usize = 256;

/// Step count for a horizon `t` at the default resolution.
pub fn default_steps(t: f64) -> usize {
    ((STEPS_PER_UNIT as f64 * t).ceil() as usize).max(1)
}

/// Time-indexed phase trajectory, optionally carrying the Jacobian blocks
/// `D_z xi`, `D_z eta` of the flow map.
#[derive(Debug, Clone)]
pub struct PhaseTrajectory {
    d: usize,
    m: usize,
    times: Vec<f64>,
    xi: Vec<Vec<f64>>,
    eta: Vec<Vec<f64>>,
    dxi: Option<Vec<DMatrix<f64>>>,
    deta: Option<Vec<DMatrix<f64>>>,
}

impl PhaseTrajectory {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn particles(&self) -> usize {
        self.m
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn terminal_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one snapshot")
    }

    pub fn xi_at(&self, k: usize) -> &[f64] {
        &self.xi[k]
    }

    pub fn eta_at(&self, k: usize) -> &[f64] {
        &self.eta[k]
    }

    pub fn initial_xi(&self) -> &[f64] {
        &self.xi[0]
    }

    pub fn initial_eta(&self) -> &[f64] {
        &self.eta[0]
    }

    pub fn terminal_xi(&self) -> &[f64] {
        self.xi.last().expect("trajectory has at least one snapshot")
    }

    pub fn terminal_eta(&self) -> &[f64] {
        self.eta.last().expect("trajectory has at least one snapshot")
    }

    pub fn dxi_at(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.dxi.as_ref().map(|v| &v[k])
    }

    pub fn deta_at(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.deta.as_ref().map(|v| &v[k])
    }

    pub fn terminal_dxi(&self) -> Option<&DMatrix<f64>> {
        self.dxi.as_ref().and_then(|v| v.last())
    }

    pub fn terminal_deta(&self) -> Option<&DMatrix<f64>> {
        self.deta.as_ref().and_then(|v| v.last())
    }

    /// Positions at an intermediate time by linear interpolation on the
    /// uniform grid; `s` is clamped into the trajectory's span.
    pub fn interpolate_xi(&self, s: f64) -> Vec<f64> {
        if self.times.len() == 1 {
            return self.xi[0].clone();
        }
        let t = self.terminal_time();
        let s = s.clamp(0.0, t);
        let h = self.times[1] - self.times[0];
        let k = ((s / h).floor() as usize).min(self.times.len() - 2);
        let theta = ((s - self.times[k]) / h).clamp(0.0, 1.0);
        self.xi[k]
            .iter()
            .zip(&self.xi[k + 1])
            .map(|(a, b)| a + theta * (b - a))
            .collect()
    }

    /// Largest exponential growth rate observed along the trajectory:
    /// `max_s log((|state(s)| + 1) / (|state(0)| + 1)) / s`.
    pub fn growth_ratio(&self) -> f64 {
        let norm0 = phase_norm(&self.xi[0], &self.eta[0]) + 1.0;
        let mut rate = 0.0f64;
        for k in 1..self.times.len() {
            let s = self.times[k];
            if s <= 0.0 {
                continue;
            }
            let n = phase_norm(&self.xi[k], &self.eta[k]) + 1.0;
            rate = rate.max((n / norm0).ln() / s);
        }
        rate
    }
}

fn phase_norm(xi: &[f64], eta: &[f64]) -> f64 {
    (xi.iter().chain(eta).map(|x| x * x).sum::<f64>()).sqrt()
}

/// Conserved energy of the particle system,
/// `(1/m) sum_i H(xi_i, m eta_i) - F^m(xi)`.
pub fn discrete_hamiltonian(model: &Model, data: &DataModel, xi: &[f64], eta: &[f64]) -> f64 {
    let d = model.dim();
    let m = xi.len() / d;
    let mf = m as f64;
    let mut p = vec![0.0; d];
    let mut s = 0.0;
    for i in 0..m {
        for a in 0..d {
            p[a] = mf * eta[i * d + a];
        }
        s += model.hamiltonian(&xi[i * d..(i + 1) * d], &p);
    }
    s / mf - data.eval_fm(xi)
}

#[derive(Clone)]
struct Phase {
    xi: Vec<f64>,
    eta: Vec<f64>,
    dxi: Option<DMatrix<f64>>,
    deta: Option<DMatrix<f64>>,
}

fn mat_axpy(out: &mut DMatrix<f64>, c: f64, s: &DMatrix<f64>) {
    for (a, b) in out.as_mut_slice().iter_mut().zip(s.as_slice()) {
        *a += c * b;
    }
}

impl Phase {
    /// `self = base + c * slope`, componentwise over all carried blocks.
    fn set_combination(&mut self, base: &Phase, c: f64, slope: &Phase) {
        for (o, (b, s)) in self.xi.iter_mut().zip(base.xi.iter().zip(&slope.xi)) {
            *o = b + c * s;
        }
        for (o, (b, s)) in self.eta.iter_mut().zip(base.eta.iter().zip(&slope.eta)) {
            *o = b + c * s;
        }
        if let (Some(o), Some(b), Some(s)) = (self.dxi.as_mut(), base.dxi.as_ref(), slope.dxi.as_ref())
        {
            o.copy_from(b);
            mat_axpy(o, c, s);
        }
        if let (Some(o), Some(b), Some(s)) =
            (self.deta.as_mut(), base.deta.as_ref(), slope.deta.as_ref())
        {
            o.copy_from(b);
            mat_axpy(o, c, s);
        }
    }

    /// `self += c * slope`.
    fn accumulate(&mut self, c: f64, slope: &Phase) {
        for (o, s) in self.xi.iter_mut().zip(&slope.xi) {
            *o += c * s;
        }
        for (o, s) in self.eta.iter_mut().zip(&slope.eta) {
            *o += c * s;
        }
        if let (Some(o), Some(s)) = (self.dxi.as_mut(), slope.dxi.as_ref()) {
            mat_axpy(o, c, s);
        }
        if let (Some(o), Some(s)) = (self.deta.as_mut(), slope.deta.as_ref()) {
            mat_axpy(o, c, s);
        }
    }

    fn sup(&self) -> f64 {
        num::sup_norm(&self.xi).max(num::sup_norm(&self.eta))
    }
}

struct Integrator<'a> {
    model: &'a Model,
    data: &'a DataModel,
    d: usize,
    m: usize,
    /// `m * blockdiag(A^{-1})`, built once when tangent blocks are carried.
    mpp: Option<DMatrix<f64>>,
    hess_buf: Vec<f64>,
}

impl<'a> Integrator<'a> {
    fn new(model: &'a Model, data: &'a DataModel, m: usize, with_tangent: bool) -> Integrator<'a> {
        let d = model.dim();
        let mpp = with_tangent.then(|| {
            let mut mat = DMatrix::zeros(m * d, m * d);
            let ainv = model.kinetic_inv();
            let mf = m as f64;
            for i in 0..m {
                for a in 0..d {
                    for b in 0..d {
                        mat[(i * d + a, i * d + b)] = mf * ainv[a * d + b];
                    }
                }
            }
            mat
        });
        Integrator { model, data, d, m, mpp, hess_buf: vec![0.0; d * d] }
    }

    fn rhs(&mut self, state: &Phase, out: &mut Phase) {
        let d = self.d;
        let m = self.m;
        let mf = m as f64;
        let ainv = self.model.kinetic_inv();
        for i in 0..m {
            for a in 0..d {
                let mut s = 0.0;
                for b in 0..d {
                    s += ainv[a * d + b] * state.eta[i * d + b];
                }
                out.xi[i * d + a] = mf * s;
            }
        }
        out.eta.fill(0.0);
        let g = self.model.potential();
        if !g.is_zero() {
            for i in 0..m {
                g.add_gradient(
                    &state.xi[i * d..(i + 1) * d],
                    1.0 / mf,
                    &mut out.eta[i * d..(i + 1) * d],
                );
            }
        }
        self.data.add_grad_fm(&state.xi, 1.0, &mut out.eta);

        if let (Some(dxi), Some(deta)) = (state.dxi.as_ref(), state.deta.as_ref()) {
            let mpp = self.mpp.as_ref().expect("tangent integrator carries Mpp");
            out.dxi.as_mut().unwrap().gemm(1.0, mpp, deta, 0.0);
            let mut c = self.data.hess_fm(&state.xi);
            if !g.is_zero() {
                for i in 0..m {
                    self.hess_buf.fill(0.0);
                    g.add_hessian(&state.xi[i * d..(i + 1) * d], 1.0 / mf, &mut self.hess_buf);
                    for a in 0..d {
                        for b in 0..d {
                            c[(i * d + a, i * d + b)] += self.hess_buf[a * d + b];
                        }
                    }
                }
            }
            out.deta.as_mut().unwrap().gemm(1.0, &c, dxi, 0.0);
        }
    }
}

fn validate_config(model: &Model, data: &DataModel, z: &[f64]) -> Result<usize> {
    let d = model.dim();
    if data.dim() != d {
        return Err(Error::invalid(format!(
            "model dimension {d} does not match data dimension {}",
            data.dim()
        )));
    }
    if z.is_empty() || z.len() % d != 0 {
        return Err(Error::invalid(format!(
            "configuration length {} is not a positive multiple of d = {d}",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("configuration has non-finite entries".to_string()));
    }
    Ok(z.len() / d)
}

fn integrate_core(
    model: &Model,
    data: &DataModel,
    z: &[f64],
    t: f64,
    steps: usize,
    tangent0: Option<(DMatrix<f64>, DMatrix<f64>)>,
) -> Result<PhaseTrajectory> {
    let m = validate_config(model, data, z)?;
    let d = model.dim();
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::invalid(format!("horizon must be finite and >= 0, got {t}")));
    }
    if steps == 0 {
        return Err(Error::invalid("step count must be positive".to_string()));
    }
    let with_tangent = tangent0.is_some();
    let (dxi0, deta0) = match tangent0 {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    let mut state =
        Phase { xi: z.to_vec(), eta: data.grad_u0m(z), dxi: dxi0, deta: deta0 };

    let mut traj = PhaseTrajectory {
        d,
        m,
        times: vec![0.0],
        xi: vec![state.xi.clone()],
        eta: vec![state.eta.clone()],
        dxi: with_tangent.then(|| vec![state.dxi.clone().unwrap()]),
        deta: with_tangent.then(|| vec![state.deta.clone().unwrap()]),
    };
    if t == 0.0 {
        return Ok(traj);
    }

    let mut integ = Integrator::new(model, data, m, with_tangent);
    let h = t / steps as f64;
    let mut k1 = state.clone();
    let mut k2 = state.clone();
    let mut k3 = state.clone();
    let mut k4 = state.clone();
    let mut tmp = state.clone();
    for step in 0..steps {
        integ.rhs(&state, &mut k1);
        tmp.set_combination(&state, 0.5 * h, &k1);
        integ.rhs(&tmp, &mut k2);
        tmp.set_combination(&state, 0.5 * h, &k2);
        integ.rhs(&tmp, &mut k3);
        tmp.set_combination(&state, h, &k3);
        integ.rhs(&tmp, &mut k4);
        state.accumulate(h / 6.0, &k1);
        state.accumulate(h / 3.0, &k2);
        state.accumulate(h / 3.0, &k3);
        state.accumulate(h / 6.0, &k4);

        let s_next = if step + 1 == steps { t } else { (step + 1) as f64 * h };
        let sup = state.sup();
        if !sup.is_finite() || sup > BLOWUP_THRESHOLD {
            return Err(Error::BlowUp { time: s_next, threshold: BLOWUP_THRESHOLD });
        }
        traj.times.push(s_next);
        traj.xi.push(state.xi.clone());
        traj.eta.push(state.eta.clone());
        if with_tangent {
            traj.dxi.as_mut().unwrap().push(state.dxi.clone().unwrap());
            traj.deta.as_mut().unwrap().push(state.deta.clone().unwrap());
        }
    }
    Ok(traj)
}

/// Forward characteristic flow from the configuration `z` on `[0, t]`.
pub fn integrate_forward(
    model: &Model,
    data: &DataModel,
    z: &[f64],
    t: f64,
    steps: usize,
) -> Result<PhaseTrajectory> {
    integrate_core(model, data, z, t, steps, None)
}

/// Forward flow from a raw phase state, bypassing the terminal-data initial
/// momentum. The flow is autonomous, so restarting from any snapshot
/// continues the same trajectory.
pub fn integrate_phase(
    model: &Model,
    data: &DataModel,
    xi0: &[f64],
    eta0: &[f64],
    t: f64,
    steps: usize,
) -> Result<PhaseTrajectory> {
    let m = validate_config(model, data, xi0)?;
    if eta0.len() != xi0.len() {
        return Err(Error::invalid("position and momentum lengths differ".to_string()));
    }
    let d = model.dim();
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::invalid(format!("horizon must be finite and >= 0, got {t}")));
    }
    if steps == 0 {
        return Err(Error::invalid("step count must be positive".to_string()));
    }
    let mut state = Phase { xi: xi0.to_vec(), eta: eta0.to_vec(), dxi: None, deta: None };
    let mut traj = PhaseTrajectory {
        d,
        m,
        times: vec![0.0],
        xi: vec![state.xi.clone()],
        eta: vec![state.eta.clone()],
        dxi: None,
        deta: None,
    };
    if t == 0.0 {
        return Ok(traj);
    }
    let mut integ = Integrator::new(model, data, m, false);
    let h = t / steps as f64;
    let mut k1 = state.clone();
    let mut k2 = state.clone();
    let mut k3 = state.clone();
    let mut k4 = state.clone();
    let mut tmp = state.clone();
    for step in 0..steps {
        integ.rhs(&state, &mut k1);
        tmp.set_combination(&state, 0.5 * h, &k1);
        integ.rhs(&tmp, &mut k2);
        tmp.set_combination(&state, 0.5 * h, &k2);
        integ.rhs(&tmp, &mut k3);
        tmp.set_combination(&state, h, &k3);
        integ.rhs(&tmp, &mut k4);
        state.accumulate(h / 6.0, &k1);
        state.accumulate(h / 3.0, &k2);
        state.accumulate(h / 3.0, &k3);
        state.accumulate(h / 6.0, &k4);
        let s_next = if step + 1 == steps { t } else { (step + 1) as f64 * h };
        let sup = state.sup();
        if !sup.is_finite() || sup > BLOWUP_THRESHOLD {
            return Err(Error::BlowUp { time: s_next, threshold: BLOWUP_THRESHOLD });
        }
        traj.times.push(s_next);
        traj.xi.push(state.xi.clone());
        traj.eta.push(state.eta.clone());
    }
    Ok(traj)
}

/// Forward flow carrying the full `md x md` Jacobian blocks, initialized
/// with `D xi(0) = I` and `D eta(0) = D^2 U0^m(z)`.
pub fn integrate_with_jacobian(
    model: &Model,
    data: &DataModel,
    z: &[f64],
    t: f64,
    steps: usize,
) -> Result<PhaseTrajectory> {
    let m = validate_config(model, data, z)?;
    let n = m * model.dim();
    let dxi0 = DMatrix::identity(n, n);
    let deta0 = data.hess_u0m(z);
    integrate_core(model, data, z, t, steps, Some((dxi0, deta0)))
}

/// Jacobian block columns for a single seed particle `j`: the `md x d`
/// matrices `D_{z_j} xi(s)` and `D_{z_j} eta(s)`.
pub fn variational_integrate(
    model: &Model,
    data: &DataModel,
    z: &[f64],
    t: f64,
    steps: usize,
    j: usize,
) -> Result<PhaseTrajectory> {
    let m = validate_config(model, data, z)?;
    let d = model.dim();
    if j >= m {
        return Err(Error::invalid(format!("seed particle {j} out of range for m = {m}")));
    }
    let n = m * d;
    let mut dxi0 = DMatrix::zeros(n, d);
    for a in 0..d {
        dxi0[(j * d + a, a)] = 1.0;
    }
    let deta0 = data.hess_u0m(z).columns(j * d, d).into_owned();
    integrate_core(model, data, z, t, steps, Some((dxi0, deta0)))
}

/// Determinant of the flow Jacobian computed two independent ways.
#[derive(Debug, Clone, Serialize)]
pub struct JacobianReport {
    pub times: Vec<f64>,
    /// Determinant of the assembled `D_z xi(s)`.
    pub det_direct: Vec<f64>,
    /// `exp(int_0^s tr A)` with `A` the linearization of the closed-loop
    /// position field.
    pub det_jacobi: Vec<f64>,
    pub max_rel_gap: f64,
    pub min_det: f64,
}

/// Computes `det D_z xi(s)` directly and through the trace identity
/// `(log det)'(s) = tr(D xi^{-1} Mpp D eta)`, sharing one LU per time.
pub fn jacobian_determinant(
    model: &Model,
    data: &DataModel,
    z: &[f64],
    t: f64,
    steps: usize,
) -> Result<JacobianReport> {
    let traj = integrate_with_jacobian(model, data, z, t, steps)?;
    let m = traj.particles();
    let d = traj.dim();
    let n = m * d;
    let mf = m as f64;
    let ainv = model.kinetic_inv();
    let mut mpp = DMatrix::zeros(n, n);
    for i in 0..m {
        for a in 0..d {
            for b in 0..d {
                mpp[(i * d + a, i * d + b)] = mf * ainv[a * d + b];
            }
        }
    }
    let mut det_direct = Vec::with_capacity(traj.len());
    let mut traces = Vec::with_capacity(traj.len());
    for k in 0..traj.len() {
        let dxi = traj.dxi_at(k).expect("jacobian carried");
        let deta = traj.deta_at(k).expect("jacobian carried");
        let lu = dxi.clone().lu();
        let det = lu.determinant();
        if !(det.is_finite() && det > 0.0) {
            return Err(Error::ConjugatePoint { time: traj.times()[k] });
        }
        det_direct.push(det);
        let rhs = &mpp * deta;
        let solved = lu
            .solve(&rhs)
            .ok_or_else(|| Error::SingularMatrix("flow Jacobian trace solve".to_string()))?;
        traces.push(solved.trace());
    }
    // Cumulative trapezoid of the traces; second-order accuracy is ample
    // against the 1e-4 comparison tolerance.
    let mut det_jacobi = Vec::with_capacity(traj.len());
    let mut integral = 0.0;
    det_jacobi.push(1.0);
    for k in 1..traj.len() {
        let h = traj.times()[k] - traj.times()[k - 1];
        integral += 0.5 * h * (traces[k - 1] + traces[k]);
        det_jacobi.push(integral.exp());
    }
    let mut max_rel_gap = 0.0f64;
    let mut min_det = f64::INFINITY;
    for (a, b) in det_direct.iter().zip(&det_jacobi) {
        max_rel_gap = max_rel_gap.max((a - b).abs() / a.abs().max(1e-300));
        min_det = min_det.min(*a);
    }
    Ok(JacobianReport { times: traj.times().to_vec(), det_direct, det_jacobi, max_rel_gap, min_det })
}

fn terminal_residual_norm(
    model: &Model,
    data: &DataModel,
    z: &[f64],
    q: &[f64],
    t: f64,
    steps: usize,
) -> f64 {
    match integrate_forward(model, data, z, t, steps) {
        Ok(traj) => {
            let r: Vec<f64> = traj.terminal_xi().iter().zip(q).map(|(a, b)| a - b).collect();
            num::l2(&r)
        }
        Err(_) => f64::INFINITY,
    }
}

/// Inverts the time-`t` flow map: finds `z` with `xi(t, z) = q`.
///
/// Damped Newton on the terminal-position map with the variational Jacobian;
/// when a Newton step cannot reduce the residual the iteration falls back to
/// the relaxed fixed point `z <- z - (xi(t,z) - q) / 2`.
pub fn invert_flow(
    model: &Model,
    data: &DataModel,
    q: &[f64],
    t: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    invert_flow_guess(model, data, q, t, steps, q)
}

/// As `invert_flow`, starting the iteration from `guess` instead of `q`;
/// useful when a nearby inversion is already known.
pub fn invert_flow_guess(
    model: &Model,
    data: &DataModel,
    q: &[f64],
    t: f64,
    steps: usize,
    guess: &[f64],
) -> Result<Vec<f64>> {
    validate_config(model, data, q)?;
    if guess.len() != q.len() {
        return Err(Error::invalid("guess length does not match target".to_string()));
    }
    let tol = 1e-8 * (1.0 + num::l2(q));
    if t == 0.0 {
        return Ok(q.to_vec());
    }
    let mut z = guess.to_vec();
    let mut residual = f64::INFINITY;
    for _iter in 0..60 {
        let traj = integrate_with_jacobian(model, data, &z, t, steps);
        let traj = match traj {
            Ok(tr) => tr,
            Err(_) => {
                // The current iterate escapes the integrable region; pull it
                // back toward the target.
                for (zi, qi) in z.iter_mut().zip(q) {
                    *zi = 0.5 * *zi + 0.5 * qi;
                }
                continue;
            }
        };
        let r: Vec<f64> = traj.terminal_xi().iter().zip(q).map(|(a, b)| a - b).collect();
        residual = num::l2(&r);
        if residual <= tol {
            return Ok(z);
        }
        let jac = traj.terminal_dxi().expect("jacobian carried");
        let newton = num::lu_solve(jac, &r, "flow inversion Jacobian");
        let mut moved = false;
        if let Ok(dz) = newton {
            let mut alpha = 1.0;
            for _ in 0..8 {
                let zc: Vec<f64> = z.iter().zip(&dz).map(|(zi, di)| zi - alpha * di).collect();
                if terminal_residual_norm(model, data, &zc, q, t, steps) < residual {
                    z = zc;
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
        }
        if !moved {
            for (zi, ri) in z.iter_mut().zip(&r) {
                *zi -= 0.5 * ri;
            }
        }
    }
    Err(Error::InversionFailure { iters: 60, residual })
}

/// Characteristic through `(t, q)`: inverts the flow and re-integrates, so
/// the returned trajectory ends at `q` and starts on the graph of
/// `D U0^m`.
pub fn solve_bvp(
    model: &Model,
    data: &DataModel,
    q: &[f64],
    t: f64,
    steps: usize,
) -> Result<PhaseTrajectory> {
    let z = invert_flow(model, data, q, t, steps)?;
    integrate_forward(model, data, &z, t, steps)
}

/// Structured linear systems behind the m-uniform derivative bounds.
///
/// The coefficient matrix couples m scalar x-components to m y-components:
///
/// ```text
/// B = | I    m I |        B3 = 1/m on the diagonal, 1/m^2 off it.
///     | B3     I |
/// ```
///
/// The source and kernel cases seed this system the way first and second
/// derivative computations of the particle value function do; their
/// component magnitudes at time `t` reproduce the per-class decay rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockCase {
    /// Inhomogeneous system driven through one distinguished index.
    Source { i0: usize },
    /// Inhomogeneous system driven through an index pair.
    Pair { j: usize, k: usize },
    /// Matrix-valued homogeneous system started from `X = I`, `Y = B3`.
    Kernel,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BlockSystemSpec {
    pub m: usize,
    pub t: f64,
    pub case: BlockCase,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassMax {
    pub label: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockScalingRecord {
    pub m: usize,
    pub t: f64,
    /// Final X block, row major (`m x 1`, or `m x m` in the kernel case).
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub x_classes: Vec<ClassMax>,
    pub y_classes: Vec<ClassMax>,
    /// Sup distance between the matrix-exponential and RK4 solutions.
    pub exp_rk4_gap: f64,
}

fn block_matrix(m: usize) -> DMatrix<f64> {
    let mf = m as f64;
    let mut b = DMatrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        b[(i, i)] = 1.0;
        b[(m + i, m + i)] = 1.0;
        b[(i, m + i)] = mf;
        for j in 0..m {
            b[(m + i, j)] = if i == j { 1.0 / mf } else { 1.0 / (mf * mf) };
        }
    }
    b
}

/// Solves the selected block system by dense matrix exponential and by RK4,
/// cross-checks the two, and reports per-class component magnitudes.
pub fn block_ode_scaling(spec: &BlockSystemSpec) -> Result<BlockScalingRecord> {
    let m = spec.m;
    if m < 2 {
        return Err(Error::invalid(format!("block system needs m >= 2, got {m}")));
    }
    if !(spec.t.is_finite() && spec.t >= 0.0) {
        return Err(Error::invalid(format!("horizon must be finite and >= 0, got {}", spec.t)));
    }
    match spec.case {
        BlockCase::Source { i0 } if i0 >= m => {
            return Err(Error::invalid(format!("source index {i0} out of range for m = {m}")))
        }
        BlockCase::Pair { j, k } if j >= m || k >= m || j == k => {
            return Err(Error::invalid(format!(
                "pair indices ({j}, {k}) must be distinct and below m = {m}"
            )))
        }
        _ => {}
    }
    let mf = m as f64;
    let b = block_matrix(m);

    // Initial state and source, column layout [X; Y].
    let (u0, source) = match spec.case {
        BlockCase::Source { i0 } => {
            let mut a = DMatrix::zeros(2 * m, 1);
            let mut u = DMatrix::zeros(2 * m, 1);
            for i in 0..m {
                a[(i, 0)] = if i == i0 { 1.0 } else { 1.0 / mf };
                let y = if i == i0 { 1.0 / mf } else { 1.0 / (mf * mf) };
                a[(m + i, 0)] = y;
                u[(m + i, 0)] = y;
            }
            (u, Some(a))
        }
        BlockCase::Pair { j, k } => {
            let mut a = DMatrix::zeros(2 * m, 1);
            let mut u = DMatrix::zeros(2 * m, 1);
            for i in 0..m {
                let hit = i == j || i == k;
                a[(i, 0)] = if hit { 1.0 / mf } else { 1.0 / (mf * mf) };
                let y = if hit { 1.0 / (mf * mf) } else { 1.0 / (mf * mf * mf) };
                a[(m + i, 0)] = y;
                u[(m + i, 0)] = y;
            }
            (u, Some(a))
        }
        BlockCase::Kernel => {
            let mut u = DMatrix::zeros(2 * m, m);
            for i in 0..m {
                u[(i, i)] = 1.0;
                for j in 0..m {
                    u[(m + i, j)] = if i == j { 1.0 / mf } else { 1.0 / (mf * mf) };
                }
            }
            (u, None)
        }
    };

    // Closed form: U(t) = e^{tB} (U0 + B^{-1}A) - B^{-1}A.
    let e = (b.clone() * spec.t).exp();
    let exact = match &source {
        Some(a) => {
            let w = b
                .clone()
                .lu()
                .solve(a)
                .ok_or_else(|| Error::SingularMatrix("block system drift".to_string()))?;
            &e * (&u0 + &w) - &w
        }
        None => &e * &u0,
    };

    // RK4 cross-check on the same system.
    let steps = default_steps(spec.t);
    let h = spec.t / steps as f64;
    let mut u = u0.clone();
    let deriv = |state: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = &b * state;
        if let Some(a) = &source {
            out += a;
        }
        out
    };
    for _ in 0..steps {
        let k1 = deriv(&u);
        let k2 = deriv(&(&u + &k1 * (0.5 * h)));
        let k3 = deriv(&(&u + &k2 * (0.5 * h)));
        let k4 = deriv(&(&u + &k3 * h));
        u += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    let exp_rk4_gap = (&exact - &u).abs().max();

    let ncols = exact.ncols();
    let mut x = vec![0.0; m * ncols];
    let mut y = vec![0.0; m * ncols];
    for i in 0..m {
        for c in 0..ncols {
            x[i * ncols + c] = exact[(i, c)];
            y[i * ncols + c] = exact[(m + i, c)];
        }
    }
    let class_split = |vals: &[f64]| -> Vec<ClassMax> {
        match spec.case {
            BlockCase::Source { i0 } => {
                let mut other = 0.0f64;
                for (i, v) in vals.iter().enumerate() {
                    if i != i0 {
                        other = other.max(v.abs());
                    }
                }
                vec![
                    ClassMax { label: "source", value: vals[i0].abs() },
                    ClassMax { label: "other", value: other },
                ]
            }
            BlockCase::Pair { j, k } => {
                let mut pair = 0.0f64;
                let mut other = 0.0f64;
                for (i, v) in vals.iter().enumerate() {
                    if i == j || i == k {
                        pair = pair.max(v.abs());
                    } else {
                        other = other.max(v.abs());
                    }
                }
                vec![
                    ClassMax { label: "pair", value: pair },
                    ClassMax { label: "other", value: other },
                ]
            }
            BlockCase::Kernel => {
                let mut diag = 0.0f64;
                let mut off = 0.0f64;
                for i in 0..m {
                    for c in 0..m {
                        let v = vals[i * m + c].abs();
                        if i == c {
                            diag = diag.max(v);
                        } else {
                            off = off.max(v);
                        }
                    }
                }
                vec![
                    ClassMax { label: "diagonal", value: diag },
                    ClassMax { label: "off_diagonal", value: off },
                ]
            }
        }
    };
    let x_classes = class_split(&x);
    let y_classes = class_split(&y);
    Ok(BlockScalingRecord { m, t: spec.t, x, y, x_classes, y_classes, exp_rk4_gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Field;
    use crate::model::Kinetic;
    use crate::report::fit_loglog;
    use approx::assert_abs_diff_eq;

    fn free_model(d: usize) -> Model {
        Model::new(d, Kinetic::Scalar(1.0), Field::Zero).unwrap()
    }

    fn quadratic_data(d: usize) -> DataModel {
        DataModel::new(d, 1.0, Field::Zero, Field::Zero, Field::Zero, Field::Zero).unwrap()
    }

    fn null_data(d: usize) -> DataModel {
        DataModel::new(d, 0.0, Field::Zero, Field::Zero, Field::Zero, Field::Zero).unwrap()
    }

    fn interacting_data(d: usize) -> DataModel {
        DataModel::new(
            d,
            1.0,
            Field::Gaussian { amplitude: 0.3, width: 1.1 },
            Field::Gaussian { amplitude: 0.5, width: 1.0 },
            Field::SoftNorm { alpha: 0.3 },
            Field::Gaussian { amplitude: 0.2, width: 1.4 },
        )
        .unwrap()
    }

    #[test]
    fn null_data_is_a_fixed_point() {
        let model = free_model(2);
        let data = null_data(2);
        let z = [0.4, -1.2, 0.9, 0.3];
        let traj = integrate_forward(&model, &data, &z, 1.0, 64).unwrap();
        assert_eq!(traj.terminal_xi(), &z);
        assert!(traj.terminal_eta().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_flow_is_linear_dilation() {
        let model = free_model(2);
        let data = quadratic_data(2);
        let mut rng = crate::sampling::rng(2);
        let z = crate::sampling::cloud(&mut rng, 3, 2, 1.5);
        let traj = integrate_forward(&model, &data, &z, 1.0, 256).unwrap();
        for (a, b) in traj.terminal_xi().iter().zip(&z) {
            assert_abs_diff_eq!(*a, 2.0 * b, epsilon = 1e-8);
        }
        // eta stays frozen at z_i / m.
        let mid = traj.len() / 2;
        for (a, b) in traj.eta_at(mid).iter().zip(&z) {
            assert_abs_diff_eq!(*a, b / 3.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let model = Model::new(
            1,
            Kinetic::Scalar(1.0),
            Field::Gaussian { amplitude: 0.8, width: 1.2 },
        )
        .unwrap();
        let data = interacting_data(1);
        let z = [0.7, -0.4];
        let reference = integrate_forward(&model, &data, &z, 1.0, 4096).unwrap();
        let err = |steps: usize| -> f64 {
            let traj = integrate_forward(&model, &data, &z, 1.0, steps).unwrap();
            traj.terminal_xi()
                .iter()
                .chain(traj.terminal_eta())
                .zip(reference.terminal_xi().iter().chain(reference.terminal_eta()))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max)
        };
        let ratio = err(64) / err(128);
        assert!((10.0..26.0).contains(&ratio), "order ratio {ratio}");
    }

    #[test]
    fn variational_matches_finite_differences() {
        let model = Model::new(
            1,
            Kinetic::Scalar(1.0),
            Field::Gaussian { amplitude: 0.4, width: 1.0 },
        )
        .unwrap();
        let data = interacting_data(1);
        let z = [0.5, -0.2, 0.9];
        let t = 0.6;
        let traj = integrate_with_jacobian(&model, &data, &z, t, 192).unwrap();
        let dxi = traj.terminal_dxi().unwrap();
        let deta = traj.terminal_deta().unwrap();
        let h = 1e-5;
        for a in 0..3 {
            let mut zp = z.to_vec();
            zp[a] += h;
            let tp = integrate_forward(&model, &data, &zp, t, 192).unwrap();
            zp[a] = z[a] - h;
            let tm = integrate_forward(&model, &data, &zp, t, 192).unwrap();
            for r in 0..3 {
                let fd_xi = (tp.terminal_xi()[r] - tm.terminal_xi()[r]) / (2.0 * h);
                let fd_eta = (tp.terminal_eta()[r] - tm.terminal_eta()[r]) / (2.0 * h);
                assert_abs_diff_eq!(dxi[(r, a)], fd_xi, epsilon = 1e-5);
                assert_abs_diff_eq!(deta[(r, a)], fd_eta, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn variational_quadratic_closed_form() {
        let model = free_model(1);
        let data = quadratic_data(1);
        let z = [0.3, -0.8];
        let t = 0.7;
        let traj = integrate_with_jacobian(&model, &data, &z, t, 128).unwrap();
        let dxi = traj.terminal_dxi().unwrap();
        let deta = traj.terminal_deta().unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let want_xi = if r == c { 1.0 + t } else { 0.0 };
                let want_eta = if r == c { 0.5 } else { 0.0 };
                assert_abs_diff_eq!(dxi[(r, c)], want_xi, epsilon = 1e-10);
                assert_abs_diff_eq!(deta[(r, c)], want_eta, epsilon = 1e-10);
            }
        }
        // The single-particle column variant agrees with the full block.
        let col = variational_integrate(&model, &data, &z, t, 128, 1).unwrap();
        let dcol = col.terminal_dxi().unwrap();
        assert_eq!(dcol.ncols(), 1);
        assert_abs_diff_eq!(dcol[(1, 0)], 1.0 + t, epsilon = 1e-10);
        assert_abs_diff_eq!(dcol[(0, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn momentum_derivative_classes_decay() {
        // D_{z_0} eta_0 decays like 1/m, D_{z_0} eta_i (i != 0) like 1/m^2.
        let model = free_model(1);
        let data = DataModel::new(
            1,
            1.0,
            Field::Gaussian { amplitude: 0.5, width: 0.9 },
            Field::Gaussian { amplitude: 1.0, width: 1.0 },
            Field::Zero,
            Field::Zero,
        )
        .unwrap();
        let ms = [4usize, 8, 16];
        let mut diag = Vec::new();
        let mut off = Vec::new();
        for &m in &ms {
            let z = crate::sampling::nested_cloud(5, m, 16, 1, 1.0);
            let traj = variational_integrate(&model, &data, &z, 0.5, 128, 0).unwrap();
            let deta = traj.terminal_deta().unwrap();
            diag.push(deta[(0, 0)].abs());
            let mut worst = 0.0f64;
            for i in 1..m {
                worst = worst.max(deta[(i, 0)].abs());
            }
            off.push(worst);
        }
        let xs: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
        let s_diag = fit_loglog(&xs, &diag);
        let s_off = fit_loglog(&xs, &off);
        assert!((s_diag + 1.0).abs() < 0.4, "diagonal slope {s_diag}");
        assert!((s_off + 2.0).abs() < 0.5, "off slope {s_off}");
    }

    #[test]
    fn jacobian_determinant_identity_and_dilation() {
        let model = free_model(1);
        let null = null_data(1);
        let rep = jacobian_determinant(&model, &null, &[0.4, -0.1], 1.0, 64).unwrap();
        for v in &rep.det_direct {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
        let quad = quadratic_data(1);
        let rep = jacobian_determinant(&model, &quad, &[0.9], 1.0, 256).unwrap();
        assert_abs_diff_eq!(*rep.det_direct.last().unwrap(), 2.0, epsilon = 1e-8);
        assert!(rep.max_rel_gap < 1e-6, "gap {}", rep.max_rel_gap);
    }

    #[test]
    fn jacobian_determinant_random_convex() {
        let model = Model::new(
            2,
            Kinetic::Matrix(vec![vec![2.0, 0.5], vec![0.5, 1.5]]),
            Field::Gaussian { amplitude: 0.3, width: 1.5 },
        )
        .unwrap();
        let data = interacting_data(2);
        let mut rng = crate::sampling::rng(9);
        let z = crate::sampling::cloud(&mut rng, 4, 2, 1.2);
        let rep = jacobian_determinant(&model, &data, &z, 1.0, 256).unwrap();
        assert!(rep.min_det > 0.0);
        assert!(rep.max_rel_gap < 1e-4, "gap {}", rep.max_rel_gap);
    }

    #[test]
    fn conjugate_point_is_detected() {
        // phi = -|q|^2 makes the free flow focus at s = 1/2; one particle in
        // d = 1 keeps the determinant odd across the focus.
        let model = free_model(1);
        let data = DataModel::new(
            1,
            0.0,
            Field::Quadratic { lambda: -2.0 },
            Field::Zero,
            Field::Zero,
            Field::Zero,
        )
        .unwrap();
        let err = jacobian_determinant(&model, &data, &[0.7], 1.0, 64).unwrap_err();
        match err {
            Error::ConjugatePoint { time } => {
                assert!((time - 0.5).abs() <= 0.05, "focus time {time}")
            }
            other => panic!("expected conjugate point, got {other}"),
        }
    }

    #[test]
    fn inversion_round_trips() {
        let model = free_model(1);
        let quad = quadratic_data(1);
        let q = [1.3, -0.5];
        // t = 0 is the identity.
        assert_eq!(invert_flow(&model, &quad, &q, 0.0, 16).unwrap(), q.to_vec());
        // Dilation inverts exactly.
        let z = invert_flow(&model, &quad, &q, 1.0, 256).unwrap();
        for (zi, qi) in z.iter().zip(&q) {
            assert_abs_diff_eq!(*zi, qi / 2.0, epsilon = 1e-8);
        }
        // Random convex instance round-trips through the forward map.
        let model2 = Model::new(
            2,
            Kinetic::Scalar(1.0),
            Field::Gaussian { amplitude: 0.3, width: 1.4 },
        )
        .unwrap();
        let data2 = interacting_data(2);
        let mut rng = crate::sampling::rng(23);
        let q2 = crate::sampling::cloud(&mut rng, 3, 2, 1.5);
        let z2 = invert_flow(&model2, &data2, &q2, 0.8, 208).unwrap();
        let traj = integrate_forward(&model2, &data2, &z2, 0.8, 208).unwrap();
        let err: Vec<f64> = traj.terminal_xi().iter().zip(&q2).map(|(a, b)| a - b).collect();
        assert!(num::l2(&err) <= 1e-7, "round trip error {}", num::l2(&err));
    }

    #[test]
    fn bvp_quadratic_closed_form() {
        let model = free_model(1);
        let data = quadratic_data(1);
        let q = [0.8, -1.1];
        let t = 1.0;
        let traj = solve_bvp(&model, &data, &q, t, 256).unwrap();
        for (a, b) in traj.terminal_xi().iter().zip(&q) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-7);
        }
        // S_s = q (1 + s) / (1 + t) at the midpoint.
        let mid = traj.interpolate_xi(0.5);
        for (a, b) in mid.iter().zip(&q) {
            assert_abs_diff_eq!(*a, b * 1.5 / 2.0, epsilon = 1e-6);
        }
        // Initial momentum lies on the terminal-data gradient graph.
        let grad = data.grad_u0m(traj.initial_xi());
        for (a, b) in traj.initial_eta().iter().zip(&grad) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn energy_is_conserved() {
        let model = Model::new(
            1,
            Kinetic::Scalar(2.0),
            Field::Gaussian { amplitude: 0.6, width: 1.0 },
        )
        .unwrap();
        let data = interacting_data(1);
        let z = [0.4, -0.9, 1.2];
        let traj = integrate_forward(&model, &data, &z, 1.0, 256).unwrap();
        let e0 = discrete_hamiltonian(&model, &data, traj.xi_at(0), traj.eta_at(0));
        for k in 0..traj.len() {
            let e = discrete_hamiltonian(&model, &data, traj.xi_at(k), traj.eta_at(k));
            assert!((e - e0).abs() <= 1e-7, "drift {} at k = {k}", e - e0);
        }
    }

    #[test]
    fn semigroup_restart() {
        let model = Model::new(
            1,
            Kinetic::Scalar(1.0),
            Field::Gaussian { amplitude: 0.4, width: 1.3 },
        )
        .unwrap();
        let data = interacting_data(1);
        let z = [0.3, -0.6];
        let full = integrate_forward(&model, &data, &z, 0.8, 256).unwrap();
        let first = integrate_forward(&model, &data, &z, 0.4, 128).unwrap();
        let second = integrate_phase(
            &model,
            &data,
            first.terminal_xi(),
            first.terminal_eta(),
            0.4,
            128,
        )
        .unwrap();
        for (a, b) in second.terminal_xi().iter().zip(full.terminal_xi()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        for (a, b) in second.terminal_eta().iter().zip(full.terminal_eta()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let model = free_model(1);
        let data = interacting_data(1);
        let z = [0.3, -0.6, 1.1];
        let zp = [1.1, -0.6, 0.3];
        let a = integrate_forward(&model, &data, &z, 0.7, 128).unwrap();
        let b = integrate_forward(&model, &data, &zp, 0.7, 128).unwrap();
        assert_abs_diff_eq!(a.terminal_xi()[0], b.terminal_xi()[2], epsilon = 1e-10);
        assert_abs_diff_eq!(a.terminal_xi()[2], b.terminal_xi()[0], epsilon = 1e-10);
        assert_abs_diff_eq!(a.terminal_eta()[1], b.terminal_eta()[1], epsilon = 1e-10);
    }

    #[test]
    fn blow_up_is_reported() {
        let model = Model::new(1, Kinetic::Scalar(1.0), Field::Quadratic { lambda: 1000.0 })
            .unwrap();
        let data = quadratic_data(1);
        let err = integrate_forward(&model, &data, &[1.0], 1.5, 384).unwrap_err();
        match err {
            Error::BlowUp { time, threshold } => {
                assert!(time > 0.0 && time <= 1.5);
                assert_eq!(threshold, BLOWUP_THRESHOLD);
            }
            other => panic!("expected blow-up, got {other}"),
        }
    }

    #[test]
    fn growth_ratio_is_modest_for_convex_data() {
        let model = free_model(1);
        let data = interacting_data(1);
        let traj = integrate_forward(&model, &data, &[0.5, -0.5], 1.0, 256).unwrap();
        let rate = traj.growth_ratio();
        assert!(rate.is_finite() && rate < 3.0, "rate {rate}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = free_model(2);
        let data = quadratic_data(1);
        assert!(integrate_forward(&model, &data, &[0.0, 0.0], 1.0, 16).is_err());
        let data2 = quadratic_data(2);
        assert!(integrate_forward(&model, &data2, &[0.0], 1.0, 16).is_err());
        assert!(integrate_forward(&model, &data2, &[0.0, 0.0], -1.0, 16).is_err());
        assert!(integrate_forward(&model, &data2, &[0.0, 0.0], 1.0, 0).is_err());
        assert!(variational_integrate(&model, &data2, &[0.0, 0.0], 1.0, 16, 5).is_err());
    }

    // Scalar oracle for the block systems: with J the all-ones matrix,
    // B3 = (1/m - 1/m^2) I + (1/m^2) J, so the dynamics decouples into the
    // mean direction and the mean-zero complement, each obeying a 2 x 2
    // affine system u' = M u + c with M = [[1, m], [lam, 1]].
    fn affine_2x2(t: f64, mm: f64, lam: f64, u0: [f64; 2], c: [f64; 2]) -> [f64; 2] {
        let om2 = mm * lam;
        let (ch, shw) = if om2 > 1e-14 {
            let w = om2.sqrt();
            ((w * t).cosh(), (w * t).sinh() / w)
        } else {
            (1.0, t)
        };
        let et = t.exp();
        let e = [[et * ch, et * mm * shw], [et * lam * shw, et * ch]];
        let det = 1.0 - om2;
        let w0 = [(c[0] - mm * c[1]) / det, (-lam * c[0] + c[1]) / det];
        let v = [u0[0] + w0[0], u0[1] + w0[1]];
        [
            e[0][0] * v[0] + e[0][1] * v[1] - w0[0],
            e[1][0] * v[0] + e[1][1] * v[1] - w0[1],
        ]
    }

    fn mode_eigen(m: usize) -> (f64, f64) {
        let mf = m as f64;
        // B3 eigenvalues: ones direction, then the mean-zero complement.
        ((2.0 * mf - 1.0) / (mf * mf), (mf - 1.0) / (mf * mf))
    }

    #[test]
    fn block_source_matches_scalar_oracle() {
        for m in [4usize, 7] {
            let mf = m as f64;
            let t = 1.0;
            let i0 = 1usize;
            let record = block_ode_scaling(&BlockSystemSpec {
                m,
                t,
                case: BlockCase::Source { i0 },
            })
            .unwrap();
            assert!(record.exp_rk4_gap <= 1e-8, "gap {}", record.exp_rk4_gap);
            let (l1, l0) = mode_eigen(m);
            // Mean components of the source and state.
            let a1_mean = (2.0 * mf - 1.0) / (mf * mf);
            let y0_mean = (2.0 * mf - 1.0) / (mf * mf * mf);
            let mean = affine_2x2(t, mf, l1, [0.0, y0_mean], [a1_mean, y0_mean]);
            // Deviation pattern e_{i0} - (1/m) ones.
            let a1_dev = 1.0 - 1.0 / mf;
            let y0_dev = 1.0 / mf - 1.0 / (mf * mf);
            let dev = affine_2x2(t, mf, l0, [0.0, y0_dev], [a1_dev, y0_dev]);
            for i in 0..m {
                let f = if i == i0 { 1.0 - 1.0 / mf } else { -1.0 / mf };
                assert_abs_diff_eq!(record.x[i], mean[0] + dev[0] * f, epsilon = 1e-9);
                assert_abs_diff_eq!(record.y[i], mean[1] + dev[1] * f, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn block_pair_matches_scalar_oracle() {
        let m = 5usize;
        let mf = m as f64;
        let t = 1.0;
        let (j, k) = (0usize, 3usize);
        let record =
            block_ode_scaling(&BlockSystemSpec { m, t, case: BlockCase::Pair { j, k } }).unwrap();
        assert!(record.exp_rk4_gap <= 1e-8);
        let (l1, l0) = mode_eigen(m);
        let a1_mean = 3.0 / (mf * mf) - 2.0 / (mf * mf * mf);
        let y0_mean = 3.0 / (mf * mf * mf) - 2.0 / (mf * mf * mf * mf);
        let mean = affine_2x2(t, mf, l1, [0.0, y0_mean], [a1_mean, y0_mean]);
        let a1_dev = 1.0 / mf - 1.0 / (mf * mf);
        let y0_dev = 1.0 / (mf * mf) - 1.0 / (mf * mf * mf);
        let dev = affine_2x2(t, mf, l0, [0.0, y0_dev], [a1_dev, y0_dev]);
        for i in 0..m {
            let f = if i == j || i == k { 1.0 - 2.0 / mf } else { -2.0 / mf };
            assert_abs_diff_eq!(record.x[i], mean[0] + dev[0] * f, epsilon = 1e-9);
            assert_abs_diff_eq!(record.y[i], mean[1] + dev[1] * f, epsilon = 1e-9);
        }
    }

    #[test]
    fn block_kernel_matches_scalar_oracle() {
        let m = 6usize;
        let mf = m as f64;
        let t = 1.0;
        let record = block_ode_scaling(&BlockSystemSpec { m, t, case: BlockCase::Kernel }).unwrap();
        assert!(record.exp_rk4_gap <= 1e-8);
        let (l1, l0) = mode_eigen(m);
        let mean = affine_2x2(t, mf, l1, [1.0 / mf, l1 / mf], [0.0, 0.0]);
        let dev = affine_2x2(t, mf, l0, [1.0, l0], [0.0, 0.0]);
        for i in 0..m {
            for c in 0..m {
                let f = if i == c { 1.0 - 1.0 / mf } else { -1.0 / mf };
                assert_abs_diff_eq!(record.x[i * m + c], mean[0] + dev[0] * f, epsilon = 1e-9);
                assert_abs_diff_eq!(record.y[i * m + c], mean[1] + dev[1] * f, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn block_class_magnitudes_scale() {
        let ms = [8usize, 16, 32];
        let xs: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
        let mut y_source = Vec::new();
        let mut y_other = Vec::new();
        let mut x_diag = Vec::new();
        let mut x_off = Vec::new();
        for &m in &ms {
            let s = block_ode_scaling(&BlockSystemSpec {
                m,
                t: 1.0,
                case: BlockCase::Source { i0: 0 },
            })
            .unwrap();
            y_source.push(s.y_classes[0].value);
            y_other.push(s.y_classes[1].value);
            let k =
                block_ode_scaling(&BlockSystemSpec { m, t: 1.0, case: BlockCase::Kernel }).unwrap();
            x_diag.push(k.x_classes[0].value);
            x_off.push(k.x_classes[1].value);
        }
        assert!((fit_loglog(&xs, &y_source) + 1.0).abs() < 0.25);
        assert!((fit_loglog(&xs, &y_other) + 2.0).abs() < 0.25);
        assert!(fit_loglog(&xs, &x_diag).abs() < 0.25);
        assert!((fit_loglog(&xs, &x_off) + 1.0).abs() < 0.25);
    }

    #[test]
    fn block_spec_validation() {
        assert!(block_ode_scaling(&BlockSystemSpec { m: 1, t: 1.0, case: BlockCase::Kernel })
            .is_err());
        assert!(block_ode_scaling(&BlockSystemSpec {
            m: 4,
            t: 1.0,
            case: BlockCase::Source { i0: 4 }
        })
        .is_err());
        assert!(block_ode_scaling(&BlockSystemSpec {
            m: 4,
            t: 1.0,
            case: BlockCase::Pair { j: 2, k: 2 }
        })
        .is_err());
    }
}
