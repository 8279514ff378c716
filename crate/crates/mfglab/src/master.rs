//! The master equations seen through one tagged agent.
//!
//! The measure argument is frozen into the path `sigma_s = sigma_s^t[mu]`,
//! the empirical flow carrying `mu` backward from the horizon. Against that
//! path a single agent solves
//!
//! ```text
//! u(t, q0, mu) = inf { u0(gamma_0, sigma_0)
//!                      + int_0^t [ L(gamma, gamma') + f(gamma, sigma_s) ] ds
//!                      : gamma(t) = q0 },
//! ```
//!
//! by shooting on the one-particle Hamiltonian system, with a direct path
//! minimization as fallback. The agent needs no relation to the support of
//! `mu`, which is exactly what turns the m-particle value into a function
//! of a point and a measure separately.
//!
//! Derivatives of `u` in the point, the measure and time are estimated by
//! central differences of independent solves, so the scalar and vectorial
//! residuals below are genuine cross-checks between solver paths rather
//! than algebraic identities of one code path. The module also houses the
//! one-dimensional Hopf-Lax counterexample whose value function loses
//! differentiability in finite time.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::DataModel;
use crate::error::{Error, Result};
use crate::fields::Field;
use crate::flow;
use crate::measures::{EmpiricalMeasure, WeightedMeasure};
use crate::model::{dot, matvec, Model};
use crate::num;
use crate::value;

/// Relative step for spatial central differences of the agent value.
const GRAD_STEP: f64 = 1e-4;

/// Relative half width of the central time stencil.
const TIME_STEP: f64 = 1e-3;

/// Absolute terminal-position tolerance of the shooting Newton iteration.
const SHOOT_TOL: f64 = 1e-9;

const SHOOT_MAX_ITERS: usize = 40;

/// Segments of the fallback path discretization.
const FALLBACK_SEGMENTS: usize = 64;

/// The empirical measure flow `s -> sigma_s^t[mu]` on `[0, t]`.
///
/// Particles follow the characteristic boundary-value solve through `mu` at
/// the horizon, so `sigma_t = mu` and `sigma_0` sits on the graph of the
/// terminal-data gradient.
#[derive(Debug, Clone)]
pub struct MeasurePath {
    t: f64,
    traj: flow::PhaseTrajectory,
}

impl MeasurePath {
    pub fn horizon(&self) -> f64 {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.traj.dim()
    }

    pub fn particles(&self) -> usize {
        self.traj.particles()
    }

    pub fn times(&self) -> &[f64] {
        self.traj.times()
    }

    pub fn trajectory(&self) -> &flow::PhaseTrajectory {
        &self.traj
    }

    /// Particle positions at time `s`, linearly interpolated between stored
    /// snapshots.
    pub fn positions_at(&self, s: f64) -> Vec<f64> {
        self.traj.interpolate_xi(s)
    }

    /// `sigma_s` as a uniform weighted measure, ready for the agent-side
    /// couplings.
    pub fn measure_at(&self, s: f64) -> WeightedMeasure {
        let pts = self.positions_at(s);
        let mu = EmpiricalMeasure::new(self.dim(), pts).expect("path positions are valid");
        WeightedMeasure::uniform(&mu)
    }

    pub fn terminal_measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.dim(), self.traj.terminal_xi().to_vec())
            .expect("path positions are valid")
    }

    /// Largest second moment along the path; stays bounded in terms of the
    /// moment of `mu` for convex-certified data.
    pub fn max_second_moment(&self) -> f64 {
        let mf = self.particles() as f64;
        (0..self.traj.len())
            .map(|k| self.traj.xi_at(k).iter().map(|x| x * x).sum::<f64>() / mf)
            .fold(0.0, f64::max)
    }
}

/// Carries `mu` to its optimal-flow past: `sigma_s` is the empirical
/// measure of the `solve_bvp` positions at time `s`.
pub fn measure_flow(
    model: &Model,
    data: &DataModel,
    mu: &EmpiricalMeasure,
    t: f64,
    steps: usize,
) -> Result<MeasurePath> {
    if mu.dim() != model.dim() {
        return Err(Error::invalid("measure dimension does not match the model".to_string()));
    }
    let traj = flow::solve_bvp(model, data, mu.flat(), t, steps)?;
    Ok(MeasurePath { t, traj })
}

/// How the single-agent problem was solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentMethod {
    Shooting,
    PathMinimization,
}

/// The agent value together with its optimal trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct AgentSolve {
    pub value: f64,
    pub times: Vec<f64>,
    /// Agent positions, one `d`-block per time.
    pub positions: Vec<f64>,
    /// Agent momenta `P = A gamma'`, one `d`-block per time.
    pub momenta: Vec<f64>,
    pub method: AgentMethod,
}

impl AgentSolve {
    pub fn foot(&self) -> &[f64] {
        let d = self.positions.len() / self.times.len();
        &self.positions[..d]
    }

    /// Largest difference quotient of the velocity, a numerical reading of
    /// the optimizer's C^{1,1} bound.
    pub fn velocity_lipschitz(&self) -> f64 {
        let n = self.times.len();
        if n < 3 {
            return 0.0;
        }
        let d = self.positions.len() / n;
        let h = self.times[1] - self.times[0];
        let mut worst = 0.0f64;
        for k in 0..n - 2 {
            for a in 0..d {
                let v0 = (self.positions[(k + 1) * d + a] - self.positions[k * d + a]) / h;
                let v1 = (self.positions[(k + 2) * d + a] - self.positions[(k + 1) * d + a]) / h;
                worst = worst.max(((v1 - v0) / h).abs());
            }
        }
        worst
    }
}

fn validate_agent(model: &Model, data: &DataModel, t: f64, q0: &[f64]) -> Result<()> {
    if data.dim() != model.dim() {
        return Err(Error::invalid("model and data dimensions differ".to_string()));
    }
    if q0.len() != model.dim() {
        return Err(Error::invalid(format!(
            "agent point has length {}, expected {}",
            q0.len(),
            model.dim()
        )));
    }
    if q0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("agent point has non-finite entries".to_string()));
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::invalid(format!("time must be finite and >= 0, got {t}")));
    }
    Ok(())
}

/// One-particle phase state with optional variational blocks.
struct AgentState {
    s: Vec<f64>,
    p: Vec<f64>,
    ds: Vec<f64>,
    dp: Vec<f64>,
}

impl AgentState {
    fn zeros(d: usize, with_jacobian: bool) -> AgentState {
        let blk = if with_jacobian { d * d } else { 0 };
        AgentState { s: vec![0.0; d], p: vec![0.0; d], ds: vec![0.0; blk], dp: vec![0.0; blk] }
    }

    fn set_combination(&mut self, base: &AgentState, c: f64, dir: &AgentState) {
        for (o, (b, v)) in self.s.iter_mut().zip(base.s.iter().zip(&dir.s)) {
            *o = b + c * v;
        }
        for (o, (b, v)) in self.p.iter_mut().zip(base.p.iter().zip(&dir.p)) {
            *o = b + c * v;
        }
        for (o, (b, v)) in self.ds.iter_mut().zip(base.ds.iter().zip(&dir.ds)) {
            *o = b + c * v;
        }
        for (o, (b, v)) in self.dp.iter_mut().zip(base.dp.iter().zip(&dir.dp)) {
            *o = b + c * v;
        }
    }

    fn accumulate(&mut self, c: f64, dir: &AgentState) {
        for (o, v) in self.s.iter_mut().zip(&dir.s) {
            *o += c * v;
        }
        for (o, v) in self.p.iter_mut().zip(&dir.p) {
            *o += c * v;
        }
        for (o, v) in self.ds.iter_mut().zip(&dir.ds) {
            *o += c * v;
        }
        for (o, v) in self.dp.iter_mut().zip(&dir.dp) {
            *o += c * v;
        }
    }

    fn sup(&self) -> f64 {
        num::sup_norm(&self.s).max(num::sup_norm(&self.p))
    }
}

struct AgentTraj {
    times: Vec<f64>,
    positions: Vec<f64>,
    momenta: Vec<f64>,
    /// Terminal `D_y S(t)`, row major, present when requested.
    terminal_ds: Option<Vec<f64>>,
}

/// RK4 for the agent system
///
/// ```text
/// S' = A^{-1} P,             P' = Dg(S) + D_q f(S, sigma_s),
/// DS' = A^{-1} DP,           DP' = [D^2 g(S) + D^2_q f(S, sigma_s)] DS,
/// ```
///
/// with `sigma_s` linearly interpolated from the frozen path.
fn integrate_agent(
    model: &Model,
    data: &DataModel,
    path: &MeasurePath,
    y: &[f64],
    steps: usize,
    with_jacobian: bool,
) -> Result<AgentTraj> {
    let d = model.dim();
    let t = path.horizon();
    let mut state = AgentState::zeros(d, with_jacobian);
    state.s.copy_from_slice(y);
    let sigma0 = path.measure_at(0.0);
    state.p.copy_from_slice(&data.grad_w_u0(&sigma0, y));
    if with_jacobian {
        for a in 0..d {
            state.ds[a * d + a] = 1.0;
        }
        state.dp.copy_from_slice(&data.hess_w_u0(&sigma0, y));
    }
    let mut times = Vec::with_capacity(steps + 1);
    let mut positions = Vec::with_capacity((steps + 1) * d);
    let mut momenta = Vec::with_capacity((steps + 1) * d);
    times.push(0.0);
    positions.extend_from_slice(&state.s);
    momenta.extend_from_slice(&state.p);
    if t == 0.0 {
        let terminal_ds = with_jacobian.then(|| state.ds.clone());
        return Ok(AgentTraj { times, positions, momenta, terminal_ds });
    }
    let h = t / steps as f64;
    let rhs = |s: f64, st: &AgentState, out: &mut AgentState| {
        let sigma = path.measure_at(s);
        model.dp_h(&st.p, &mut out.s);
        out.p.copy_from_slice(&model.grad_g(&st.s));
        let fw = data.grad_w_f(&sigma, &st.s);
        for (o, g) in out.p.iter_mut().zip(&fw) {
            *o += g;
        }
        if with_jacobian {
            // DS' = A^{-1} DP, column by column of the row-major block.
            for a in 0..d {
                for b in 0..d {
                    let mut acc = 0.0;
                    for c in 0..d {
                        acc += model.kinetic_inv()[a * d + c] * st.dp[c * d + b];
                    }
                    out.ds[a * d + b] = acc;
                }
            }
            let mut curv = model.hess_g(&st.s);
            let fh = data.hess_w_f(&sigma, &st.s);
            for (c, v) in curv.iter_mut().zip(&fh) {
                *c += v;
            }
            for a in 0..d {
                for b in 0..d {
                    let mut acc = 0.0;
                    for c in 0..d {
                        acc += curv[a * d + c] * st.ds[c * d + b];
                    }
                    out.dp[a * d + b] = acc;
                }
            }
        }
    };
    let mut k1 = AgentState::zeros(d, with_jacobian);
    let mut k2 = AgentState::zeros(d, with_jacobian);
    let mut k3 = AgentState::zeros(d, with_jacobian);
    let mut k4 = AgentState::zeros(d, with_jacobian);
    let mut tmp = AgentState::zeros(d, with_jacobian);
    for step in 0..steps {
        let s = step as f64 * h;
        rhs(s, &state, &mut k1);
        tmp.set_combination(&state, 0.5 * h, &k1);
        rhs(s + 0.5 * h, &tmp, &mut k2);
        tmp.set_combination(&state, 0.5 * h, &k2);
        rhs(s + 0.5 * h, &tmp, &mut k3);
        tmp.set_combination(&state, h, &k3);
        rhs(s + h, &tmp, &mut k4);
        state.accumulate(h / 6.0, &k1);
        state.accumulate(h / 3.0, &k2);
        state.accumulate(h / 3.0, &k3);
        state.accumulate(h / 6.0, &k4);
        if state.sup() > flow::BLOWUP_THRESHOLD {
            return Err(Error::BlowUp {
                time: s + h,
                threshold: flow::BLOWUP_THRESHOLD,
            });
        }
        times.push(if step + 1 == steps { t } else { (step + 1) as f64 * h });
        positions.extend_from_slice(&state.s);
        momenta.extend_from_slice(&state.p);
    }
    let terminal_ds = with_jacobian.then(|| state.ds.clone());
    Ok(AgentTraj { times, positions, momenta, terminal_ds })
}

/// Agent action along a stored trajectory:
/// `u0(S(0), sigma_0) + int [L(S, A^{-1} P) + f(S, sigma_s)] ds`.
fn agent_action(model: &Model, data: &DataModel, path: &MeasurePath, traj: &AgentTraj) -> f64 {
    let d = model.dim();
    let n = traj.times.len();
    let sigma0 = path.measure_at(0.0);
    let head = data.agent_u0(&traj.positions[..d], &sigma0);
    if n < 2 {
        return head;
    }
    let h = traj.times[1] - traj.times[0];
    let mut v = vec![0.0; d];
    let mut running = Vec::with_capacity(n);
    for k in 0..n {
        let s = &traj.positions[k * d..(k + 1) * d];
        model.dp_h(&traj.momenta[k * d..(k + 1) * d], &mut v);
        let sigma = path.measure_at(traj.times[k]);
        running.push(model.lagrangian(s, &v) + data.agent_f(s, &sigma));
    }
    head + num::integrate_uniform(&running, h)
}

fn shoot(
    model: &Model,
    data: &DataModel,
    path: &MeasurePath,
    q0: &[f64],
    steps: usize,
) -> Result<AgentTraj> {
    let d = model.dim();
    let mut y = q0.to_vec();
    let mut residual = f64::INFINITY;
    let terminal_gap = |y: &[f64]| -> f64 {
        match integrate_agent(model, data, path, y, steps, false) {
            Ok(tr) => {
                let last = &tr.positions[tr.positions.len() - d..];
                num::l2(&last.iter().zip(q0).map(|(a, b)| a - b).collect::<Vec<f64>>())
            }
            Err(_) => f64::INFINITY,
        }
    };
    for _ in 0..SHOOT_MAX_ITERS {
        let traj = match integrate_agent(model, data, path, &y, steps, true) {
            Ok(tr) => tr,
            Err(_) => {
                for (yi, qi) in y.iter_mut().zip(q0) {
                    *yi = 0.5 * *yi + 0.5 * qi;
                }
                continue;
            }
        };
        let last = &traj.positions[traj.positions.len() - d..];
        let r: Vec<f64> = last.iter().zip(q0).map(|(a, b)| a - b).collect();
        residual = num::l2(&r);
        if residual <= SHOOT_TOL {
            return Ok(traj);
        }
        let ds = traj.terminal_ds.as_ref().expect("jacobian carried");
        let jac = nalgebra::DMatrix::from_row_slice(d, d, ds);
        let Ok(dz) = num::lu_solve(&jac, &r, "agent shooting Jacobian") else {
            break;
        };
        let mut moved = false;
        let mut alpha = 1.0;
        for _ in 0..8 {
            let yc: Vec<f64> = y.iter().zip(&dz).map(|(yi, di)| yi - alpha * di).collect();
            if terminal_gap(&yc) < residual {
                y = yc;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            for (yi, ri) in y.iter_mut().zip(&r) {
                *yi -= 0.5 * ri;
            }
        }
    }
    Err(Error::InversionFailure { iters: SHOOT_MAX_ITERS, residual })
}

/// Direct minimization of the discretized agent action, the fallback when
/// shooting stalls. Same discretization pattern as the configuration-space
/// minimizer: piecewise-linear path, exact kinetic term, Simpson coupling.
struct AgentActionProblem<'a> {
    model: &'a Model,
    data: &'a DataModel,
    q0: &'a [f64],
    h: f64,
    n: usize,
    d: usize,
    /// sigma at node times, then at segment midpoints.
    node_measures: Vec<WeightedMeasure>,
    mid_measures: Vec<WeightedMeasure>,
}

impl<'a> AgentActionProblem<'a> {
    fn new(
        model: &'a Model,
        data: &'a DataModel,
        path: &MeasurePath,
        q0: &'a [f64],
    ) -> AgentActionProblem<'a> {
        let n = FALLBACK_SEGMENTS;
        let h = path.horizon() / n as f64;
        let node_measures = (0..=n).map(|k| path.measure_at(k as f64 * h)).collect();
        let mid_measures = (0..n).map(|k| path.measure_at((k as f64 + 0.5) * h)).collect();
        AgentActionProblem { model, data, q0, h, n, d: model.dim(), node_measures, mid_measures }
    }

    fn node<'b>(&'b self, x: &'b [f64], k: usize) -> &'b [f64] {
        if k < self.n {
            &x[k * self.d..(k + 1) * self.d]
        } else {
            self.q0
        }
    }

    fn coupling(&self, pos: &[f64], sigma: &WeightedMeasure) -> f64 {
        self.model.potential().value(pos) + self.data.agent_f(pos, sigma)
    }

    fn coupling_grad(&self, pos: &[f64], sigma: &WeightedMeasure, scale: f64, out: &mut [f64]) {
        self.model.potential().add_gradient(pos, scale, out);
        let fw = self.data.grad_w_f(sigma, pos);
        for (o, g) in out.iter_mut().zip(&fw) {
            *o += scale * g;
        }
    }

    fn action(&self, x: &[f64]) -> f64 {
        let mut total = self.data.agent_u0(self.node(x, 0), &self.node_measures[0]);
        let mut diff = vec![0.0; self.d];
        let mut mid = vec![0.0; self.d];
        for k in 0..self.n {
            let a = self.node(x, k);
            let b = self.node(x, k + 1);
            for c in 0..self.d {
                diff[c] = b[c] - a[c];
                mid[c] = 0.5 * (a[c] + b[c]);
            }
            total += crate::model::quad_form(self.model.kinetic(), &diff) / (2.0 * self.h);
            total += self.h / 6.0
                * (self.coupling(a, &self.node_measures[k])
                    + 4.0 * self.coupling(&mid, &self.mid_measures[k])
                    + self.coupling(b, &self.node_measures[k + 1]));
        }
        total
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let g0 = self.data.grad_w_u0(&self.node_measures[0], self.node(x, 0));
        for (o, g) in out[..self.d].iter_mut().zip(&g0) {
            *o += g;
        }
        let mut diff = vec![0.0; self.d];
        let mut av = vec![0.0; self.d];
        let mut mid = vec![0.0; self.d];
        let mut gm = vec![0.0; self.d];
        for k in 0..self.n {
            let a = self.node(x, k);
            let b = self.node(x, k + 1);
            for c in 0..self.d {
                diff[c] = b[c] - a[c];
                mid[c] = 0.5 * (a[c] + b[c]);
            }
            matvec(self.model.kinetic(), &diff, &mut av);
            if k < self.n {
                for c in 0..self.d {
                    out[k * self.d + c] -= av[c] / self.h;
                }
                self.coupling_grad(
                    a,
                    &self.node_measures[k],
                    self.h / 6.0,
                    &mut out[k * self.d..(k + 1) * self.d],
                );
            }
            if k + 1 < self.n {
                for c in 0..self.d {
                    out[(k + 1) * self.d + c] += av[c] / self.h;
                }
                self.coupling_grad(
                    b,
                    &self.node_measures[k + 1],
                    self.h / 6.0,
                    &mut out[(k + 1) * self.d..(k + 2) * self.d],
                );
            }
            gm.fill(0.0);
            self.coupling_grad(&mid, &self.mid_measures[k], self.h / 3.0, &mut gm);
            if k < self.n {
                for (o, g) in out[k * self.d..(k + 1) * self.d].iter_mut().zip(&gm) {
                    *o += g;
                }
            }
            if k + 1 < self.n {
                for (o, g) in out[(k + 1) * self.d..(k + 2) * self.d].iter_mut().zip(&gm) {
                    *o += g;
                }
            }
        }
    }

    fn minimize(&self) -> Result<(f64, Vec<f64>)> {
        let len = self.n * self.d;
        let mut x = Vec::with_capacity(len);
        for _ in 0..self.n {
            x.extend_from_slice(self.q0);
        }
        let mut g = vec![0.0; len];
        self.gradient(&x, &mut g);
        let mut f = self.action(&x);
        let mut alpha = 0.25 * self.h / (1.0 + num::sup_norm(self.model.kinetic()));
        let mut gnew = vec![0.0; len];
        for _ in 0..10_000 {
            let gn = num::l2(&g);
            if gn <= 1e-7 {
                return Ok((f, x));
            }
            let mut step = alpha.clamp(1e-12, 1e6);
            let mut accepted = None;
            for _ in 0..60 {
                let xn: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
                let fx = self.action(&xn);
                if fx.is_finite() && fx <= f - 1e-4 * step * gn * gn {
                    accepted = Some((xn, fx));
                    break;
                }
                step *= 0.5;
            }
            let Some((xn, fx)) = accepted else {
                if gn <= 1e-4 {
                    return Ok((f, x));
                }
                return Err(Error::OptimizationFailure(
                    "line search stalled in agent path minimization".to_string(),
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
                let yj = gnew[j] - g[j];
                sy += s * yj;
                ss += s * s;
            }
            alpha = if sy > 1e-300 && (ss / sy).is_finite() { ss / sy } else { 2.0 * step };
            x = xn;
            f = fx;
            std::mem::swap(&mut g, &mut gnew);
        }
        Err(Error::OptimizationFailure(
            "agent path minimization did not converge".to_string(),
        ))
    }

    fn solve(&self) -> Result<AgentSolve> {
        let (val, nodes) = self.minimize()?;
        let mut times = Vec::with_capacity(self.n + 1);
        let mut positions = Vec::with_capacity((self.n + 1) * self.d);
        let mut momenta = Vec::with_capacity((self.n + 1) * self.d);
        let mut av = vec![0.0; self.d];
        let mut diff = vec![0.0; self.d];
        for k in 0..=self.n {
            times.push(k as f64 * self.h);
            positions.extend_from_slice(self.node(&nodes, k));
            let (lo, hi) = if k < self.n { (k, k + 1) } else { (self.n - 1, self.n) };
            for c in 0..self.d {
                diff[c] = (self.node(&nodes, hi)[c] - self.node(&nodes, lo)[c]) / self.h;
            }
            matvec(self.model.kinetic(), &diff, &mut av);
            momenta.extend_from_slice(&av);
        }
        Ok(AgentSolve {
            value: val,
            times,
            positions,
            momenta,
            method: AgentMethod::PathMinimization,
        })
    }
}

/// Solves the single-agent problem against an already computed measure
/// path. The horizon is the path's; `q0` is the endpoint constraint.
pub fn master_value_on_path(
    model: &Model,
    data: &DataModel,
    path: &MeasurePath,
    q0: &[f64],
    steps: usize,
) -> Result<AgentSolve> {
    validate_agent(model, data, path.horizon(), q0)?;
    if path.horizon() == 0.0 {
        let sigma0 = path.measure_at(0.0);
        return Ok(AgentSolve {
            value: data.agent_u0(q0, &sigma0),
            times: vec![0.0],
            positions: q0.to_vec(),
            momenta: data.grad_w_u0(&sigma0, q0),
            method: AgentMethod::Shooting,
        });
    }
    match shoot(model, data, path, q0, steps) {
        Ok(traj) => Ok(AgentSolve {
            value: agent_action(model, data, path, &traj),
            times: traj.times,
            positions: traj.positions,
            momenta: traj.momenta,
            method: AgentMethod::Shooting,
        }),
        Err(shoot_err) => {
            let fallback = AgentActionProblem::new(model, data, path, q0);
            fallback.solve().map_err(|fb_err| {
                Error::OptimizationFailure(format!(
                    "agent solve failed; shooting: {shoot_err}; fallback: {fb_err}"
                ))
            })
        }
    }
}

/// `u(t, q0, mu)` by the frozen-measure control problem. The agent point
/// may lie anywhere, on or off the support of `mu`.
pub fn master_value(
    model: &Model,
    data: &DataModel,
    t: f64,
    q0: &[f64],
    mu: &EmpiricalMeasure,
    steps: usize,
) -> Result<AgentSolve> {
    validate_agent(model, data, t, q0)?;
    let path = measure_flow(model, data, mu, t, steps)?;
    master_value_on_path(model, data, &path, q0, steps)
}

/// `u` and its three derivative blocks at `(t, q0, mu)`.
#[derive(Debug, Clone, Serialize)]
pub struct MasterSample {
    pub t: f64,
    pub q0: Vec<f64>,
    pub u: f64,
    /// `D_{q0} u`, length `d`.
    pub dq0_u: Vec<f64>,
    /// Measure derivative `Phi_1(q_i) = m d u / d q_i` per particle of
    /// `mu`, length `m d`.
    pub phi1: Vec<f64>,
    pub dt_u: f64,
}

/// Central-difference derivatives of the agent value in the point, the
/// measure particles and time.
///
/// The point derivative reuses one measure path; each measure-particle
/// derivative re-solves the flow for the perturbed measure, which is what
/// makes `phi1` a genuine Wasserstein derivative and not a partial one.
pub fn master_gradient(
    model: &Model,
    data: &DataModel,
    t: f64,
    q0: &[f64],
    mu: &EmpiricalMeasure,
    steps: usize,
) -> Result<MasterSample> {
    validate_agent(model, data, t, q0)?;
    if t <= 0.0 {
        return Err(Error::invalid("master_gradient needs t > 0".to_string()));
    }
    let d = model.dim();
    let m = mu.len();
    let mf = m as f64;
    let path = measure_flow(model, data, mu, t, steps)?;
    let base = master_value_on_path(model, data, &path, q0, steps)?;
    let mut dq0_u = vec![0.0; d];
    for a in 0..d {
        let h = GRAD_STEP * (1.0 + q0[a].abs());
        let mut qp = q0.to_vec();
        qp[a] += h;
        let up = master_value_on_path(model, data, &path, &qp, steps)?;
        qp[a] = q0[a] - h;
        let um = master_value_on_path(model, data, &path, &qp, steps)?;
        dq0_u[a] = (up.value - um.value) / (2.0 * h);
    }
    let flat = mu.flat();
    let phi1: Vec<f64> = (0..m * d)
        .into_par_iter()
        .map(|idx| -> Result<f64> {
            let h = GRAD_STEP * (1.0 + flat[idx].abs());
            let mut pts = flat.to_vec();
            pts[idx] = flat[idx] + h;
            let mu_p = EmpiricalMeasure::new(d, pts.clone())?;
            let up = master_value(model, data, t, q0, &mu_p, steps)?;
            pts[idx] = flat[idx] - h;
            let mu_m = EmpiricalMeasure::new(d, pts)?;
            let um = master_value(model, data, t, q0, &mu_m, steps)?;
            Ok(mf * (up.value - um.value) / (2.0 * h))
        })
        .collect::<Result<Vec<f64>>>()?;
    let dt = TIME_STEP * t;
    let up = master_value(model, data, t + dt, q0, mu, steps)?;
    let um = master_value(model, data, t - dt, q0, mu, steps)?;
    let dt_u = (up.value - um.value) / (2.0 * dt);
    Ok(MasterSample { t, q0: q0.to_vec(), u: base.value, dq0_u, phi1, dt_u })
}

/// Pointwise residual of the scalar master equation at `(t, q0, mu)`:
///
/// ```text
/// | d_t u + H(q0, D_{q0} u)
///   + (1/m) sum_i Phi_1(q_i) . D_p H(q_i, grad_w U(t, mu)(q_i))
///   - f(q0, mu) |
/// ```
///
/// with every derivative from an independent estimate: the agent solves for
/// `u` and its differences, the configuration flow for the Wasserstein
/// gradient.
pub fn scalar_master_residual(
    model: &Model,
    data: &DataModel,
    t: f64,
    q0: &[f64],
    mu: &EmpiricalMeasure,
    steps: usize,
) -> Result<f64> {
    let sample = master_gradient(model, data, t, q0, mu, steps)?;
    let w = value::wasserstein_gradient(model, data, t, mu, steps)?;
    Ok(scalar_residual_for(model, data, &sample, mu, &w))
}

/// As `scalar_master_residual`, for an already computed derivative sample
/// and Wasserstein gradient `w` of the lifted value at `(t, mu)`. Lets a
/// sweep over agent points share one `w`.
pub fn scalar_residual_for(
    model: &Model,
    data: &DataModel,
    sample: &MasterSample,
    mu: &EmpiricalMeasure,
    w: &[f64],
) -> f64 {
    let d = model.dim();
    let m = mu.len();
    let mut v = vec![0.0; d];
    let mut nonlocal = 0.0;
    for i in 0..m {
        model.dp_h(&w[i * d..(i + 1) * d], &mut v);
        nonlocal += dot(&sample.phi1[i * d..(i + 1) * d], &v);
    }
    nonlocal /= m as f64;
    let f = data.agent_f(&sample.q0, &WeightedMeasure::uniform(mu));
    (sample.dt_u + model.hamiltonian(&sample.q0, &sample.dq0_u) + nonlocal - f).abs()
}

/// Pointwise residual of the vectorial master equation at particle `i` of
/// `mu`, with `V = grad_w U(t, mu)`:
///
/// ```text
/// | d_t V(q_i) + D_q H(q_i, V(q_i)) + Lambda0(q_i) D_p H(q_i, V(q_i))
///   + (1/m) sum_{j != i} Lambda1(q_i, q_j) D_p H(q_j, V(q_j))
///   - grad_w F(mu)(q_i) |
/// ```
///
/// The kernels come from the Hessian estimator, the field values from the
/// flow, the time derivative from a central stencil; nothing cancels by
/// construction.
pub fn vectorial_master_residual(
    model: &Model,
    data: &DataModel,
    t: f64,
    mu: &EmpiricalMeasure,
    i: usize,
    steps: usize,
) -> Result<f64> {
    if mu.dim() != model.dim() {
        return Err(Error::invalid("measure dimension does not match the model".to_string()));
    }
    if i >= mu.len() {
        return Err(Error::invalid(format!(
            "particle index {i} out of range for m = {}",
            mu.len()
        )));
    }
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::invalid("vectorial residual needs t > 0".to_string()));
    }
    let d = model.dim();
    let m = mu.len();
    let dt = TIME_STEP * t;
    let w = value::wasserstein_gradient(model, data, t, mu, steps)?;
    let wp = value::wasserstein_gradient(model, data, t + dt, mu, steps)?;
    let wm = value::wasserstein_gradient(model, data, t - dt, mu, steps)?;
    let kernel = value::hessian_kernel(model, data, t, mu, steps)?;
    let qi = mu.point(i);
    let vi = &w[i * d..(i + 1) * d];
    let mut residual = vec![0.0; d];
    for a in 0..d {
        residual[a] = (wp[i * d + a] - wm[i * d + a]) / (2.0 * dt);
    }
    let mut buf = vec![0.0; d];
    model.dq_h(qi, &mut buf);
    for a in 0..d {
        residual[a] += buf[a];
    }
    let mut dph = vec![0.0; d];
    model.dp_h(vi, &mut dph);
    let l0 = kernel.lambda0_block(i);
    for a in 0..d {
        residual[a] += dot(&l0[a * d..(a + 1) * d], &dph);
    }
    for j in 0..m {
        if j == i {
            continue;
        }
        model.dp_h(&w[j * d..(j + 1) * d], &mut dph);
        let l1 = kernel.lambda1_block(i, j);
        for a in 0..d {
            residual[a] += dot(&l1[a * d..(a + 1) * d], &dph) / m as f64;
        }
    }
    let fw = data.grad_w_f(&WeightedMeasure::uniform(mu), qi);
    for a in 0..d {
        residual[a] -= fw[a];
    }
    Ok(num::sup_norm(&residual))
}

/// The one-dimensional Hopf-Lax value
/// `min_y (y - q)^2 / (2t) - sqrt(1 + y^2)` with every global minimizer
/// and the superdifferential slopes `(q - y) / t` they induce.
#[derive(Debug, Clone, Serialize)]
pub struct CounterexampleSample {
    pub t: f64,
    pub q: f64,
    pub value: f64,
    /// Global minimizers, ascending.
    pub minimizers: Vec<f64>,
    /// Superdifferential slopes, ascending; a single entry at smooth
    /// points.
    pub superdifferential: Vec<f64>,
}

impl CounterexampleSample {
    /// Width of the superdifferential; positive exactly where the value
    /// fails to be differentiable.
    pub fn slope_gap(&self) -> f64 {
        match (self.superdifferential.first(), self.superdifferential.last()) {
            (Some(lo), Some(hi)) => hi - lo,
            _ => 0.0,
        }
    }
}

/// Concave terminal data `-sqrt(1 + q^2)` under quadratic transport. For
/// `t <= 1` the value stays smooth; for `t > 1` two symmetric minimizers
/// coexist at `q = 0` and differentiability is lost there.
pub fn counterexample_hopf_lax(t: f64, q: f64) -> Result<CounterexampleSample> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::invalid(format!("counterexample needs t > 0, got {t}")));
    }
    if !q.is_finite() {
        return Err(Error::invalid("query point must be finite".to_string()));
    }
    let phi = Field::SoftNorm { alpha: 1.0 };
    let energy = |y: f64| (y - q) * (y - q) / (2.0 * t) + phi.value(&[y]);
    // Stationarity: (y - q)/t = y / sqrt(1 + y^2). The right side is
    // bounded by 1, so every root lies in [q - t, q + t]; the scan radius
    // covers that with margin and the objective grows past it.
    let crit = |y: f64| (y - q) / t - y / (1.0 + y * y).sqrt();
    let radius = q.abs() + t + 2.0;
    let samples = 4001;
    let mut roots: Vec<f64> = Vec::new();
    let step = 2.0 * radius / (samples - 1) as f64;
    let mut prev_y = -radius;
    let mut prev_c = crit(prev_y);
    for k in 1..samples {
        let y = -radius + k as f64 * step;
        let c = crit(y);
        if prev_c == 0.0 {
            roots.push(prev_y);
        } else if prev_c * c < 0.0 {
            let (mut lo, mut hi) = (prev_y, y);
            let (mut clo, _) = (prev_c, c);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let cm = crit(mid);
                if cm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if clo * cm < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    clo = cm;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        prev_y = y;
        prev_c = c;
    }
    if crit(radius) == 0.0 {
        roots.push(radius);
    }
    let best = roots.iter().map(|&y| energy(y)).fold(f64::INFINITY, f64::min);
    let tol = 1e-10 * (1.0 + best.abs());
    let mut minimizers: Vec<f64> = roots.into_iter().filter(|&y| energy(y) <= best + tol).collect();
    minimizers.sort_by(|a, b| a.partial_cmp(b).unwrap());
    minimizers.dedup_by(|a, b| (*a - *b).abs() <= 1e-7);
    let mut superdifferential: Vec<f64> = minimizers.iter().map(|&y| (q - y) / t).collect();
    superdifferential.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(CounterexampleSample { t, q, value: best, minimizers, superdifferential })
}
