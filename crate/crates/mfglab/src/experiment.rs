//! Experiment runner: turns a validated config into artifacts and checks.
//!
//! Each kind wires a handful of library calls into one reproducible study:
//! CSV tables for plotting, JSON records for structured results, and a
//! manifest tying everything to the config hash and seed. Checks encode the
//! quantitative claims a study is expected to satisfy; the runner reports
//! them but never weakens them, so a failing check is visible both in the
//! manifest and in the process exit status.
//!
//! Determinism contract: identical config and seed produce byte-identical
//! CSV and JSON artifacts. All randomness flows through the seeded
//! generators in `sampling`, parallel reductions are order-independent, and
//! rows are emitted in sorted key order.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::{config_hash, ExperimentConfig, ExperimentKind, Params};
use crate::data::DataModel;
use crate::error::{Error, Result};
use crate::flow;
use crate::master;
use crate::measures::EmpiricalMeasure;
use crate::model::{AuditRegion, Model};
use crate::num;
use crate::report::{g17, write_csv, write_json};
use crate::sampling;
use crate::value;

/// One named pass/fail observation with a human-readable detail line.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, pass: bool, detail: String) -> CheckResult {
    CheckResult { name: name.to_string(), pass, detail }
}

/// Written as `manifest.json` next to the artifacts of a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub wall_time_s: f64,
    pub all_pass: bool,
    pub checks: Vec<CheckResult>,
    /// File names relative to the output directory, manifest excluded.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    /// Process exit status encoding the check outcome: 0 all pass, 2 some
    /// check failed.
    pub fn exit_code(&self) -> i32 {
        if self.all_pass {
            0
        } else {
            2
        }
    }
}

struct Artifacts {
    dir: PathBuf,
    names: Vec<String>,
}

impl Artifacts {
    fn csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        write_csv(&self.dir.join(name), header, rows)?;
        self.names.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        write_json(&self.dir.join(name), value)?;
        self.names.push(name.to_string());
        Ok(())
    }
}

/// Runs one experiment into `out_dir`, writing artifacts and a manifest.
///
/// The caller resolves the seed and output directory beforehand (CLI
/// overrides beat config values). Errors out of here are runtime failures;
/// config problems have already been caught by validation.
pub fn run(config: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<RunManifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let model = config.build_model()?;
    let data = config.build_data()?;
    let mut artifacts = Artifacts { dir: out_dir.to_path_buf(), names: Vec::new() };
    let p = &config.params;
    let checks = match config.kind {
        ExperimentKind::Audit => run_audit(&model, &data, p, seed, &mut artifacts)?,
        ExperimentKind::Flow => run_flow(&model, &data, p, seed, &mut artifacts)?,
        ExperimentKind::Value => run_value(&model, &data, p, seed, &mut artifacts)?,
        ExperimentKind::Scaling => run_scaling(&model, &data, p, seed, &mut artifacts)?,
        ExperimentKind::Master => run_master(&model, &data, p, seed, &mut artifacts)?,
        ExperimentKind::Counterexample => run_counterexample(p, &mut artifacts)?,
        ExperimentKind::Convexity => run_convexity(&model, &data, p, seed, &mut artifacts)?,
        ExperimentKind::Monotonicity => run_monotonicity(&data, p, &mut artifacts)?,
        ExperimentKind::Blockode => run_blockode(p, &mut artifacts)?,
    };
    let manifest = RunManifest {
        kind: config.kind.name().to_string(),
        config_hash: config_hash(config),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
        all_pass: checks.iter().all(|c| c.pass),
        checks,
        artifacts: artifacts.names.clone(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn steps_for(p: &Params, t: f64) -> usize {
    p.steps.unwrap_or_else(|| flow::default_steps(t))
}

/// Particle cloud from explicit config points or the seeded sampler.
fn resolve_cloud(p: &Params, d: usize, default_m: usize, seed: u64, radius: f64) -> Vec<f64> {
    if let Some(points) = &p.points {
        return points.iter().flatten().copied().collect();
    }
    let m = p.m.unwrap_or(default_m);
    sampling::cloud(&mut sampling::rng(seed), m, d, radius)
}

fn run_audit(
    model: &Model,
    data: &DataModel,
    p: &Params,
    seed: u64,
    artifacts: &mut Artifacts,
) -> Result<Vec<CheckResult>> {
    let region = AuditRegion {
        radius: p.radius.unwrap_or(3.0),
        samples: p.samples.unwrap_or(64),
        seed,
    };
    let legendre = model.legendre_check(&region);
    let derivatives = model.derivative_check(&region);
    #[derive(Serialize)]
    struct AuditRecord<'a> {
        region: AuditRegion,
        legendre: &'a crate::model::LegendreReport,
        derivatives: &'a crate::model::DerivativeReport,
        data_lambda: f64,
        data_lambda1: f64,
    }
    artifacts.json(
        "audit.json",
        &AuditRecord {
            region,
            legendre: &legendre,
            derivatives: &derivatives,
            data_lambda: data.lambda(),
            data_lambda1: data.lambda1(),
        },
    )?;
    Ok(vec![
        check(
            "legendre_duality",
            legendre.pass,
            format!(
                "max defect {:.3e}, max round trip {:.3e}",
                legendre.max_defect, legendre.max_roundtrip
            ),
        ),
        check(
            "derivative_consistency",
            derivatives.pass,
            format!(
                "first {:.3e}, second {:.3e}, third {:.3e}",
                derivatives.max_first, derivatives.max_second, derivatives.max_third
            ),
        ),
    ])
}

fn run_flow(
    model: &Model,
    data: &DataModel,
    p: &Params,
    seed: u64,
    artifacts: &mut Artifacts,
) -> Result<Vec<CheckResult>> {
    let d = model.dim();
    let t = p.t.unwrap_or(1.0);
    let steps = steps_for(p, t);
    let radius = p.radius.unwrap_or(1.0);
    let z = resolve_cloud(p, d, 4, seed, radius);
    let m = z.len() / d;
    let traj = flow::integrate_forward(model, data, &z, t, steps)?;

    let mut rows = Vec::with_capacity(traj.len() * m * d);
    for k in 0..traj.len() {
        let s = traj.times()[k];
        let xi = traj.xi_at(k);
        let eta = traj.eta_at(k);
        for i in 0..m {
            for a in 0..d {
                rows.push(vec![
                    g17(s),
                    i.to_string(),
                    a.to_string(),
                    g17(xi[i * d + a]),
                    g17(eta[i * d + a]),
                ]);
            }
        }
    }
    artifacts.csv("trajectory.csv", &["s", "particle", "coordinate", "xi", "eta"], rows)?;

    let energy0 = flow::discrete_hamiltonian(model, data, traj.initial_xi(), traj.initial_eta());
    let mut drift = 0.0f64;
    for k in 0..traj.len() {
        let e = flow::discrete_hamiltonian(model, data, traj.xi_at(k), traj.eta_at(k));
        drift = drift.max((e - energy0).abs());
    }
    let energy_tol = 1e-6 * (1.0 + energy0.abs());

    let q = traj.terminal_xi();
    let z_back = flow::invert_flow(model, data, q, t, steps)?;
    let forward = flow::integrate_forward(model, data, &z_back, t, steps)?;
    let roundtrip = forward
        .terminal_xi()
        .iter()
        .zip(q)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();

    let jac = flow::jacobian_determinant(model, data, &z, t, steps)?;
    let jac_rows = jac
        .times
        .iter()
        .zip(jac.det_direct.iter().zip(&jac.det_jacobi))
        .map(|(s, (dd, dj))| vec![g17(*s), g17(*dd), g17(*dj)])
        .collect::<Vec<_>>();
    artifacts.csv("jacobian.csv", &["s", "det_direct", "det_jacobi"], jac_rows)?;

    #[derive(Serialize)]
    struct FlowRecord {
        t: f64,
        m: usize,
        steps: usize,
        energy_drift: f64,
        roundtrip_gap: f64,
        min_det: f64,
        max_rel_gap: f64,
    }
    artifacts.json(
        "flow.json",
        &FlowRecord {
            t,
            m,
            steps,
            energy_drift: drift,
            roundtrip_gap: roundtrip,
            min_det: jac.min_det,
            max_rel_gap: jac.max_rel_gap,
        },
    )?;
    Ok(vec![
        check(
            "energy_conservation",
            drift <= energy_tol,
            format!("drift {:.3e} vs {:.3e}", drift, energy_tol),
        ),
        check("flow_round_trip", roundtrip <= 1e-7, format!("gap {roundtrip:.3e} vs 1e-7")),
        check(
            "jacobian_positive",
            jac.min_det > 0.0,
            format!("min det {:.6e}", jac.min_det),
        ),
        check(
            "jacobi_identity",
            jac.max_rel_gap <= 1e-4,
            format!("max relative gap {:.3e} vs 1e-4", jac.max_rel_gap),
        ),
    ])
}

fn run_value(
    model: &Model,
    data: &DataModel,
    p: &Params,
    seed: u64,
    artifacts: &mut Artifacts,
) -> Result<Vec<CheckResult>> {
    let d = model.dim();
    let t_max = p.t.unwrap_or(0.5);
    if t_max <= 0.0 {
        return Err(Error::invalid("value kind needs t > 0".to_string()));
    }
    let m = p.m.unwrap_or(4);
    let samples = p.samples.unwrap_or(20);
    let radius = p.radius.unwrap_or(1.0);
    let value_tol = p.value_tolerance.unwrap_or(1e-4);
    let residual_tol = p.residual_tolerance.unwrap_or(5e-4);

    let mut rows = Vec::with_capacity(2 * samples);
    let mut max_gap = 0.0f64;
    let mut max_residual = 0.0f64;
    for k in 0..samples {
        // Times sweep (0, t_max] so every sample exercises a genuine solve.
        let t = t_max * (k + 1) as f64 / samples as f64;
        let steps = steps_for(p, t);
        let q = sampling::cloud(&mut sampling::rng(sampling::mix(seed, k as u64)), m, d, radius);
        let by_char = value::value(model, data, t, &q, value::Method::Characteristics, steps)?;
        let by_direct =
            value::value(model, data, t, &q, value::Method::DirectMinimization, steps)?;
        max_gap = max_gap.max((by_char.value - by_direct.value).abs());
        let residual = value::hj_residual(model, data, t, &q, steps)?;
        max_residual = max_residual.max(residual);
        for sample in [&by_char, &by_direct] {
            let label = match sample.method {
                value::Method::Characteristics => "characteristics",
                value::Method::DirectMinimization => "direct-minimization",
            };
            rows.push(vec![
                g17(sample.t),
                m.to_string(),
                g17(sample.value),
                label.to_string(),
                g17(num::l2(&sample.gradient)),
            ]);
        }
    }
    artifacts.csv("value.csv", &["t", "m", "value", "method", "grad_norm"], rows)?;

    #[derive(Serialize)]
    struct ValueRecord {
        samples: usize,
        m: usize,
        max_method_gap: f64,
        max_hj_residual: f64,
    }
    artifacts.json(
        "value.json",
        &ValueRecord { samples, m, max_method_gap: max_gap, max_hj_residual: max_residual },
    )?;
    Ok(vec![
        check(
            "methods_agree",
            max_gap <= value_tol,
            format!("max value gap {max_gap:.3e} vs {value_tol:.1e}"),
        ),
        check(
            "hj_residual",
            max_residual <= residual_tol,
            format!("max residual {max_residual:.3e} vs {residual_tol:.1e}"),
        ),
    ])
}

fn run_scaling(
    model: &Model,
    data: &DataModel,
    p: &Params,
    seed: u64,
    artifacts: &mut Artifacts,
) -> Result<Vec<CheckResult>> {
    let t = p.t.unwrap_or(0.5);
    let mut params = value::ScalingParams::new(t, p.ms.clone().unwrap_or(vec![4, 8, 16, 32]));
    params.radius = p.radius.unwrap_or(1.0);
    params.seeds = p.seeds.unwrap_or(16);
    params.seed = seed;
    params.with_third = p.with_third.unwrap_or(false);
    params.steps = steps_for(p, t);
    let report = value::scaling_study(model, data, &params)?;

    let mut rows = Vec::new();
    for class in &report.classes {
        for (mi, &m) in report.ms.iter().enumerate() {
            rows.push(vec![
                m.to_string(),
                class.label.to_string(),
                g17(class.per_m[mi]),
                g17(class.target),
                g17(class.slope),
                class.pass.to_string(),
            ]);
        }
    }
    artifacts.csv(
        "scaling.csv",
        &["m", "class", "max_abs", "target_slope", "fitted_slope", "pass"],
        rows,
    )?;
    artifacts.json("scaling.json", &report)?;

    Ok(report
        .classes
        .iter()
        .map(|c| {
            check(
                c.label,
                c.pass,
                format!("fitted slope {:.3} vs target {:.1}", c.slope, c.target),
            )
        })
        .collect())
}

fn run_master(
    model: &Model,
    data: &DataModel,
    p: &Params,
    seed: u64,
    artifacts: &mut Artifacts,
) -> Result<Vec<CheckResult>> {
    let d = model.dim();
    let t = p.t.unwrap_or(0.5);
    if t <= 0.0 {
        return Err(Error::invalid("master kind needs t > 0".to_string()));
    }
    let steps = steps_for(p, t);
    let radius = p.radius.unwrap_or(1.0);
    let residual_tol = p.residual_tolerance.unwrap_or(5e-3);
    let flat = resolve_cloud(p, d, 3, seed, radius);
    let mu = EmpiricalMeasure::new(d, flat)?;
    let m = mu.len();

    // Agent points: every particle, then one off-support point.
    let mut agents: Vec<Vec<f64>> = (0..m).map(|i| mu.point(i).to_vec()).collect();
    agents.push(p.q0.clone().unwrap_or_else(|| {
        sampling::ball_point(&mut sampling::rng(sampling::mix(seed, 0x0ff5)), d, 3.0 * radius)
    }));

    let w = value::wasserstein_gradient(model, data, t, &mu, steps)?;
    let mut rows = Vec::with_capacity(agents.len());
    let mut represent_gap = 0.0f64;
    let mut max_scalar = 0.0f64;
    for (k, q0) in agents.iter().enumerate() {
        let sample = master::master_gradient(model, data, t, q0, &mu, steps)?;
        let residual = master::scalar_residual_for(model, data, &sample, &mu, &w);
        max_scalar = max_scalar.max(residual);
        if k < m {
            let gap: f64 = sample
                .dq0_u
                .iter()
                .zip(&w[k * d..(k + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            represent_gap = represent_gap.max(gap);
        }
        let mut row = vec![g17(t)];
        row.extend(q0.iter().map(|v| g17(*v)));
        row.push(m.to_string());
        row.push(g17(sample.u));
        row.push(g17(num::l2(&sample.dq0_u)));
        row.push(g17(residual));
        rows.push(row);
    }
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|a| format!("q0_{a}")));
    header.extend(["m", "u", "dq0u_norm", "residual_scalar"].map(String::from));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    artifacts.csv("master.csv", &header_refs, rows)?;

    let mut max_vectorial = 0.0f64;
    for i in 0..m {
        let r = master::vectorial_master_residual(model, data, t, &mu, i, steps)?;
        max_vectorial = max_vectorial.max(r);
    }

    #[derive(Serialize)]
    struct MasterRecord {
        t: f64,
        m: usize,
        represent_gap: f64,
        max_scalar_residual: f64,
        max_vectorial_residual: f64,
    }
    artifacts.json(
        "master.json",
        &MasterRecord {
            t,
            m,
            represent_gap,
            max_scalar_residual: max_scalar,
            max_vectorial_residual: max_vectorial,
        },
    )?;
    Ok(vec![
        check(
            "point_gradient_matches_wasserstein",
            represent_gap <= 1e-4,
            format!("max gap on support {represent_gap:.3e} vs 1e-4"),
        ),
        check(
            "scalar_master_residual",
            max_scalar <= residual_tol,
            format!("max {max_scalar:.3e} vs {residual_tol:.1e}"),
        ),
        check(
            "vectorial_master_residual",
            max_vectorial <= residual_tol,
            format!("max {max_vectorial:.3e} vs {residual_tol:.1e}"),
        ),
    ])
}

fn run_counterexample(p: &Params, artifacts: &mut Artifacts) -> Result<Vec<CheckResult>> {
    let ts = p.ts.clone().unwrap_or(vec![0.5, 1.0, 1.5, 2.0]);
    let qs = p.qs.clone().unwrap_or(vec![-1.0, 0.0, 1.0, 10.0]);
    let mut rows = Vec::with_capacity(ts.len() * qs.len());
    let mut origin_gap = 0.0f64;
    let mut origin_rows = 0usize;
    let mut counts_ok = true;
    for &t in &ts {
        for &q in &qs {
            let s = master::counterexample_hopf_lax(t, q)?;
            rows.push(vec![
                g17(t),
                g17(q),
                g17(s.value),
                s.minimizers.len().to_string(),
                g17(*s.superdifferential.first().expect("at least one minimizer")),
                g17(*s.superdifferential.last().expect("at least one minimizer")),
            ]);
            if q == 0.0 {
                origin_rows += 1;
                // Closed forms at the origin: smooth single minimizer up to
                // t = 1, a symmetric split with an explicit value beyond.
                if t > 1.0 {
                    let value_gap = (s.value - (-0.5 * t - 0.5 / t)).abs();
                    let slope_gap = (s.slope_gap() - 2.0 * (t * t - 1.0).sqrt() / t).abs();
                    origin_gap = origin_gap.max(value_gap).max(slope_gap);
                    counts_ok &= s.minimizers.len() == 2;
                } else {
                    origin_gap = origin_gap.max((s.value + 1.0).abs()).max(s.slope_gap());
                    counts_ok &= s.minimizers.len() == 1;
                }
            }
        }
    }
    artifacts.csv(
        "counterexample.csv",
        &["t", "q", "value", "n_minimizers", "superdiff_lo", "superdiff_hi"],
        rows,
    )?;
    let mut checks = Vec::new();
    if origin_rows > 0 {
        checks.push(check(
            "origin_closed_form",
            origin_gap <= 1e-6,
            format!("worst gap {origin_gap:.3e} vs 1e-6 over {origin_rows} rows"),
        ));
        checks.push(check(
            "origin_minimizer_count",
            counts_ok,
            "two minimizers beyond t = 1, one before".to_string(),
        ));
    }
    Ok(checks)
}

fn run_convexity(
    model: &Model,
    data: &DataModel,
    p: &Params,
    seed: u64,
    artifacts: &mut Artifacts,
) -> Result<Vec<CheckResult>> {
    let d = model.dim();
    let ts = p.ts.clone().unwrap_or(vec![0.0, 0.25, 0.5, 1.0]);
    let ms = p.ms.clone().unwrap_or(vec![2, 4, 8]);
    let radius = p.radius.unwrap_or(2.0);
    let t_max = ts.iter().cloned().fold(0.0, f64::max);
    let steps = steps_for(p, t_max.max(0.25));
    let certificate = data.displacement_modulus();
    let kappa = if certificate.verdict { certificate.witness } else { 0.0 };

    let mut rows = Vec::new();
    let mut all_rows_pass = true;
    let mut floor_gap = f64::INFINITY;
    for &m in &ms {
        let cloud = sampling::cloud(&mut sampling::rng(sampling::mix(seed, m as u64)), m, d, radius);
        let mu = EmpiricalMeasure::new(d, cloud)?;
        let rows_m = value::convexity_evolution(model, data, &ts, &mu, steps)?;
        for row in rows_m {
            // At t = 0 the spectral floor kappa / m is itself checkable.
            let bar =
                if row.t == 0.0 { kappa / m as f64 - value::MIN_EIG_SLACK } else { -value::MIN_EIG_SLACK };
            let pass = row.min_eig >= bar;
            all_rows_pass &= pass;
            floor_gap = floor_gap.min(row.min_eig - bar);
            rows.push(vec![
                g17(row.t),
                m.to_string(),
                g17(row.min_eig),
                g17(bar),
                pass.to_string(),
            ]);
        }
    }
    artifacts.csv("convexity.csv", &["t", "m", "min_eig", "bar", "pass"], rows)?;
    artifacts.json("certificate.json", &certificate)?;
    Ok(vec![check(
        "eigenvalue_floor",
        all_rows_pass,
        format!("worst margin {floor_gap:.3e} (kappa {kappa:.4})"),
    )])
}

fn run_monotonicity(
    data: &DataModel,
    p: &Params,
    artifacts: &mut Artifacts,
) -> Result<Vec<CheckResult>> {
    let monotonicity = data.fourier_monotonicity()?;
    let displacement = data.displacement_modulus();
    artifacts.json("certificates.json", &vec![&monotonicity, &displacement])?;
    let mut checks = Vec::new();
    if let Some(expect) = p.expect_monotone {
        checks.push(check(
            "monotonicity_verdict",
            monotonicity.verdict == expect,
            format!(
                "expected {expect}, certified {} (witness {:.3e})",
                monotonicity.verdict, monotonicity.witness
            ),
        ));
    }
    if let Some(expect) = p.expect_displacement_convex {
        checks.push(check(
            "displacement_convexity_verdict",
            displacement.verdict == expect,
            format!(
                "expected {expect}, certified {} (kappa {:.4})",
                displacement.verdict, displacement.witness
            ),
        ));
    }
    Ok(checks)
}

/// Expected decay exponents per case, axis and class, in the emitted order.
fn blockode_targets(case: &str) -> [(&'static str, f64); 4] {
    match case {
        "source" => [("x_source", 0.0), ("x_other", -1.0), ("y_source", -1.0), ("y_other", -2.0)],
        "pair" => [("x_pair", -1.0), ("x_other", -2.0), ("y_pair", -2.0), ("y_other", -3.0)],
        "kernel" => [
            ("x_diagonal", 0.0),
            ("x_off_diagonal", -1.0),
            ("y_diagonal", -1.0),
            ("y_off_diagonal", -2.0),
        ],
        other => unreachable!("case {other} is rejected by validation"),
    }
}

fn run_blockode(p: &Params, artifacts: &mut Artifacts) -> Result<Vec<CheckResult>> {
    let t = p.t.unwrap_or(1.0);
    let ms = p.ms.clone().unwrap_or(vec![8, 32, 128]);
    if ms.len() < 2 {
        return Err(Error::invalid("blockode needs at least two particle counts".to_string()));
    }
    let cases = p
        .cases
        .clone()
        .unwrap_or_else(|| vec!["source".to_string(), "pair".to_string(), "kernel".to_string()]);

    #[derive(Serialize)]
    struct Group {
        class: String,
        max_abs: f64,
    }
    #[derive(Serialize)]
    struct BlockRecord {
        m: usize,
        case: String,
        t: f64,
        groups: Vec<Group>,
        exp_rk4_gap: f64,
    }

    let xs: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let mut max_gap = 0.0f64;
    for case in &cases {
        // Magnitudes per class, one series per (axis, class label).
        let mut series: Vec<Vec<f64>> = vec![Vec::new(); 4];
        for &m in &ms {
            let spec = flow::BlockSystemSpec {
                m,
                t,
                case: match case.as_str() {
                    "source" => flow::BlockCase::Source { i0: 0 },
                    "pair" => flow::BlockCase::Pair { j: 0, k: 1 },
                    "kernel" => flow::BlockCase::Kernel,
                    other => unreachable!("case {other} is rejected by validation"),
                },
            };
            let record = flow::block_ode_scaling(&spec)?;
            max_gap = max_gap.max(record.exp_rk4_gap);
            let mut groups = Vec::new();
            for (axis, classes) in
                [("x", &record.x_classes), ("y", &record.y_classes)]
            {
                for (ci, cm) in classes.iter().enumerate() {
                    let slot = if axis == "x" { ci } else { 2 + ci };
                    series[slot].push(cm.value);
                    groups.push(Group {
                        class: format!("{axis}_{}", cm.label),
                        max_abs: cm.value,
                    });
                    rows.push(vec![
                        m.to_string(),
                        case.clone(),
                        format!("{axis}_{}", cm.label),
                        g17(cm.value),
                    ]);
                }
            }
            records.push(BlockRecord {
                m,
                case: case.clone(),
                t,
                groups,
                exp_rk4_gap: record.exp_rk4_gap,
            });
        }
        for (slot, (label, target)) in blockode_targets(case).into_iter().enumerate() {
            let slope = crate::report::fit_loglog(&xs, &series[slot]);
            checks.push(check(
                &format!("{case}_{label}_slope"),
                (slope - target).abs() <= 0.25,
                format!("fitted {slope:.3} vs target {target:.1}"),
            ));
        }
    }
    artifacts.csv("blockode.csv", &["m", "case", "class", "max_abs"], rows)?;
    artifacts.json("blockode.json", &records)?;
    checks.push(check(
        "matrix_exponential_vs_rk4",
        max_gap <= 1e-8,
        format!("max gap {max_gap:.3e} vs 1e-8"),
    ));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_json(text: &str, seed: u64) -> (RunManifest, tempfile::TempDir) {
        let config = ExperimentConfig::from_json(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = run(&config, dir.path(), seed).unwrap();
        (manifest, dir)
    }

    #[test]
    fn audit_runs_and_passes() {
        let (manifest, dir) = run_json(
            r#"{
                "kind": "audit",
                "model": {
                    "dimension": 2,
                    "kinetic": [[2.0, 0.5], [0.5, 1.0]],
                    "potential": { "name": "gaussian", "amplitude": 0.4, "width": 1.0 }
                },
                "params": { "samples": 16 }
            }"#,
            1,
        );
        assert!(manifest.all_pass, "{:?}", manifest.checks);
        assert!(dir.path().join("audit.json").exists());
        assert!(dir.path().join("manifest.json").exists());
        assert_eq!(manifest.exit_code(), 0);
    }

    #[test]
    fn flow_runs_and_passes() {
        let (manifest, dir) = run_json(
            r#"{
                "kind": "flow",
                "model": { "potential": { "name": "gaussian", "amplitude": 0.3, "width": 1.2 } },
                "data": { "phi1": { "name": "gaussian", "amplitude": 0.25, "width": 1.1 } },
                "params": { "t": 0.5, "m": 3 }
            }"#,
            3,
        );
        assert!(manifest.all_pass, "{:?}", manifest.checks);
        let names: Vec<&str> = manifest.artifacts.iter().map(String::as_str).collect();
        assert!(names.contains(&"trajectory.csv"));
        assert!(names.contains(&"jacobian.csv"));
        let text = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        assert!(text.starts_with("s,particle,coordinate,xi,eta\r\n"));
    }

    #[test]
    fn value_runs_on_quadratic_data() {
        let (manifest, dir) = run_json(
            r#"{ "kind": "value", "params": { "samples": 3, "m": 3, "t": 0.5 } }"#,
            1,
        );
        assert!(manifest.all_pass, "{:?}", manifest.checks);
        let text = std::fs::read_to_string(dir.path().join("value.csv")).unwrap();
        // Two methods per sample plus the header line.
        assert_eq!(text.lines().count(), 1 + 2 * 3);
    }

    #[test]
    fn scaling_runs_small() {
        let (manifest, _dir) = run_json(
            r#"{
                "kind": "scaling",
                "data": {
                    "phi0": { "name": "gaussian", "amplitude": 0.3, "width": 1.2 },
                    "phi1": { "name": "gaussian", "amplitude": 0.8, "width": 2.5 }
                },
                "params": { "t": 0.25, "ms": [4, 8, 16], "seeds": 2 }
            }"#,
            1,
        );
        assert!(manifest.all_pass, "{:?}", manifest.checks);
        assert_eq!(manifest.checks.len(), 3);
    }

    #[test]
    fn master_runs_small() {
        let (manifest, dir) = run_json(
            r#"{
                "kind": "master",
                "data": {
                    "phi1": { "name": "gaussian", "amplitude": 0.1, "width": 1.0 },
                    "f_phi1": { "name": "gaussian", "amplitude": 0.1, "width": 1.2 }
                },
                "params": { "t": 0.25, "m": 2, "steps": 128 }
            }"#,
            2,
        );
        assert!(manifest.all_pass, "{:?}", manifest.checks);
        let text = std::fs::read_to_string(dir.path().join("master.csv")).unwrap();
        assert!(text.starts_with("t,q0_0,m,u,dq0u_norm,residual_scalar\r\n"));
        // One row per particle plus the off-support agent.
        assert_eq!(text.lines().count(), 1 + 3);
    }

    #[test]
    fn counterexample_runs_and_checks_closed_form() {
        let (manifest, dir) = run_json(r#"{ "kind": "counterexample" }"#, 1);
        assert!(manifest.all_pass, "{:?}", manifest.checks);
        let text = std::fs::read_to_string(dir.path().join("counterexample.csv")).unwrap();
        assert!(text.starts_with("t,q,value,n_minimizers,superdiff_lo,superdiff_hi\r\n"));
        assert_eq!(text.lines().count(), 1 + 4 * 4);
    }

    #[test]
    fn convexity_runs_small() {
        let (manifest, _dir) = run_json(
            r#"{
                "kind": "convexity",
                "data": { "phi0": { "name": "gaussian", "amplitude": 0.1, "width": 1.5 } },
                "params": { "ts": [0.0, 0.5], "ms": [2, 3], "radius": 1.0 }
            }"#,
            1,
        );
        assert!(manifest.all_pass, "{:?}", manifest.checks);
    }

    #[test]
    fn monotonicity_dichotomy_verdicts() {
        let (manifest, dir) = run_json(
            r#"{
                "kind": "monotonicity",
                "data": {
                    "lambda": 12.0,
                    "phi1": { "name": "bump", "inner": 1.0, "outer": 2.0 }
                },
                "params": { "expect_monotone": false, "expect_displacement_convex": true }
            }"#,
            1,
        );
        assert!(manifest.all_pass, "{:?}", manifest.checks);
        assert_eq!(manifest.checks.len(), 2);
        assert!(dir.path().join("certificates.json").exists());
    }

    #[test]
    fn blockode_runs_and_fits() {
        let (manifest, dir) = run_json(
            r#"{ "kind": "blockode", "params": { "ms": [8, 16, 32] } }"#,
            1,
        );
        assert!(manifest.all_pass, "{:?}", manifest.checks);
        // Three cases, four classes each, plus the integrator cross-check.
        assert_eq!(manifest.checks.len(), 13);
        assert!(dir.path().join("blockode.json").exists());
    }

    #[test]
    fn identical_runs_produce_identical_bytes() {
        let text = r#"{
            "kind": "flow",
            "model": { "potential": { "name": "gaussian", "amplitude": 0.3, "width": 1.2 } },
            "data": { "phi1": { "name": "gaussian", "amplitude": 0.25, "width": 1.1 } },
            "params": { "t": 0.25, "m": 3 }
        }"#;
        let config = ExperimentConfig::from_json(text).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run(&config, a.path(), 9).unwrap();
        run(&config, b.path(), 9).unwrap();
        for name in ["trajectory.csv", "jacobian.csv", "flow.json"] {
            let left = std::fs::read(a.path().join(name)).unwrap();
            let right = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(left, right, "{name}");
        }
    }

    #[test]
    fn different_seeds_differ() {
        let text = r#"{ "kind": "flow", "params": { "t": 0.25, "m": 3 } }"#;
        let config = ExperimentConfig::from_json(text).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run(&config, a.path(), 1).unwrap();
        run(&config, b.path(), 2).unwrap();
        let left = std::fs::read(a.path().join("trajectory.csv")).unwrap();
        let right = std::fs::read(b.path().join("trajectory.csv")).unwrap();
        assert_ne!(left, right);
    }

    #[test]
    fn explicit_points_override_sampling() {
        let (manifest, dir) = run_json(
            r#"{
                "kind": "flow",
                "params": { "t": 0.25, "points": [[0.5], [-0.25]] }
            }"#,
            1,
        );
        assert!(manifest.all_pass);
        let text = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        let first_row = text.lines().nth(1).unwrap();
        let fields: Vec<&str> = first_row.split(',').collect();
        assert_eq!(fields[3].parse::<f64>().unwrap(), 0.5);
    }

    #[test]
    fn manifest_records_failures_without_erroring() {
        // An impossible residual tolerance turns checks red but the run
        // itself succeeds, mirroring the exit-status contract.
        let (manifest, _dir) = run_json(
            r#"{
                "kind": "value",
                "data": { "phi0": { "name": "gaussian", "amplitude": 0.2, "width": 1.0 } },
                "params": { "samples": 2, "m": 2, "t": 0.25, "residual_tolerance": 1e-300 }
            }"#,
            1,
        );
        assert!(!manifest.all_pass);
        assert_eq!(manifest.exit_code(), 2);
    }
}
