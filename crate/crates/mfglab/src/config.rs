//! Experiment configuration: the JSON schema the runner consumes, its
//! validation, and the catalog printed by `mfglab list`.
//!
//! One config file describes one experiment: a model block, a data block,
//! an experiment kind and its parameters, plus an optional output
//! directory. Every parameter has a default tuned to the desk scale the
//! laboratory targets, so minimal configs stay minimal:
//!
//! ```json
//! { "kind": "counterexample" }
//! ```
//!
//! is already runnable. Unknown keys are rejected rather than ignored:
//! a typo in a tolerance should fail loudly, not silently test nothing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataModel;
use crate::error::{Error, Result};
use crate::fields::Field;
use crate::model::{Kinetic, Model};

/// Experiment families the runner understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    /// Derivative and Legendre-duality audits of the model block.
    Audit,
    /// Characteristic flow: trajectory, round trip, Jacobian determinant.
    Flow,
    /// Value function by both methods plus the HJ residual.
    Value,
    /// Derivative decay in the particle count.
    Scaling,
    /// Agent-side value, master-equation residuals.
    Master,
    /// The Hopf-Lax value that loses differentiability.
    Counterexample,
    /// Smallest Hessian eigenvalue of the value function over time.
    Convexity,
    /// Monotonicity and displacement-convexity certificates.
    Monotonicity,
    /// Linear block systems with per-class decay rates.
    Blockode,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::Audit,
        ExperimentKind::Flow,
        ExperimentKind::Value,
        ExperimentKind::Scaling,
        ExperimentKind::Master,
        ExperimentKind::Counterexample,
        ExperimentKind::Convexity,
        ExperimentKind::Monotonicity,
        ExperimentKind::Blockode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Audit => "audit",
            ExperimentKind::Flow => "flow",
            ExperimentKind::Value => "value",
            ExperimentKind::Scaling => "scaling",
            ExperimentKind::Master => "master",
            ExperimentKind::Counterexample => "counterexample",
            ExperimentKind::Convexity => "convexity",
            ExperimentKind::Monotonicity => "monotonicity",
            ExperimentKind::Blockode => "blockode",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            ExperimentKind::Audit => "model derivative and Legendre-duality audit",
            ExperimentKind::Flow => "characteristic flow, round trip, Jacobian determinant",
            ExperimentKind::Value => "value function by two methods, HJ residual",
            ExperimentKind::Scaling => "derivative decay in the particle count",
            ExperimentKind::Master => "agent value and master-equation residuals",
            ExperimentKind::Counterexample => "Hopf-Lax value losing differentiability",
            ExperimentKind::Convexity => "Hessian eigenvalue floor of the value function",
            ExperimentKind::Monotonicity => "monotonicity and displacement-convexity certificates",
            ExperimentKind::Blockode => "block linear systems with per-class decay",
        }
    }

    /// Parameter keys the kind reads, with their defaults.
    pub fn keys(self) -> &'static str {
        match self {
            ExperimentKind::Audit => "radius (3), samples (64), seed (1)",
            ExperimentKind::Flow => {
                "t (1), m (4), radius (1), seed (1), steps (256 per unit time), points (sampled)"
            }
            ExperimentKind::Value => {
                "t (0.5), m (4), samples (20), radius (1), seed (1), steps, \
                 value_tolerance (1e-4), residual_tolerance (5e-4)"
            }
            ExperimentKind::Scaling => {
                "t (0.5), ms ([4,8,16,32]), radius (1), seeds (16), seed (1), \
                 with_third (false), steps"
            }
            ExperimentKind::Master => {
                "t (0.5), m (3), radius (1), seed (1), steps, q0 (sampled), \
                 points (sampled), residual_tolerance (5e-3)"
            }
            ExperimentKind::Counterexample => "ts ([0.5,1,1.5,2]), qs ([-1,0,1,10])",
            ExperimentKind::Convexity => {
                "ts ([0,0.25,0.5,1]), ms ([2,4,8]), radius (2), seed (1), steps"
            }
            ExperimentKind::Monotonicity => {
                "expect_monotone (none), expect_displacement_convex (none)"
            }
            ExperimentKind::Blockode => "t (1), ms ([8,32,128]), cases ([source,pair,kernel])",
        }
    }
}

fn zero_field() -> Field {
    Field::Zero
}

fn default_dimension() -> usize {
    1
}

fn default_lambda() -> f64 {
    1.0
}

/// Model block: dimension, kinetic matrix, configuration potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub kinetic: Kinetic,
    #[serde(default = "zero_field")]
    pub potential: Field,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dimension: default_dimension(),
            kinetic: Kinetic::default(),
            potential: Field::Zero,
        }
    }
}

/// Data block: the convolution-family coefficients of the terminal datum
/// and the running coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Quadratic confinement weight of the terminal datum.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Bounded part of the terminal self term.
    #[serde(default = "zero_field")]
    pub phi0: Field,
    /// Terminal interaction kernel, even.
    #[serde(default = "zero_field")]
    pub phi1: Field,
    /// Running-coupling self term.
    #[serde(default = "zero_field")]
    pub f_phi: Field,
    /// Running-coupling interaction kernel, even.
    #[serde(default = "zero_field")]
    pub f_phi1: Field,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            lambda: default_lambda(),
            phi0: Field::Zero,
            phi1: Field::Zero,
            f_phi: Field::Zero,
            f_phi1: Field::Zero,
        }
    }
}

/// Kind-specific parameters. All optional; each kind fills in its own
/// defaults and rejects values outside its range.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    /// Time grid for kinds that sweep time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ts: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Particle counts for kinds that sweep m.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ms: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Sampled configurations per setting in sweep kinds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// RK4 steps per unit of integrated time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub with_third: Option<bool>,
    /// Query points of the one-dimensional counterexample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qs: Option<Vec<f64>>,
    /// Agent evaluation point for the master kind.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q0: Option<Vec<f64>>,
    /// Explicit particle cloud, one point per entry; overrides sampling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    /// Block-system cases: any of "source", "pair", "kernel".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cases: Option<Vec<String>>,
    /// Agreement bound between the two value methods.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_tolerance: Option<f64>,
    /// Bound on equation residuals (HJ, scalar and vectorial master).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_tolerance: Option<f64>,
    /// Expected monotonicity verdict; checked when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expect_monotone: Option<bool>,
    /// Expected displacement-convexity verdict; checked when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expect_displacement_convex: Option<bool>,
}

/// One experiment: blocks, kind, parameters, output location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub params: Params,
    /// Output directory; defaults to `runs/<kind>` under the working
    /// directory, overridable by `--out`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::new(
            self.model.dimension,
            self.model.kinetic.clone(),
            self.model.potential.clone(),
        )
        .map_err(|e| Error::config(format!("model block: {e}")))
    }

    pub fn build_data(&self) -> Result<DataModel> {
        DataModel::new(
            self.model.dimension,
            self.data.lambda,
            self.data.phi0.clone(),
            self.data.phi1.clone(),
            self.data.f_phi.clone(),
            self.data.f_phi1.clone(),
        )
        .map_err(|e| Error::config(format!("data block: {e}")))
    }

    /// Structural validation: blocks construct, numeric parameters sit in
    /// range. Kind-specific completeness is checked again at run time with
    /// the same error type, so a config that validates here either runs or
    /// fails with a runtime diagnostic, never with a usage error.
    pub fn validate(&self) -> Result<()> {
        self.build_model()?;
        self.build_data()?;
        let p = &self.params;
        for (key, v) in [("t", p.t), ("radius", p.radius)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::config(format!("{key} must be finite and >= 0, got {v}")));
                }
            }
        }
        if let Some(ts) = &p.ts {
            if ts.is_empty() || ts.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                return Err(Error::config("ts must be nonempty, finite and >= 0".to_string()));
            }
        }
        if let Some(qs) = &p.qs {
            if qs.is_empty() || qs.iter().any(|q| !q.is_finite()) {
                return Err(Error::config("qs must be nonempty and finite".to_string()));
            }
        }
        if p.m == Some(0) {
            return Err(Error::config("m must be >= 1".to_string()));
        }
        if let Some(ms) = &p.ms {
            if ms.is_empty() || ms.contains(&0) {
                return Err(Error::config("ms must be nonempty with entries >= 1".to_string()));
            }
            if ms.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("ms must be strictly increasing".to_string()));
            }
        }
        for (key, v) in [("seeds", p.seeds), ("steps", p.steps), ("samples", p.samples)] {
            if v == Some(0) {
                return Err(Error::config(format!("{key} must be >= 1")));
            }
        }
        for (key, v) in
            [("value_tolerance", p.value_tolerance), ("residual_tolerance", p.residual_tolerance)]
        {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::config(format!("{key} must be finite and > 0, got {v}")));
                }
            }
        }
        let d = self.model.dimension;
        if let Some(q0) = &p.q0 {
            if q0.len() != d || q0.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!(
                    "q0 must be a finite point of dimension {d}"
                )));
            }
        }
        if let Some(points) = &p.points {
            if points.is_empty() {
                return Err(Error::config("points must be nonempty".to_string()));
            }
            for pt in points {
                if pt.len() != d || pt.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config(format!(
                        "every point must be finite with dimension {d}"
                    )));
                }
            }
        }
        if let Some(cases) = &p.cases {
            if cases.is_empty() {
                return Err(Error::config("cases must be nonempty".to_string()));
            }
            for c in cases {
                if !matches!(c.as_str(), "source" | "pair" | "kernel") {
                    return Err(Error::config(format!(
                        "unknown case {c:?}; expected source, pair or kernel"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Effective seed: CLI override, then config, then 1.
    pub fn seed(&self, cli: Option<u64>) -> u64 {
        cli.or(self.params.seed).unwrap_or(1)
    }

    /// Effective output directory: CLI override, then config, then
    /// `runs/<kind>`.
    pub fn output_dir(&self, cli: Option<&Path>) -> PathBuf {
        if let Some(dir) = cli {
            return dir.to_path_buf();
        }
        if let Some(dir) = &self.output {
            return dir.clone();
        }
        PathBuf::from("runs").join(self.kind.name())
    }
}

/// FNV-1a hash of the canonical (serialized) config, hex encoded. Stable
/// across platforms; identifies which config produced an artifact set.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = ExperimentConfig::from_json(r#"{ "kind": "counterexample" }"#).unwrap();
        assert_eq!(c.kind, ExperimentKind::Counterexample);
        assert_eq!(c.model.dimension, 1);
        assert_eq!(c.data.lambda, 1.0);
        assert_eq!(c.seed(None), 1);
        assert_eq!(c.seed(Some(7)), 7);
        assert_eq!(c.output_dir(None), PathBuf::from("runs/counterexample"));
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"{
            "kind": "scaling",
            "model": {
                "dimension": 2,
                "kinetic": [[2.0, 0.5], [0.5, 1.0]],
                "potential": { "name": "gaussian", "amplitude": 0.3, "width": 1.2 }
            },
            "data": {
                "lambda": 1.0,
                "phi0": { "name": "gaussian", "amplitude": 0.3, "width": 1.2 },
                "phi1": { "name": "gaussian", "amplitude": 0.8, "width": 2.5 }
            },
            "params": { "t": 0.5, "ms": [4, 8, 16], "seeds": 4 },
            "output": "out/scaling"
        }"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(c.params.ms.as_deref(), Some(&[4, 8, 16][..]));
        let as_json = serde_json::to_string(&c).unwrap();
        let back = ExperimentConfig::from_json(&as_json).unwrap();
        assert_eq!(back, c);
        assert_eq!(config_hash(&back), config_hash(&c));
    }

    #[test]
    fn scalar_kinetic_parses() {
        let c = ExperimentConfig::from_json(
            r#"{ "kind": "flow", "model": { "dimension": 2, "kinetic": 2.5 } }"#,
        )
        .unwrap();
        assert_eq!(c.model.kinetic, Kinetic::Scalar(2.5));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(
            r#"{ "kind": "flow", "params": { "tolerance": 0.1 } }"#,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 64);
        let err =
            ExperimentConfig::from_json(r#"{ "kind": "flow", "extra": 1 }"#).unwrap_err();
        assert_eq!(err.exit_code(), 64);
    }

    #[test]
    fn malformed_json_is_a_config_error() {
        let err = ExperimentConfig::from_json("{ not json").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 64);
    }

    #[test]
    fn bad_parameters_are_rejected() {
        for text in [
            r#"{ "kind": "scaling", "params": { "ms": [8, 4] } }"#,
            r#"{ "kind": "scaling", "params": { "seeds": 0 } }"#,
            r#"{ "kind": "flow", "params": { "t": -1.0 } }"#,
            r#"{ "kind": "blockode", "params": { "cases": ["spiral"] } }"#,
            r#"{ "kind": "master", "params": { "q0": [1.0, 2.0] } }"#,
            r#"{ "kind": "value", "params": { "value_tolerance": 0.0 } }"#,
            r#"{ "kind": "flow", "model": { "dimension": 9 } }"#,
        ] {
            let err = ExperimentConfig::from_json(text).unwrap_err();
            assert_eq!(err.exit_code(), 64, "{text}");
        }
    }

    #[test]
    fn bad_data_block_is_a_config_error() {
        // Odd interaction kernels are rejected by the data constructor.
        let err = ExperimentConfig::from_json(
            r#"{ "kind": "value", "data": { "phi1": { "name": "gaussian", "amplitude": 0.2, "width": -1.0 } } }"#,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 64);
    }

    #[test]
    fn catalog_covers_every_kind() {
        assert_eq!(ExperimentKind::ALL.len(), 9);
        for kind in ExperimentKind::ALL {
            assert!(!kind.name().is_empty());
            assert!(!kind.summary().is_empty());
            assert!(!kind.keys().is_empty());
        }
        let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
        for expected in ["scaling", "counterexample", "blockode"] {
            assert!(names.contains(&expected));
        }
    }

    #[test]
    fn hash_distinguishes_configs() {
        let a = ExperimentConfig::from_json(r#"{ "kind": "counterexample" }"#).unwrap();
        let b = ExperimentConfig::from_json(
            r#"{ "kind": "counterexample", "params": { "ts": [2.0] } }"#,
        )
        .unwrap();
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
