//! Scenario files: parsing, validation and assembly into a runnable
//! [`Scenario`].

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calculus::{BarrierLagrangian, CalculusError, FunctionSpec, SmoothFunction};
use crate::graph::{Graph, GraphSpec};
use crate::protocols_double::SigConsensusParams;
use crate::protocols_single::{Signum, TanhConsensusParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    SingleCommon,
    SingleDat,
    DoubleCommon,
    DoubleDat,
    NominalDouble,
}

impl ControllerKind {
    pub fn is_double(self) -> bool {
        matches!(
            self,
            ControllerKind::DoubleCommon | ControllerKind::DoubleDat | ControllerKind::NominalDouble
        )
    }

    pub fn is_dat(self) -> bool {
        matches!(self, ControllerKind::SingleDat | ControllerKind::DoubleDat)
    }

    pub fn uses_barrier(self) -> bool {
        self != ControllerKind::NominalDouble
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    /// Accepted only so that it can be rejected with a clear message.
    #[serde(default, skip_serializing)]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgn_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<FunctionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<FunctionSpec>,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v0: Option<Vec<f64>>,
}

fn default_t_end() -> f64 {
    30.0
}

fn default_stride() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_stride")]
    pub log_stride: usize,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            dt: None,
            t_end: default_t_end(),
            method: Method::Euler,
            log_stride: default_stride(),
        }
    }
}

fn default_delta() -> f64 {
    1e-2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_delta")]
    pub delta0: f64,
    #[serde(default = "default_delta")]
    pub delta1: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            delta0: default_delta(),
            delta1: default_delta(),
        }
    }
}

/// Initial estimator state. Any choice must sum to zero over the agents.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorInit {
    #[default]
    Zeros,
    /// Uniform in `[-scale, scale]` per entry, then centered. Drawn from the
    /// scenario seed.
    RandomZeroSum { scale: f64 },
}

fn default_oracle_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Starting point; defaults to the centroid of the initial positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_oracle_tol")]
    pub tol: f64,
}

fn default_true() -> bool {
    true
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            x0: None,
            tol: default_oracle_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub graph: GraphSpec,
    pub dim: usize,
    pub controller: ControllerKind,
    #[serde(default)]
    pub params: ParamsConfig,
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub integration: IntegrationConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub estimator_init: EstimatorInit,
    #[serde(default)]
    pub oracle: OracleConfig,
    /// Named points reported against the final consensus point.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub reference_points: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("{path}: {message} (line {line}, column {column})")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("agent {agent} starts outside its constraint: g(x0) = {value} >= 0")]
    InfeasibleInit { agent: usize, value: f64 },
    #[error("{0}")]
    Io(String),
}

impl ScenarioError {
    fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl ScenarioConfig {
    /// Parse JSON, reporting the JSON pointer of the offending value.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = json_pointer(e.path());
            let inner = e.into_inner();
            let (line, column) = (inner.line(), inner.column());
            let full = inner.to_string();
            let message = full
                .strip_suffix(&format!(" at line {line} column {column}"))
                .unwrap_or(&full)
                .to_string();
            ScenarioError::Parse {
                path,
                line,
                column,
                message,
            }
        })
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Default step: 1e-4 with exact signum estimators, 1e-3 otherwise.
    pub fn effective_dt(&self) -> f64 {
        self.integration.dt.unwrap_or_else(|| {
            if self.controller.is_dat() && self.params.sgn_epsilon.unwrap_or(0.0) == 0.0 {
                1e-4
            } else {
                1e-3
            }
        })
    }

    /// Set a numeric parameter by name, as used by sweeps.
    pub fn set_param(&mut self, key: &str, value: f64) -> Result<(), ScenarioError> {
        let p = &mut self.params;
        let slot = match key {
            "alpha" => &mut p.alpha,
            "beta1" => &mut p.beta1,
            "beta2" => &mut p.beta2,
            "gamma1" => &mut p.gamma1,
            "gamma2" => &mut p.gamma2,
            "q" => &mut p.q,
            "a" => &mut p.a,
            "b" => &mut p.b,
            "c" => &mut p.c,
            "sgn_epsilon" => &mut p.sgn_epsilon,
            "dt" => &mut self.integration.dt,
            "t_end" => {
                self.integration.t_end = value;
                return Ok(());
            }
            other => {
                return Err(ScenarioError::invalid(
                    "/params",
                    format!("unknown parameter `{other}`"),
                ))
            }
        };
        *slot = Some(value);
        Ok(())
    }

    pub fn build(&self) -> Result<Scenario, ScenarioError> {
        Scenario::from_config(self)
    }
}

/// A validated scenario ready to simulate.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub graph: Graph,
    pub dim: usize,
    pub kind: ControllerKind,
    /// One per agent; empty for the nominal system.
    pub agents: Vec<BarrierLagrangian>,
    pub x0: Vec<DVector<f64>>,
    pub v0: Vec<DVector<f64>>,
    pub tanh: Option<TanhConsensusParams>,
    pub sig: Option<SigConsensusParams>,
    pub sgn: Signum,
    pub gains: EstimatorGains,
    pub dt: f64,
    pub t_end: f64,
    pub method: Method,
    pub log_stride: usize,
    pub tolerances: Tolerances,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct EstimatorGains {
    pub c: f64,
    pub a: f64,
    pub b: f64,
}

fn require(value: Option<f64>, key: &str) -> Result<f64, ScenarioError> {
    value.ok_or_else(|| ScenarioError::invalid(format!("/params/{key}"), "required for this controller"))
}

fn positive(value: Option<f64>, key: &str) -> Result<f64, ScenarioError> {
    let v = require(value, key)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ScenarioError::invalid(format!("/params/{key}"), format!("must be positive, got {v}")))
    }
}

fn vector(path: String, xs: &[f64], dim: usize) -> Result<DVector<f64>, ScenarioError> {
    if xs.len() != dim {
        return Err(ScenarioError::invalid(path, format!("expected {dim} entries, got {}", xs.len())));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(ScenarioError::invalid(path, "entries must be finite"));
    }
    Ok(DVector::from_column_slice(xs))
}

fn build_function(path: String, spec: &FunctionSpec, dim: usize) -> Result<Arc<dyn SmoothFunction>, ScenarioError> {
    if spec.dim() != dim {
        return Err(ScenarioError::invalid(path, format!("function has dimension {}, scenario {dim}", spec.dim())));
    }
    spec.build().map_err(|e| ScenarioError::invalid(path, e.to_string()))
}

impl Scenario {
    pub fn from_config(cfg: &ScenarioConfig) -> Result<Self, ScenarioError> {
        let kind = cfg.controller;
        let dim = cfg.dim;
        if dim == 0 {
            return Err(ScenarioError::invalid("/dim", "must be at least 1"));
        }
        let graph = cfg
            .graph
            .build()
            .map_err(|e| ScenarioError::invalid("/graph", e.to_string()))?;
        if !graph.is_connected() {
            return Err(ScenarioError::invalid("/graph", "graph must be connected"));
        }
        if cfg.agents.len() != graph.n_nodes() {
            return Err(ScenarioError::invalid(
                "/agents",
                format!("{} agents for a graph with {} nodes", cfg.agents.len(), graph.n_nodes()),
            ));
        }
        let params = &cfg.params;
        if params.p.is_some() {
            return Err(ScenarioError::invalid("/params/p", "p is derived from q as 2q/(q+1) and must not be given"));
        }
        let sgn = Signum::new(params.sgn_epsilon.unwrap_or(0.0))
            .map_err(|e| ScenarioError::invalid("/params/sgn_epsilon", e.to_string()))?;

        let alpha = if kind.uses_barrier() {
            let a = require(params.alpha, "alpha")?;
            if !(a > 1.0) {
                return Err(ScenarioError::invalid("/params/alpha", format!("must exceed 1, got {a}")));
            }
            a
        } else {
            0.0
        };

        let mut agents = Vec::new();
        let mut x0 = Vec::new();
        let mut v0 = Vec::new();
        for (i, a) in cfg.agents.iter().enumerate() {
            let base = format!("/agents/{i}");
            x0.push(vector(format!("{base}/x0"), &a.x0, dim)?);
            match (&a.v0, kind.is_double()) {
                (Some(v), true) => v0.push(vector(format!("{base}/v0"), v, dim)?),
                (None, true) => v0.push(DVector::zeros(dim)),
                (Some(_), false) => {
                    return Err(ScenarioError::invalid(format!("{base}/v0"), "single-integrator agents have no velocity state"))
                }
                (None, false) => {}
            }
            if kind.uses_barrier() {
                let f = a
                    .objective
                    .as_ref()
                    .ok_or_else(|| ScenarioError::invalid(format!("{base}/objective"), "required"))?;
                let g = a
                    .constraint
                    .as_ref()
                    .ok_or_else(|| ScenarioError::invalid(format!("{base}/constraint"), "required"))?;
                let f = build_function(format!("{base}/objective"), f, dim)?;
                let g = build_function(format!("{base}/constraint"), g, dim)?;
                let b = BarrierLagrangian::new(f, g, alpha).map_err(|e| {
                    ScenarioError::invalid(
                        match e {
                            CalculusError::DegenerateConstraint => format!("{base}/constraint"),
                            _ => base.clone(),
                        },
                        e.to_string(),
                    )
                })?;
                agents.push(b);
            }
        }

        let tanh = match kind {
            ControllerKind::SingleCommon | ControllerKind::SingleDat => Some(
                TanhConsensusParams::new(positive(params.beta1, "beta1")?, positive(params.beta2, "beta2")?)
                    .map_err(|e| ScenarioError::invalid("/params", e.to_string()))?,
            ),
            _ => None,
        };
        let sig = if kind.is_double() {
            let q = require(params.q, "q")?;
            let s = SigConsensusParams::new(positive(params.gamma1, "gamma1")?, positive(params.gamma2, "gamma2")?, q)
                .map_err(|e| ScenarioError::invalid("/params/q", e.to_string()))?;
            Some(s.with_smoothing(sgn))
        } else {
            None
        };
        let gains = match kind {
            ControllerKind::SingleDat => EstimatorGains {
                c: positive(params.c, "c")?,
                ..Default::default()
            },
            ControllerKind::DoubleDat => EstimatorGains {
                a: positive(params.a, "a")?,
                b: positive(params.b, "b")?,
                ..Default::default()
            },
            _ => EstimatorGains::default(),
        };

        let dt = cfg.effective_dt();
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ScenarioError::invalid("/integration/dt", format!("must be positive, got {dt}")));
        }
        let t_end = cfg.integration.t_end;
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(ScenarioError::invalid("/integration/t_end", format!("must be positive, got {t_end}")));
        }
        if cfg.integration.log_stride == 0 {
            return Err(ScenarioError::invalid("/integration/log_stride", "must be at least 1"));
        }
        if let EstimatorInit::RandomZeroSum { scale } = cfg.estimator_init {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(ScenarioError::invalid("/estimator_init/scale", "must be nonnegative"));
            }
        }
        for (k, p) in &cfg.reference_points {
            vector(format!("/reference_points/{k}"), p, dim)?;
        }
        if let Some(x) = &cfg.oracle.x0 {
            vector("/oracle/x0".into(), x, dim)?;
        }

        for (i, (b, x)) in agents.iter().zip(&x0).enumerate() {
            let value = b.constraint_value(x);
            if !(value < 0.0) {
                return Err(ScenarioError::InfeasibleInit { agent: i + 1, value });
            }
        }

        Ok(Scenario {
            config: cfg.clone(),
            graph,
            dim,
            kind,
            agents,
            x0,
            v0,
            tanh,
            sig,
            sgn,
            gains,
            dt,
            t_end,
            method: cfg.integration.method,
            log_stride: cfg.integration.log_stride,
            tolerances: cfg.tolerances,
            seed: cfg.seed,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn objectives(&self) -> Vec<Arc<dyn SmoothFunction>> {
        self.agents.iter().map(|b| b.objective().clone()).collect()
    }

    pub fn constraints(&self) -> Vec<Arc<dyn SmoothFunction>> {
        self.agents.iter().map(|b| b.constraint().clone()).collect()
    }
}
