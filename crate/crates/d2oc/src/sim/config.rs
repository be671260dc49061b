//! Scenario configuration: a hand-editable TOML schema with exhaustive
//! validation (every violation reported, not just the first) and a small
//! library of model templates for the bundled scenarios.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::AgentModel;
use crate::transport::samplers;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_bounds: Option<InputBounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineSection>,
    pub agents: Vec<AgentSection>,
    pub target: TargetSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    /// Mission length `K`; also fixes the per-step transport mass `1/K`.
    pub mission_steps: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub horizon: usize,
    /// Input penalty `R = r_scale * I`.
    #[serde(default = "default_r_scale")]
    pub r_scale: f64,
    /// One of "none", "box", "ball".
    #[serde(default = "default_constraint")]
    pub constraint: String,
    pub comm_range: f64,
    /// Confidence level for the reachability ellipsoid diagnostic.
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    /// One of "hard", "soft".
    #[serde(default = "default_selection")]
    pub selection: String,
    #[serde(default = "default_soft_lambda")]
    pub soft_lambda: f64,
    #[serde(default = "default_k_nearest")]
    pub k_nearest: usize,
    #[serde(default = "default_stride")]
    pub w2_eval_stride: usize,
    #[serde(default = "default_subsample_cap")]
    pub w2_subsample_cap: usize,
    /// One of "oracle", "kalman".
    #[serde(default = "default_estimator")]
    pub estimator: String,
    /// One of "density", "greedy".
    #[serde(default = "default_controller")]
    pub controller: String,
    /// When set, validation asserts every agent has this output relative
    /// degree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_relative_degree: Option<usize>,
}

fn default_r_scale() -> f64 {
    0.01
}
fn default_constraint() -> String {
    "box".into()
}
fn default_confidence() -> f64 {
    0.95
}
fn default_selection() -> String {
    "hard".into()
}
fn default_soft_lambda() -> f64 {
    1.0
}
fn default_k_nearest() -> usize {
    25
}
fn default_stride() -> usize {
    5
}
fn default_subsample_cap() -> usize {
    1000
}
fn default_estimator() -> String {
    "oracle".into()
}
fn default_controller() -> String {
    "density".into()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InputBounds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_min: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ball_radius: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    #[serde(default = "default_kp")]
    pub kp: f64,
    #[serde(default = "default_kd")]
    pub kd: f64,
}

fn default_kp() -> f64 {
    1.0
}
fn default_kd() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    pub model: ModelSpec,
    pub initial_mean: Vec<f64>,
    /// Covariance of the initial-state perturbation.
    pub init_perturbation: CovSpec,
    pub process_noise: CovSpec,
    pub measurement_noise: CovSpec,
}

/// Either a named template with parameters or explicit matrices.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Velocity bleed per step for the double-integrator template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<MatrixSpec>,
}

/// Row-major dense matrix with declared shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixSpec {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Dimension(format!(
                "matrix declared {}x{} but has {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// Scalar shorthand `s` (meaning `s * I`) or a full matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum CovSpec {
    Scalar(f64),
    Matrix(MatrixSpec),
}

impl CovSpec {
    pub fn to_matrix(&self, dim: usize) -> Result<DMatrix<f64>> {
        match self {
            CovSpec::Scalar(s) => {
                if *s < 0.0 {
                    return Err(Error::NotPsd(format!("scalar covariance {s} is negative")));
                }
                Ok(DMatrix::identity(dim, dim) * *s)
            }
            CovSpec::Matrix(spec) => {
                let m = spec.to_matrix()?;
                if m.nrows() != dim {
                    return Err(Error::Dimension(format!(
                        "covariance is {}x{}, expected {dim}x{dim}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                Ok(m)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    /// One of "ring", "torus", "grid"; ignored when `points` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub major_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minor_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ny: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<Vec<f64>>,
}

impl TargetSection {
    /// Materializes the target sample points.
    pub fn resolve(&self) -> Result<Vec<DVector<f64>>> {
        if let Some(points) = &self.points {
            if points.is_empty() {
                return Err(Error::InvalidMeasure("target.points is empty".into()));
            }
            let dim = points[0].len();
            if dim == 0 || points.iter().any(|p| p.len() != dim) {
                return Err(Error::InvalidMeasure(
                    "target.points have inconsistent dimensions".into(),
                ));
            }
            return Ok(points
                .iter()
                .map(|p| DVector::from_vec(p.clone()))
                .collect());
        }
        let generator = self.generator.as_deref().ok_or_else(|| {
            Error::InvalidArgument("target needs either points or a generator".into())
        })?;
        let count = self.count.unwrap_or(0);
        let seed = self.seed.unwrap_or(0);
        match generator {
            "ring" => {
                let center = two_vec(self.center.as_deref(), "target.center")?;
                let radius = self
                    .radius
                    .ok_or_else(|| Error::InvalidArgument("target.radius required".into()))?;
                Ok(samplers::ring_2d(
                    count,
                    center,
                    radius,
                    self.width.unwrap_or(0.0),
                    seed,
                ))
            }
            "torus" => {
                let c = self.center.as_deref().unwrap_or(&[0.0, 0.0, 0.0]);
                if c.len() != 3 {
                    return Err(Error::InvalidArgument(
                        "target.center must have 3 entries for the torus".into(),
                    ));
                }
                let major = self.major_radius.ok_or_else(|| {
                    Error::InvalidArgument("target.major_radius required".into())
                })?;
                let minor = self.minor_radius.ok_or_else(|| {
                    Error::InvalidArgument("target.minor_radius required".into())
                })?;
                Ok(samplers::torus_3d(count, [c[0], c[1], c[2]], major, minor, seed))
            }
            "grid" => {
                let min = two_vec(self.min.as_deref(), "target.min")?;
                let max = two_vec(self.max.as_deref(), "target.max")?;
                let nx = self
                    .nx
                    .ok_or_else(|| Error::InvalidArgument("target.nx required".into()))?;
                let ny = self
                    .ny
                    .ok_or_else(|| Error::InvalidArgument("target.ny required".into()))?;
                Ok(samplers::grid_2d(nx, ny, min, max))
            }
            other => Err(Error::InvalidArgument(format!(
                "unknown target generator '{other}'"
            ))),
        }
    }
}

fn two_vec(v: Option<&[f64]>, what: &str) -> Result<[f64; 2]> {
    match v {
        Some([a, b]) => Ok([*a, *b]),
        _ => Err(Error::InvalidArgument(format!(
            "{what} must have exactly 2 entries"
        ))),
    }
}

impl ModelSpec {
    /// Builds the `(A, B, C)` triple from the template or explicit
    /// matrices.
    pub fn to_matrices(&self) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        if let Some(template) = &self.template {
            let dt = self.dt.unwrap_or(0.1);
            if dt <= 0.0 {
                return Err(Error::InvalidArgument("model.dt must be > 0".into()));
            }
            return match template.as_str() {
                "double_integrator_2d" => {
                    Ok(double_integrator_2d(dt, self.damping.unwrap_or(0.0)))
                }
                "quadrotor_hover_12d" => Ok(quadrotor_hover_12d(dt)),
                other => Err(Error::InvalidArgument(format!(
                    "unknown model template '{other}'"
                ))),
            };
        }
        match (&self.a, &self.b, &self.c) {
            (Some(a), Some(b), Some(c)) => Ok((a.to_matrix()?, b.to_matrix()?, c.to_matrix()?)),
            _ => Err(Error::InvalidArgument(
                "model needs a template or explicit a, b, c matrices".into(),
            )),
        }
    }
}

/// Planar double integrator with Euler discretization and optional
/// per-step velocity bleed; states `[px, vx, py, vy]`, acceleration
/// inputs, position outputs. Output relative degree 2.
pub fn double_integrator_2d(dt: f64, damping: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let v = 1.0 - damping;
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        1.0,  dt, 0.0, 0.0,
        0.0,   v, 0.0, 0.0,
        0.0, 0.0, 1.0,  dt,
        0.0, 0.0, 0.0,   v,
    ]);
    #[rustfmt::skip]
    let b = DMatrix::from_row_slice(4, 2, &[
        0.0, 0.0,
         dt, 0.0,
        0.0, 0.0,
        0.0,  dt,
    ]);
    #[rustfmt::skip]
    let c = DMatrix::from_row_slice(2, 4, &[
        1.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 1.0, 0.0,
    ]);
    (a, b, c)
}

/// Hover-linearized quadrotor reconstruction with twelve states,
/// four inputs, and position outputs, discretized by forward Euler.
///
/// States: `[x, vx, y, vy, z, vz, roll, roll_rate, pitch, pitch_rate,
/// thrust, thrust_rate]`. Lateral position is driven through the
/// attitude chains (`torque -> rate -> angle -> acceleration`), vertical
/// position through a second-order collective-thrust actuator, so every
/// input reaches the position outputs only after four steps: output
/// relative degree 4. Yaw is omitted; position outputs at hover are
/// yaw-invariant, and the two collective channels (upper/lower rotor
/// pair) take its input slots.
pub fn quadrotor_hover_12d(dt: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let gravity = 9.81;
    let inertia_roll = 0.02;
    let inertia_pitch = 0.02;
    let mass = 1.0;
    let actuator_omega = 2.0;
    let actuator_zeta = 0.7;
    let collective_upper = 300.0;
    let collective_lower = 150.0;

    let n = 12;
    let mut a = DMatrix::identity(n, n);
    // x-chain: x <- vx <- pitch.
    a[(0, 1)] = dt;
    a[(1, 8)] = dt * gravity;
    // y-chain: y <- vy <- -roll.
    a[(2, 3)] = dt;
    a[(3, 6)] = -dt * gravity;
    // z-chain: z <- vz <- thrust.
    a[(4, 5)] = dt;
    a[(5, 10)] = dt / mass;
    // attitude integrators.
    a[(6, 7)] = dt;
    a[(8, 9)] = dt;
    // thrust actuator: second-order lag.
    a[(10, 11)] = dt;
    a[(11, 10)] = -dt * actuator_omega * actuator_omega;
    a[(11, 11)] = 1.0 - dt * 2.0 * actuator_zeta * actuator_omega;

    let mut b = DMatrix::zeros(n, 4);
    b[(7, 0)] = dt / inertia_roll;
    b[(9, 1)] = dt / inertia_pitch;
    b[(11, 2)] = dt * collective_upper;
    b[(11, 3)] = dt * collective_lower;

    let mut c = DMatrix::zeros(3, n);
    c[(0, 0)] = 1.0;
    c[(1, 2)] = 1.0;
    c[(2, 4)] = 1.0;
    (a, b, c)
}

impl AgentSection {
    pub fn build_model(&self) -> Result<AgentModel> {
        let (a, b, c) = self.model.to_matrices()?;
        let n = a.nrows();
        let d = c.nrows();
        let sigma_w = self.process_noise.to_matrix(n)?;
        let sigma_v = self.measurement_noise.to_matrix(d)?;
        AgentModel::new(a, b, c, sigma_w, sigma_v)
    }

    pub fn initial_mean_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.initial_mean.clone())
    }
}

impl ScenarioConfig {
    /// Collects every validation violation; empty means the config is
    /// runnable.
    pub fn validate(&self) -> Vec<String> {
        let mut violations = Vec::new();
        let s = &self.scenario;
        if s.mission_steps == 0 {
            violations.push("scenario.mission_steps must be >= 1".into());
        }
        if s.runs == 0 {
            violations.push("scenario.runs must be >= 1".into());
        }
        if s.horizon == 0 {
            violations.push("scenario.horizon must be >= 1".into());
        }
        if s.r_scale <= 0.0 {
            violations.push("scenario.r_scale must be > 0".into());
        }
        if s.comm_range <= 0.0 {
            violations.push("scenario.comm_range must be > 0".into());
        }
        if !(s.confidence > 0.0 && s.confidence < 1.0) {
            violations.push("scenario.confidence must lie in (0, 1)".into());
        }
        if s.k_nearest == 0 {
            violations.push("scenario.k_nearest must be >= 1".into());
        }
        if s.w2_eval_stride == 0 {
            violations.push("scenario.w2_eval_stride must be >= 1".into());
        }
        if s.w2_subsample_cap == 0 {
            violations.push("scenario.w2_subsample_cap must be >= 1".into());
        }
        match s.selection.as_str() {
            "hard" => {}
            "soft" => {
                if s.soft_lambda <= 0.0 {
                    violations.push("scenario.soft_lambda must be > 0 for soft selection".into());
                }
            }
            other => violations.push(format!("scenario.selection '{other}' is not hard|soft")),
        }
        match s.estimator.as_str() {
            "oracle" | "kalman" => {}
            other => violations.push(format!("scenario.estimator '{other}' is not oracle|kalman")),
        }
        match s.controller.as_str() {
            "density" | "greedy" => {}
            other => {
                violations.push(format!("scenario.controller '{other}' is not density|greedy"))
            }
        }
        if let Some(b) = &self.baseline {
            if b.kp <= 0.0 {
                violations.push("baseline.kp must be > 0".into());
            }
            if b.kd < 0.0 {
                violations.push("baseline.kd must be >= 0".into());
            }
        }

        let target_points = match self.target.resolve() {
            Ok(points) => Some(points),
            Err(e) => {
                violations.push(format!("target: {e}"));
                None
            }
        };

        if self.agents.is_empty() {
            violations.push("at least one agent is required".into());
        }

        let mut input_dims = Vec::new();
        let mut output_dims = Vec::new();
        for (i, agent) in self.agents.iter().enumerate() {
            let model = match agent.build_model() {
                Ok(m) => m,
                Err(e) => {
                    violations.push(format!("agents[{i}]: {e}"));
                    continue;
                }
            };
            input_dims.push(model.input_dim());
            output_dims.push(model.output_dim());
            if agent.initial_mean.len() != model.state_dim() {
                violations.push(format!(
                    "agents[{i}].initial_mean has length {}, state dimension is {}",
                    agent.initial_mean.len(),
                    model.state_dim()
                ));
            }
            if let Err(e) = agent.init_perturbation.to_matrix(model.state_dim()) {
                violations.push(format!("agents[{i}].init_perturbation: {e}"));
            }
            let report = model.check_assumptions();
            if !report.controllable {
                violations.push(format!("agents[{i}]: model is not controllable"));
            }
            if !report.marginally_stable {
                violations.push(format!(
                    "agents[{i}]: model is not marginally stable ({})",
                    report.details.join("; ")
                ));
            }
            match model.relative_degree() {
                None => violations.push(format!(
                    "agents[{i}]: output relative degree undefined"
                )),
                Some(r) => {
                    if let Some(expected) = s.expect_relative_degree {
                        if r != expected {
                            violations.push(format!(
                                "agents[{i}]: relative degree {r} != expected {expected}"
                            ));
                        }
                    }
                }
            }
            if let Some(points) = &target_points {
                if points[0].len() != model.output_dim() {
                    violations.push(format!(
                        "agents[{i}]: output dimension {} does not match target dimension {}",
                        model.output_dim(),
                        points[0].len()
                    ));
                }
            }
        }
        if input_dims.windows(2).any(|w| w[0] != w[1]) {
            violations.push("all agents must share one input dimension".into());
        }
        if output_dims.windows(2).any(|w| w[0] != w[1]) {
            violations.push("all agents must share one output dimension".into());
        }

        match s.constraint.as_str() {
            "none" => {}
            "box" => match &self.input_bounds {
                None => violations.push("constraint 'box' requires [input_bounds]".into()),
                Some(bounds) => match (&bounds.u_min, &bounds.u_max) {
                    (Some(lo), Some(hi)) => {
                        if lo.len() != hi.len() {
                            violations
                                .push("input_bounds.u_min and u_max lengths differ".into());
                        }
                        if lo.iter().zip(hi).any(|(a, b)| a > b) {
                            violations.push("input_bounds requires u_min <= u_max".into());
                        }
                        if let Some(m) = input_dims.first() {
                            if lo.len() != *m {
                                violations.push(format!(
                                    "input_bounds length {} != input dimension {m}",
                                    lo.len()
                                ));
                            }
                        }
                    }
                    _ => violations
                        .push("constraint 'box' requires input_bounds.u_min and u_max".into()),
                },
            },
            "ball" => match self.input_bounds.as_ref().and_then(|b| b.ball_radius) {
                Some(r) if r > 0.0 => {}
                Some(_) => violations.push("input_bounds.ball_radius must be > 0".into()),
                None => {
                    violations.push("constraint 'ball' requires input_bounds.ball_radius".into())
                }
            },
            other => violations.push(format!(
                "scenario.constraint '{other}' is not none|box|ball"
            )),
        }

        violations
    }
}

/// Parses and validates a scenario file; every violation is reported.
pub fn load_config(path: &str) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

/// Parses and validates from a TOML string (path only labels errors).
pub fn parse_config(text: &str, path: &str) -> Result<ScenarioConfig> {
    let config: ScenarioConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
        path: path.into(),
        message: e.to_string(),
    })?;
    let violations = config.validate();
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(Error::ConfigInvalid(violations))
    }
}
