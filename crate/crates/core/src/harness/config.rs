//! Scenario configuration in TOML.
//!
//! Every key carries its unit in the name and unknown keys are rejected.
//! Missing sections take the reference scenario values.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix6, Vector6};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{BodyState, ParamsError, SpacecraftParams};
use crate::error_system::{Gains, LoopMode};
use crate::mpc::{ConfigError as MpcConfigError, MpcConfig};
use crate::qp::{SolverKind, SolverSettings};
use crate::reference::{ConstantRate, PiecewisePolynomialRate, Reference, ReferenceSample};
use crate::so3::{exp_so3, Mat3, RotationVector, Vec3};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("spacecraft: {0}")]
    Params(#[from] ParamsError),
    #[error("mpc.{mode}: {source}")]
    Mpc {
        mode: &'static str,
        source: MpcConfigError,
    },
}

fn field(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Condensing block as an integer or `"full"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BlockSpec {
    Size(usize),
    Name(String),
}

impl BlockSpec {
    pub fn full() -> Self {
        BlockSpec::Name("full".into())
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "full" | "dense" => Ok(Self::full()),
            _ => s
                .parse::<usize>()
                .ok()
                .filter(|&m| m > 0)
                .map(BlockSpec::Size)
                .ok_or_else(|| format!("block must be a positive integer or 'full', got '{s}'")),
        }
    }

    fn check(&self, name: &str) -> Result<(), ConfigError> {
        match self {
            BlockSpec::Size(0) => Err(field(name, "block must be positive")),
            BlockSpec::Name(n) if n != "full" && n != "dense" => Err(field(name, format!("unknown block '{n}'"))),
            _ => Ok(()),
        }
    }

    /// Block size for horizon `n`; sizes above `n` mean fully condensed.
    pub fn resolve(&self, n: usize) -> usize {
        match self {
            BlockSpec::Size(m) => (*m).clamp(1, n),
            BlockSpec::Name(_) => n,
        }
    }

    pub fn label(&self) -> String {
        match self {
            BlockSpec::Size(m) => m.to_string(),
            BlockSpec::Name(_) => "full".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpacecraftConfig {
    pub inertia_kgm2: [[f64; 3]; 3],
    pub torque_min_nm: [f64; 3],
    pub torque_max_nm: [f64; 3],
    pub rate_min_rad_s: [f64; 3],
    pub rate_max_rad_s: [f64; 3],
}

impl Default for SpacecraftConfig {
    fn default() -> Self {
        Self {
            inertia_kgm2: [[85.0, 0.0, 0.0], [0.0, 94.0, 0.0], [0.0, 0.0, 92.0]],
            torque_min_nm: [-40.0; 3],
            torque_max_nm: [40.0; 3],
            rate_min_rad_s: [-0.5; 3],
            rate_max_rad_s: [0.5; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub start_s: f64,
    /// Ascending powers of `t - start_s`, one list per axis.
    pub rate_poly_x: Vec<f64>,
    pub rate_poly_y: Vec<f64>,
    pub rate_poly_z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReferenceConfig {
    ConstantRate {
        initial_attitude_rotvec_rad: [f64; 3],
        rate_rad_s: [f64; 3],
    },
    PiecewisePolynomial {
        initial_attitude_rotvec_rad: [f64; 3],
        segments: Vec<SegmentConfig>,
        integration_step_s: f64,
    },
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig::ConstantRate {
            initial_attitude_rotvec_rad: [0.0; 3],
            rate_rad_s: [0.4, 0.3, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GainsConfig {
    pub k_omega_per_s: f64,
    /// Derived from `4 k_c = k_omega^2` when absent.
    pub k_c_per_s2: Option<f64>,
}

impl Default for GainsConfig {
    fn default() -> Self {
        Self {
            k_omega_per_s: 1.2,
            k_c_per_s2: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    /// `log(R(0) R_d(0)^T)`.
    pub attitude_error_rotvec_rad: [f64; 3],
    pub body_rate_rad_s: [f64; 3],
    /// When set, the attitude error is drawn uniformly from the ball of this
    /// radius using the scenario seed.
    pub random_attitude_error_max_rad: Option<f64>,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            attitude_error_rotvec_rad: [0.24, -0.15, 0.09],
            body_rate_rad_s: [0.0; 3],
            random_attitude_error_max_rad: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    pub horizon_steps: usize,
    pub state_weight_diag: [f64; 6],
    /// Single loop defaults to `5 J^-2`, the dual loop to `100 I`.
    #[serde(default)]
    pub input_weight_diag: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub single: HorizonConfig,
    pub dual: HorizonConfig,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            single: HorizonConfig {
                horizon_steps: 11,
                state_weight_diag: [2.0, 2.0, 2.0, 3.0, 3.0, 3.0],
                input_weight_diag: None,
            },
            dual: HorizonConfig {
                horizon_steps: 11,
                state_weight_diag: [10.0, 10.0, 10.0, 1.0, 1.0, 1.0],
                input_weight_diag: Some([100.0; 3]),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SettingsConfig {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: Option<usize>,
    pub rho: f64,
    pub adaptive_rho: bool,
    pub polish: bool,
    pub time_limit_s: Option<f64>,
}

impl Default for SettingsConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            eps_abs: s.eps_abs,
            eps_rel: s.eps_rel,
            max_iter: s.max_iter,
            rho: s.rho,
            adaptive_rho: s.adaptive_rho,
            polish: s.polish,
            time_limit_s: s.time_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub horizons: Vec<usize>,
    pub blocks: Vec<BlockSpec>,
    pub solvers: Vec<String>,
    pub modes: Vec<String>,
    pub reps: usize,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
    /// Length of the recorded run that is replayed; defaults to the scenario duration.
    pub replay_duration_s: Option<f64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            horizons: vec![5, 10, 20, 40],
            blocks: vec![BlockSpec::Size(1), BlockSpec::Size(5), BlockSpec::full()],
            solvers: vec!["admm".into(), "active-set".into()],
            modes: vec!["single".into(), "dual".into()],
            reps: 3,
            threads: 0,
            replay_duration_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub dt_s: f64,
    pub solver: String,
    pub condensing_block: BlockSpec,
    pub output_dir: PathBuf,
    pub spacecraft: SpacecraftConfig,
    pub reference: ReferenceConfig,
    pub gains: GainsConfig,
    pub initial: InitialConfig,
    pub mpc: MpcSection,
    pub solver_settings: SettingsConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration_s: 25.0,
            dt_s: 0.1,
            solver: "active-set".into(),
            condensing_block: BlockSpec::full(),
            output_dir: PathBuf::from("out"),
            spacecraft: SpacecraftConfig::default(),
            reference: ReferenceConfig::default(),
            gains: GainsConfig::default(),
            initial: InitialConfig::default(),
            mpc: MpcSection::default(),
            solver_settings: SettingsConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

/// Reference trajectory selected by the configuration.
#[derive(Debug, Clone)]
pub enum ScenarioReference {
    Constant(ConstantRate),
    Piecewise(PiecewisePolynomialRate),
}

impl Reference for ScenarioReference {
    fn sample(&self, t: f64) -> ReferenceSample {
        match self {
            ScenarioReference::Constant(r) => r.sample(t),
            ScenarioReference::Piecewise(r) => r.sample(t),
        }
    }
}

/// Validated scenario with typed parts.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub params: SpacecraftParams,
    pub reference: ScenarioReference,
    pub gains: Gains,
    pub single: MpcConfig,
    pub dual: MpcConfig,
    pub solver: SolverKind,
    pub settings: SolverSettings,
    pub initial_error: Vec3,
    pub initial_rate: Vec3,
    pub steps: usize,
}

fn vec3(a: &[f64; 3]) -> Vec3 {
    Vec3::from_column_slice(a)
}

fn finite(name: &str, values: &[f64]) -> Result<(), ConfigError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(field(name, "values must be finite"))
    }
}

impl ScenarioConfig {
    pub fn from_toml(src: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(src)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&src)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<Scenario, ConfigError> {
        if !(self.dt_s > 0.0 && self.dt_s.is_finite()) {
            return Err(field("dt_s", "must be positive"));
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(field("duration_s", "must be non-negative"));
        }
        let ratio = self.duration_s / self.dt_s;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(field("duration_s", format!("{} is not a multiple of dt_s = {}", self.duration_s, self.dt_s)));
        }
        let steps = steps as usize;
        let sc = &self.spacecraft;
        finite("spacecraft.inertia_kgm2", &sc.inertia_kgm2.concat())?;
        let inertia = Mat3::from_fn(|i, j| sc.inertia_kgm2[i][j]);
        let params = SpacecraftParams::new(
            inertia,
            vec3(&sc.torque_min_nm),
            vec3(&sc.torque_max_nm),
            vec3(&sc.rate_min_rad_s),
            vec3(&sc.rate_max_rad_s),
        )?;

        let reference = match &self.reference {
            ReferenceConfig::ConstantRate {
                initial_attitude_rotvec_rad,
                rate_rad_s,
            } => {
                finite("reference.rate_rad_s", rate_rad_s)?;
                ScenarioReference::Constant(ConstantRate::new(
                    exp_so3(&RotationVector(vec3(initial_attitude_rotvec_rad))),
                    vec3(rate_rad_s),
                ))
            }
            ReferenceConfig::PiecewisePolynomial {
                initial_attitude_rotvec_rad,
                segments,
                integration_step_s,
            } => {
                if segments.first().map(|s| s.start_s) != Some(0.0) {
                    return Err(field("reference.segments", "first segment must start at 0"));
                }
                if segments.windows(2).any(|w| w[1].start_s <= w[0].start_s) {
                    return Err(field("reference.segments", "start times must increase"));
                }
                if !(*integration_step_s > 0.0) {
                    return Err(field("reference.integration_step_s", "must be positive"));
                }
                let segs = segments
                    .iter()
                    .map(|s| (s.start_s, [s.rate_poly_x.clone(), s.rate_poly_y.clone(), s.rate_poly_z.clone()]))
                    .collect();
                // Cache past the last predicted knot of the longest benchmark horizon.
                let longest = self.benchmark.horizons.iter().copied().max().unwrap_or(0).max(self.mpc.single.horizon_steps).max(self.mpc.dual.horizon_steps);
                let horizon = self.duration_s + (longest + 1) as f64 * self.dt_s;
                ScenarioReference::Piecewise(PiecewisePolynomialRate::new(
                    exp_so3(&RotationVector(vec3(initial_attitude_rotvec_rad))),
                    segs,
                    horizon,
                    *integration_step_s,
                ))
            }
        };

        let g = &self.gains;
        if !(g.k_omega_per_s > 0.0 && g.k_omega_per_s.is_finite()) {
            return Err(field("gains.k_omega_per_s", "must be positive"));
        }
        let gains = match g.k_c_per_s2 {
            Some(k_c) if k_c > 0.0 && k_c.is_finite() => Gains::new(k_c, g.k_omega_per_s),
            Some(_) => return Err(field("gains.k_c_per_s2", "must be positive")),
            None => Gains::critically_damped(g.k_omega_per_s),
        };

        let build = |mode: LoopMode, h: &HorizonConfig| -> Result<MpcConfig, ConfigError> {
            let mut c = MpcConfig::for_mode(mode, &params, gains);
            c.n_steps = h.horizon_steps;
            c.dt = self.dt_s;
            c.q = Matrix6::from_diagonal(&Vector6::from_column_slice(&h.state_weight_diag));
            if let Some(r) = h.input_weight_diag {
                c.r_input = Matrix3::from_diagonal(&vec3(&r));
            }
            c.condensing_block = self.condensing_block.resolve(h.horizon_steps.max(1));
            c.validate().map_err(|source| ConfigError::Mpc {
                mode: mode.as_str(),
                source,
            })?;
            Ok(c)
        };
        self.condensing_block.check("condensing_block")?;
        let single = build(LoopMode::Single, &self.mpc.single)?;
        let dual = build(LoopMode::Dual, &self.mpc.dual)?;

        let solver: SolverKind = self.solver.parse().map_err(|e: String| field("solver", e))?;
        let s = &self.solver_settings;
        if !(s.eps_abs >= 0.0 && s.eps_rel >= 0.0 && s.eps_abs + s.eps_rel > 0.0) {
            return Err(field("solver_settings", "tolerances must be non-negative and not both zero"));
        }
        if !(s.rho > 0.0) {
            return Err(field("solver_settings.rho", "must be positive"));
        }
        let settings = SolverSettings {
            eps_abs: s.eps_abs,
            eps_rel: s.eps_rel,
            max_iter: s.max_iter,
            rho: s.rho,
            adaptive_rho: s.adaptive_rho,
            polish: s.polish,
            time_limit: s.time_limit_s,
            ..SolverSettings::default()
        };

        let init = &self.initial;
        finite("initial.attitude_error_rotvec_rad", &init.attitude_error_rotvec_rad)?;
        finite("initial.body_rate_rad_s", &init.body_rate_rad_s)?;
        let initial_error = match init.random_attitude_error_max_rad {
            Some(r) if r >= 0.0 && r.is_finite() => random_in_ball(self.seed, r),
            Some(_) => return Err(field("initial.random_attitude_error_max_rad", "must be non-negative")),
            None => vec3(&init.attitude_error_rotvec_rad),
        };

        let b = &self.benchmark;
        if b.horizons.is_empty() || b.horizons.contains(&0) {
            return Err(field("benchmark.horizons", "need at least one positive horizon"));
        }
        for (i, blk) in b.blocks.iter().enumerate() {
            blk.check(&format!("benchmark.blocks[{i}]"))?;
        }
        for (i, s) in b.solvers.iter().enumerate() {
            s.parse::<SolverKind>().map_err(|e| field(&format!("benchmark.solvers[{i}]"), e))?;
        }
        for (i, m) in b.modes.iter().enumerate() {
            m.parse::<LoopMode>().map_err(|e| field(&format!("benchmark.modes[{i}]"), e))?;
        }
        if b.reps == 0 {
            return Err(field("benchmark.reps", "must be positive"));
        }

        Ok(Scenario {
            config: self.clone(),
            params,
            reference,
            gains,
            single,
            dual,
            solver,
            settings,
            initial_error,
            initial_rate: vec3(&init.body_rate_rad_s),
            steps,
        })
    }
}

fn random_in_ball(seed: u64, radius: f64) -> Vec3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v = Vec3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

impl Scenario {
    pub fn mpc_config(&self, mode: LoopMode) -> &MpcConfig {
        match mode {
            LoopMode::Single => &self.single,
            LoopMode::Dual => &self.dual,
        }
    }

    pub fn mpc_config_mut(&mut self, mode: LoopMode) -> &mut MpcConfig {
        match mode {
            LoopMode::Single => &mut self.single,
            LoopMode::Dual => &mut self.dual,
        }
    }

    /// `R(0) = exp(dphi_0) R_d(0)`, `omega(0)` as configured, and stored
    /// momentum chosen so that `L_body(0) = J omega_d(0)`.
    pub fn initial_state(&self) -> BodyState {
        let s0 = self.reference.sample(0.0);
        let r = exp_so3(&RotationVector(self.initial_error)).compose(&s0.r_d);
        BodyState {
            r,
            omega: self.initial_rate,
            l_inertial: r.matrix() * self.params.inertia() * s0.omega_d,
        }
    }
}
