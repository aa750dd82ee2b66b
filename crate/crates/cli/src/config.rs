//! Experiment configuration: one TOML file per experiment, validated before
//! any computation. Shipped presets cover the heat, hyperbolic and HJB
//! experiments at desk and paper scale.

use std::path::{Path, PathBuf};

use paramflow::control::ControlNetSpec;
use paramflow::odesolve::SolverSpec;
use paramflow::optim::AdamConfig;
use paramflow::oracle::{MarchConfig, MarchScheme};
use paramflow::pde::OperatorSpec;
use paramflow::rom::{InitSampler, MixturePart, ModelSpec};
use paramflow::sampling::XSampler;
use paramflow::trainer::{GradientMethod, LrSchedule, NlsConfig, ResidualNorm, StopRule, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Heat,
    TanhFlux,
    Hjb,
    Custom,
}

impl std::str::FromStr for Experiment {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat" => Ok(Experiment::Heat),
            "tanh_flux" | "hyperbolic" => Ok(Experiment::TanhFlux),
            "hjb" => Ok(Experiment::Hjb),
            "custom" => Ok(Experiment::Custom),
            other => Err(CliError::Config(format!(
                "unknown experiment `{other}` (expected heat | tanh_flux | hjb)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(CliError::Config(format!("unknown scale `{other}` (expected desk | paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Accumulated residual along controlled trajectories.
    Trajectory,
    /// Pointwise least squares over sampled parameters.
    Nls,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub width: usize,
    pub depth: usize,
    /// Initial bias of the gate's output unit.
    #[serde(default)]
    pub gate_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub method: Method,
    pub batch_size: usize,
    pub n_points: usize,
    pub horizon: f64,
    pub solver: SolverSpec,
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub max_iters: usize,
    pub stop: StopRule,
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default = "one")]
    pub aug_weight: f64,
    #[serde(default = "eight")]
    pub aug_batch: usize,
    #[serde(default)]
    pub residual_norm: ResidualNorm,
    #[serde(default)]
    pub gradient: GradientMethod,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Parameter points per step for the least-squares baseline; defaults
    /// to the trajectory method's stage evaluations per step.
    #[serde(default)]
    pub nls_batch: Option<usize>,
    /// `reproduce` also trains the least-squares baseline and compares.
    #[serde(default)]
    pub compare_nls: bool,
}

fn one() -> f64 {
    1.0
}

fn eight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialsSection {
    /// Training pool for the trajectory method.
    pub pool: InitSampler,
    pub pool_size: usize,
    /// Parameter set for the least-squares baseline; defaults to `pool`.
    #[serde(default)]
    pub nls_pool: Option<InitSampler>,
    pub held_out: InitSampler,
    pub held_out_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsSection {
    pub count: usize,
    pub sampler: InitSampler,
    pub steps: usize,
    #[serde(default = "ridge")]
    pub lambda: f64,
    pub n_points: usize,
    #[serde(default = "euler_scheme")]
    pub scheme: MarchScheme,
}

fn ridge() -> f64 {
    1e-8
}

fn euler_scheme() -> MarchScheme {
    MarchScheme::Euler
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Spectral solution of the periodic heat equation.
    PeriodicHeat,
    /// Upwind reference for 1-d-structured initials.
    Upwind,
    ColeHopf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub oracle: OracleKind,
    pub times: Vec<f64>,
    pub n_points: usize,
    pub solver: SolverSpec,
    /// Sampler for the error integrals; defaults to the training sampler.
    #[serde(default)]
    pub x_sampler: Option<XSampler>,
    /// Fourier modes per axis for the spectral heat oracle.
    #[serde(default = "spectral_modes")]
    pub spectral_modes: usize,
    #[serde(default = "upwind_steps")]
    pub upwind_steps: usize,
    #[serde(default = "upwind_cells")]
    pub upwind_cells: usize,
    #[serde(default = "cole_hopf_samples")]
    pub cole_hopf_samples: usize,
    /// Acceptance thresholds `(t, max mean error)`, reported in the summary.
    #[serde(default)]
    pub thresholds: Vec<(f64, f64)>,
}

fn spectral_modes() -> usize {
    32
}
fn upwind_steps() -> usize {
    4000
}
fn upwind_cells() -> usize {
    1000
}
fn cole_hopf_samples() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSection {
    pub costs: usize,
    pub starts: usize,
    pub paths_per_start: usize,
    pub dt: f64,
    /// Starting points are uniform on `[−half_width, half_width]` per axis.
    pub half_width: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Worker threads; 0 keeps the default pool.
    #[serde(default)]
    pub threads: usize,
    /// Single-threaded, bitwise-reproducible execution.
    #[serde(default)]
    pub deterministic: bool,
    pub model: ModelSpec,
    pub operator: OperatorSpec,
    pub control: ControlSection,
    pub train: TrainSection,
    pub initials: InitialsSection,
    #[serde(default)]
    pub x_sampler: Option<XSampler>,
    #[serde(default)]
    pub targets: Option<TargetsSection>,
    pub eval: EvalSection,
    #[serde(default)]
    pub demo: Option<DemoSection>,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn control_spec(&self) -> ControlNetSpec {
        ControlNetSpec::new(self.model.n_params(), self.control.width, self.control.depth)
    }

    pub fn x_sampler(&self) -> XSampler {
        self.x_sampler
            .clone()
            .unwrap_or_else(|| XSampler::default_for(&self.model))
    }

    pub fn eval_sampler(&self) -> XSampler {
        self.eval.x_sampler.clone().unwrap_or_else(|| self.x_sampler())
    }

    pub fn exec_mode(&self) -> paramflow::par::ExecMode {
        if self.deterministic {
            paramflow::par::ExecMode::Sequential
        } else {
            paramflow::par::ExecMode::Parallel
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            n_points: t.n_points,
            horizon: t.horizon,
            solver: t.solver,
            adam: AdamConfig {
                lr: t.lr,
                ..AdamConfig::default()
            },
            schedule: t.schedule,
            max_iters: t.max_iters,
            stop: t.stop,
            tolerance: t.tolerance,
            aug_weight: t.aug_weight,
            aug_batch: t.aug_batch,
            x_sampler: Some(self.x_sampler()),
            gradient: t.gradient,
            clip_norm: t.clip_norm,
            seed: self.seed,
            exec: self.exec_mode(),
        }
    }

    /// Stage evaluations per trajectory step: the matched per-step budget
    /// of parameter points for the least-squares baseline.
    pub fn matched_nls_batch(&self) -> usize {
        let t = &self.train;
        let stages = match t.solver.kind {
            paramflow::odesolve::SolverKind::Euler => 1,
            _ => 4,
        };
        t.batch_size * stages * t.solver.steps
    }

    pub fn nls_config(&self) -> NlsConfig {
        let t = &self.train;
        NlsConfig {
            batch_size: t.nls_batch.unwrap_or_else(|| self.matched_nls_batch()),
            n_points: t.n_points,
            adam: AdamConfig {
                lr: t.lr,
                ..AdamConfig::default()
            },
            schedule: t.schedule,
            max_iters: t.max_iters,
            x_sampler: Some(self.x_sampler()),
            clip_norm: t.clip_norm,
            seed: self.seed,
            exec: self.exec_mode(),
        }
    }

    pub fn march_config(&self) -> Option<MarchConfig> {
        self.targets.as_ref().map(|t| MarchConfig {
            dt: self.train.horizon / t.steps as f64,
            steps: t.steps,
            lambda: t.lambda,
            n_points: t.n_points,
            scheme: t.scheme,
            x_sampler: Some(self.x_sampler()),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model.validate()?;
        self.operator.validate()?;
        self.operator.check_pairing(&self.model)?;
        self.control_spec().validate()?;
        self.train_config().validate()?;
        self.initials.pool.validate(&self.model)?;
        self.initials.held_out.validate(&self.model)?;
        if let Some(s) = &self.initials.nls_pool {
            s.validate(&self.model)?;
        }
        if self.initials.pool_size == 0 || self.initials.held_out_count == 0 {
            return bad("initials.pool_size and initials.held_out_count must be at least 1".into());
        }
        if self.train.batch_size > self.initials.pool_size {
            return bad(format!(
                "train.batch_size ({}) exceeds initials.pool_size ({})",
                self.train.batch_size, self.initials.pool_size
            ));
        }
        self.x_sampler().validate()?;
        self.eval_sampler().validate()?;
        if let Some(t) = &self.targets {
            t.sampler.validate(&self.model)?;
            if t.count == 0 || t.steps == 0 || t.n_points == 0 {
                return bad("targets.count, targets.steps and targets.n_points must be at least 1".into());
            }
        }
        let e = &self.eval;
        if e.times.is_empty() || e.n_points == 0 {
            return bad("eval.times must be nonempty and eval.n_points at least 1".into());
        }
        if e.times.iter().any(|&t| !(0.0..=self.train.horizon).contains(&t)) {
            return bad(format!("eval.times must lie in [0, {}]", self.train.horizon));
        }
        if e.times.windows(2).any(|w| w[1] <= w[0]) {
            return bad("eval.times must be strictly increasing".into());
        }
        e.solver.validate()?;
        let oracle_ok = matches!(
            (e.oracle, self.operator),
            (OracleKind::PeriodicHeat, OperatorSpec::Heat)
                | (OracleKind::Upwind, OperatorSpec::TanhFlux { .. })
                | (OracleKind::ColeHopf, OperatorSpec::Hjb { .. })
        );
        if !oracle_ok {
            return bad(format!("eval.oracle {:?} does not match operator {}", e.oracle, self.operator.name()));
        }
        if e.oracle == OracleKind::PeriodicHeat && !self.model.is_periodic() {
            return bad("periodic_heat oracle needs a periodic model".into());
        }
        if let Some(d) = &self.demo {
            if !matches!(self.operator, OperatorSpec::Hjb { .. }) {
                return bad("demo needs the hjb operator".into());
            }
            if d.costs == 0 || d.starts == 0 || d.paths_per_start == 0 || !(d.dt > 0.0) {
                return bad("demo counts must be at least 1 and demo.dt positive".into());
            }
            if d.costs > self.initials.held_out_count {
                return bad(format!(
                    "demo.costs ({}) exceeds initials.held_out_count ({})",
                    d.costs, self.initials.held_out_count
                ));
            }
            if d.half_width.len() != self.model.dim {
                return bad(format!(
                    "demo.half_width has {} entries, expected {}",
                    d.half_width.len(),
                    self.model.dim
                ));
            }
        }
        if self.control.width == 0 {
            return bad("control.width must be at least 1".into());
        }
        Ok(())
    }

    /// Shipped configuration for `experiment` at `scale`.
    pub fn preset(experiment: Experiment, scale: Scale) -> Result<Self> {
        match experiment {
            Experiment::Heat => Ok(heat(scale)),
            Experiment::TanhFlux => Ok(tanh_flux(scale)),
            Experiment::Hjb => Ok(hjb(scale)),
            Experiment::Custom => Err(CliError::Config("there is no preset for `custom`".into())),
        }
    }
}

fn paper_stop() -> StopRule {
    StopRule::default()
}

fn heat(scale: Scale) -> ExperimentConfig {
    let desk = scale == Scale::Desk;
    let model = if desk {
        ModelSpec::periodic_sine_tanh(2, 10)
    } else {
        ModelSpec::periodic_sine_tanh(10, 80)
    };
    let gaussian = InitSampler::Gaussian {
        mean: 0.0,
        variance: 0.5,
    };
    let ball_and_gaussian = InitSampler::Mixture {
        parts: vec![
            MixturePart {
                weight: 2.0,
                sampler: InitSampler::UniformBall { radius: 20.0 },
            },
            MixturePart {
                weight: 1.0,
                sampler: gaussian.clone(),
            },
        ],
    };
    ExperimentConfig {
        experiment: Experiment::Heat,
        seed: 7,
        output_dir: PathBuf::from("runs/heat"),
        threads: 0,
        deterministic: false,
        model,
        operator: OperatorSpec::Heat,
        control: ControlSection {
            width: if desk { 64 } else { 1000 },
            depth: if desk { 3 } else { 5 },
            gate_bias: 0.0,
        },
        train: TrainSection {
            method: Method::Trajectory,
            batch_size: if desk { 8 } else { 100 },
            n_points: if desk { 64 } else { 1000 },
            horizon: 0.1,
            solver: SolverSpec::rk4(if desk { 10 } else { 20 }),
            lr: if desk { 2e-3 } else { 5e-4 },
            schedule: if desk {
                LrSchedule::Cosine { final_fraction: 0.05 }
            } else {
                LrSchedule::Constant
            },
            max_iters: if desk { 2000 } else { 10_000 },
            stop: if desk { StopRule::disabled() } else { paper_stop() },
            tolerance: None,
            aug_weight: 1.0,
            aug_batch: 8,
            residual_norm: ResidualNorm::L2,
            gradient: GradientMethod::Adjoint,
            clip_norm: None,
            nls_batch: None,
            compare_nls: desk,
        },
        initials: InitialsSection {
            pool: if desk { gaussian.clone() } else { ball_and_gaussian.clone() },
            pool_size: if desk { 3000 } else { 150_000 },
            nls_pool: Some(ball_and_gaussian),
            held_out: gaussian,
            held_out_count: if desk { 20 } else { 100 },
        },
        x_sampler: Some(XSampler::UniformBox { half_width: 1.0 }),
        targets: None,
        eval: EvalSection {
            oracle: OracleKind::PeriodicHeat,
            times: vec![0.0, 0.01, 0.02, 0.04, 0.06, 0.08, 0.1],
            n_points: if desk { 2000 } else { 10_000 },
            solver: SolverSpec::dopri5(1e-6, 1e-8),
            x_sampler: None,
            spectral_modes: if desk { 32 } else { 8 },
            upwind_steps: 4000,
            upwind_cells: 1000,
            cole_hopf_samples: 20_000,
            thresholds: if desk { vec![(0.01, 0.02), (0.1, 0.08)] } else { vec![(0.01, 0.003), (0.1, 0.04)] },
        },
        demo: None,
    }
}

fn tanh_flux(scale: Scale) -> ExperimentConfig {
    let desk = scale == Scale::Desk;
    let model = if desk {
        ModelSpec::periodic_sine_tanh(2, 10)
    } else {
        ModelSpec::periodic_sine_tanh(10, 80)
    };
    let general = InitSampler::SineTanhBlocks {
        one_dimensional: false,
        c_radius: 1.0,
        beta: None,
    };
    let one_d = InitSampler::SineTanhBlocks {
        one_dimensional: true,
        c_radius: 1.0,
        beta: None,
    };
    ExperimentConfig {
        experiment: Experiment::TanhFlux,
        seed: 11,
        output_dir: PathBuf::from("runs/tanh_flux"),
        threads: 0,
        deterministic: false,
        model,
        operator: OperatorSpec::TanhFlux { speed: 2.0 },
        control: ControlSection {
            width: if desk { 64 } else { 600 },
            depth: if desk { 3 } else { 5 },
            gate_bias: 0.0,
        },
        train: TrainSection {
            method: Method::Trajectory,
            batch_size: if desk { 8 } else { 100 },
            n_points: if desk { 64 } else { 1000 },
            horizon: 0.15,
            solver: SolverSpec::rk4(if desk { 10 } else { 20 }),
            lr: 5e-4,
            schedule: if desk {
                LrSchedule::Cosine { final_fraction: 0.05 }
            } else {
                LrSchedule::Constant
            },
            max_iters: if desk { 2000 } else { 10_000 },
            stop: if desk { StopRule::disabled() } else { paper_stop() },
            tolerance: None,
            aug_weight: 1.0,
            aug_batch: 8,
            residual_norm: ResidualNorm::L2,
            gradient: GradientMethod::Adjoint,
            clip_norm: None,
            nls_batch: None,
            compare_nls: false,
        },
        initials: InitialsSection {
            pool: general,
            pool_size: if desk { 3000 } else { 150_000 },
            nls_pool: None,
            held_out: one_d.clone(),
            held_out_count: if desk { 10 } else { 100 },
        },
        x_sampler: Some(XSampler::UniformBox { half_width: 1.0 }),
        targets: Some(TargetsSection {
            count: if desk { 100 } else { 1000 },
            sampler: one_d,
            steps: 150,
            lambda: 1e-8,
            n_points: if desk { 1000 } else { 10_000 },
            scheme: MarchScheme::Euler,
        }),
        eval: EvalSection {
            oracle: OracleKind::Upwind,
            times: vec![0.0, 0.03, 0.06, 0.09, 0.12, 0.15],
            n_points: if desk { 2000 } else { 10_000 },
            solver: SolverSpec::dopri5(1e-6, 1e-8),
            x_sampler: None,
            spectral_modes: 32,
            upwind_steps: 4000,
            upwind_cells: 1000,
            cole_hopf_samples: 20_000,
            thresholds: if desk { vec![(0.15, 0.10)] } else { vec![(0.15, 0.04)] },
        },
        demo: None,
    }
}

/// Terminal costs `Σ cᵢ exp(−|x − bᵢ|²/σᵢ²)` used for held-out evaluation.
pub fn hjb_cost_family() -> InitSampler {
    InitSampler::KernelSum {
        c_min: -1.0,
        c_max: 0.0,
        sigma2_min: 0.5,
        sigma2_max: 20.0,
        b_max: 2.0,
    }
}

fn hjb(scale: Scale) -> ExperimentConfig {
    let desk = scale == Scale::Desk;
    let model = if desk {
        ModelSpec::gaussian_mixture(2, 8)
    } else {
        ModelSpec::gaussian_mixture(8, 50)
    };
    let mut half_width = vec![1.0; model.dim];
    half_width[0] = 1.5;
    half_width[1] = 1.5;
    ExperimentConfig {
        experiment: Experiment::Hjb,
        seed: 13,
        output_dir: PathBuf::from("runs/hjb"),
        threads: 0,
        deterministic: false,
        model,
        operator: OperatorSpec::Hjb { epsilon: 0.2 },
        control: ControlSection {
            width: if desk { 64 } else { 1000 },
            depth: if desk { 3 } else { 5 },
            gate_bias: -4.0,
        },
        train: TrainSection {
            method: Method::Trajectory,
            batch_size: if desk { 8 } else { 512 },
            n_points: if desk { 64 } else { 1000 },
            horizon: 1.0,
            solver: SolverSpec::rk4(if desk { 10 } else { 20 }),
            lr: 5e-4,
            schedule: if desk {
                LrSchedule::Cosine { final_fraction: 0.05 }
            } else {
                LrSchedule::Constant
            },
            max_iters: if desk { 2000 } else { 10_000 },
            stop: if desk { StopRule::disabled() } else { paper_stop() },
            tolerance: None,
            aug_weight: 1.0,
            aug_batch: 8,
            residual_norm: ResidualNorm::L2,
            gradient: GradientMethod::Adjoint,
            clip_norm: None,
            nls_batch: None,
            compare_nls: false,
        },
        initials: InitialsSection {
            pool: InitSampler::hjb_box(),
            pool_size: if desk { 2000 } else { 100_000 },
            nls_pool: None,
            held_out: hjb_cost_family(),
            held_out_count: if desk { 10 } else { 100 },
        },
        x_sampler: Some(XSampler::ModelDensity {
            defensive: 0.2,
            broad_std: 3.0,
        }),
        targets: Some(TargetsSection {
            count: if desk { 50 } else { 250 },
            sampler: InitSampler::hjb_box(),
            steps: 100,
            lambda: 1e-8,
            n_points: if desk { 1000 } else { 10_000 },
            scheme: MarchScheme::Euler,
        }),
        eval: EvalSection {
            oracle: OracleKind::ColeHopf,
            times: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            n_points: if desk { 400 } else { 2000 },
            solver: SolverSpec::dopri5(1e-6, 1e-8),
            x_sampler: None,
            spectral_modes: 32,
            upwind_steps: 4000,
            upwind_cells: 1000,
            cole_hopf_samples: 20_000,
            thresholds: [0.25, 0.5, 0.75, 1.0]
                .iter()
                .map(|&t| (t, if desk { 0.12 } else { 0.075 }))
                .collect(),
        },
        demo: Some(DemoSection {
            costs: if desk { 10 } else { 5 },
            starts: 50,
            paths_per_start: 20,
            dt: 1e-3,
            half_width,
        }),
    }
}
