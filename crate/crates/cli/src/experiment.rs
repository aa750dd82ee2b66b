//! The train → solve → evaluate pipeline behind the subcommands.

use std::cell::RefCell;
use std::fs;
use std::path::Path;
use std::time::Instant;

use paramflow::control::ControlNet;
use paramflow::odesolve::{euler_maruyama, integrate, SdeSpec, SolveStats, SolverKind, SolverSpec};
use paramflow::oracle::{
    aggregate_curves, cole_hopf, relative_error, time_march_targets, upwind_1d, CurveStat, ErrorPoint,
    PeriodicHeat, TargetSet,
};
use paramflow::par;
use paramflow::pde::OperatorSpec;
use paramflow::rom::{sample_initials, InitSampler, ModelSpec, ParamVector};
use paramflow::trainer::{nls_train, train, Dynamics, LogRow, ResidualModel, StopReason, TrainReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method, OracleKind};
use crate::error::{CliError, Result};

/// ChaCha stream numbers. Every random quantity in a run comes from its own
/// stream of the configured seed, so the held-out set can never coincide
/// with a training draw.
pub mod stream {
    pub const POOL: u64 = 0;
    pub const HELD_OUT: u64 = 1;
    pub const TARGETS: u64 = 2;
    pub const NLS_POOL: u64 = 3;
    pub const INIT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const DEMO: u64 = 6;
    pub const SOLVE: u64 = 7;
    pub const FIT: u64 = 8;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for helpers that spread their own work over streams `0..n`.
pub fn derived_seed(seed: u64, tag: u64) -> u64 {
    seed ^ (tag + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Draws `first..first + count` of one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub stream: u64,
    pub first: u64,
    pub count: u64,
}

impl SampleRecord {
    pub fn overlaps(&self, other: &SampleRecord) -> bool {
        self.stream == other.stream && self.first < other.first + other.count && other.first < self.first + self.count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub record: SampleRecord,
    pub params: Vec<Vec<f64>>,
}

pub fn draw(sampler: &InitSampler, model: &ModelSpec, count: usize, seed: u64, stream: u64) -> Result<Samples> {
    let mut rng = stream_rng(seed, stream);
    let params = sample_initials(sampler, model, count, &mut rng)?
        .into_iter()
        .map(|p| p.values)
        .collect();
    Ok(Samples {
        record: SampleRecord {
            stream,
            first: 0,
            count: count as u64,
        },
        params,
    })
}

pub fn training_pool(cfg: &ExperimentConfig) -> Result<Samples> {
    draw(&cfg.initials.pool, &cfg.model, cfg.initials.pool_size, cfg.seed, stream::POOL)
}

pub fn nls_pool(cfg: &ExperimentConfig) -> Result<Samples> {
    let sampler = cfg.initials.nls_pool.as_ref().unwrap_or(&cfg.initials.pool);
    draw(sampler, &cfg.model, cfg.initials.pool_size, cfg.seed, stream::NLS_POOL)
}

pub fn held_out(cfg: &ExperimentConfig) -> Result<Samples> {
    draw(
        &cfg.initials.held_out,
        &cfg.model,
        cfg.initials.held_out_count,
        cfg.seed,
        stream::HELD_OUT,
    )
}

/// Fails if a held-out draw shares a sample ID or a parameter vector with
/// any training set.
pub fn check_disjoint(training: &[&Samples], held_out: &Samples) -> Result<()> {
    for t in training {
        if t.record.overlaps(&held_out.record) {
            return Err(CliError::Config(format!(
                "held-out samples {:?} overlap training samples {:?}",
                held_out.record, t.record
            )));
        }
        if held_out.params.iter().any(|h| t.params.iter().any(|p| p == h)) {
            return Err(CliError::Config("a held-out initial also appears in a training set".into()));
        }
    }
    Ok(())
}

pub fn dynamics(cfg: &ExperimentConfig) -> Result<Dynamics> {
    let residual = ResidualModel::new(cfg.model, cfg.operator, cfg.train.residual_norm)?;
    Ok(Dynamics::new(residual, ControlNet::new(cfg.control_spec()))?)
}

pub fn initial_control(cfg: &ExperimentConfig, net: &ControlNet) -> Vec<f64> {
    let mut xi = net.init_params(&mut stream_rng(cfg.seed, stream::INIT));
    if cfg.control.gate_bias != 0.0 {
        net.set_gate_bias(&mut xi, cfg.control.gate_bias);
    }
    xi
}

/// Marched targets for the augmentation term, if configured.
pub fn build_targets(cfg: &ExperimentConfig) -> Result<Option<TargetSet>> {
    let (Some(section), Some(march)) = (&cfg.targets, cfg.march_config()) else {
        return Ok(None);
    };
    let initials: Vec<ParamVector> = draw(&section.sampler, &cfg.model, section.count, cfg.seed, stream::TARGETS)?
        .params
        .into_iter()
        .map(|v| ParamVector::new(cfg.model, v))
        .collect::<paramflow::Result<_>>()?;
    let (set, _) = time_march_targets(
        &initials,
        &cfg.operator,
        &march,
        derived_seed(cfg.seed, stream::TARGETS),
        cfg.exec_mode(),
    )?;
    Ok(Some(set))
}

/// Result of one training run. `xi` is the last finite control, also when
/// training stopped with an error.
#[derive(Debug)]
pub struct TrainOutcome {
    pub method: Method,
    pub xi: Vec<f64>,
    pub report: Option<TrainReport>,
    pub error: Option<paramflow::Error>,
    pub seconds: f64,
}

impl TrainOutcome {
    pub fn iterations(&self) -> usize {
        self.report.as_ref().map_or(0, TrainReport::iterations)
    }

    /// Whether the run ended normally (not diverged, no error).
    pub fn complete(&self) -> bool {
        self.error.is_none() && !matches!(self.report.as_ref().map(|r| &r.stop), Some(StopReason::Diverged { .. }))
    }

    pub fn failure(&self) -> Option<String> {
        if let Some(e) = &self.error {
            return Some(e.to_string());
        }
        match self.report.as_ref().map(|r| &r.stop) {
            Some(StopReason::Diverged { iteration, reason }) => Some(format!("diverged at iteration {iteration}: {reason}")),
            _ => None,
        }
    }
}

/// Trains a control with `method`. `on_row` sees every log row.
pub fn train_control(
    cfg: &ExperimentConfig,
    method: Method,
    on_row: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome> {
    let dyns = dynamics(cfg)?;
    let xi0 = initial_control(cfg, &dyns.net);
    let mut last = xi0.clone();
    let start = Instant::now();
    let mut hook = |row: &LogRow, xi: &[f64]| {
        if row.loss.is_finite() {
            last.clear();
            last.extend_from_slice(xi);
        }
        on_row(row);
    };
    let result = match method {
        Method::Trajectory => {
            let pool = training_pool(cfg)?;
            let targets = build_targets(cfg)?;
            train(&cfg.train_config(), &dyns, xi0, &pool.params, targets.as_ref(), Some(&mut hook))
        }
        Method::Nls => {
            let pool = nls_pool(cfg)?;
            nls_train(&cfg.nls_config(), &dyns, xi0, &pool.params, Some(&mut hook))
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    Ok(match result {
        Ok(report) => TrainOutcome {
            method,
            xi: report.xi.clone(),
            report: Some(report),
            error: None,
            seconds,
        },
        Err(e @ (paramflow::Error::Config(_) | paramflow::Error::Dimension { .. } | paramflow::Error::Unsupported(_))) => {
            return Err(e.into())
        }
        Err(e) => TrainOutcome {
            method,
            xi: last,
            report: None,
            error: Some(e),
            seconds,
        },
    })
}

/// One solved initial: states at the requested times plus the accumulated
/// residual along the adaptive steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Solved {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub stats: SolveStats,
    pub residual_final: f64,
    /// Largest decrease of the accumulated residual between stored steps.
    pub residual_max_drop: f64,
}

/// Integrates `θ̇ = V_ξ(θ)` from every initial to the last grid time, with
/// the residual accumulated alongside, and samples the states on `grid`.
pub fn solve_initials(
    cfg: &ExperimentConfig,
    dyns: &Dynamics,
    xi: &[f64],
    initials: &[Vec<f64>],
    grid: &[f64],
    solver: &SolverSpec,
) -> Result<Vec<Solved>> {
    let t_end = grid.last().copied().unwrap_or(0.0);
    let sampler = cfg.x_sampler();
    let seed = derived_seed(cfg.seed, stream::SOLVE);
    let results = par::map_range(cfg.exec_mode(), initials.len(), |i| -> Result<Solved> {
        let theta0 = &initials[i];
        let mut rng = stream_rng(seed, i as u64);
        let batch = sampler.sample(&cfg.model, Some(theta0), cfg.train.n_points, &mut rng)?;
        let traj = dyns.rollout(xi, theta0, &batch, t_end, solver, true)?;
        let m = dyns.dim();
        let s: Vec<f64> = traj.states.iter().map(|y| y[m]).collect();
        let residual_max_drop = s.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
        let states = grid
            .iter()
            .map(|&t| traj.state_at(t).map(|mut y| {
                y.truncate(m);
                y
            }))
            .collect::<paramflow::Result<_>>()?;
        Ok(Solved {
            times: grid.to_vec(),
            states,
            stats: traj.stats,
            residual_final: *s.last().expect("nonempty"),
            residual_max_drop,
        })
    });
    results.into_iter().collect()
}

/// Tolerance for the accumulated-residual monotonicity check.
pub fn residual_drop_tolerance(solver: &SolverSpec) -> f64 {
    match solver.kind {
        SolverKind::Dopri5 => 10.0 * solver.atol,
        _ => 1e-12,
    }
}

/// Invariant checks of the upwind reference runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpwindChecks {
    /// Total variation never increased by more than rounding.
    pub tvd: bool,
    pub max_mass_drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub curves: Vec<Vec<ErrorPoint>>,
    pub stats: Vec<CurveStat>,
    pub upwind: Option<UpwindChecks>,
}

fn upwind_profile(model: &ModelSpec, theta: &[f64]) -> Result<()> {
    let mut a = vec![0.0; model.dim];
    let mut b = vec![0.37; model.dim];
    for k in 0..16 {
        let y = -1.0 + 2.0 * k as f64 / 16.0;
        a[0] = y;
        b[0] = y;
        if (model.value(theta, &a) - model.value(theta, &b)).abs() > 1e-9 {
            return Err(CliError::Config(
                "the upwind oracle needs initials that vary along the first axis only".into(),
            ));
        }
    }
    Ok(())
}

/// Relative error curves of solved trajectories against the configured
/// oracle. `states[i][k]` is initial `i` at `times[k]`; `states[i][0]` must
/// be the initial itself.
pub fn evaluate(cfg: &ExperimentConfig, times: &[f64], states: &[Vec<Vec<f64>>]) -> Result<EvalOutput> {
    let model = cfg.model;
    for traj in states {
        if traj.len() != times.len() {
            return Err(paramflow::Error::Dimension {
                what: "trajectory time points".into(),
                expected: times.len(),
                got: traj.len(),
            }
            .into());
        }
        for s in traj {
            model.check_params(s)?;
        }
    }
    let sampler = cfg.eval_sampler();
    let eval = &cfg.eval;
    let seed = derived_seed(cfg.seed, stream::EVAL);
    let horizon = cfg.train.horizon;
    let mut shared_rng = stream_rng(cfg.seed, stream::EVAL);
    let shared = if sampler.depends_on_params() {
        None
    } else {
        Some(sampler.sample(&model, None, eval.n_points, &mut shared_rng)?)
    };

    let per_initial = |i: usize| -> Result<(Vec<ErrorPoint>, Option<UpwindChecks>)> {
        let theta0 = &states[i][0];
        let mut rng = stream_rng(seed, i as u64);
        let batch = match &shared {
            Some(b) => b.clone(),
            None => sampler.sample(&model, Some(theta0), eval.n_points, &mut rng)?,
        };
        let g = |x: &[f64]| model.value(theta0, x);
        let mut curve = Vec::with_capacity(times.len());
        let mut checks: Option<UpwindChecks> = None;
        match eval.oracle {
            OracleKind::PeriodicHeat => {
                let heat = PeriodicHeat::new(&g, model.dim, eval.spectral_modes)?;
                for (k, &t) in times.iter().enumerate() {
                    curve.push(ErrorPoint {
                        t,
                        error: relative_error(&model, &states[i][k], &|x| heat.eval(x, t), &batch),
                    });
                }
            }
            OracleKind::Upwind => {
                let OperatorSpec::TanhFlux { speed } = cfg.operator else {
                    return Err(CliError::Config("upwind oracle needs the tanh_flux operator".into()));
                };
                upwind_profile(&model, theta0)?;
                let g1 = |y: f64| {
                    let mut p = vec![0.0; model.dim];
                    p[0] = y;
                    model.value(theta0, &p)
                };
                let mut c = UpwindChecks {
                    tvd: true,
                    max_mass_drift: 0.0,
                };
                for (k, &t) in times.iter().enumerate() {
                    let error = if t == 0.0 {
                        relative_error(&model, &states[i][k], &|p| g1(p[0]), &batch)
                    } else {
                        let n_t = ((eval.upwind_steps as f64 * t / horizon).ceil() as usize).max(1);
                        let sol = upwind_1d(&g1, speed, t, n_t, eval.upwind_cells)?;
                        c.tvd &= sol.total_variation.windows(2).all(|w| w[1] <= w[0] + 1e-9);
                        let m0 = sol.mass[0];
                        c.max_mass_drift = sol.mass.iter().fold(c.max_mass_drift, |acc, v| acc.max((v - m0).abs()));
                        relative_error(&model, &states[i][k], &|p| sol.eval(p[0]), &batch)
                    };
                    curve.push(ErrorPoint { t, error });
                }
                checks = Some(c);
            }
            OracleKind::ColeHopf => {
                let OperatorSpec::Hjb { epsilon } = cfg.operator else {
                    return Err(CliError::Config("cole_hopf oracle needs the hjb operator".into()));
                };
                // Model time τ runs backward from the terminal cost: τ = T − t.
                let mc = RefCell::new(rng);
                let failed = RefCell::new(None);
                for (k, &tau) in times.iter().enumerate() {
                    let reference = |x: &[f64]| match cole_hopf(
                        &g,
                        x,
                        horizon - tau,
                        horizon,
                        epsilon,
                        eval.cole_hopf_samples,
                        &mut *mc.borrow_mut(),
                    ) {
                        Ok(e) => e.value,
                        Err(e) => {
                            failed.borrow_mut().get_or_insert(e);
                            f64::NAN
                        }
                    };
                    curve.push(ErrorPoint {
                        t: tau,
                        error: relative_error(&model, &states[i][k], &reference, &batch),
                    });
                }
                if let Some(e) = failed.into_inner() {
                    return Err(e.into());
                }
            }
        }
        Ok((curve, checks))
    };

    let results = par::map_range(cfg.exec_mode(), states.len(), per_initial);
    let mut curves = Vec::with_capacity(states.len());
    let mut upwind: Option<UpwindChecks> = None;
    for r in results {
        let (curve, checks) = r?;
        curves.push(curve);
        if let Some(c) = checks {
            let u = upwind.get_or_insert(UpwindChecks {
                tvd: true,
                max_mass_drift: 0.0,
            });
            u.tvd &= c.tvd;
            u.max_mass_drift = u.max_mass_drift.max(c.max_mass_drift);
        }
    }
    let stats = aggregate_curves(&curves)?;
    Ok(EvalOutput { curves, stats, upwind })
}

/// Mean costs of one terminal cost in the Euler-Maruyama demo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoCost {
    pub index: usize,
    pub controlled: f64,
    pub uncontrolled: f64,
    /// Standard error of the paired difference.
    pub difference_std_error: f64,
    pub improved: bool,
}

/// Start and end positions of the first path from every start.
#[derive(Debug, Clone, PartialEq)]
pub struct Particles {
    pub starts: Vec<Vec<f64>>,
    pub controlled: Vec<Vec<f64>>,
    pub uncontrolled: Vec<Vec<f64>>,
}

/// Simulates `dX = α dt + √(2ε) dW` with `α(x, t) = −∇u(x, t)` from the
/// learned value function, and with `α = 0`, using the same noise for both.
/// The total cost of a path is `∫ ½|α|² dt + g(X_T)`.
pub fn hjb_demo(
    cfg: &ExperimentConfig,
    dyns: &Dynamics,
    xi: &[f64],
    costs: &[Vec<f64>],
) -> Result<Vec<(DemoCost, Particles)>> {
    let demo = cfg
        .demo
        .as_ref()
        .ok_or_else(|| CliError::Config("the configuration has no [demo] section".into()))?;
    let OperatorSpec::Hjb { epsilon } = cfg.operator else {
        return Err(CliError::Config("the demo needs the hjb operator".into()));
    };
    let model = cfg.model;
    let horizon = cfg.train.horizon;
    let n_steps = (horizon / demo.dt - 1e-9).ceil().max(0.0) as usize;
    let grid: Vec<f64> = (0..=n_steps).map(|k| (k as f64 * demo.dt).min(horizon)).collect();

    let mut start_rng = stream_rng(cfg.seed, stream::DEMO);
    let starts: Vec<Vec<f64>> = (0..demo.starts)
        .map(|_| demo.half_width.iter().map(|&h| start_rng.random_range(-h..=h)).collect())
        .collect();
    let spec = SdeSpec {
        epsilon,
        dt: demo.dt,
        t_end: horizon,
        n_paths: demo.paths_per_start,
        record_paths: false,
    };
    let noise_seed = derived_seed(cfg.seed, stream::DEMO);

    let mut out = Vec::with_capacity(costs.len());
    for (j, cost) in costs.iter().enumerate() {
        let traj = integrate(
            |_, y, o| dyns.velocity(xi, y, o),
            cost,
            0.0,
            horizon,
            &cfg.eval.solver,
        )?;
        let thetas: Vec<Vec<f64>> = grid
            .iter()
            .map(|&t| traj.state_at(horizon - t))
            .collect::<paramflow::Result<_>>()?;
        let drift = |x: &[f64], t: f64, a: &mut [f64]| {
            let k = ((t / demo.dt).round() as usize).min(n_steps);
            let grad = model.grad_x(&thetas[k], x).unwrap_or_else(|_| vec![f64::NAN; x.len()]);
            for (ai, gi) in a.iter_mut().zip(&grad) {
                *ai = -gi;
            }
        };
        let zero = |_: &[f64], _: f64, a: &mut [f64]| a.fill(0.0);
        let g = |x: &[f64]| model.value(cost, x);
        let mut diffs = Vec::with_capacity(demo.starts * demo.paths_per_start);
        let (mut controlled, mut uncontrolled) = (0.0, 0.0);
        let mut particles = Particles {
            starts: starts.clone(),
            controlled: Vec::new(),
            uncontrolled: Vec::new(),
        };
        for (s, x0) in starts.iter().enumerate() {
            let seed = noise_seed.wrapping_add(s as u64);
            let c = euler_maruyama(drift, x0, &spec, seed, cfg.exec_mode())?;
            let z = euler_maruyama(zero, x0, &spec, seed, cfg.exec_mode())?;
            for p in 0..spec.n_paths {
                let jc = c.control_energy[p] + g(&c.finals[p]);
                let jz = z.control_energy[p] + g(&z.finals[p]);
                controlled += jc;
                uncontrolled += jz;
                diffs.push(jc - jz);
            }
            particles.controlled.push(c.finals[0].clone());
            particles.uncontrolled.push(z.finals[0].clone());
        }
        let n = diffs.len() as f64;
        let mean_diff = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let (controlled, uncontrolled) = (controlled / n, uncontrolled / n);
        out.push((
            DemoCost {
                index: j,
                controlled,
                uncontrolled,
                difference_std_error: (var / n).sqrt(),
                improved: controlled < uncontrolled,
            },
            particles,
        ));
    }
    Ok(out)
}

/// Writes `start_*, controlled_*, uncontrolled_*` rows.
pub fn write_particles_csv(path: &Path, header: &str, p: &Particles) -> Result<()> {
    let d = p.starts.first().map_or(0, Vec::len);
    let mut out = format!("# {header}\n");
    let cols: Vec<String> = ["start", "controlled", "uncontrolled"]
        .iter()
        .flat_map(|n| (0..d).map(move |i| format!("{n}_{i}")))
        .collect();
    out.push_str(&cols.join(","));
    out.push('\n');
    for k in 0..p.starts.len() {
        let row: Vec<String> = [&p.starts[k], &p.controlled[k], &p.uncontrolled[k]]
            .iter()
            .flat_map(|v| v.iter().map(|x| format!("{x:.10e}")))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
