//! Subcommand implementations. Each validates its configuration before any
//! computation and stamps outputs with a [`Provenance`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use paramflow::odesolve::{write_rows_binary, read_rows_binary, SolverSpec};
use paramflow::oracle::CurveStat;
use paramflow::rom::{fit_initial, FitConfig, ModelSpec};
use paramflow::trainer::{LogRow, StopReason};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint, Provenance};
use crate::config::{Experiment, ExperimentConfig, Method, Scale};
use crate::error::{CliError, Result};
use crate::experiment::{self as exp, stream, DemoCost, SampleRecord, TrainOutcome, UpwindChecks};
use crate::plot::{render_svg, write_curve_csv, Series};

/// Values given on the command line; they replace the file's.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub max_iters: Option<usize>,
    pub threads: Option<usize>,
    pub deterministic: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(n) = self.max_iters {
            cfg.train.max_iters = n;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        cfg.validate()
    }
}

/// Progress sink for long-running commands.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

pub fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance::new(cfg.seed, cfg.hash())
}

fn write_train_log(path: &Path, header: &str, rows: &[LogRow]) -> Result<()> {
    let mut out = format!("# {header}\niteration,loss,traj_loss,aug_loss,grad_norm,wall_time\n");
    for r in rows {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.iteration, r.loss, r.traj_loss, r.aug_loss, r.grad_norm, r.wall_time
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

fn method_tag(method: Method) -> &'static str {
    match method {
        Method::Trajectory => "",
        Method::Nls => "_nls",
    }
}

/// Trains, then writes `control{tag}/` (checkpoint), `train_log{tag}.csv`
/// and `config.toml` under `out`. A failed run still leaves its last good
/// control as an incomplete checkpoint and returns a training error.
pub fn train_and_save(cfg: &ExperimentConfig, method: Method, out: &Path, progress: Progress) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let prov = provenance(cfg);
    let mut rows = Vec::new();
    let every = (cfg.train.max_iters / 20).max(1);
    let outcome = exp::train_control(cfg, method, &mut |row: &LogRow| {
        if row.iteration % every == 0 {
            progress(&format!("iteration {:>6}  loss {:.4e}", row.iteration, row.loss));
        }
        rows.push(row.clone());
    })?;
    let tag = method_tag(method);
    write_train_log(&out.join(format!("train_log{tag}.csv")), &prov.header(), &rows)?;
    write_checkpoint(
        &out.join(format!("control{tag}")),
        &paramflow::control::ControlParams {
            spec: cfg.control_spec(),
            values: outcome.xi.clone(),
        },
        cfg.model,
        &prov,
        outcome.iterations().max(rows.len()),
        outcome.complete(),
    )?;
    Ok(outcome)
}

/// `train`: exit 3 (with the partial checkpoint on disk) when training fails.
pub fn cmd_train(cfg: &ExperimentConfig, method: Method, progress: Progress) -> Result<TrainOutcome> {
    let outcome = train_and_save(cfg, method, &cfg.output_dir, progress)?;
    match outcome.failure() {
        Some(reason) => Err(CliError::Training(reason)),
        None => Ok(outcome),
    }
}

/// One initial condition for `solve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialSpec {
    /// Model parameters given directly; no fitting.
    Params { values: Vec<f64> },
    /// `Σ amplitude · sin(π frequency·x + phase)`.
    Sines { terms: Vec<SineTerm> },
    /// `Σ weight · exp(−|x − center|²/variance)`.
    Bumps { bumps: Vec<Bump> },
    /// The configuration's held-out draw.
    HeldOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineTerm {
    pub amplitude: f64,
    pub frequency: Vec<f64>,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub weight: f64,
    pub center: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialsFile {
    pub initial: Vec<InitialSpec>,
}

impl InitialsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }
}

impl InitialSpec {
    fn closed_form(&self, dim: usize) -> Result<Option<Box<dyn Fn(&[f64]) -> f64>>> {
        let bad = |what: &str, got: usize| {
            Err(CliError::Core(paramflow::Error::Dimension {
                what: what.into(),
                expected: dim,
                got,
            }))
        };
        match self {
            InitialSpec::Sines { terms } => {
                if let Some(t) = terms.iter().find(|t| t.frequency.len() != dim) {
                    return bad("sine frequency", t.frequency.len());
                }
                let terms = terms.clone();
                Ok(Some(Box::new(move |x: &[f64]| {
                    terms
                        .iter()
                        .map(|t| {
                            let arg: f64 = t.frequency.iter().zip(x).map(|(k, xi)| k * xi).sum();
                            t.amplitude * (std::f64::consts::PI * arg + t.phase).sin()
                        })
                        .sum()
                })))
            }
            InitialSpec::Bumps { bumps } => {
                if let Some(b) = bumps.iter().find(|b| b.center.len() != dim) {
                    return bad("bump center", b.center.len());
                }
                if bumps.iter().any(|b| !(b.variance > 0.0)) {
                    return Err(CliError::Config("bump variance must be positive".into()));
                }
                let bumps = bumps.clone();
                Ok(Some(Box::new(move |x: &[f64]| {
                    bumps
                        .iter()
                        .map(|b| {
                            let r2: f64 = b.center.iter().zip(x).map(|(c, xi)| (xi - c).powi(2)).sum();
                            b.weight * (-r2 / b.variance).exp()
                        })
                        .sum()
                })))
            }
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolvedEntry {
    pub index: usize,
    pub source: String,
    /// Relative misfit of the fitted initial, when fitting was needed.
    pub fit_misfit: Option<f64>,
    pub stem: String,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
    pub residual_final: f64,
    pub residual_max_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveManifest {
    pub provenance: Provenance,
    pub model: ModelSpec,
    pub times: Vec<f64>,
    pub solver: SolverSpec,
    pub seconds: f64,
    pub initials: Vec<SolvedEntry>,
}

#[derive(Debug, Clone)]
pub struct SolveRequest {
    pub initials: Vec<InitialSpec>,
    pub t_end: f64,
    pub solver: SolverSpec,
    pub fit_tolerance: f64,
}

/// Time grid: `0`, the configured evaluation times below `t_end`, and `t_end`.
pub fn solve_grid(cfg: &ExperimentConfig, t_end: f64) -> Vec<f64> {
    let mut grid = vec![0.0];
    grid.extend(cfg.eval.times.iter().copied().filter(|&t| t > 0.0 && t < t_end));
    if t_end > 0.0 {
        grid.push(t_end);
    }
    grid
}

/// Resolves initial specs to parameter vectors, fitting closed forms.
pub fn resolve_initials(
    cfg: &ExperimentConfig,
    specs: &[InitialSpec],
    fit_tolerance: f64,
) -> Result<Vec<(String, Vec<f64>, Option<f64>)>> {
    let model = cfg.model;
    let mut out = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        match spec {
            InitialSpec::Params { values } => {
                model.check_params(values)?;
                out.push((format!("params[{i}]"), values.clone(), None));
            }
            InitialSpec::HeldOut => {
                let held = exp::held_out(cfg)?;
                for (k, p) in held.params.into_iter().enumerate() {
                    out.push((format!("held_out[{k}]"), p, None));
                }
            }
            _ => {
                let g = spec.closed_form(model.dim)?.expect("closed form");
                let mut rng = exp::stream_rng(exp::derived_seed(cfg.seed, stream::FIT), i as u64);
                let start = cfg.initials.pool.sample(&model, &mut rng);
                let fit_cfg = FitConfig {
                    tolerance: fit_tolerance,
                    x_sampler: Some(cfg.eval_sampler()).filter(|s| !s.depends_on_params()),
                    ..FitConfig::default()
                };
                let report = fit_initial(&model, &*g, &start, &fit_cfg, &mut rng)?;
                if !report.success {
                    return Err(CliError::Fit {
                        misfit: report.misfit,
                        tolerance: fit_tolerance,
                    });
                }
                out.push((format!("fit[{i}]"), report.params.values, Some(report.misfit)));
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("no initial conditions given".into()));
    }
    Ok(out)
}

fn write_rows_csv(path: &Path, header: &str, times: &[f64], states: &[Vec<f64>]) -> Result<()> {
    let dim = states.first().map_or(0, Vec::len);
    let mut out = format!("# {header}\nt");
    for i in 0..dim {
        let _ = write!(out, ",theta{i}");
    }
    out.push('\n');
    for (t, y) in times.iter().zip(states) {
        let _ = write!(out, "{t:.17e}");
        for v in y {
            let _ = write!(out, ",{v:.17e}");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// `solve`: integrates the learned field from every initial and writes
/// `solve.json` plus one binary and one CSV file per trajectory.
pub fn cmd_solve(cfg: &ExperimentConfig, checkpoint: &Path, request: &SolveRequest, out: &Path) -> Result<SolveManifest> {
    cfg.validate()?;
    request.solver.validate()?;
    if !(request.t_end >= 0.0) {
        return Err(CliError::Config(format!("t_end must be nonnegative, got {}", request.t_end)));
    }
    let (manifest, params) = read_checkpoint(checkpoint)?;
    if manifest.model != cfg.model || params.spec != cfg.control_spec() {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained for a different model or control shape",
            checkpoint.display()
        )));
    }
    let initials = resolve_initials(cfg, &request.initials, request.fit_tolerance)?;
    let dyns = exp::dynamics(cfg)?;
    let grid = solve_grid(cfg, request.t_end);
    let start = Instant::now();
    let thetas: Vec<Vec<f64>> = initials.iter().map(|(_, p, _)| p.clone()).collect();
    let solved = exp::solve_initials(cfg, &dyns, &params.values, &thetas, &grid, &request.solver)?;
    let seconds = start.elapsed().as_secs_f64();

    fs::create_dir_all(out)?;
    let prov = provenance(cfg);
    let mut entries = Vec::with_capacity(solved.len());
    for (i, (s, (source, _, misfit))) in solved.iter().zip(&initials).enumerate() {
        let stem = format!("traj_{i:03}");
        write_rows_binary(&out.join(&stem), &s.times, &s.states)?;
        write_rows_csv(&out.join(format!("{stem}.csv")), &prov.header(), &s.times, &s.states)?;
        entries.push(SolvedEntry {
            index: i,
            source: source.clone(),
            fit_misfit: *misfit,
            stem,
            accepted: s.stats.accepted,
            rejected: s.stats.rejected,
            evaluations: s.stats.evaluations,
            residual_final: s.residual_final,
            residual_max_drop: s.residual_max_drop,
        });
    }
    let manifest = SolveManifest {
        provenance: prov,
        model: cfg.model,
        times: grid,
        solver: request.solver,
        seconds,
        initials: entries,
    };
    fs::write(out.join("solve.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads every trajectory listed in `solve.json`.
pub fn load_solved(dir: &Path) -> Result<(SolveManifest, Vec<Vec<Vec<f64>>>)> {
    let text = fs::read_to_string(dir.join("solve.json"))
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", dir.join("solve.json").display())))?;
    let manifest: SolveManifest = serde_json::from_str(&text)?;
    let mut all = Vec::with_capacity(manifest.initials.len());
    for e in &manifest.initials {
        let (times, states) = read_rows_binary(&dir.join(&e.stem))?;
        if times != manifest.times {
            return Err(CliError::Config(format!("{} does not match the manifest time grid", e.stem)));
        }
        all.push(states);
    }
    Ok((manifest, all))
}

fn write_curve_outputs(out: &Path, stem: &str, title: &str, prov: &Provenance, series: &[Series]) -> Result<()> {
    for s in series {
        let tag = if s.label.contains("least") { "_nls" } else { "" };
        write_curve_csv(&out.join(format!("{stem}{tag}.csv")), &prov.header(), &s.points)?;
    }
    let svg = render_svg(title, "t", "relative error", series, &prov.header());
    fs::write(out.join(format!("{stem}.svg")), svg)?;
    Ok(())
}

/// `eval`: error curves of a solved set against the configured oracle.
pub fn cmd_eval(cfg: &ExperimentConfig, trajectories: &Path, out: &Path) -> Result<Vec<CurveStat>> {
    cfg.validate()?;
    let (manifest, states) = load_solved(trajectories)?;
    if manifest.model != cfg.model {
        return Err(paramflow::Error::Dimension {
            what: "trajectory model parameters".into(),
            expected: cfg.model.n_params(),
            got: manifest.model.n_params(),
        }
        .into());
    }
    let result = exp::evaluate(cfg, &manifest.times, &states)?;
    fs::create_dir_all(out)?;
    let prov = provenance(cfg);
    let series = [Series {
        label: "learned field".into(),
        points: result.stats.clone(),
    }];
    write_curve_outputs(out, "error_curve", &format!("{:?} relative error", cfg.experiment), &prov, &series)?;
    Ok(result.stats)
}

/// `plot`: re-renders curve CSVs as one SVG.
pub fn cmd_plot(curves: &[(String, PathBuf)], title: &str, comment: &str, out: &Path) -> Result<()> {
    let series = curves
        .iter()
        .map(|(label, path)| {
            Ok(Series {
                label: label.clone(),
                points: crate::plot::read_curve_csv(path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fs::write(out, render_svg(title, "t", "relative error", &series, comment))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCheck {
    pub t: f64,
    pub max: f64,
    pub mean: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub seconds: f64,
    pub stop: Option<StopReason>,
    pub final_loss: Option<f64>,
}

impl From<&TrainOutcome> for TrainSummary {
    fn from(o: &TrainOutcome) -> Self {
        Self {
            iterations: o.iterations(),
            seconds: o.seconds,
            stop: o.report.as_ref().map(|r| r.stop.clone()),
            final_loss: o.report.as_ref().and_then(|r| r.final_loss()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: Experiment,
    pub provenance: Provenance,
    pub train: TrainSummary,
    pub curve: Vec<CurveStat>,
    pub thresholds: Vec<ThresholdCheck>,
    pub nls_train: Option<TrainSummary>,
    pub nls_curve: Option<Vec<CurveStat>>,
    /// Trajectory method strictly below the baseline at the final time.
    pub beats_nls: Option<bool>,
    pub residual_max_drop: f64,
    pub residual_tolerance: f64,
    pub residual_monotone: bool,
    pub upwind: Option<UpwindChecks>,
    pub demo: Option<Vec<DemoCost>>,
    pub pool: SampleRecord,
    pub held_out: SampleRecord,
    pub seconds: f64,
    pub passed: bool,
}

fn threshold_checks(cfg: &ExperimentConfig, curve: &[CurveStat]) -> Result<Vec<ThresholdCheck>> {
    cfg.eval
        .thresholds
        .iter()
        .map(|&(t, max)| {
            let stat = curve
                .iter()
                .find(|c| (c.t - t).abs() < 1e-12)
                .ok_or_else(|| CliError::Config(format!("threshold time {t} is not on the evaluation grid")))?;
            Ok(ThresholdCheck {
                t,
                max,
                mean: stat.mean,
                pass: stat.mean <= max,
            })
        })
        .collect()
}

fn solve_and_eval(
    cfg: &ExperimentConfig,
    xi: &[f64],
    held: &[Vec<f64>],
) -> Result<(Vec<exp::Solved>, exp::EvalOutput)> {
    let dyns = exp::dynamics(cfg)?;
    let grid = cfg.eval.times.clone();
    let solved = exp::solve_initials(cfg, &dyns, xi, held, &grid, &cfg.eval.solver)?;
    let states: Vec<Vec<Vec<f64>>> = solved.iter().map(|s| s.states.clone()).collect();
    let eval = exp::evaluate(cfg, &grid, &states)?;
    Ok((solved, eval))
}

/// `reproduce`: train → solve the held-out set → evaluate, plus the
/// least-squares comparison and the control demo when configured. Writes
/// `summary.json` and the curve CSV/SVG files under `out`.
pub fn reproduce(cfg: &ExperimentConfig, out: &Path, progress: Progress) -> Result<Summary> {
    cfg.validate()?;
    if cfg.eval.times.first() != Some(&0.0) {
        return Err(CliError::Config("reproduce needs eval.times to start at 0".into()));
    }
    let start = Instant::now();
    let prov = provenance(cfg);
    let pool = exp::training_pool(cfg)?;
    let held = exp::held_out(cfg)?;
    let mut training = vec![&pool];
    let nls_pool = if cfg.train.compare_nls { Some(exp::nls_pool(cfg)?) } else { None };
    training.extend(nls_pool.as_ref());
    exp::check_disjoint(&training, &held)?;

    progress("training the control field");
    let outcome = train_and_save(cfg, Method::Trajectory, out, progress)?;
    if let Some(reason) = outcome.failure() {
        return Err(CliError::Training(reason));
    }
    progress("solving and evaluating held-out initials");
    let (solved, eval) = solve_and_eval(cfg, &outcome.xi, &held.params)?;

    let (nls_train, nls_curve) = if cfg.train.compare_nls {
        progress("training the least-squares baseline");
        let nls = train_and_save(cfg, Method::Nls, out, progress)?;
        if let Some(reason) = nls.failure() {
            return Err(CliError::Training(format!("least-squares baseline: {reason}")));
        }
        let (_, nls_eval) = solve_and_eval(cfg, &nls.xi, &held.params)?;
        (Some(TrainSummary::from(&nls)), Some(nls_eval.stats))
    } else {
        (None, None)
    };

    let mut series = vec![Series {
        label: "trajectory training".into(),
        points: eval.stats.clone(),
    }];
    if let Some(c) = &nls_curve {
        series.push(Series {
            label: "least squares".into(),
            points: c.clone(),
        });
    }
    write_curve_outputs(out, "error_curve", &format!("{:?} held-out relative error", cfg.experiment), &prov, &series)?;

    let demo = if cfg.demo.is_some() {
        progress("running the controlled-diffusion demo");
        let d = cfg.demo.as_ref().expect("checked");
        let dyns = exp::dynamics(cfg)?;
        let results = exp::hjb_demo(cfg, &dyns, &outcome.xi, &held.params[..d.costs])?;
        let mut costs = Vec::with_capacity(results.len());
        for (c, particles) in results {
            exp::write_particles_csv(&out.join(format!("particles_{:02}.csv", c.index)), &prov.header(), &particles)?;
            costs.push(c);
        }
        Some(costs)
    } else {
        None
    };

    let thresholds = threshold_checks(cfg, &eval.stats)?;
    let last = |c: &[CurveStat]| c.last().map_or(f64::NAN, |s| s.mean);
    let beats_nls = nls_curve.as_ref().map(|c| last(&eval.stats) < last(c));
    let residual_max_drop = solved.iter().map(|s| s.residual_max_drop).fold(0.0, f64::max);
    let residual_tolerance = exp::residual_drop_tolerance(&cfg.eval.solver);
    let residual_monotone = residual_max_drop <= residual_tolerance;
    let passed = thresholds.iter().all(|t| t.pass)
        && beats_nls.unwrap_or(true)
        && residual_monotone
        && eval.upwind.is_none_or(|u| u.tvd)
        && demo.as_ref().is_none_or(|d| d.iter().filter(|c| c.improved).count() * 10 >= d.len() * 8);
    let summary = Summary {
        experiment: cfg.experiment,
        provenance: prov,
        train: TrainSummary::from(&outcome),
        curve: eval.stats,
        thresholds,
        nls_train,
        nls_curve,
        beats_nls,
        residual_max_drop,
        residual_tolerance,
        residual_monotone,
        upwind: eval.upwind,
        demo,
        pool: pool.record,
        held_out: held.record,
        seconds: start.elapsed().as_secs_f64(),
        passed,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// `reproduce <experiment> --scale <scale>` with the shipped preset.
pub fn cmd_reproduce(experiment: Experiment, scale: Scale, overrides: &Overrides, progress: Progress) -> Result<Summary> {
    let mut cfg = ExperimentConfig::preset(experiment, scale)?;
    overrides.apply(&mut cfg)?;
    let out = cfg.output_dir.join(format!("{}_{}", experiment_name(experiment), scale_name(scale)));
    reproduce(&cfg, &out, progress)
}

pub fn experiment_name(e: Experiment) -> &'static str {
    match e {
        Experiment::Heat => "heat",
        Experiment::TanhFlux => "tanh_flux",
        Experiment::Hjb => "hjb",
        Experiment::Custom => "custom",
    }
}

pub fn scale_name(s: Scale) -> &'static str {
    match s {
        Scale::Desk => "desk",
        Scale::Paper => "paper",
    }
}
