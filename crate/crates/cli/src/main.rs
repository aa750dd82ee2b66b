use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use paramflow::odesolve::{SolverKind, SolverSpec};
use paramflow_cli::commands::{self, InitialSpec, InitialsFile, Overrides, SolveRequest};
use paramflow_cli::config::{Experiment, ExperimentConfig, Method, Scale};
use paramflow_cli::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "paramflow", version, about = "Train and apply control fields on reduced-model parameters")]
struct Cli {
    /// Worker threads (0 keeps the default pool).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, bitwise-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a control field.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_iters: Option<usize>,
        /// `trajectory` (default) or `nls`.
        #[arg(long, default_value = "trajectory")]
        method: String,
    },
    /// Integrate the learned field from initial conditions.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// TOML file with `[[initial]]` entries; defaults to the held-out set.
        #[arg(long)]
        initials: Option<PathBuf>,
        /// Final time; defaults to the training horizon.
        #[arg(long)]
        t_end: Option<f64>,
        /// `dopri5` (default), `rk4` or `euler`.
        #[arg(long, default_value = "dopri5")]
        solver: String,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 1e-6)]
        rtol: f64,
        #[arg(long, default_value_t = 1e-8)]
        atol: f64,
        /// Largest acceptable relative misfit of fitted initials.
        #[arg(long, default_value_t = 1e-2)]
        fit_tol: f64,
    },
    /// Error curves of solved trajectories against the configured oracle.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory written by `solve`.
        #[arg(long)]
        trajectories: PathBuf,
    },
    /// Run a shipped experiment end to end.
    Reproduce {
        /// heat | tanh_flux | hjb
        experiment: String,
        #[arg(long, default_value = "desk")]
        scale: String,
        /// Use this configuration instead of the preset.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Render curve CSVs as an SVG plot.
    Plot {
        /// `label=path.csv` pairs.
        #[arg(required = true)]
        curves: Vec<String>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value = "relative error")]
        title: String,
    },
    /// Print a shipped configuration as TOML.
    Preset {
        experiment: String,
        #[arg(long, default_value = "desk")]
        scale: String,
    },
}

fn load(common: &Common, cli: &Cli, max_iters: Option<usize>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    overrides(cli, common.seed, common.out.clone(), max_iters).apply(&mut cfg)?;
    Ok(cfg)
}

fn overrides(cli: &Cli, seed: Option<u64>, output_dir: Option<PathBuf>, max_iters: Option<usize>) -> Overrides {
    Overrides {
        seed,
        output_dir,
        max_iters,
        threads: cli.threads,
        deterministic: cli.deterministic,
    }
}

fn threads(cfg: &ExperimentConfig) -> Option<usize> {
    if cfg.deterministic {
        Some(1)
    } else {
        Some(cfg.threads).filter(|&n| n > 0)
    }
}

fn solver_spec(name: &str, steps: usize, rtol: f64, atol: f64) -> Result<SolverSpec> {
    let kind = match name {
        "dopri5" => SolverKind::Dopri5,
        "rk4" => SolverKind::Rk4,
        "euler" => SolverKind::Euler,
        other => return Err(CliError::Config(format!("unknown solver `{other}` (expected dopri5 | rk4 | euler)"))),
    };
    Ok(SolverSpec {
        kind,
        steps,
        ..SolverSpec::dopri5(rtol, atol)
    })
}

fn run(cli: &Cli) -> Result<()> {
    let quiet = cli.quiet;
    let mut progress = |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Train {
            common,
            max_iters,
            method,
        } => {
            let method = match method.as_str() {
                "trajectory" => Method::Trajectory,
                "nls" => Method::Nls,
                other => return Err(CliError::Config(format!("unknown method `{other}` (expected trajectory | nls)"))),
            };
            let cfg = load(common, cli, *max_iters)?;
            let outcome = paramflow::par::with_threads(threads(&cfg), || commands::cmd_train(&cfg, method, &mut progress))?;
            println!(
                "trained {} iterations in {:.1} s; checkpoint in {}",
                outcome.iterations(),
                outcome.seconds,
                cfg.output_dir.display()
            );
        }
        Command::Solve {
            common,
            checkpoint,
            initials,
            t_end,
            solver,
            steps,
            rtol,
            atol,
            fit_tol,
        } => {
            let cfg = load(common, cli, None)?;
            let specs = match initials {
                Some(path) => InitialsFile::load(path)?.initial,
                None => vec![InitialSpec::HeldOut],
            };
            let request = SolveRequest {
                initials: specs,
                t_end: t_end.unwrap_or(cfg.train.horizon),
                solver: solver_spec(solver, *steps, *rtol, *atol)?,
                fit_tolerance: *fit_tol,
            };
            let out = cfg.output_dir.join("trajectories");
            let manifest =
                paramflow::par::with_threads(threads(&cfg), || commands::cmd_solve(&cfg, checkpoint, &request, &out))?;
            for e in &manifest.initials {
                let fit = e.fit_misfit.map_or("given".to_string(), |m| format!("fit misfit {m:.2e}"));
                println!(
                    "{:>4} {:<14} {fit:<20} steps {} (+{} rejected)",
                    e.index, e.source, e.accepted, e.rejected
                );
            }
            println!("solved {} initials in {:.2} s -> {}", manifest.initials.len(), manifest.seconds, out.display());
        }
        Command::Eval { common, trajectories } => {
            let cfg = load(common, cli, None)?;
            let out = cfg.output_dir.clone();
            let curve = paramflow::par::with_threads(threads(&cfg), || commands::cmd_eval(&cfg, trajectories, &out))?;
            println!("t,mean,std");
            for c in curve {
                println!("{},{:.4e},{:.4e}", c.t, c.mean, c.std);
            }
        }
        Command::Reproduce {
            experiment,
            scale,
            config,
            seed,
            out,
            max_iters,
        } => {
            let experiment: Experiment = experiment.parse()?;
            let scale: Scale = scale.parse()?;
            let ov = overrides(cli, *seed, out.clone(), *max_iters);
            let summary = match config {
                Some(path) => {
                    let mut cfg = ExperimentConfig::load(path)?;
                    ov.apply(&mut cfg)?;
                    let dir = cfg.output_dir.clone();
                    paramflow::par::with_threads(threads(&cfg), || commands::reproduce(&cfg, &dir, &mut progress))?
                }
                None => {
                    let mut cfg = ExperimentConfig::preset(experiment, scale)?;
                    ov.apply(&mut cfg)?;
                    paramflow::par::with_threads(threads(&cfg), || {
                        commands::cmd_reproduce(experiment, scale, &ov, &mut progress)
                    })?
                }
            };
            for t in &summary.thresholds {
                println!(
                    "t = {:<5} mean error {:.4} (limit {:.4}) {}",
                    t.t,
                    t.mean,
                    t.max,
                    if t.pass { "pass" } else { "FAIL" }
                );
            }
            if let Some(b) = summary.beats_nls {
                println!("below least-squares baseline at final time: {b}");
            }
            if let Some(d) = &summary.demo {
                let n = d.iter().filter(|c| c.improved).count();
                println!("control lowers the mean cost on {n} of {} terminal costs", d.len());
            }
            println!("{} in {:.0} s", if summary.passed { "passed" } else { "FAILED" }, summary.seconds);
        }
        Command::Plot { curves, out, title } => {
            let pairs = curves
                .iter()
                .map(|c| match c.split_once('=') {
                    Some((label, path)) => Ok((label.to_string(), PathBuf::from(path))),
                    None => Ok((c.clone(), PathBuf::from(c))),
                })
                .collect::<Result<Vec<_>>>()?;
            commands::cmd_plot(&pairs, title, &format!("paramflow v{}", env!("CARGO_PKG_VERSION")), out)?;
        }
        Command::Preset { experiment, scale } => {
            let cfg = ExperimentConfig::preset(experiment.parse()?, scale.parse()?)?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
