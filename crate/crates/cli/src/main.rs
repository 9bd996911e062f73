mod plot;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

use optcon::engine::{run, sweep, write_sweep_csv, RunStatus, ScenarioConfig, ScenarioError};
use optcon::oracle::{kkt_residual, solve_centralized, KktQuery, OracleError, OracleOptions};

#[derive(Parser)]
#[command(name = "optcon", version, about = "Distributed constrained optimal consensus simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write the trajectory CSV and summary JSON.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory.
        #[arg(long, env = "OPTCON_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Draw an SVG from a trajectory CSV.
    Plot {
        csv: PathBuf,
        #[arg(long, value_enum, default_value_t = PlotKind::Positions2d)]
        kind: PlotKind,
        /// Output SVG file.
        #[arg(long, env = "OPTCON_PLOT_OUT")]
        out: PathBuf,
    },
    /// Solve the centralized problem and print the reference optimum as JSON.
    Oracle {
        scenario: PathBuf,
        #[arg(long, env = "OPTCON_ORACLE_TOL")]
        tol: Option<f64>,
    },
    /// Run one simulation per parameter value, in parallel.
    Sweep {
        scenario: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        #[command(flatten)]
        overrides: Overrides,
        /// Output CSV file; standard output when omitted.
        #[arg(long, env = "OPTCON_OUT")]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct Overrides {
    #[arg(long, env = "OPTCON_DT")]
    dt: Option<f64>,
    #[arg(long, env = "OPTCON_T_END")]
    t_end: Option<f64>,
    #[arg(long, env = "OPTCON_SEED")]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    #[value(name = "positions_2d")]
    Positions2d,
    #[value(name = "velocities")]
    Velocities,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Scenario(ScenarioError),
    #[error("{0}")]
    Input(String),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("oracle: {0}")]
    Oracle(OracleError),
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Aborted(_) => 1,
            CliError::Scenario(ScenarioError::InfeasibleInit { .. }) => 3,
            CliError::Oracle(OracleError::InfeasibleStart { .. }) => 3,
            CliError::Oracle(_) => 1,
            _ => 2,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Scenario(e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |err| CliError::Io {
        path: path.to_path_buf(),
        err,
    }
}

fn load(path: &Path, o: Option<&Overrides>) -> Result<ScenarioConfig, CliError> {
    let mut cfg = ScenarioConfig::from_path(path)?;
    if let Some(o) = o {
        if let Some(dt) = o.dt {
            cfg.set_param("dt", dt)?;
        }
        if let Some(t) = o.t_end {
            cfg.set_param("t_end", t)?;
        }
        if let Some(seed) = o.seed {
            cfg.seed = seed;
        }
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn cmd_run(scenario: &Path, overrides: &Overrides, out: &Path) -> Result<(), CliError> {
    let s = load(scenario, Some(overrides))?.build()?;
    let result = run(&s);
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let name = &s.config.name;
    let csv_path = out.join(format!("{name}.csv"));
    result
        .log
        .write_csv(create(&csv_path)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", csv_path.display())))?;
    let summary_path = out.join(format!("{name}.summary.json"));
    let mut w = create(&summary_path)?;
    serde_json::to_writer_pretty(&mut w, &result.summary).map_err(|e| CliError::Input(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(io_err(&summary_path))?;

    let sm = &result.summary;
    eprintln!(
        "{name}: {} at t = {} (dt {}, t_end {}), consensus error {:.3e}, max |v| {:.3e}",
        match sm.status {
            RunStatus::Completed => "completed",
            RunStatus::Aborted => "aborted",
        },
        sm.t_final,
        sm.dt,
        sm.t_end,
        sm.final_consensus_error,
        sm.max_velocity
    );
    for w in &sm.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}", csv_path.display());
    println!("{}", summary_path.display());
    match &sm.abort {
        Some(a) => Err(CliError::Aborted(a.to_string())),
        None => Ok(()),
    }
}

fn cmd_oracle(scenario: &Path, tol: Option<f64>) -> Result<(), CliError> {
    let s = load(scenario, None)?.build()?;
    if s.agents.is_empty() {
        return Err(CliError::Input(format!(
            "{}: the {:?} controller has no optimization problem",
            scenario.display(),
            s.kind
        )));
    }
    let x0 = match &s.config.oracle.x0 {
        Some(x) => nalgebra::DVector::from_column_slice(x),
        None => s.x0.iter().fold(nalgebra::DVector::zeros(s.dim), |a, x| a + x) / s.n_agents() as f64,
    };
    let opts = OracleOptions {
        tol: tol.unwrap_or(s.config.oracle.tol),
        ..OracleOptions::default()
    };
    let (objs, cons) = (s.objectives(), s.constraints());
    let sol = solve_centralized(&objs, &cons, &x0, &opts).map_err(CliError::Oracle)?;
    let x = nalgebra::DVector::from_column_slice(&sol.x);
    let references: serde_json::Map<_, _> = s
        .config
        .reference_points
        .iter()
        .map(|(name, p)| {
            let p = nalgebra::DVector::from_column_slice(p);
            let query = KktQuery {
                alpha: opts.alpha,
                t: f64::INFINITY,
                reference: Some(&x0),
            };
            let kkt = kkt_residual(&p, &objs, &cons, &query);
            let objective: f64 = objs.iter().map(|f| f.value(&p)).sum();
            (
                name.clone(),
                json!({
                    "point": p.as_slice(),
                    "distance": (&p - &x).norm(),
                    "objective": objective,
                    "objective_gap": objective - sol.objective,
                    "kkt": kkt,
                }),
            )
        })
        .collect();
    let doc = json!({
        "scenario": s.config.name,
        "x0": x0.as_slice(),
        "solution": sol,
        "references": references,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Input(e.to_string()))?;
    let _ = writeln!(io::stdout().lock(), "{text}");
    Ok(())
}

fn cmd_sweep(
    scenario: &Path,
    param: &str,
    values: &[f64],
    overrides: &Overrides,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load(scenario, Some(overrides))?;
    let rows = sweep(&cfg, param, values)?;
    let csv_err = |e: csv::Error| CliError::Input(e.to_string());
    match out {
        Some(path) => write_sweep_csv(param, &rows, create(path)?).map_err(csv_err)?,
        None => write_sweep_csv(param, &rows, io::stdout().lock()).map_err(csv_err)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            overrides,
            out,
        } => cmd_run(scenario, overrides, out),
        Command::Plot { csv, kind, out } => {
            let kind = match kind {
                PlotKind::Positions2d => plot::Kind::Positions2d,
                PlotKind::Velocities => plot::Kind::Velocities,
            };
            plot::plot_file(csv, kind, out).map_err(|e| CliError::Input(e.to_string()))
        }
        Command::Oracle { scenario, tol } => cmd_oracle(scenario, *tol),
        Command::Sweep {
            scenario,
            param,
            values,
            overrides,
            out,
        } => cmd_sweep(scenario, param, values, overrides, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
