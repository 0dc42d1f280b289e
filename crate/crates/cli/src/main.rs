//! `voltvar`: run closed-loop reactive power control experiments on a feeder.
//!
//! Every verb prints JSON on stdout. Failures print
//! `{"error": <kind>, "message": <text>}` on stderr and exit with status 1
//! (2 for usage errors).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use voltvar_core::approx::ApproxModel;
use voltvar_core::grid::{load_grid_file, parse_load_file, GridModel, GridOptions, PowerInjection};
use voltvar_core::harness::{
    approximation_check, centralized_oracle, emit, kkt_residuals, nonlinear_losses, run_scenario,
    EmitFormat, GammaSpec, HarnessError, InjectionSplit, Mode, Scenario,
};

#[derive(Parser, Debug)]
#[command(name = "voltvar", version, about = "Distributed reactive power control on radial feeders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the closed loop on the nonlinear plant and write the trace.
    Simulate {
        /// Grid file; overrides the scenario's own reference.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Scenario file. Without one, the grid's own loads are held constant.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        /// Step size as a fraction of the stability bound.
        #[arg(long)]
        gamma_frac: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Solve the linearised optimal reactive power problem centrally.
    Oracle {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        loads: Option<PathBuf>,
        #[arg(long, default_value_t = 0.96)]
        umin_pu: f64,
    },
    /// Print the step-size bound, D and the spectral radius of M.
    Bound {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Tabulate the linearisation error as the nominal voltage is scaled.
    CheckApprox {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        loads: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        scales: Vec<f64>,
    },
    /// Dump X, M, G and the communication graph as JSON.
    ExportModel {
        #[arg(long)]
        grid: PathBuf,
    },
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn fail<E: Into<HarnessError>>(e: E) -> Failure {
    Failure::from(e.into())
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        kind: "io",
        message: format!("{}: {e}", path.display()),
    }
}

fn load(grid: &Path, loads: Option<&Path>) -> Result<(GridModel, PowerInjection), Failure> {
    let (model, mut s) = load_grid_file(grid, GridOptions::default()).map_err(fail)?;
    if let Some(path) = loads {
        let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        s = parse_load_file(&model, &s, &text).map_err(fail)?;
    }
    Ok((model, s))
}

fn by_agent(grid: &GridModel, values: &[f64]) -> Value {
    grid.generators()
        .zip(values)
        .map(|(h, v)| (grid.id_of(h).to_string(), json!(v)))
        .collect::<serde_json::Map<_, _>>()
        .into()
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    grid: Option<PathBuf>,
    scenario: Option<PathBuf>,
    mode: Option<Mode>,
    gamma_frac: Option<f64>,
    steps: Option<usize>,
    seed: Option<u64>,
    out: PathBuf,
    plot: Option<PathBuf>,
) -> Result<Value, Failure> {
    let mut sc = match (&scenario, &grid) {
        (Some(path), grid) => Scenario::from_file_with_grid(path, grid.as_deref())?,
        (None, Some(grid)) => {
            let (model, s) = load(grid, None)?;
            Scenario::new(model, s, Mode::Sync, 200)
        }
        (None, None) => {
            return Err(Failure {
                kind: "usage",
                message: "simulate needs --scenario or --grid".into(),
            })
        }
    };
    if let Some(mode) = mode {
        sc.mode = mode;
    }
    if let Some(f) = gamma_frac {
        sc.gamma = GammaSpec::FractionOfBound(f);
    }
    if let Some(steps) = steps {
        sc.steps = steps;
    }
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    let u_min_pu = sc.u_min / sc.grid.u_nominal();
    let write = |trace| -> Result<(), Failure> {
        emit(trace, EmitFormat::Csv, &out)?;
        if let Some(plot) = &plot {
            emit(trace, EmitFormat::Svg { u_min_pu }, plot)?;
        }
        Ok(())
    };
    let trace = match run_scenario(&sc) {
        Ok(trace) => trace,
        Err(HarnessError::Diverged { step, trace, source }) => {
            write(&trace)?;
            return Err(Failure {
                kind: "diverged",
                message: format!(
                    "run diverged at step {step}: {source}; {} rows written to {}",
                    trace.len(),
                    out.display()
                ),
            });
        }
        Err(e) => return Err(e.into()),
    };
    write(&trace)?;
    let last = trace.last().expect("at least one step");
    Ok(json!({
        "steps": trace.len(),
        "mode": sc.mode,
        "final_losses_w": last.losses_w,
        "final_min_v_pu": last.min_v_pu,
        "max_violation_pu": trace.max_violation_pu(),
        "q": by_agent(&sc.grid, &last.q),
        "lambda": by_agent(&sc.grid, &last.lambda),
        "out": out,
    }))
}

fn oracle(grid: &Path, loads: Option<&Path>, umin_pu: f64) -> Result<Value, Failure> {
    let (grid, s) = load(grid, loads)?;
    let model = ApproxModel::build(&grid).map_err(fail)?;
    let split = InjectionSplit::new(&grid, &s);
    let u_min = umin_pu * grid.u_nominal();
    let sol = centralized_oracle(&model, &split.q_l, &split.p_g, &split.p_l, u_min).map_err(fail)?;
    let kkt = kkt_residuals(&model, &split, &sol.q, &sol.lambda, u_min);
    let zeros = vec![0.0; sol.q.len()];
    let base = nonlinear_losses(&grid, &s, &zeros).map_err(fail)?;
    let optimal = nonlinear_losses(&grid, &s, &sol.q).map_err(fail)?;
    Ok(json!({
        "method": sol.method,
        "u_min_pu": umin_pu,
        "q": by_agent(&grid, &sol.q),
        "lambda": by_agent(&grid, &sol.lambda),
        "active": grid.generators().zip(&sol.active)
            .filter(|(_, &a)| a)
            .map(|(h, _)| grid.id_of(h))
            .collect::<Vec<_>>(),
        "losses_w": optimal,
        "losses_uncompensated_w": base,
        "kkt_worst": kkt.worst(),
    }))
}

fn bound(grid: &Path) -> Result<Value, Failure> {
    let (grid, _) = load(grid, None)?;
    let model = ApproxModel::build(&grid).map_err(fail)?;
    Ok(json!({
        "gamma_max": model.gamma_max.value(),
        "bounded": model.gamma_max.value().is_some(),
        "d": model.d,
        "rho_m": model.rho_m,
        "theta": model.theta,
        "generators": grid.generator_count(),
    }))
}

fn check_approx(grid: &Path, loads: Option<&Path>, scales: &[f64]) -> Result<Value, Failure> {
    let (grid, s) = load(grid, loads)?;
    let rows = approximation_check(&grid, &s, scales)?;
    Ok(json!({ "rows": rows }))
}

fn export_model(grid: &Path) -> Result<Value, Failure> {
    let (grid, _) = load(grid, None)?;
    let model = ApproxModel::build(&grid).map_err(fail)?;
    serde_json::to_value(model.export(&grid)).map_err(|e| Failure {
        kind: "serialize",
        message: e.to_string(),
    })
}

fn run(cli: Cli) -> Result<Value, Failure> {
    match cli.command {
        Command::Simulate {
            grid,
            scenario,
            mode,
            gamma_frac,
            steps,
            seed,
            out,
            plot,
        } => simulate(grid, scenario, mode, gamma_frac, steps, seed, out, plot),
        Command::Oracle {
            grid,
            loads,
            umin_pu,
        } => oracle(&grid, loads.as_deref(), umin_pu),
        Command::Bound { grid } => bound(&grid),
        Command::CheckApprox {
            grid,
            loads,
            scales,
        } => check_approx(&grid, loads.as_deref(), &scales),
        Command::ExportModel { grid } => export_model(&grid),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = json!({ "error": "usage", "message": e.to_string().trim_end() });
            eprintln!("{err}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(value) => {
            // A closed pipe downstream is not an error worth reporting.
            let _ = writeln!(
                std::io::stdout(),
                "{}",
                serde_json::to_string_pretty(&value).expect("json")
            );
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
            ExitCode::from(if f.kind == "usage" { 2 } else { 1 })
        }
    }
}
