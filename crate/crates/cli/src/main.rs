use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tdclab::bounds::{self, ConstantsTable, EpsilonMode, TableParams};
use tdclab::harness::{self, ErrorKind, ExperimentConfig, InstanceSource};
use tdclab::mdp::{self, GarnetParams, Instance};
use tdclab::{Error, ProblemData, RecordGrid, Result, StepSchedule};

#[derive(Parser)]
#[command(name = "tdclab", version, about = "Projected two time-scale TDC experiments on Garnet MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Garnet instance G(ns, na, branching, features).
    Generate(GenerateArgs),
    /// Exact operators, θ*, spectral constants, radii and mixing constants.
    Solve {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bound constants with their sources.
    Constants(ConstantsArgs),
    /// Multi-run TDC experiment written as a curve CSV.
    Run(RunArgs),
    /// Run every config of a figure preset.
    Preset(PresetArgs),
    /// Fit the tail convergence rate of a curve CSV.
    FitRate(FitArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ns: usize,
    #[arg(long)]
    na: usize,
    #[arg(long)]
    branching: usize,
    #[arg(long)]
    features: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = mdp::DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConstantsArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Constant stepsizes the constant-stepsize constants are evaluated at.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 0.02)]
    beta: f64,
    /// Diminishing-stepsize constants entering K_r2 and K_r3.
    #[arg(long, default_value_t = 1.8)]
    c_alpha: f64,
    #[arg(long, default_value_t = 1.8)]
    c_beta: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleKind {
    Diminishing,
    Constant,
    Blockwise,
}

impl ScheduleKind {
    fn name(self) -> &'static str {
        match self {
            ScheduleKind::Diminishing => "diminishing",
            ScheduleKind::Constant => "constant",
            ScheduleKind::Blockwise => "blockwise",
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long, value_enum)]
    schedule: ScheduleKind,
    #[arg(long)]
    c_alpha: Option<f64>,
    #[arg(long)]
    c_beta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Final squared-error target of a blockwise plan.
    #[arg(long)]
    eps_target: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Use this C7 instead of the closed form.
    #[arg(long)]
    c7: Option<f64>,
    /// Measure C7 from the constant-stepsize noise floor at this α.
    #[arg(long, conflicts_with = "c7")]
    calibrate_alpha: Option<f64>,
    /// Use this λ_x (negative) instead of λ_max(G + Gᵀ).
    #[arg(long, allow_hyphen_values = true)]
    lambda_x: Option<f64>,
    /// Block targets halve ‖θ₀ − θ*‖ rather than its square.
    #[arg(long)]
    eps_unsquared: bool,
    /// Steps per run; a blockwise plan defaults to its own horizon.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "geometric")]
    record_grid: String,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PresetArgs {
    #[arg(long)]
    name: String,
    /// Shrink the full-size setting; omit for the desk profile.
    #[arg(long)]
    scale: Option<f64>,
    /// Override the number of runs per config.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    tail: f64,
    #[arg(long, default_value = "theta")]
    which: String,
    /// Fit over t in [t-min, t-max] instead of the tail fraction.
    #[arg(long, requires = "t_max")]
    t_min: Option<u64>,
    #[arg(long, requires = "t_min")]
    t_max: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => generate(args),
        Command::Solve { mdp, out } => {
            let inst = Instance::load(&mdp)?;
            let problem = ProblemData::build(&inst)?;
            emit(out.as_deref(), &serde_json::to_string_pretty(&problem.report())?)
        }
        Command::Constants(args) => constants(args),
        Command::Run(args) => run(args),
        Command::Preset(args) => preset(args),
        Command::FitRate(args) => fit_rate(args),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, format!("{text}\n"))?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut params = GarnetParams::new(args.ns, args.na, args.branching, args.features, args.seed);
    params.gamma = args.gamma;
    let inst = mdp::generate(&params)?;
    emit(args.out.as_deref(), &inst.to_json()?)
}

fn constants(args: ConstantsArgs) -> Result<()> {
    let inst = Instance::load(&args.mdp)?;
    let problem = ProblemData::build(&inst)?;
    let params =
        TableParams { c_alpha: args.c_alpha, c_beta: args.c_beta, alpha: args.alpha, beta: args.beta, eta: args.eta };
    let table = ConstantsTable::compute(&problem, params)?;
    emit(args.out.as_deref(), &serde_json::to_string_pretty(&table.to_json())?)
}

fn require(value: Option<f64>, flag: &str, kind: &str) -> Result<f64> {
    value.ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required for the {kind} schedule")))
}

fn run(args: RunArgs) -> Result<()> {
    let grid = RecordGrid::parse(&args.record_grid)?;
    let inst = Instance::load(&args.mdp)?;
    let problem = ProblemData::build(&inst)?;
    let schedule = match args.schedule {
        ScheduleKind::Diminishing => StepSchedule::Diminishing {
            c_alpha: require(args.c_alpha, "c-alpha", "diminishing")?,
            c_beta: require(args.c_beta, "c-beta", "diminishing")?,
            sigma: require(args.sigma, "sigma", "diminishing")?,
            nu: require(args.nu, "nu", "diminishing")?,
        },
        ScheduleKind::Constant => StepSchedule::Constant {
            alpha: require(args.alpha, "alpha", "constant")?,
            beta: require(args.beta, "beta", "constant")?,
        },
        ScheduleKind::Blockwise => blockwise_schedule(&args, &inst, &problem)?,
    };
    let steps = match (args.steps, schedule.horizon()) {
        (Some(s), _) => s,
        (None, Some(h)) => h,
        (None, None) => return Err(Error::InvalidArgument("--steps is required".into())),
    };
    let config = ExperimentConfig {
        label: args.label.clone().unwrap_or_else(|| args.schedule.name().to_string()),
        instance: InstanceSource::File { path: args.mdp.clone() },
        schedule,
        steps,
        runs: args.runs,
        base_seed: args.seed,
        record_grid: grid,
        output: Some(args.out.clone()),
    };
    let series = harness::run_on(&inst, &problem, &config)?;
    harness::write_csv(&args.out, &series, Some(&config))?;
    eprintln!(
        "{} runs x {} steps: final mean ||theta - theta*||^2 = {:.6e}",
        config.runs,
        config.steps,
        series.final_mean(ErrorKind::Theta)
    );
    Ok(())
}

fn blockwise_schedule(args: &RunArgs, inst: &Instance, problem: &ProblemData) -> Result<StepSchedule> {
    let eps_target = require(args.eps_target, "eps-target", "blockwise")?;
    let mode = if args.eps_unsquared { EpsilonMode::Unsquared } else { EpsilonMode::Squared };
    let plan = if args.c7.is_none() && args.calibrate_alpha.is_none() && args.lambda_x.is_none() {
        let params = TableParams { eta: args.eta, ..TableParams::default() };
        let table = ConstantsTable::compute(problem, params)?;
        bounds::blockwise_plan(problem, &table, eps_target, args.eta, &vec![0.0; problem.dim()], mode)?
    } else {
        let eta_min = bounds::eta_lower_bound(problem)?;
        if args.eta < eta_min {
            return Err(Error::InvalidArgument(format!("η = {} below its lower bound {eta_min}", args.eta)));
        }
        let lambda_x = match args.lambda_x {
            Some(l) => l,
            None => bounds::stacked_system(problem, args.eta)?.lambda_x,
        };
        let c7 = match (args.c7, args.calibrate_alpha) {
            (Some(c), _) => c,
            (None, Some(alpha)) => {
                let cal = harness::calibrate_c7(inst, problem, alpha, args.eta, 100_000, 20, args.seed)?;
                eprintln!("calibrated C7 = {:.6} (floor {:.6e} at alpha = {alpha})", cal.c7, cal.floor);
                cal.c7
            }
            (None, None) => {
                let table = ConstantsTable::compute(problem, TableParams { eta: args.eta, ..TableParams::default() })?;
                table.c7
            }
        };
        let dist = tdclab::linalg::norm(&problem.theta_star);
        let eps0 = match mode {
            EpsilonMode::Squared => dist * dist,
            EpsilonMode::Unsquared => dist,
        };
        bounds::plan_blocks(eps0, eps_target, c7, lambda_x, args.eta)?
    };
    if plan.blocks.is_empty() {
        return Err(Error::PlanInfeasible("the initial error already meets the target".into()));
    }
    eprintln!("blockwise plan: {} blocks, {} steps", plan.num_blocks, plan.total_steps());
    Ok(plan.schedule())
}

fn preset(args: PresetArgs) -> Result<()> {
    let mut configs = harness::preset(&args.name, args.scale)?;
    if let Some(runs) = args.runs {
        configs.iter_mut().for_each(|c| c.runs = runs);
    }
    let first = configs.first().ok_or_else(|| Error::UnknownPreset(args.name.clone()))?;
    let inst = first.instance.load()?;
    let problem = ProblemData::build(&inst)?;
    std::fs::create_dir_all(&args.out_dir)?;
    for mut config in configs {
        let path = harness::preset_output(&args.out_dir, &args.name, &config);
        config.output = Some(path.clone());
        let series = harness::run_on(&inst, &problem, &config)?;
        harness::write_csv(&path, &series, Some(&config))?;
        eprintln!("{}: final {:.6e} -> {}", config.label, series.final_mean(ErrorKind::Theta), path.display());
    }
    Ok(())
}

fn fit_rate(args: FitArgs) -> Result<()> {
    let which: ErrorKind = args.which.parse()?;
    let curve = harness::read_csv(&args.input)?;
    let fit = match (args.t_min, args.t_max) {
        (Some(lo), Some(hi)) => harness::fit_rate_between(&curve.series, lo, hi, which)?,
        _ => harness::fit_rate(&curve.series, args.tail, which)?,
    };
    println!(
        "{}",
        json!({ "slope": fit.slope, "intercept": fit.intercept, "r_squared": fit.r_squared, "points": fit.points })
    );
    Ok(())
}
