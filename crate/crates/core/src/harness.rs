//! Multi-run experiments: seeded independent runs, mean/SE aggregation,
//! tail-rate fits, CSV I/O, and the figure presets.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{self, BlockwisePlan};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{self, GarnetParams, Instance};
use crate::operators::ProblemData;
use crate::rng::split_seed;
use crate::tdc::{self, RecordGrid, RunTrace, StepSchedule};

pub const CSV_HEADER: &str = "t,mean_theta_sq_err,se_theta_sq_err,mean_z_sq_err,se_z_sq_err";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InstanceSource {
    Generate(GarnetParams),
    File { path: PathBuf },
}

impl InstanceSource {
    pub fn load(&self) -> Result<Instance> {
        match self {
            InstanceSource::Generate(params) => mdp::generate(params),
            InstanceSource::File { path } => Instance::load(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub label: String,
    pub instance: InstanceSource,
    pub schedule: StepSchedule,
    pub steps: u64,
    pub runs: usize,
    pub base_seed: u64,
    pub record_grid: RecordGrid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidArgument("runs must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        self.schedule.validate()?;
        if let Some(h) = self.schedule.horizon() {
            if self.steps > h {
                return Err(Error::HorizonExceeded { t: self.steps, horizon: h });
            }
        }
        Ok(())
    }

    /// Canonical single-line JSON.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Mean and standard error of the squared errors across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSeries {
    pub checkpoints: Vec<u64>,
    pub mean_theta_sq_err: Vec<f64>,
    pub se_theta_sq_err: Vec<f64>,
    pub mean_z_sq_err: Vec<f64>,
    pub se_z_sq_err: Vec<f64>,
    pub runs: usize,
    pub block_boundaries: Option<Vec<u64>>,
}

impl RunSeries {
    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn means(&self, which: ErrorKind) -> &[f64] {
        match which {
            ErrorKind::Theta => &self.mean_theta_sq_err,
            ErrorKind::Z => &self.mean_z_sq_err,
        }
    }

    /// Mean at checkpoint `t`, if recorded.
    pub fn mean_at(&self, t: u64, which: ErrorKind) -> Option<f64> {
        self.checkpoints.binary_search(&t).ok().map(|i| self.means(which)[i])
    }

    pub fn final_mean(&self, which: ErrorKind) -> f64 {
        *self.means(which).last().expect("series is nonempty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Theta,
    Z,
}

impl std::str::FromStr for ErrorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta" => Ok(ErrorKind::Theta),
            "z" => Ok(ErrorKind::Z),
            other => Err(Error::InvalidArgument(format!("`{other}` is neither theta nor z"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn standard_error(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64).sqrt() / (self.n as f64).sqrt()
    }
}

/// Aggregates traces in the given order; they must share checkpoints.
pub fn aggregate(traces: &[RunTrace]) -> Result<RunSeries> {
    let first = traces.first().ok_or_else(|| Error::InvalidArgument("no runs to aggregate".into()))?;
    if traces.iter().any(|t| t.checkpoints != first.checkpoints) {
        return Err(Error::InvalidArgument("runs recorded different checkpoints".into()));
    }
    let k = first.checkpoints.len();
    let mut theta = vec![Welford::default(); k];
    let mut z = vec![Welford::default(); k];
    for trace in traces {
        for i in 0..k {
            theta[i].push(trace.theta_sq_err[i]);
            z[i].push(trace.z_sq_err[i]);
        }
    }
    Ok(RunSeries {
        checkpoints: first.checkpoints.clone(),
        mean_theta_sq_err: theta.iter().map(|w| w.mean).collect(),
        se_theta_sq_err: theta.iter().map(Welford::standard_error).collect(),
        mean_z_sq_err: z.iter().map(|w| w.mean).collect(),
        se_z_sq_err: z.iter().map(Welford::standard_error).collect(),
        runs: traces.len(),
        block_boundaries: if first.block_ends.is_empty() { None } else { Some(first.block_ends.clone()) },
    })
}

/// Runs every seed of `config` on an already solved instance.
pub fn run_on(inst: &Instance, problem: &ProblemData, config: &ExperimentConfig) -> Result<RunSeries> {
    config.validate()?;
    let mut checkpoints = config.record_grid.checkpoints(config.steps);
    checkpoints.extend(config.schedule.block_ends().into_iter().filter(|&e| e <= config.steps));
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let traces = (0..config.runs)
        .into_par_iter()
        .map(|i| {
            let seed = split_seed(config.base_seed, i as u64);
            tdc::run_tdc(inst, problem, &config.schedule, config.steps, seed, &checkpoints)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&traces)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSeries> {
    config.validate()?;
    let inst = config.instance.load()?;
    let problem = ProblemData::build(&inst)?;
    run_on(&inst, &problem, config)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least-squares fit of `ln(mean err)` on `ln t` over the last
/// `tail_fraction` of the checkpoints with `t ≥ 1`.
pub fn fit_rate(series: &RunSeries, tail_fraction: f64, which: ErrorKind) -> Result<RateFit> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("tail fraction {tail_fraction} outside (0, 1]")));
    }
    let idx: Vec<usize> = (0..series.len()).filter(|&i| series.checkpoints[i] >= 1).collect();
    let keep = (tail_fraction * idx.len() as f64).ceil() as usize;
    fit_indices(series, &idx[idx.len() - keep..], which)
}

/// Same fit restricted to checkpoints in `[t_lo, t_hi]`.
pub fn fit_rate_between(series: &RunSeries, t_lo: u64, t_hi: u64, which: ErrorKind) -> Result<RateFit> {
    let idx: Vec<usize> = (0..series.len())
        .filter(|&i| {
            let t = series.checkpoints[i];
            t >= t_lo.max(1) && t <= t_hi
        })
        .collect();
    fit_indices(series, &idx, which)
}

fn fit_indices(series: &RunSeries, idx: &[usize], which: ErrorKind) -> Result<RateFit> {
    if idx.len() < 5 {
        return Err(Error::InsufficientData(format!("{} checkpoints in the fit window, need 5", idx.len())));
    }
    let means = series.means(which);
    for &i in idx {
        if !(means[i] > 0.0) {
            return Err(Error::NonpositiveError { t: series.checkpoints[i], value: means[i] });
        }
    }
    let xs: Vec<f64> = idx.iter().map(|&i| (series.checkpoints[i] as f64).ln()).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| means[i].ln()).collect();
    Ok(least_squares(&xs, &ys))
}

fn least_squares(xs: &[f64], ys: &[f64]) -> RateFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    RateFit { slope, intercept, r_squared, points: xs.len() }
}

/// Writes the preamble, the header and one row per checkpoint.
pub fn write_csv(path: impl AsRef<Path>, series: &RunSeries, config: Option<&ExperimentConfig>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    if let Some(cfg) = config {
        writeln!(out, "# config: {}", cfg.canonical_json())?;
    }
    if let Some(blocks) = &series.block_boundaries {
        let list: Vec<String> = blocks.iter().map(u64::to_string).collect();
        writeln!(out, "# blocks: {}", list.join(","))?;
    }
    writeln!(out, "{CSV_HEADER}")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..series.len() {
        w.write_record(&[
            series.checkpoints[i].to_string(),
            series.mean_theta_sq_err[i].to_string(),
            series.se_theta_sq_err[i].to_string(),
            series.mean_z_sq_err[i].to_string(),
            series.se_z_sq_err[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Contents of a curve CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveFile {
    pub config: Option<ExperimentConfig>,
    pub series: RunSeries,
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<CurveFile> {
    let file = fs::File::open(path.as_ref())?;
    let mut config = None;
    let mut blocks = None;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("# config: ") {
            config = Some(serde_json::from_str::<ExperimentConfig>(rest)?);
        } else if let Some(rest) = line.strip_prefix("# blocks: ") {
            let parsed = rest
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.trim().parse::<u64>().map_err(|_| Error::Parse(format!("bad block boundary `{s}`"))))
                .collect::<Result<Vec<_>>>()?;
            blocks = Some(parsed);
        } else if !line.starts_with('#') {
            lines.push(line);
        }
    }
    if lines.first().map(String::as_str) != Some(CSV_HEADER) {
        return Err(Error::Parse(format!("expected header `{CSV_HEADER}`")));
    }
    let body = lines[1..].join("\n");
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(body.as_bytes());
    let mut series = RunSeries {
        checkpoints: Vec::new(),
        mean_theta_sq_err: Vec::new(),
        se_theta_sq_err: Vec::new(),
        mean_z_sq_err: Vec::new(),
        se_z_sq_err: Vec::new(),
        runs: config.as_ref().map_or(0, |c| c.runs),
        block_boundaries: blocks,
    };
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 5 {
            return Err(Error::Parse(format!("data row {} has {} fields", row + 1, record.len())));
        }
        let num = |k: usize| -> Result<f64> {
            record[k].parse().map_err(|_| Error::Parse(format!("data row {}: bad number `{}`", row + 1, &record[k])))
        };
        series.checkpoints.push(
            record[0].parse().map_err(|_| Error::Parse(format!("data row {}: bad step `{}`", row + 1, &record[0])))?,
        );
        series.mean_theta_sq_err.push(num(1)?);
        series.se_theta_sq_err.push(num(2)?);
        series.mean_z_sq_err.push(num(3)?);
        series.se_z_sq_err.push(num(4)?);
    }
    Ok(CurveFile { config, series })
}

/// Instance and experiment sizes shared by a preset's configs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PresetScale {
    pub garnet: GarnetParams,
    pub runs: usize,
    pub steps: u64,
}

pub const PRESET_NAMES: [&str; 6] = ["fig1a", "fig1b", "fig1c", "fig1d", "fig2", "fig3"];

/// Seed of the Garnet instance every preset runs on.
pub const PRESET_INSTANCE_SEED: u64 = 1;
pub const PRESET_BASE_SEED: u64 = 1;

/// Without a scale: the desk profile G(50,5,10,8), 100 runs, 2·10⁵ steps.
/// With scale `s`: G(max(20, 500s), 20, 50s, 20), 500s runs, 5·10⁵·s steps,
/// so `s = 1` is the full-size setting.
pub fn preset_scale(scale: Option<f64>) -> Result<PresetScale> {
    match scale {
        None => Ok(PresetScale {
            garnet: GarnetParams::new(50, 5, 10, 8, PRESET_INSTANCE_SEED),
            runs: 100,
            steps: 200_000,
        }),
        Some(s) if s > 0.0 && s <= 1.0 => {
            let q = 20;
            let n_states = ((500.0 * s).round() as usize).max(q);
            let branching = ((50.0 * s).round() as usize).clamp(1, n_states);
            Ok(PresetScale {
                garnet: GarnetParams::new(n_states, 20, branching, q, PRESET_INSTANCE_SEED),
                runs: ((500.0 * s).round() as usize).max(1),
                steps: ((5e5 * s).round() as u64).max(1),
            })
        }
        Some(s) => Err(Error::InvalidArgument(format!("scale {s} outside (0, 1]"))),
    }
}

/// `ν/σ` ratios of the diminishing-stepsize grids.
pub const NU_RATIOS: [(f64, f64); 6] = [(1.0, 3.0), (1.0, 2.0), (5.0, 9.0), (2.0, 3.0), (5.0, 6.0), (1.0, 1.0)];

pub const BEST_DIMINISHING: StepSchedule =
    StepSchedule::Diminishing { c_alpha: 1.8, c_beta: 1.8, sigma: 0.45, nu: 0.30 };

pub const CONSTANT_PAIRS: [(f64, f64); 4] = [(0.01, 0.006), (0.02, 0.008), (0.05, 0.02), (0.1, 0.02)];

/// `(c, σ)` of the four diminishing grids.
pub const FIG1_SETTINGS: [(&str, f64, f64); 4] =
    [("fig1a", 0.03, 0.15), ("fig1b", 0.18, 0.30), ("fig1c", 1.0, 0.45), ("fig1d", 4.0, 0.60)];

/// The `η ≥ η_min` on a logarithmic grid over `[η_min, 100]` minimizing
/// `λ_x`, i.e. giving the fastest stacked contraction; returns `(η, λ_x)`.
pub fn fastest_eta(problem: &ProblemData) -> Result<(f64, f64)> {
    let lo = bounds::eta_lower_bound(problem)?.max(1e-3);
    let hi = 100.0f64.max(2.0 * lo);
    let n = 121;
    let mut best = (f64::NAN, f64::INFINITY);
    for i in 0..n {
        let eta = lo * (hi / lo).powf(i as f64 / (n - 1) as f64);
        let (g, _) = bounds::stacked_matrix(problem, eta);
        let lx = linalg::lambda_max(&g.add(&g.transpose()))?;
        if lx < best.1 {
            best = (eta, lx);
        }
    }
    if !(best.1 < 0.0) {
        return Err(Error::NotNegativeDefinite(format!(
            "λ_max(G+Gᵀ) ≥ 0 for every η in [{lo}, {hi}]"
        )));
    }
    Ok(best)
}
/// Constant stepsize at which the noise floor is measured.
pub const CALIBRATION_ALPHA: f64 = 0.01;

/// Noise floor of constant-stepsize TDC and the `C₇` it implies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorCalibration {
    pub alpha: f64,
    pub eta: f64,
    /// Mean `‖θ_t − θ*‖²` over the second half of the run.
    pub floor: f64,
    /// `floor / max{α ln(1/α), α}`.
    pub c7: f64,
}

/// Estimates `C₇` from the stationary error of constant stepsizes
/// `(α, ηα)`: the blockwise analysis bounds that error by
/// `C₇ max{α ln(1/α), α}`, so the measured floor gives an instance-level
/// value in place of the worst-case closed form.
pub fn calibrate_c7(
    inst: &Instance,
    problem: &ProblemData,
    alpha: f64,
    eta: f64,
    steps: u64,
    runs: usize,
    seed: u64,
) -> Result<FloorCalibration> {
    let config = ExperimentConfig {
        label: "calibration".into(),
        instance: InstanceSource::File { path: PathBuf::new() },
        schedule: StepSchedule::Constant { alpha, beta: eta * alpha },
        steps,
        runs,
        base_seed: seed,
        record_grid: RecordGrid::Every { every: (steps / 200).max(1) },
        output: None,
    };
    let series = run_on(inst, problem, &config)?;
    let tail: Vec<f64> = series
        .checkpoints
        .iter()
        .zip(&series.mean_theta_sq_err)
        .filter(|(&t, _)| 2 * t >= steps)
        .map(|(_, &e)| e)
        .collect();
    let floor = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok(FloorCalibration { alpha, eta, floor, c7: floor / bounds::log_step_factor(alpha) })
}

/// Blockwise plan from `θ₀ = 0` with `num_blocks` halvings of the squared
/// initial error, using `C₇ = c7` and the instance's `λ_x` at `η`.
pub fn calibrated_plan(problem: &ProblemData, c7: f64, eta: f64, num_blocks: usize) -> Result<BlockwisePlan> {
    let eta_min = bounds::eta_lower_bound(problem)?;
    if eta < eta_min {
        return Err(Error::InvalidArgument(format!("η = {eta} below its lower bound {eta_min}")));
    }
    let stacked = bounds::stacked_system(problem, eta)?;
    let eps0 = linalg::norm_sq(&problem.theta_star);
    if !(eps0 > 0.0) {
        return Err(Error::DegenerateInstance("θ* = 0 leaves nothing to plan".into()));
    }
    bounds::plan_blocks(eps0, eps0 / 2f64.powi(num_blocks as i32), c7, stacked.lambda_x, eta)
}

/// The longest calibrated plan that fits in `steps`, at least one block.
pub fn plan_for_budget(problem: &ProblemData, c7: f64, eta: f64, steps: u64) -> Result<BlockwisePlan> {
    let mut best = calibrated_plan(problem, c7, eta, 1)?;
    for n in 2..=40 {
        let plan = calibrated_plan(problem, c7, eta, n)?;
        if plan.total_steps() > steps {
            break;
        }
        best = plan;
    }
    Ok(best)
}

pub fn preset(name: &str, scale: Option<f64>) -> Result<Vec<ExperimentConfig>> {
    let sc = preset_scale(scale)?;
    let base = |label: String, schedule: StepSchedule| ExperimentConfig {
        label,
        instance: InstanceSource::Generate(sc.garnet),
        schedule,
        steps: sc.steps,
        runs: sc.runs,
        base_seed: PRESET_BASE_SEED,
        record_grid: RecordGrid::default(),
        output: None,
    };
    if let Some(&(_, c, sigma)) = FIG1_SETTINGS.iter().find(|(n, ..)| *n == name) {
        return Ok(NU_RATIOS
            .iter()
            .map(|&(num, den)| {
                let nu = sigma * num / den;
                let schedule = StepSchedule::Diminishing { c_alpha: c, c_beta: c, sigma, nu };
                base(format!("{name}_nu{num}over{den}"), schedule)
            })
            .collect());
    }
    match name {
        "fig2" => {
            let mut out = vec![base("diminishing_best".into(), BEST_DIMINISHING)];
            out.extend(CONSTANT_PAIRS.iter().map(|&(alpha, beta)| {
                base(format!("constant_a{alpha}_b{beta}"), StepSchedule::Constant { alpha, beta })
            }));
            Ok(out)
        }
        "fig3" => {
            let inst = mdp::generate(&sc.garnet)?;
            let problem = ProblemData::build(&inst)?;
            let (eta, _) = fastest_eta(&problem)?;
            let cal = calibrate_c7(&inst, &problem, CALIBRATION_ALPHA, eta, sc.steps / 2, 20, PRESET_BASE_SEED)?;
            let plan = plan_for_budget(&problem, cal.c7, eta, sc.steps)?;
            let total = plan.total_steps();
            let mut configs = vec![
                base("blockwise".into(), plan.schedule()),
                base("diminishing_best".into(), BEST_DIMINISHING),
                base("constant_a0.1_b0.02".into(), StepSchedule::Constant { alpha: 0.1, beta: 0.02 }),
            ];
            for c in &mut configs {
                c.steps = total;
            }
            Ok(configs)
        }
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// Output path of a preset config inside `dir`.
pub fn preset_output(dir: impl AsRef<Path>, name: &str, config: &ExperimentConfig) -> PathBuf {
    dir.as_ref().join(format!("{name}_{}.csv", config.label))
}
