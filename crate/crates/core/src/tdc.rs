//! Projected two time-scale TDC.
//!
//! Each step reads one behavior transition `O_t = (s, a, r, s′)` and updates
//!
//! ```text
//! θ ← Π_{R_θ}(θ + α_t (A_t θ + b_t + B_t w))
//! w ← Π_{R_w}(w + β_t (A_t θ + b_t + C_t w))
//! ```
//!
//! from the same pre-step `(θ, w)`. The per-sample matrices are rank one, so
//! the step only needs inner products with `φ(s)` and `φ(s′)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::mdp::{self, FeatureMap, Instance, Observation, Sampler};
use crate::operators::{ProblemData, Radii};
use crate::rng::stream;

/// Dense per-sample matrices `(A_t, B_t, C_t, b_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrices {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub bvec: Vec<f64>,
}

pub fn per_sample_matrices(obs: &Observation, features: &FeatureMap, rho: f64, gamma: f64) -> SampleMatrices {
    let phi = features.phi(obs.s);
    let phi_next = features.phi(obs.s_next);
    let diff: Vec<f64> = phi_next.iter().zip(phi).map(|(n, c)| gamma * n - c).collect();
    SampleMatrices {
        a: Matrix::outer(phi, &diff).scale(rho),
        b: Matrix::outer(phi_next, phi).scale(-gamma * rho),
        c: Matrix::outer(phi, phi).scale(-1.0),
        bvec: linalg::scaled(rho * obs.r, phi),
    }
}

/// Euclidean projection onto the ball of radius `radius`, in place.
#[inline]
pub fn project_ball(x: &mut [f64], radius: f64) {
    let n = linalg::norm(x);
    if n > radius {
        let s = radius / n;
        x.iter_mut().for_each(|v| *v *= s);
    }
}

pub fn projected(x: &[f64], radius: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    project_ball(&mut y, radius);
    y
}

#[derive(Clone, Debug, PartialEq)]
pub struct TdcState {
    pub theta: Vec<f64>,
    pub w: Vec<f64>,
    pub t: u64,
}

impl TdcState {
    pub fn zeros(d: usize) -> Self {
        Self { theta: vec![0.0; d], w: vec![0.0; d], t: 0 }
    }
}

/// Fixed quantities of a run: features, discount and projection radii.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub features: &'a FeatureMap,
    pub gamma: f64,
    pub radii: Radii,
}

/// One projected TDC step on `obs` with importance ratio `rho`.
pub fn tdc_step(state: &mut TdcState, obs: &Observation, alpha: f64, beta: f64, rho: f64, ctx: &StepContext<'_>) {
    let phi = ctx.features.phi(obs.s);
    let phi_next = ctx.features.phi(obs.s_next);
    let v = linalg::dot(phi, &state.theta);
    let v_next = linalg::dot(phi_next, &state.theta);
    let phi_w = linalg::dot(phi, &state.w);
    // A_t θ + b_t = ρ δ φ(s), with δ the TD error.
    let rho_delta = rho * (obs.r + ctx.gamma * v_next - v);

    // θ += α (ρδ φ − γρ (φᵀw) φ′); w += β (ρδ φ − (φᵀw) φ).
    for ((th, wi), (&p, &pn)) in state.theta.iter_mut().zip(state.w.iter_mut()).zip(phi.iter().zip(phi_next)) {
        *th += alpha * (rho_delta * p - ctx.gamma * rho * phi_w * pn);
        *wi += beta * (rho_delta - phi_w) * p;
    }
    project_ball(&mut state.theta, ctx.radii.theta);
    project_ball(&mut state.w, ctx.radii.w);
    state.t += 1;
}

/// One contiguous stretch of a blockwise schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub alpha: f64,
    pub beta: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `α_t = c_α (1+t)^{−σ}`, `β_t = c_β (1+t)^{−ν}`.
    Diminishing { c_alpha: f64, c_beta: f64, sigma: f64, nu: f64 },
    Constant { alpha: f64, beta: f64 },
    Blockwise { blocks: Vec<Block> },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match self {
            StepSchedule::Diminishing { c_alpha, c_beta, sigma, nu } => {
                if !(*c_alpha > 0.0 && *c_beta > 0.0) {
                    return bad(format!("stepsize constants must be positive (c_α={c_alpha}, c_β={c_beta})"));
                }
                // ν = σ is admitted: the single time-scale limit appears in the comparison grids.
                if !(*nu > 0.0 && nu <= sigma && *sigma <= 1.0) {
                    return bad(format!("need 0 < ν ≤ σ ≤ 1, got σ={sigma}, ν={nu}"));
                }
            }
            StepSchedule::Constant { alpha, beta } => {
                if !(*alpha >= 0.0 && *beta >= 0.0) {
                    return bad(format!("constant stepsizes must be nonnegative (α={alpha}, β={beta})"));
                }
            }
            StepSchedule::Blockwise { blocks } => {
                if blocks.iter().any(|b| b.steps == 0) {
                    return bad("every block needs at least one step".into());
                }
                if blocks.iter().any(|b| !(b.alpha > 0.0 && b.beta > 0.0)) {
                    return bad("block stepsizes must be positive".into());
                }
                if blocks.windows(2).any(|w| !(w[1].alpha < w[0].alpha)) {
                    return bad("block α must be strictly decreasing".into());
                }
                if let Some(first) = blocks.first() {
                    let eta = first.beta / first.alpha;
                    if blocks.iter().any(|b| ((b.beta / b.alpha) - eta).abs() > 1e-9 * eta) {
                        return bad("blocks must share a common ratio η = β_s/α_s".into());
                    }
                }
            }
        }
        Ok(())
    }

    /// Total steps of a blockwise plan; `None` for unbounded schedules.
    pub fn horizon(&self) -> Option<u64> {
        match self {
            StepSchedule::Blockwise { blocks } => Some(blocks.iter().map(|b| b.steps).sum()),
            _ => None,
        }
    }

    /// Cumulative block-end steps of a blockwise plan.
    pub fn block_ends(&self) -> Vec<u64> {
        match self {
            StepSchedule::Blockwise { blocks } => blocks
                .iter()
                .scan(0u64, |acc, b| {
                    *acc += b.steps;
                    Some(*acc)
                })
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// `(α_t, β_t)` at step `t` (zero-based).
pub fn stepsize_at(schedule: &StepSchedule, t: u64) -> Result<(f64, f64)> {
    match schedule {
        StepSchedule::Diminishing { c_alpha, c_beta, sigma, nu } => {
            let base = 1.0 + t as f64;
            Ok((c_alpha * base.powf(-sigma), c_beta * base.powf(-nu)))
        }
        StepSchedule::Constant { alpha, beta } => Ok((*alpha, *beta)),
        StepSchedule::Blockwise { blocks } => {
            let mut start = 0u64;
            for b in blocks {
                if t < start + b.steps {
                    return Ok((b.alpha, b.beta));
                }
                start += b.steps;
            }
            Err(Error::HorizonExceeded { t, horizon: start })
        }
    }
}

/// Where errors are recorded along a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordGrid {
    /// `t = 0`, then each checkpoint ≈ `ratio` × the previous, plus the horizon.
    Geometric { ratio: f64 },
    Every { every: u64 },
    Points { points: Vec<u64> },
}

impl Default for RecordGrid {
    fn default() -> Self {
        RecordGrid::Geometric { ratio: 1.05 }
    }
}

impl RecordGrid {
    /// Parses `geometric`, `geometric:<ratio>` or `every:<k>`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognized record grid `{text}`"));
        match text.split_once(':') {
            None if text == "geometric" => Ok(RecordGrid::default()),
            Some(("geometric", r)) => {
                let ratio: f64 = r.parse().map_err(|_| bad())?;
                if !(ratio > 1.0) {
                    return Err(bad());
                }
                Ok(RecordGrid::Geometric { ratio })
            }
            Some(("every", k)) => {
                let every: u64 = k.parse().map_err(|_| bad())?;
                if every == 0 {
                    return Err(bad());
                }
                Ok(RecordGrid::Every { every })
            }
            _ => Err(bad()),
        }
    }

    /// Sorted, deduplicated checkpoints in `[0, steps]`, always including both ends.
    pub fn checkpoints(&self, steps: u64) -> Vec<u64> {
        let mut pts = match self {
            RecordGrid::Geometric { ratio } => {
                let mut v = vec![0u64];
                let mut t = 1u64;
                while t < steps {
                    v.push(t);
                    t = ((t as f64 * ratio).ceil() as u64).max(t + 1);
                }
                v
            }
            RecordGrid::Every { every } => (0..=steps).step_by(*every as usize).collect(),
            RecordGrid::Points { points } => points.iter().copied().filter(|&p| p <= steps).collect(),
        };
        pts.push(0);
        pts.push(steps);
        pts.sort_unstable();
        pts.dedup();
        pts
    }
}

/// Errors recorded along one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub checkpoints: Vec<u64>,
    /// `‖θ_t − θ*‖²`.
    pub theta_sq_err: Vec<f64>,
    /// `‖z_t‖² = ‖w_t − ψ(θ_t)‖²`.
    pub z_sq_err: Vec<f64>,
    pub block_ends: Vec<u64>,
}

/// Drives one continuous behavior trajectory through `steps` TDC updates.
fn drive(
    inst: &Instance,
    problem: &ProblemData,
    steps: u64,
    mut stepsizes: impl FnMut(u64) -> (f64, f64),
    seed: u64,
    checkpoints: &[u64],
) -> RunTrace {
    let sampler = Sampler::new(&inst.mdp, &inst.policies);
    let ctx = StepContext { features: &inst.features, gamma: inst.mdp.gamma(), radii: problem.radii };
    let mut rng = stream(seed);
    let mut s = mdp::sample_from(&problem.mu, &mut rng);
    let mut state = TdcState::zeros(problem.dim());
    let mut trace = RunTrace {
        checkpoints: Vec::with_capacity(checkpoints.len()),
        theta_sq_err: Vec::with_capacity(checkpoints.len()),
        z_sq_err: Vec::with_capacity(checkpoints.len()),
        block_ends: Vec::new(),
    };
    let record = |state: &TdcState, trace: &mut RunTrace| {
        trace.checkpoints.push(state.t);
        trace.theta_sq_err.push(linalg::norm_sq(&linalg::sub(&state.theta, &problem.theta_star)));
        trace.z_sq_err.push(linalg::norm_sq(&problem.tracking_error(&state.theta, &state.w)));
    };
    let mut next_cp = checkpoints.iter().copied().filter(|&c| c <= steps).peekable();
    for t in 0..steps {
        if next_cp.peek() == Some(&t) {
            record(&state, &mut trace);
            next_cp.next();
        }
        let obs = sampler.step(s, &mut rng);
        let (alpha, beta) = stepsizes(t);
        tdc_step(&mut state, &obs, alpha, beta, inst.policies.rho_at(obs.s, obs.a), &ctx);
        s = obs.s_next;
    }
    if next_cp.peek() == Some(&steps) {
        record(&state, &mut trace);
    }
    trace
}

/// Runs TDC from `θ_0 = w_0 = 0` for `steps` updates on a single trajectory
/// whose start state is drawn from the behavior stationary distribution.
pub fn run_tdc(
    inst: &Instance,
    problem: &ProblemData,
    schedule: &StepSchedule,
    steps: u64,
    seed: u64,
    checkpoints: &[u64],
) -> Result<RunTrace> {
    schedule.validate()?;
    if let Some(h) = schedule.horizon() {
        if steps > h {
            return Err(Error::HorizonExceeded { t: steps, horizon: h });
        }
    }
    check_grid(checkpoints, steps)?;
    let mut trace = match schedule {
        StepSchedule::Blockwise { blocks } => {
            let ends = schedule.block_ends();
            let mut k = 0usize;
            drive(inst, problem, steps, |t| {
                while t >= ends[k] {
                    k += 1;
                }
                (blocks[k].alpha, blocks[k].beta)
            }, seed, checkpoints)
        }
        StepSchedule::Constant { alpha, beta } => {
            drive(inst, problem, steps, |_| (*alpha, *beta), seed, checkpoints)
        }
        StepSchedule::Diminishing { .. } => drive(
            inst,
            problem,
            steps,
            |t| stepsize_at(schedule, t).expect("diminishing schedules are unbounded"),
            seed,
            checkpoints,
        ),
    };
    trace.block_ends = schedule.block_ends().into_iter().filter(|&e| e <= steps).collect();
    Ok(trace)
}

/// Blockwise TDC: blocks share one trajectory and carry `(θ, w)` across
/// boundaries. Block ends are always recorded, on top of `checkpoints`.
pub fn run_blockwise(
    inst: &Instance,
    problem: &ProblemData,
    blocks: &[Block],
    seed: u64,
    checkpoints: &[u64],
) -> Result<RunTrace> {
    let schedule = StepSchedule::Blockwise { blocks: blocks.to_vec() };
    let total = schedule.horizon().unwrap_or(0);
    let mut merged: Vec<u64> = checkpoints.iter().copied().filter(|&c| c <= total).collect();
    merged.extend(schedule.block_ends());
    merged.push(0);
    merged.sort_unstable();
    merged.dedup();
    run_tdc(inst, problem, &schedule, total, seed, &merged)
}

fn check_grid(checkpoints: &[u64], steps: u64) -> Result<()> {
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("record grid must be strictly increasing".into()));
    }
    if checkpoints.last().is_some_and(|&c| c > steps) {
        return Err(Error::InvalidArgument("record grid extends past the horizon".into()));
    }
    Ok(())
}
