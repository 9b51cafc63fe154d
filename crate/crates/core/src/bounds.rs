//! Closed-form constants behind the finite-time guarantees for projected TDC:
//! boundedness and Lipschitz constants of the reformulated update, mixing
//! times, the diminishing-stepsize rate envelope, the constant-stepsize
//! constants `C₁…C₆`, the stacked `x = [θ; w]` system, and the blockwise
//! stepsize planner.
//!
//! The reformulation writes the TDC step in terms of `θ` and the tracking
//! error `z = w − ψ(θ)`:
//!
//! ```text
//! f₁(θ, O) = (A_t − B_t C⁻¹A) θ + (b_t − B_t C⁻¹b),   g₁(z, O) = B_t z
//! f₂(θ, O) = (A_t − C_t C⁻¹A) θ + (b_t − C_t C⁻¹b),   g₂(z, O) = C_t z
//! ```
//!
//! so that `f₁ + g₁ = A_tθ + b_t + B_t w` and `f₂ + g₂ = A_tθ + b_t + C_t w`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::mdp::{self, FeatureMap, Instance, Observation, Sampler};
use crate::operators::ProblemData;
use crate::rng::{split_seed, stream, StreamRng};
use crate::tdc::{per_sample_matrices, Block, StepSchedule};

/// The four helper vectors of the `(θ, z)` reformulation at one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct HelperSplit {
    pub f1: Vec<f64>,
    pub g1: Vec<f64>,
    pub f2: Vec<f64>,
    pub g2: Vec<f64>,
}

pub fn helper_split(
    theta: &[f64],
    z: &[f64],
    obs: &Observation,
    problem: &ProblemData,
    features: &FeatureMap,
    rho: f64,
) -> HelperSplit {
    let m = per_sample_matrices(obs, features, rho, problem.gamma);
    let c_inv_a = problem.c_inv.matmul(&problem.ops.a);
    let c_inv_b = problem.c_inv.matvec(&problem.ops.bvec);
    let lin = |sample: &Matrix| -> Vec<f64> {
        let mut v = m.a.sub(&sample.matmul(&c_inv_a)).matvec(theta);
        linalg::axpy(1.0, &m.bvec, &mut v);
        linalg::axpy(-1.0, &sample.matvec(&c_inv_b), &mut v);
        v
    };
    let split = HelperSplit { f1: lin(&m.b), g1: m.b.matvec(z), f2: lin(&m.c), g2: m.c.matvec(z) };
    if cfg!(debug_assertions) {
        let (lhs1, lhs2) = identity_sides(theta, z, obs, problem, features, rho, &split);
        let scale = 1.0 + linalg::norm(theta) + linalg::norm(z);
        debug_assert!(lhs1 <= 1e-9 * scale && lhs2 <= 1e-9 * scale, "helper identity broken");
    }
    split
}

/// Sup-norm deviations of `f₁+g₁ − (A_tθ+b_t+B_t w)` and
/// `f₂+g₂ − (A_tθ+b_t+C_t w)` with `w = z − C⁻¹(b + Aθ)`.
pub fn identity_sides(
    theta: &[f64],
    z: &[f64],
    obs: &Observation,
    problem: &ProblemData,
    features: &FeatureMap,
    rho: f64,
    split: &HelperSplit,
) -> (f64, f64) {
    let m = per_sample_matrices(obs, features, rho, problem.gamma);
    let w = linalg::sub(z, &problem.c_inv.matvec(&problem.residual(theta)));
    let mut base = m.a.matvec(theta);
    linalg::axpy(1.0, &m.bvec, &mut base);
    let rhs1 = linalg::add(&base, &m.b.matvec(&w));
    let rhs2 = linalg::add(&base, &m.c.matvec(&w));
    (
        linalg::max_abs_diff(&linalg::add(&split.f1, &split.g1), &rhs1),
        linalg::max_abs_diff(&linalg::add(&split.f2, &split.g2), &rhs2),
    )
}

/// Scalars the lemma constants are built from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LemmaInputs {
    pub r_theta: f64,
    pub r_w: f64,
    pub lambda_cm: f64,
    pub norm_a: f64,
    pub norm_c_inv: f64,
    pub r_max: f64,
    pub rho_max: f64,
    pub gamma: f64,
    pub c_alpha: f64,
    pub c_beta: f64,
}

impl LemmaInputs {
    pub fn from_problem(problem: &ProblemData, c_alpha: f64, c_beta: f64) -> Self {
        Self {
            r_theta: problem.radii.theta,
            r_w: problem.radii.w,
            lambda_cm: problem.spectral.lambda_cm,
            norm_a: problem.norm_a(),
            norm_c_inv: problem.norm_c_inv(),
            r_max: problem.r_max,
            rho_max: problem.rho_max,
            gamma: problem.gamma,
            c_alpha,
            c_beta,
        }
    }
}

/// Boundedness (`K`) and Lipschitz (`L`) constants of the helper functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaConstants {
    pub k_f1: f64,
    pub k_g1: f64,
    pub k_f2: f64,
    pub k_g2: f64,
    pub k_r1: f64,
    pub k_r2: f64,
    pub k_r3: f64,
    pub l_f1_theta: f64,
    pub l_f2_theta: f64,
    pub l_f2_z: f64,
    pub l_g2_z: f64,
}

pub fn lemma_constants(inputs: &LemmaInputs) -> LemmaConstants {
    let LemmaInputs { r_theta, r_w, lambda_cm, norm_a, norm_c_inv, r_max, rho_max, gamma, c_alpha, c_beta } =
        *inputs;
    let ratio = (c_alpha / c_beta).max(1.0);
    let a_bound = (1.0 + gamma) * rho_max;

    // ‖A_t‖ ≤ (1+γ)ρ_max, ‖B_t‖ ≤ γρ_max, ‖C_t‖ ≤ 1, ‖C⁻¹‖ = 1/λ_cm, ‖b_t‖ ≤ ρ_max r_max.
    let k_f1 = (a_bound + gamma * a_bound * rho_max / lambda_cm) * r_theta
        + rho_max * r_max
        + gamma * rho_max * rho_max * r_max / lambda_cm;
    let k_g1 = 2.0 * gamma * rho_max * r_w;
    let k_f2 = (a_bound + a_bound / lambda_cm) * r_theta + rho_max * r_max + rho_max * r_max / lambda_cm;
    let k_g2 = 2.0 * r_w;
    let k_r1 = norm_c_inv * norm_a * (k_f1 + k_g1);
    let k_r2 = k_f2 + k_g2 + ratio * a_bound / lambda_cm * (k_f1 + k_g1);
    let l_f2_theta = 2.0 * r_w * (a_bound + a_bound / lambda_cm);
    let l_f2_z = 2.0 * k_f2;
    let l_g2_z = 4.0 * r_w + 2.0 * k_g2;
    let l_f1_theta = 4.0 * r_theta * a_bound * (1.0 + gamma * rho_max / lambda_cm) + 2.0 * k_f1;
    let k_r3 = ratio * l_f2_theta * (k_f1 + k_g1) + l_f2_z * k_r2;
    LemmaConstants { k_f1, k_g1, k_f2, k_g2, k_r1, k_r2, k_r3, l_f1_theta, l_f2_theta, l_f2_z, l_g2_z }
}

/// Least `i ≥ 0` with `m ρ^i ≤ step`.
pub fn mixing_time(m_hat: f64, rho_hat: f64, step: f64) -> Result<u64> {
    if !(rho_hat > 0.0 && rho_hat < 1.0) {
        return Err(Error::InvalidArgument(format!("rho_hat = {rho_hat} outside (0, 1)")));
    }
    if !(step > 0.0) || !(m_hat > 0.0) {
        return Err(Error::InvalidArgument("mixing time needs m_hat > 0 and step > 0".into()));
    }
    let raw = ((m_hat / step).ln() / (1.0 / rho_hat).ln()).max(0.0).ceil();
    let mut tau = raw as u64;
    // Settle rounding at the boundary against the defining inequality.
    while m_hat * rho_hat.powi(tau as i32) > step {
        tau += 1;
    }
    while tau > 0 && m_hat * rho_hat.powi(tau as i32 - 1) <= step {
        tau -= 1;
    }
    if tau > 0 {
        let bound = mixing_time_upper_bound(m_hat, rho_hat, step);
        assert!((tau as f64) < bound + 1e-9, "τ = {tau} violates the logarithmic bound {bound}");
    }
    Ok(tau)
}

/// `log_{1/ρ}(m/ρ) + ln⁻¹(1/ρ)·ln(1/step)`.
pub fn mixing_time_upper_bound(m_hat: f64, rho_hat: f64, step: f64) -> f64 {
    let l = (1.0 / rho_hat).ln();
    (m_hat / rho_hat).ln() / l + (1.0 / step).ln() / l
}

/// `log_{1/ρ}(m/ρ) + ln⁻¹(1/ρ)`, the stepsize-free part of the mixing-time bound.
fn mixing_factor(m_hat: f64, rho_hat: f64) -> f64 {
    let l = (1.0 / rho_hat).ln();
    (m_hat / rho_hat).ln() / l + 1.0 / l
}

/// Rate envelope `h(σ, ν)` at `t`: `t^{−ν}` when `σ > 1.5ν`, else
/// `t^{−(2(σ−ν)−ε)}`.
pub fn envelope_h(sigma: f64, nu: f64, t: f64, epsilon: f64) -> Result<f64> {
    if !(nu > 0.0 && nu < sigma && sigma <= 1.0) {
        return Err(Error::InvalidArgument(format!("need 0 < ν < σ ≤ 1, got σ={sigma}, ν={nu}")));
    }
    if !(epsilon > 0.0 && epsilon <= sigma - nu) {
        return Err(Error::InvalidArgument(format!("ε = {epsilon} outside (0, σ−ν]")));
    }
    if !(t >= 1.0) {
        return Err(Error::InvalidArgument(format!("t = {t} < 1")));
    }
    let exponent = if sigma > 1.5 * nu + 1e-12 { nu } else { 2.0 * (sigma - nu) - epsilon };
    Ok(t.powf(-exponent))
}

/// `max{x, x ln(1/x)}`.
pub fn log_step_factor(x: f64) -> f64 {
    x.max(x * (1.0 / x).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Constants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    /// Steps until `(1−|λ_w|β)^T ‖z₀‖²` falls under `C₅ max{β, β ln(1/β)}`.
    pub horizon: u64,
}

/// Constants of the constant-stepsize guarantee for `(α, β)`.
pub fn theorem2_constants(
    problem: &ProblemData,
    lemma: &LemmaConstants,
    alpha: f64,
    beta: f64,
    z0_norm_sq: f64,
) -> Result<Theorem2Constants> {
    let lt = problem.spectral.lambda_theta.abs();
    let lw = problem.spectral.lambda_w.abs();
    if !(alpha > 0.0 && alpha < 1.0 / lt && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < α < min(1, 1/|λ_θ| = {}), got {alpha}",
            1.0 / lt
        )));
    }
    if !(beta > 0.0 && beta < 1.0 / lw && beta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < β < min(1, 1/|λ_w| = {}), got {beta}",
            1.0 / lw
        )));
    }
    theorem2_from_scalars(&Theorem2Inputs::from_problem(problem), lemma, alpha, beta, z0_norm_sq)
}

/// Scalars entering `C₁…C₆`, separated so they can be hand-evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Theorem2Inputs {
    pub gamma: f64,
    pub rho_max: f64,
    pub r_theta: f64,
    pub r_w: f64,
    pub lambda_theta_abs: f64,
    pub lambda_w_abs: f64,
    pub lambda_cm: f64,
    pub m_hat: f64,
    pub rho_hat: f64,
}

impl Theorem2Inputs {
    pub fn from_problem(problem: &ProblemData) -> Self {
        Self {
            gamma: problem.gamma,
            rho_max: problem.rho_max,
            r_theta: problem.radii.theta,
            r_w: problem.radii.w,
            lambda_theta_abs: problem.spectral.lambda_theta.abs(),
            lambda_w_abs: problem.spectral.lambda_w.abs(),
            lambda_cm: problem.spectral.lambda_cm,
            m_hat: problem.mixing.m_hat,
            rho_hat: problem.mixing.rho_hat,
        }
    }
}

pub fn theorem2_from_scalars(
    p: &Theorem2Inputs,
    k: &LemmaConstants,
    alpha: f64,
    beta: f64,
    z0_norm_sq: f64,
) -> Result<Theorem2Constants> {
    let (lt, lw) = (p.lambda_theta_abs, p.lambda_w_abs);
    let mix = mixing_factor(p.m_hat, p.rho_hat);
    let c5 = 2.0 * (k.k_r3 + k.l_g2_z * k.k_r2) / lw * mix
        + (16.0 * p.r_w * (k.k_f2 + k.k_g2)
            + 3.0 * (k.k_f2 * k.k_f2 + k.k_g2 * k.k_g2)
            + 3.0 * k.k_r1 * k.k_r1)
            / lw;
    let c6 = 2.0 * (1.0 + p.gamma) * p.rho_max * p.r_w * (k.k_g1 + k.k_f1) / (lw * p.lambda_cm);
    let c2 = 2.0 * k.l_f1_theta * (k.k_f1 + k.k_g1) / lt * mix
        + 2.0 * (8.0 * p.r_theta * k.k_f1 + k.k_f1 * k.k_f1 + k.k_g1 * k.k_g1) / lt;
    let coupling = (p.gamma * p.rho_max * p.r_theta / lt).powi(2);
    let c3 = 32.0 * coupling * c5;
    let c4 = 16.0 * coupling * c6;

    let floor = c5 * log_step_factor(beta);
    let contraction = -(-lw * beta).ln_1p();
    let horizon = if z0_norm_sq > floor {
        ((z0_norm_sq / floor).ln() / contraction).ceil() as u64
    } else {
        0
    };
    let q = (1.0 - lt * alpha).powi(horizon as i32 + 1);
    let c1 = 4.0 * p.gamma * p.rho_max * p.r_theta * p.r_w * (1.0 - q) / (lt * q);
    let out = Theorem2Constants { c1, c2, c3, c4, c5, c6, horizon };
    if [c1, c2, c3, c4, c5, c6].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidArgument(format!("non-positive or non-finite constant in {out:?}")));
    }
    Ok(out)
}

/// Quantities of the stacked iteration `x = [θ; w]`, `x ← Π_X(x + α(G_t x + g_t))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedSystem {
    pub eta: f64,
    /// `‖G‖₂`.
    pub c_g_mat: f64,
    /// `‖g‖₂`.
    pub c_g_vec: f64,
    pub k_h: f64,
    pub l_h: f64,
    /// `λ_max(G + Gᵀ)`.
    pub lambda_x: f64,
}

/// `G = [[A, B], [ηA, ηC]]`, `g = [b; ηb]` with `β = ηα`.
pub fn stacked_matrix(problem: &ProblemData, eta: f64) -> (Matrix, Vec<f64>) {
    let ops = &problem.ops;
    let g = Matrix::block2x2(&ops.a, &ops.b, &ops.a.scale(eta), &ops.c.scale(eta));
    let mut gv = ops.bvec.clone();
    gv.extend(ops.bvec.iter().map(|v| eta * v));
    (g, gv)
}

fn stacked_quantities(problem: &ProblemData, eta: f64) -> Result<StackedSystem> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("η = {eta} must be positive")));
    }
    let (g, gv) = stacked_matrix(problem, eta);
    let c_g_mat = linalg::spectral_norm(&g);
    let c_g_vec = linalg::norm(&gv);
    let radius = problem.radii.theta.hypot(problem.radii.w);
    let k_h = c_g_mat * radius + c_g_vec;
    let l_h = 4.0 * c_g_mat * radius + 2.0 * k_h;
    let lambda_x = linalg::lambda_max(&g.add(&g.transpose()))?;
    Ok(StackedSystem { eta, c_g_mat, c_g_vec, k_h, l_h, lambda_x })
}

/// Stacked-system constants; `NotNegativeDefinite` when `λ_x ≥ 0`.
pub fn stacked_system(problem: &ProblemData, eta: f64) -> Result<StackedSystem> {
    let s = stacked_quantities(problem, eta)?;
    if !(s.lambda_x < 0.0) {
        return Err(Error::NotNegativeDefinite(format!("λ_max(G+Gᵀ) = {} at η = {eta}", s.lambda_x)));
    }
    Ok(s)
}

/// `½ max{0, λ_min(½(M + Mᵀ))}` with `M = C⁻¹(Aᵀ + A)`.
pub fn eta_lower_bound(problem: &ProblemData) -> Result<f64> {
    let a = &problem.ops.a;
    let m = problem.c_inv.matmul(&a.add(&a.transpose()));
    Ok(0.5 * linalg::lambda_min(&m.symmetric_part())?.max(0.0))
}

/// `C₇ = (2/|λ_x|)(8K_h R + L_h K_h log_{1/ρ}(m/ρ) + L_h K_h ln⁻¹(1/ρ) + ½K_h²)`,
/// `R = √(R_θ² + R_w²)`.
pub fn c7(stacked: &StackedSystem, r_theta: f64, r_w: f64, m_hat: f64, rho_hat: f64) -> f64 {
    let radius = r_theta.hypot(r_w);
    let (k, l) = (stacked.k_h, stacked.l_h);
    2.0 / stacked.lambda_x.abs()
        * (8.0 * k * radius + l * k * mixing_factor(m_hat, rho_hat) + 0.5 * k * k)
}

/// How the block targets `ε_s` measure the initial error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonMode {
    /// `ε₀ = ‖θ₀ − θ*‖²`, matching the squared-error guarantee.
    #[default]
    Squared,
    /// `ε₀ = ‖θ₀ − θ*‖`.
    Unsquared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockwisePlan {
    pub blocks: Vec<Block>,
    pub eta: f64,
    /// `ε_0, …, ε_S`, halving exactly.
    pub eps_schedule: Vec<f64>,
    pub num_blocks: usize,
    pub c7: f64,
    pub lambda_x: f64,
}

impl BlockwisePlan {
    pub fn schedule(&self) -> StepSchedule {
        StepSchedule::Blockwise { blocks: self.blocks.clone() }
    }

    pub fn total_steps(&self) -> u64 {
        self.blocks.iter().map(|b| b.steps).sum()
    }
}

/// Largest `α > 0` with `max{α ln(1/α), α} ≤ bound` (the left side is
/// strictly increasing in `α`).
pub fn largest_feasible_step(bound: f64) -> f64 {
    let e_inv = (-1.0f64).exp();
    if bound >= e_inv {
        return bound;
    }
    let (mut lo, mut hi) = (0.0f64, e_inv);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if mid > 0.0 && log_step_factor(mid) <= bound {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// `⌈log_{1/(1−κ)} 4⌉` with `κ = |λ_x| α`, at least one step.
pub fn block_length(lambda_x_abs: f64, alpha: f64) -> u64 {
    let kappa = lambda_x_abs * alpha;
    if kappa >= 1.0 {
        return 1;
    }
    let per_step = -(-kappa).ln_1p();
    ((4.0f64.ln() / per_step).ceil() as u64).max(1)
}

/// Plans blocks from explicit constants: `S = ⌈log₂(ε₀/ε)⌉`,
/// `ε_s = ε₀/2^s`, `α_s` the largest step with
/// `max{α ln(1/α), α} ≤ min{ε_{s−1}/(4C₇), 1/|λ_x|}`, `β_s = ηα_s` and
/// `T_s = ⌈log_{1/(1−|λ_x|α_s)} 4⌉`.
pub fn plan_blocks(eps0: f64, eps_target: f64, c7: f64, lambda_x: f64, eta: f64) -> Result<BlockwisePlan> {
    if !(eps_target > 0.0 && eps0 >= 0.0) {
        return Err(Error::InvalidArgument("need ε_target > 0 and ε₀ ≥ 0".into()));
    }
    if !(lambda_x < 0.0) {
        return Err(Error::NotNegativeDefinite(format!("λ_x = {lambda_x} is not negative")));
    }
    if !(c7 > 0.0 && eta > 0.0) {
        return Err(Error::InvalidArgument("need C₇ > 0 and η > 0".into()));
    }
    let num_blocks = if eps0 <= eps_target { 0 } else { (eps0 / eps_target).log2().ceil() as usize };
    let eps_schedule: Vec<f64> = (0..=num_blocks).map(|s| eps0 / 2f64.powi(s as i32)).collect();
    let lx = lambda_x.abs();
    let mut blocks = Vec::with_capacity(num_blocks);
    for s in 1..=num_blocks {
        let bound = (eps_schedule[s - 1] / (4.0 * c7)).min(1.0 / lx);
        let alpha = largest_feasible_step(bound);
        if alpha < 1e-15 {
            return Err(Error::PlanInfeasible(format!("block {s} would need α = {alpha:.3e} < 1e-15")));
        }
        if blocks.last().is_some_and(|b: &Block| alpha >= b.alpha) {
            return Err(Error::PlanInfeasible(format!(
                "α_{s} does not decrease: the 1/|λ_x| cap binds; increase C₇"
            )));
        }
        blocks.push(Block { alpha, beta: eta * alpha, steps: block_length(lx, alpha) });
    }
    Ok(BlockwisePlan { blocks, eta, eps_schedule, num_blocks, c7, lambda_x })
}

/// Blockwise plan from the instance's own constants.
pub fn blockwise_plan(
    problem: &ProblemData,
    table: &ConstantsTable,
    eps_target: f64,
    eta: f64,
    theta0: &[f64],
    mode: EpsilonMode,
) -> Result<BlockwisePlan> {
    let eta_min = eta_lower_bound(problem)?;
    if eta < eta_min {
        return Err(Error::InvalidArgument(format!("η = {eta} below its lower bound {eta_min}")));
    }
    let stacked = if (table.stacked.eta - eta).abs() <= 1e-15 * eta {
        table.stacked.clone()
    } else {
        stacked_quantities(problem, eta)?
    };
    if !(stacked.lambda_x < 0.0) {
        return Err(Error::NotNegativeDefinite(format!(
            "λ_x = {} ≥ 0 at η = {eta}; refusing to plan",
            stacked.lambda_x
        )));
    }
    let c7 = c7(&stacked, problem.radii.theta, problem.radii.w, problem.mixing.m_hat, problem.mixing.rho_hat);
    let dist = linalg::norm(&linalg::sub(theta0, &problem.theta_star));
    let eps0 = match mode {
        EpsilonMode::Squared => dist * dist,
        EpsilonMode::Unsquared => dist,
    };
    plan_blocks(eps0, eps_target, c7, stacked.lambda_x, eta)
}

/// Stepsize parameters the table is evaluated at.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableParams {
    pub c_alpha: f64,
    pub c_beta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
}

impl Default for TableParams {
    fn default() -> Self {
        Self { c_alpha: 1.8, c_beta: 1.8, alpha: 0.1, beta: 0.02, eta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantsTable {
    pub params: TableParams,
    pub lemma: LemmaConstants,
    pub tau_alpha: u64,
    pub tau_beta: u64,
    pub theorem2: Option<Theorem2Constants>,
    pub theorem2_note: Option<String>,
    pub stacked: StackedSystem,
    pub eta_min: f64,
    pub c7: f64,
    /// False when `λ_x ≥ 0`; blockwise planning refuses such tables.
    pub valid: bool,
}

impl ConstantsTable {
    pub fn compute(problem: &ProblemData, params: TableParams) -> Result<Self> {
        let lemma = lemma_constants(&LemmaInputs::from_problem(problem, params.c_alpha, params.c_beta));
        let (m, rho) = (problem.mixing.m_hat, problem.mixing.rho_hat);
        let tau_alpha = mixing_time(m, rho, params.alpha)?;
        let tau_beta = mixing_time(m, rho, params.beta)?;
        let z0 = linalg::norm_sq(&problem.psi(&vec![0.0; problem.dim()]));
        let (theorem2, theorem2_note) = match theorem2_constants(problem, &lemma, params.alpha, params.beta, z0) {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let stacked = stacked_quantities(problem, params.eta)?;
        let valid = stacked.lambda_x < 0.0;
        let c7 = if valid { c7(&stacked, problem.radii.theta, problem.radii.w, m, rho) } else { f64::NAN };
        Ok(Self {
            params,
            lemma,
            tau_alpha,
            tau_beta,
            theorem2,
            theorem2_note,
            stacked,
            eta_min: eta_lower_bound(problem)?,
            c7,
            valid,
        })
    }

    /// JSON document mapping each constant to `{value, source}`.
    pub fn to_json(&self) -> Value {
        let mut out = Map::new();
        let mut put = |name: &str, value: Value, source: &str| {
            out.insert(name.to_string(), json!({ "value": value, "source": source }));
        };
        let k = &self.lemma;
        put("K_f1", json!(k.k_f1), "bound on ||f1(theta,O)|| over the R_theta ball");
        put("K_g1", json!(k.k_g1), "bound on ||g1(z,O)|| = ||B_t z||");
        put("K_f2", json!(k.k_f2), "bound on ||f2(theta,O)|| over the R_theta ball");
        put("K_g2", json!(k.k_g2), "bound on ||g2(z,O)|| = ||C_t z||");
        put("K_r1", json!(k.k_r1), "||C^-1|| ||A|| (K_f1 + K_g1): drift of psi(theta_t) per unit alpha");
        put("K_r2", json!(k.k_r2), "per-step movement of z_t per unit beta");
        put("K_r3", json!(k.k_r3), "bias bound of zeta_f2 along the trajectory");
        put("L_f1_theta", json!(k.l_f1_theta), "Lipschitz constant of zeta_f1 in theta");
        put("L_f2_theta", json!(k.l_f2_theta), "Lipschitz constant of zeta_f2 in theta");
        put("L_f2_z", json!(k.l_f2_z), "Lipschitz constant of zeta_f2 in z");
        put("L_g2_z", json!(k.l_g2_z), "Lipschitz constant of zeta_g2 in z");
        put("tau_alpha", json!(self.tau_alpha), "mixing time min{i : m rho^i <= alpha}");
        put("tau_beta", json!(self.tau_beta), "mixing time min{i : m rho^i <= beta}");
        match &self.theorem2 {
            Some(t) => {
                let src = "constant-stepsize guarantee";
                put("C1", json!(t.c1), src);
                put("C2", json!(t.c2), src);
                put("C3", json!(t.c3), src);
                put("C4", json!(t.c4), src);
                put("C5", json!(t.c5), src);
                put("C6", json!(t.c6), src);
                put("T", json!(t.horizon), "constant-stepsize burn-in horizon");
            }
            None => put(
                "C1..C6",
                Value::Null,
                self.theorem2_note.as_deref().unwrap_or("stepsize conditions not met"),
            ),
        }
        let s = &self.stacked;
        put("C_G", json!(s.c_g_mat), "||G||_2 of the stacked [theta; w] system");
        put("C_g", json!(s.c_g_vec), "||g||_2 of the stacked [theta; w] system");
        put("K_h", json!(s.k_h), "bound on ||h(x,O)|| of the stacked system");
        put("L_h", json!(s.l_h), "Lipschitz constant of zeta_h");
        put("lambda_x", json!(s.lambda_x), "lambda_max(G + G^T)");
        put("eta", json!(s.eta), "blockwise ratio beta_s / alpha_s");
        put("eta_min", json!(self.eta_min), "1/2 max{0, lambda_min(sym(C^-1 (A^T + A)))}");
        put(
            "C7",
            if self.c7.is_finite() { json!(self.c7) } else { Value::Null },
            "blockwise stepsize scale",
        );
        put("valid", json!(self.valid), "lambda_x < 0");
        Value::Object(out)
    }
}

/// Per-helper outcome of a boundedness check.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundStat {
    pub bound: f64,
    pub max_norm: f64,
    pub violations: usize,
}

impl BoundStat {
    fn observe(&mut self, norm: f64) {
        self.max_norm = self.max_norm.max(norm);
        if norm > self.bound {
            self.violations += 1;
        }
    }

    fn merge(mut self, other: BoundStat) -> Self {
        self.max_norm = self.max_norm.max(other.max_norm);
        self.violations += other.violations;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundednessReport {
    pub samples: usize,
    pub f1: BoundStat,
    pub g1: BoundStat,
    pub f2: BoundStat,
    pub g2: BoundStat,
}

impl BoundednessReport {
    fn empty(lemma: &LemmaConstants) -> Self {
        let stat = |bound| BoundStat { bound, ..Default::default() };
        Self { samples: 0, f1: stat(lemma.k_f1), g1: stat(lemma.k_g1), f2: stat(lemma.k_f2), g2: stat(lemma.k_g2) }
    }

    pub fn total_violations(&self) -> usize {
        self.f1.violations + self.g1.violations + self.f2.violations + self.g2.violations
    }

    /// Evaluates the four helpers at one point.
    pub fn observe(&mut self, split: &HelperSplit) {
        self.samples += 1;
        self.f1.observe(linalg::norm(&split.f1));
        self.g1.observe(linalg::norm(&split.g1));
        self.f2.observe(linalg::norm(&split.f2));
        self.g2.observe(linalg::norm(&split.g2));
    }

    fn merge(self, other: Self) -> Self {
        Self {
            samples: self.samples + other.samples,
            f1: self.f1.merge(other.f1),
            g1: self.g1.merge(other.g1),
            f2: self.f2.merge(other.f2),
            g2: self.g2.merge(other.g2),
        }
    }
}

/// Uniform draw from the Euclidean ball of radius `radius` in `d` dimensions.
pub fn uniform_in_ball(d: usize, radius: f64, rng: &mut StreamRng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = linalg::norm(&v);
    let r = radius * rng.gen::<f64>().powf(1.0 / d as f64);
    v.iter_mut().for_each(|x| *x *= r / n);
    v
}

const BOUNDEDNESS_BATCH: usize = 1000;

/// Samples `(θ, z, O)` with `θ` uniform in the `R_θ` ball, `z` uniform in the
/// `R_w` ball and `O` from a behavior trajectory, and counts helper norms
/// exceeding their lemma constants. Batches run in parallel, each with its
/// own stream `split_seed(seed, batch)` and trajectory.
pub fn check_boundedness(
    inst: &Instance,
    problem: &ProblemData,
    lemma: &LemmaConstants,
    n_samples: usize,
    seed: u64,
) -> Result<BoundednessReport> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let d = problem.dim();
    let sampler = Sampler::new(&inst.mdp, &inst.policies);
    let batches = n_samples.div_ceil(BOUNDEDNESS_BATCH);
    let report = (0..batches)
        .into_par_iter()
        .map(|batch| {
            let count = BOUNDEDNESS_BATCH.min(n_samples - batch * BOUNDEDNESS_BATCH);
            let mut rng = stream(split_seed(seed, batch as u64));
            let mut s = mdp::sample_from(&problem.mu, &mut rng);
            let mut rep = BoundednessReport::empty(lemma);
            for _ in 0..count {
                let obs = sampler.step(s, &mut rng);
                s = obs.s_next;
                let theta = uniform_in_ball(d, problem.radii.theta, &mut rng);
                let z = uniform_in_ball(d, problem.radii.w, &mut rng);
                let rho = inst.policies.rho_at(obs.s, obs.a);
                rep.observe(&helper_split(&theta, &z, &obs, problem, &inst.features, rho));
            }
            rep
        })
        .reduce(|| BoundednessReport::empty(lemma), BoundednessReport::merge);
    Ok(report)
}
