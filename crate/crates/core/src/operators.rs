//! Exact TDC operators of a finite instance and the quantities derived from
//! them: `θ* = −A⁻¹b`, the MSPBE, the fast-time-scale fixed point `ψ(θ)`,
//! spectral constants and projection radii.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Lu, Matrix};
use crate::mdp::{self, Instance, MixingEstimate};

const CONDITION_LIMIT: f64 = 1e12;

/// `A = E[ρφ(γφ′−φ)ᵀ]`, `B = −γE[ρφ′φᵀ]`, `C = −E[φφᵀ]`, `b = E[ρrφ]` under
/// the behavior stationary distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Operators {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub bvec: Vec<f64>,
}

/// Exact expectations, summed over `(s, a, s′)` with weight
/// `μ(s)·π_b(a|s)·P(s′|s,a)`.
pub fn exact_operators(inst: &Instance, mu: &[f64]) -> Result<Operators> {
    let n = inst.n_states();
    if mu.len() != n {
        return Err(Error::InvalidArgument("μ length differs from n_states".into()));
    }
    let d = inst.dim();
    let gamma = inst.mdp.gamma();
    let feats = &inst.features;
    let pol = &inst.policies;
    let mut a = Matrix::zeros(d, d);
    let mut b = Matrix::zeros(d, d);
    let mut c = Matrix::zeros(d, d);
    let mut bvec = vec![0.0; d];
    let mut next_mean = vec![0.0; d];
    for s in 0..n {
        let phi = feats.phi(s);
        let r = inst.mdp.reward()[s];
        for act in 0..inst.mdp.n_actions() {
            let w = mu[s] * pol.behavior()[(s, act)];
            if w == 0.0 {
                continue;
            }
            let rho = pol.rho_at(s, act);
            next_mean.fill(0.0);
            for (s2, &p) in inst.mdp.transition_row(s, act).iter().enumerate() {
                if p > 0.0 {
                    linalg::axpy(p, feats.phi(s2), &mut next_mean);
                }
            }
            for i in 0..d {
                let wi = w * phi[i];
                for j in 0..d {
                    a[(i, j)] += wi * rho * (gamma * next_mean[j] - phi[j]);
                    b[(i, j)] -= gamma * w * rho * next_mean[i] * phi[j];
                }
                bvec[i] += wi * rho * r;
            }
        }
        // C is accumulated per state and mirrored so it is exactly symmetric.
        let ws = mu[s];
        for i in 0..d {
            for j in i..d {
                let v = ws * phi[i] * phi[j];
                c[(i, j)] -= v;
                if j != i {
                    c[(j, i)] -= v;
                }
            }
        }
    }
    check_conditioning("A", &a)?;
    check_conditioning("C", &c)?;
    Ok(Operators { a, b, c, bvec })
}

fn check_conditioning(name: &str, m: &Matrix) -> Result<()> {
    let inv = linalg::inverse(m)
        .map_err(|_| Error::SingularOperator(format!("{name} is singular")))?;
    let cond = linalg::spectral_norm(m) * linalg::spectral_norm(&inv);
    if !(cond <= CONDITION_LIMIT) {
        return Err(Error::SingularOperator(format!(
            "{name} has condition number {cond:.3e} > {CONDITION_LIMIT:e}"
        )));
    }
    Ok(())
}

/// Solves `A θ* = −b` by Gaussian elimination with partial pivoting.
pub fn optimal_theta(a: &Matrix, bvec: &[f64]) -> Result<Vec<f64>> {
    let neg_b: Vec<f64> = bvec.iter().map(|v| -v).collect();
    linalg::solve(a, &neg_b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpectralParams {
    /// `λ_max(2AᵀC⁻¹A)`.
    pub lambda_theta: f64,
    /// `λ_max(2C)`.
    pub lambda_w: f64,
    /// `min |λ(C)|`.
    pub lambda_cm: f64,
}

/// Tight spectral constants. Fails with `NotNegativeDefinite` unless both
/// `λ_θ` and `λ_w` are negative.
pub fn spectral_params(a: &Matrix, c: &Matrix) -> Result<SpectralParams> {
    if !c.is_symmetric(1e-12 * c.frobenius_norm().max(1.0)) {
        return Err(Error::InvalidArgument("C must be symmetric".into()));
    }
    let c_inv = linalg::inverse(c)?.symmetric_part();
    let quad = a.transpose().matmul(&c_inv).matmul(a).scale(2.0).symmetric_part();
    let lambda_theta = linalg::lambda_max(&quad)?;
    let eig_c = linalg::symmetric_eigenvalues(c)?;
    let lambda_w = 2.0 * eig_c.last().copied().unwrap_or(0.0);
    let lambda_cm = eig_c.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    if !(lambda_theta < 0.0) {
        return Err(Error::NotNegativeDefinite(format!("λ_max(2AᵀC⁻¹A) = {lambda_theta}")));
    }
    if !(lambda_w < 0.0) {
        return Err(Error::NotNegativeDefinite(format!("λ_max(2C) = {lambda_w}")));
    }
    Ok(SpectralParams { lambda_theta, lambda_w, lambda_cm })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Radii {
    pub theta: f64,
    pub w: f64,
}

/// `R_θ = 2·max(‖A‖‖b‖, ‖A⁻¹‖‖b‖, ‖θ*‖)` and `R_w = 2‖C⁻¹‖‖A‖R_θ`.
///
/// When all three candidates vanish (`b = 0`), `R_θ = 1`.
pub fn projection_radii(a: &Matrix, bvec: &[f64], c_inv: &Matrix, theta_star: &[f64]) -> Result<Radii> {
    let norm_a = linalg::spectral_norm(a);
    let norm_a_inv = linalg::spectral_norm(&linalg::inverse(a)?);
    let norm_b = linalg::norm(bvec);
    let core = (norm_a * norm_b).max(norm_a_inv * norm_b).max(linalg::norm(theta_star));
    let theta = if core > 0.0 { 2.0 * core } else { 1.0 };
    let w = 2.0 * linalg::spectral_norm(c_inv) * norm_a * theta;
    Ok(Radii { theta, w })
}

/// Everything the learner and the bound calculators need about one instance.
#[derive(Clone, Debug)]
pub struct ProblemData {
    pub ops: Operators,
    pub c_inv: Matrix,
    pub mu: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub spectral: SpectralParams,
    pub radii: Radii,
    pub mixing: MixingEstimate,
    pub gamma: f64,
    pub rho_max: f64,
    pub r_max: f64,
    c_inv_lu: Lu,
}

impl ProblemData {
    pub fn build(inst: &Instance) -> Result<Self> {
        let chain = inst.behavior_chain();
        let mu = mdp::stationary_distribution(&chain)?;
        let mixing = mdp::mixing_constants(&chain, &mu, mdp::MIXING_TOL)?;
        let ops = exact_operators(inst, &mu)?;
        Self::from_parts(ops, mu, mixing, inst.mdp.gamma(), inst.policies.rho_max(), inst.mdp.r_max())
    }

    pub fn from_parts(
        ops: Operators,
        mu: Vec<f64>,
        mixing: MixingEstimate,
        gamma: f64,
        rho_max: f64,
        r_max: f64,
    ) -> Result<Self> {
        let c_inv_lu = Lu::factor(&ops.c)?;
        let c_inv = c_inv_lu.inverse().symmetric_part();
        let theta_star = optimal_theta(&ops.a, &ops.bvec)?;
        let spectral = spectral_params(&ops.a, &ops.c)?;
        let radii = projection_radii(&ops.a, &ops.bvec, &c_inv, &theta_star)?;
        Ok(Self { ops, c_inv, mu, theta_star, spectral, radii, mixing, gamma, rho_max, r_max, c_inv_lu })
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    /// `Aθ + b`.
    pub fn residual(&self, theta: &[f64]) -> Vec<f64> {
        let mut r = self.ops.a.matvec(theta);
        linalg::axpy(1.0, &self.ops.bvec, &mut r);
        r
    }

    /// `C⁻¹ v` through the stored factorization.
    pub fn apply_c_inv(&self, v: &[f64]) -> Vec<f64> {
        self.c_inv_lu.solve(v)
    }

    /// MSPBE `J(θ) = (Aθ+b)ᵀ(−C)⁻¹(Aθ+b)`.
    pub fn mspbe(&self, theta: &[f64]) -> f64 {
        let r = self.residual(theta);
        let y = self.apply_c_inv(&r);
        (-linalg::dot(&r, &y)).max(0.0)
    }

    /// `ψ(θ) = −C⁻¹(b + Aθ)`.
    pub fn psi(&self, theta: &[f64]) -> Vec<f64> {
        linalg::scaled(-1.0, &self.apply_c_inv(&self.residual(theta)))
    }

    /// Tracking error `z = w − ψ(θ)`.
    pub fn tracking_error(&self, theta: &[f64], w: &[f64]) -> Vec<f64> {
        linalg::sub(w, &self.psi(theta))
    }

    pub fn norm_a(&self) -> f64 {
        linalg::spectral_norm(&self.ops.a)
    }

    pub fn norm_c_inv(&self) -> f64 {
        linalg::spectral_norm(&self.c_inv)
    }

    pub fn report(&self) -> SolveReport {
        SolveReport {
            a: self.ops.a.clone(),
            b: self.ops.b.clone(),
            c: self.ops.c.clone(),
            bvec: self.ops.bvec.clone(),
            theta_star: self.theta_star.clone(),
            lambda_theta: self.spectral.lambda_theta,
            lambda_w: self.spectral.lambda_w,
            lambda_cm: self.spectral.lambda_cm,
            r_theta: self.radii.theta,
            r_w: self.radii.w,
            m_hat: self.mixing.m_hat,
            rho_hat: self.mixing.rho_hat,
        }
    }
}

/// JSON body written by `tdclab solve`.
#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "B")]
    pub b: Matrix,
    #[serde(rename = "C")]
    pub c: Matrix,
    #[serde(rename = "b")]
    pub bvec: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub lambda_theta: f64,
    pub lambda_w: f64,
    pub lambda_cm: f64,
    #[serde(rename = "R_theta")]
    pub r_theta: f64,
    #[serde(rename = "R_w")]
    pub r_w: f64,
    pub m_hat: f64,
    pub rho_hat: f64,
}
