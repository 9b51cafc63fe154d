#![allow(dead_code)]

use tdclab::linalg::{self, Matrix};
use tdclab::mdp::{self, Instance, Observation};
use tdclab::operators::ProblemData;
use tdclab::tdc::{self, StepContext, TdcState};

pub fn instance(n: usize, na: usize, p: usize, q: usize, seed: u64) -> (Instance, ProblemData) {
    let inst = mdp::generate_garnet(n, na, p, q, seed).expect("instance generates");
    let problem = ProblemData::build(&inst).expect("instance solves");
    (inst, problem)
}

/// Behavior trajectory of `len` transitions starting from μ.
pub fn trajectory(inst: &Instance, problem: &ProblemData, len: usize, seed: u64) -> Vec<Observation> {
    let sampler = mdp::Sampler::new(&inst.mdp, &inst.policies);
    let mut rng = tdclab::rng::stream(seed);
    let mut s = mdp::sample_from(&problem.mu, &mut rng);
    (0..len)
        .map(|_| {
            let o = sampler.step(s, &mut rng);
            s = o.s_next;
            o
        })
        .collect()
}

/// One TDC step written with the dense per-sample matrices.
pub fn dense_step(state: &mut TdcState, obs: &Observation, alpha: f64, beta: f64, inst: &Instance, problem: &ProblemData) {
    let rho = inst.policies.rho_at(obs.s, obs.a);
    let m = tdc::per_sample_matrices(obs, &inst.features, rho, problem.gamma);
    let mut base = m.a.matvec(&state.theta);
    linalg::axpy(1.0, &m.bvec, &mut base);
    let dtheta = linalg::add(&base, &m.b.matvec(&state.w));
    let dw = linalg::add(&base, &m.c.matvec(&state.w));
    linalg::axpy(alpha, &dtheta, &mut state.theta);
    linalg::axpy(beta, &dw, &mut state.w);
    tdc::project_ball(&mut state.theta, problem.radii.theta);
    tdc::project_ball(&mut state.w, problem.radii.w);
    state.t += 1;
}

pub fn rank1_step(state: &mut TdcState, obs: &Observation, alpha: f64, beta: f64, inst: &Instance, problem: &ProblemData) {
    let ctx = StepContext { features: &inst.features, gamma: problem.gamma, radii: problem.radii };
    tdc::tdc_step(state, obs, alpha, beta, inst.policies.rho_at(obs.s, obs.a), &ctx);
}

/// Sup-norm distance between the original `(θ, w)` iteration and the
/// `(θ, z)` reformulation driven by the helper functions, over `obs`.
pub fn z_form_gap(
    inst: &Instance,
    problem: &ProblemData,
    obs: &[Observation],
    stepsizes: impl Fn(u64) -> (f64, f64),
) -> f64 {
    let d = problem.dim();
    let mut orig = TdcState::zeros(d);
    let mut theta = vec![0.0; d];
    let mut z = problem.tracking_error(&theta, &vec![0.0; d]);
    let mut gap: f64 = 0.0;
    for (t, o) in obs.iter().enumerate() {
        let (alpha, beta) = stepsizes(t as u64);
        let rho = inst.policies.rho_at(o.s, o.a);
        let h = tdclab::bounds::helper_split(&theta, &z, o, problem, &inst.features, rho);
        let shift_before = problem.apply_c_inv(&problem.residual(&theta));
        let mut next_theta = theta.clone();
        linalg::axpy(alpha, &linalg::add(&h.f1, &h.g1), &mut next_theta);
        tdc::project_ball(&mut next_theta, problem.radii.theta);
        let mut w = linalg::sub(&z, &shift_before);
        linalg::axpy(beta, &linalg::add(&h.f2, &h.g2), &mut w);
        tdc::project_ball(&mut w, problem.radii.w);
        z = linalg::add(&w, &problem.apply_c_inv(&problem.residual(&next_theta)));
        theta = next_theta;

        rank1_step(&mut orig, o, alpha, beta, inst, problem);
        let w_from_z = linalg::sub(&z, &problem.apply_c_inv(&problem.residual(&theta)));
        gap = gap.max(linalg::max_abs_diff(&orig.theta, &theta)).max(linalg::max_abs_diff(&orig.w, &w_from_z));
    }
    gap
}

/// Relative Frobenius/Euclidean errors of trajectory means of
/// `(A_t, B_t, C_t, b_t)` against the exact operators.
pub fn operator_errors(inst: &Instance, problem: &ProblemData, steps: usize, seed: u64) -> [f64; 4] {
    let d = problem.dim();
    let (mut a, mut b, mut c) = (Matrix::zeros(d, d), Matrix::zeros(d, d), Matrix::zeros(d, d));
    let mut bv = vec![0.0; d];
    for o in trajectory(inst, problem, steps, seed) {
        let m = tdc::per_sample_matrices(&o, &inst.features, inst.policies.rho_at(o.s, o.a), problem.gamma);
        a.add_scaled(1.0, &m.a);
        b.add_scaled(1.0, &m.b);
        c.add_scaled(1.0, &m.c);
        linalg::axpy(1.0, &m.bvec, &mut bv);
    }
    let k = 1.0 / steps as f64;
    let rel = |x: &Matrix, y: &Matrix| x.scale(k).sub(y).frobenius_norm() / y.frobenius_norm();
    [
        rel(&a, &problem.ops.a),
        rel(&b, &problem.ops.b),
        rel(&c, &problem.ops.c),
        linalg::norm(&linalg::sub(&linalg::scaled(k, &bv), &problem.ops.bvec)) / linalg::norm(&problem.ops.bvec),
    ]
}
