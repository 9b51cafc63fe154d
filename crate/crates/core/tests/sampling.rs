mod common;

use tdclab::linalg::Matrix;
use tdclab::mdp::{self, mixing_constants, stationary_distribution, MIXING_TOL};
use tdclab::rng::stream;

use common::{instance, operator_errors};

#[test]
fn trajectory_means_converge_to_exact_operators() {
    let (inst, p) = instance(20, 4, 5, 6, 1);
    let short = operator_errors(&inst, &p, 20_000, 5);
    let long = operator_errors(&inst, &p, 2_000_000, 5);
    for (s, l) in short.iter().zip(&long) {
        assert!(l < s, "error should shrink with trajectory length: {short:?} -> {long:?}");
    }
    // 100x more samples should cut the error by roughly 10x.
    assert!(long.iter().all(|e| *e < 0.1), "{long:?}");
}

#[test]
fn sampled_transitions_follow_behavior_and_kernel() {
    let (inst, _) = instance(10, 3, 3, 3, 6);
    let sampler = mdp::Sampler::new(&inst.mdp, &inst.policies);
    let (s0, n) = (4usize, 200_000usize);
    let na = inst.mdp.n_actions();
    let ns = inst.n_states();
    let mut counts = vec![0usize; na * ns];
    let mut rng = stream(21);
    for _ in 0..n {
        let o = sampler.step(s0, &mut rng);
        assert_eq!(o.s, s0);
        assert_eq!(o.r, inst.mdp.reward()[s0]);
        counts[o.a * ns + o.s_next] += 1;
    }
    for a in 0..na {
        for s2 in 0..ns {
            let p = inst.policies.behavior()[(s0, a)] * inst.mdp.transition_row(s0, a)[s2];
            let freq = counts[a * ns + s2] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            if p == 0.0 {
                assert_eq!(counts[a * ns + s2], 0);
            } else {
                assert!((freq - p).abs() <= 3.0 * se, "cell ({a},{s2}): {freq} vs {p}");
            }
        }
    }
}

#[test]
fn stationary_distribution_is_invariant() {
    let (inst, p) = instance(40, 5, 8, 6, 2);
    let chain = inst.behavior_chain();
    let next = chain.vecmat(&p.mu);
    assert!(tdclab::linalg::max_abs_diff(&next, &p.mu) <= 1e-12);
    assert!((p.mu.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn two_state_chain_mixing_rate() {
    let chain = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.5, 0.5]]);
    let mu = stationary_distribution(&chain).unwrap();
    assert!((mu[0] - 5.0 / 6.0).abs() < 1e-12);
    let est = mixing_constants(&chain, &mu, MIXING_TOL).unwrap();
    assert!((est.rho_hat - 0.4).abs() < 1e-3, "rho_hat = {}", est.rho_hat);
    assert_eq!(est.violations(), 0);
}

#[test]
fn garnet_mixing_envelope_dominates_curve() {
    for seed in 0..4 {
        let (_, p) = instance(50, 5, 10, 8, seed);
        assert_eq!(p.mixing.violations(), 0);
        assert!(p.mixing.rho_hat > 0.0 && p.mixing.rho_hat < 1.0);
    }
}

#[test]
fn identity_chain_is_not_ergodic() {
    let chain = Matrix::identity(3);
    assert!(matches!(stationary_distribution(&chain), Err(tdclab::Error::NotErgodic(_))));
}
