mod common;

use comln::dynamics::{adapt, assemble_jacobian_phi, assemble_jacobian_w0, AdaptLimits, Horizon};
use comln::loss::LossConfig;
use comln::oracles::naive_sensitivity_embedded;
use comln::solver::SolverConfig;
use common::identity_instance;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn naive_and_decomposed_sensitivities_agree(
        seed in 0u64..10_000,
        n in 2usize..5,
        d in 2usize..7,
        shot in 1usize..3,
        t in 0.05f64..4.0,
        ridge in proptest::bool::ANY,
    ) {
        prop_assume!(n * d <= 64);
        let (meta, episode) = identity_instance(seed, n, shot, 1, d, t);
        let cfg = LossConfig::with_lambda(if ridge { 0.5 } else { 0.0 });
        let solver = SolverConfig::precise();
        let train = &episode.train;
        let adapted = adapt(&meta.w0, train, &cfg, Horizon::from_t(t), &solver, true, &AdaptLimits::default()).unwrap();
        let naive = naive_sensitivity_embedded(&meta.w0, train, &cfg, t, &solver).unwrap();
        prop_assert!((&adapted.w_t - &naive.w_t).amax() <= 1e-8);
        let jw = assemble_jacobian_w0(&adapted.state, train.features());
        prop_assert!((&jw - &naive.jac_w0).amax() <= 1e-6);
        for m in 0..train.len() {
            let jp = assemble_jacobian_phi(&adapted.state, train.features(), &meta.w0, m);
            prop_assert!((&jp - &naive.jac_phi[m]).amax() <= 1e-6);
        }
    }
}

#[test]
fn euler_discretisations_agree_exactly_in_structure() {
    // The same fixed-step solver on both systems gives matching Jacobians
    // up to rounding, since forward differentiation commutes with Euler.
    let (meta, episode) = identity_instance(3, 3, 2, 1, 4, 0.2);
    let cfg = LossConfig::with_lambda(0.2);
    let solver = SolverConfig::euler(0.01);
    let adapted =
        adapt(&meta.w0, &episode.train, &cfg, Horizon::from_t(0.2), &solver, true, &AdaptLimits::default()).unwrap();
    let naive = naive_sensitivity_embedded(&meta.w0, &episode.train, &cfg, 0.2, &solver).unwrap();
    let jw = assemble_jacobian_w0(&adapted.state, episode.train.features());
    assert!((&jw - &naive.jac_w0).amax() <= 1e-12);
}
