mod common;

use common::oracles::{
    engine_losses, loss_oracle_sweep, naive_aggregate, naive_centers, naive_losses, one_hot_instance, random_instance,
};
use lmac::rng::RngState;
use proptest::prelude::*;

#[test]
fn losses_match_naive_loops_on_random_instances() {
    let worst = loss_oracle_sweep(100, 2024);
    for (name, w) in ["rank", "sparsity", "consistency", "mse"].iter().zip(worst) {
        assert!(w <= 1e-6, "{name}: worst relative error {w:e}");
    }
}

#[test]
fn hand_anchors_hold_for_both_implementations() {
    // Centers 5 then 2 with T=10 and zero margin: only the ordering hinge fires.
    let inst = one_hot_instance(&[&[5, 2]], 10, Some(0.0));
    assert_eq!(naive_losses(&inst).rank, 3.0);
    assert_eq!(engine_losses(&inst).rank, 3.0);
    let inst = one_hot_instance(&[&[2, 5, 8]], 10, Some(1.0));
    assert_eq!(engine_losses(&inst).rank, 0.0);
    // One query per modality at 1, 2, 3: pairs contribute 1 + 4 + 1.
    let inst = one_hot_instance(&[&[1], &[2], &[3]], 10, None);
    assert_eq!(naive_losses(&inst).consistency, Some(6.0));
    assert_eq!(engine_losses(&inst).consistency, Some(6.0));
    // Uniform attention over two segments: center 1.5, deviation 0.5 per query.
    let mut inst = one_hot_instance(&[&[1, 1, 1]], 2, None);
    inst.attention[0][0] = vec![vec![0.5, 0.5]; 3];
    assert_eq!(naive_losses(&inst).sparsity, 1.5);
    assert_eq!(engine_losses(&inst).sparsity, 1.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn centers_stay_in_range(seed in any::<u64>()) {
        let inst = random_instance(&mut RngState::new(seed), 1);
        for cs in naive_centers(&naive_aggregate(&inst)) {
            for c in cs {
                prop_assert!(c >= 1.0 - 1e-12 && c <= inst.segments as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn consistency_ignores_modality_order(seed in any::<u64>()) {
        let inst = random_instance(&mut RngState::new(seed), 2);
        let mut swapped = inst.clone();
        swapped.attention.reverse();
        let (a, b) = (engine_losses(&inst).consistency.unwrap(), engine_losses(&swapped).consistency.unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn sparsity_is_linear_in_its_weight(seed in any::<u64>()) {
        let inst = random_instance(&mut RngState::new(seed), 1);
        let mut doubled = inst.clone();
        doubled.cfg.lambda_sparsity.rgb *= 2.0;
        doubled.cfg.lambda_sparsity.flow *= 2.0;
        doubled.cfg.lambda_sparsity.audio *= 2.0;
        let (a, b) = (engine_losses(&inst).sparsity, engine_losses(&doubled).sparsity);
        prop_assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}
