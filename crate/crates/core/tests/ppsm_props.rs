mod common;

use common::{loss_instance, loss_of, Which};
use proptest::prelude::*;
use psm::numerics::{dot, softmax};
use psm::ppsm::{
    hard_loss, soft_loss, soft_weights, NegativeSets, WeightSpan, WeightStrategy, WeightVector,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_nonnegative(
        n in 2usize..7, k in 0usize..5, d in 2usize..10, mask in any::<bool>(), seed in any::<u64>(),
    ) {
        let inst = loss_instance(n, k, d, 0.5, mask, seed);
        for which in [Which::Hard, Which::Soft, Which::Psm] {
            let out = loss_of(&inst, &inst.q, which);
            prop_assert!(out.value >= 0.0);
            prop_assert!(out.per_query.iter().all(|&v| v >= 0.0));
            prop_assert!(out.grad_q.as_slice().iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn dropping_a_negative_never_raises_the_term(
        n in 2usize..6, k in 0usize..4, d in 2usize..8, seed in any::<u64>(), pick in any::<u64>(),
    ) {
        let inst = loss_instance(n, k, d, 0.5, false, seed);
        let hard = hard_loss(&inst.q, &inst.z2, &inst.hard_negs, inst.t, 1.0).unwrap();
        let soft = soft_loss(&inst.q, &inst.sets, &inst.weights, &inst.soft_negs, inst.t).unwrap();
        let query = (pick % n as u64) as usize;

        let drop_one = |sets: &NegativeSets| {
            let mut members = sets.members.clone();
            let m = &mut members[query];
            if !m.is_empty() {
                let at = (pick as usize / n) % m.len();
                m.remove(at);
            }
            NegativeSets::new(sets.pool.clone(), members).unwrap()
        };
        let hard2 = hard_loss(&inst.q, &inst.z2, &drop_one(&inst.hard_negs), inst.t, 1.0).unwrap();
        let soft2 = soft_loss(&inst.q, &inst.sets, &inst.weights, &drop_one(&inst.soft_negs), inst.t).unwrap();
        prop_assert!(hard2.per_query[query] <= hard.per_query[query]);
        prop_assert!(soft2.per_query[query] <= soft.per_query[query]);
    }

    #[test]
    fn view_weights_are_a_shift_invariant_simplex(
        n in 1usize..6, k in 0usize..6, d in 2usize..8, seed in any::<u64>(), shift in -20.0f64..20.0,
    ) {
        let inst = loss_instance(n, k, d, 0.5, false, seed);
        for (i, set) in inst.sets.iter().enumerate() {
            let z1 = psm::numerics::l2_normalize_rows(&inst.q).matrix;
            let w = soft_weights(z1.row(i), set, WeightSpan::WithView).unwrap();
            prop_assert!((w.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(w.weights.iter().all(|&x| x > 0.0));
            let sims: Vec<f64> = set.members.iter_rows().map(|m| dot(z1.row(i), m) + shift).collect();
            for (a, b) in w.weights.iter().zip(softmax(&sims).unwrap()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn soft_with_no_mined_neighbors_equals_hard(
        n in 2usize..8, d in 2usize..12, seed in any::<u64>(), mask in any::<bool>(),
    ) {
        let mut inst = loss_instance(n, 0, d, 0.2, mask, seed);
        inst.weights = (0..n)
            .map(|_| WeightVector { weights: vec![1.0], strategy: WeightStrategy::V0 })
            .collect();
        let hard = hard_loss(&inst.q, &inst.z2, &inst.hard_negs, inst.t, 1.0).unwrap();
        let soft = soft_loss(&inst.q, &inst.sets, &inst.weights, &inst.hard_negs, inst.t).unwrap();
        prop_assert!((hard.value - soft.value).abs() <= 1e-12);
        for (a, b) in hard.grad_q.as_slice().iter().zip(soft.grad_q.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
