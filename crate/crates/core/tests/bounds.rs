use mipeaks::bounds::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// H(Y | H) straight from the table, with the `h` tuple treated as one symbol.
fn conditional_entropy_oracle(joint: &DiscreteJoint) -> f64 {
    let hs = joint.h_configs();
    let mut acc = 0.0;
    for h in 0..hs {
        let ph: f64 = (0..joint.y_card()).map(|y| joint.prob(y, h)).sum();
        for y in 0..joint.y_card() {
            let p = joint.prob(y, h);
            if p > 0.0 {
                acc -= p * (p / ph).ln();
            }
        }
    }
    acc
}

fn error_oracle(joint: &DiscreteJoint, map: &[usize]) -> f64 {
    1.0 - (0..joint.h_configs()).map(|h| joint.prob(map[h], h)).sum::<f64>()
}

fn joint_strategy() -> impl Strategy<Value = DiscreteJoint> {
    (any::<u64>(), 3usize..=5, prop::collection::vec(2usize..=4, 1..=3))
        .prop_map(|(seed, y, hs)| DiscreteJoint::random(&mut ChaCha8Rng::seed_from_u64(seed), y, hs).unwrap())
}

proptest! {
    #[test]
    fn chain_terms_sum_to_total_information(joint in joint_strategy()) {
        let sum: f64 = chain_mi_terms(&joint).iter().sum();
        prop_assert!((y_entropy(&joint) - sum - conditional_entropy_oracle(&joint)).abs() <= 1e-9);
        prop_assert!((sum - mutual_information(&joint)).abs() <= 1e-9);
        prop_assert!(chain_mi_terms(&joint).iter().all(|&t| t >= -1e-12));
    }

    #[test]
    fn fano_never_exceeds_any_error(joint in joint_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bayes = Predictor::bayes_optimal(&joint);
        let mut maps = vec![bayes.map().to_vec()];
        for _ in 0..10 {
            maps.push((0..joint.h_configs()).map(|_| rng.gen_range(0..joint.y_card())).collect());
        }
        for map in maps {
            let f = Predictor::explicit(&joint, map.clone()).unwrap();
            let p_e = predictor_error(&joint, &f).unwrap();
            prop_assert!((p_e - error_oracle(&joint, &map)).abs() <= 1e-12);
            let lb = fano_lower_bound(&joint, p_e).unwrap().value().unwrap();
            prop_assert!(lb <= p_e + BOUND_TOL, "{lb} > {p_e}");
            prop_assert!(bayes_error(&joint) <= p_e + 1e-12);
        }
        prop_assert!(bayes_error(&joint) <= error_upper_bound(&joint).bits + BOUND_TOL);
    }

    #[test]
    fn entropy_identities(seed in any::<u64>(), m in 2usize..=8, sparsity in 0.0f64..0.5) {
        let d = DiscreteDistribution::random(&mut ChaCha8Rng::seed_from_u64(seed), m, sparsity).unwrap();
        prop_assert!(half_entropy_lemma_check(&d) >= -IDENTITY_TOL);
        if let GroupingCheck::Residual(r) = grouping_identity_check(&d).unwrap() {
            prop_assert!(r.abs() <= IDENTITY_TOL);
        }
    }
}

#[test]
fn ternary_uninformative_is_tight() {
    let channel = vec![vec![0.5, 0.5]; 3];
    let joint = DiscreteJoint::from_channel(&[1.0 / 3.0; 3], vec![2], &channel).unwrap();
    let p_e = bayes_error(&joint);
    assert!((p_e - 2.0 / 3.0).abs() <= 1e-9);
    let lb = fano_lower_bound(&joint, p_e).unwrap().value().unwrap();
    assert!((lb - 2.0 / 3.0).abs() <= 1e-9);
}

#[test]
fn perfect_channel_bounds_vanish() {
    let channel = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let joint = DiscreteJoint::from_channel(&[0.2, 0.3, 0.5], vec![3], &channel).unwrap();
    assert_eq!(bayes_error(&joint), 0.0);
    assert!(fano_lower_bound(&joint, 0.0).unwrap().value().unwrap().abs() <= 1e-12);
    assert!(error_upper_bound(&joint).bits.abs() <= 1e-12);
}

#[test]
fn small_random_run_passes_and_is_deterministic() {
    let params = BoundsCheckParams {
        trials: 50,
        ..Default::default()
    };
    let a = verify_bounds_random(&params).unwrap();
    assert!(a.passed, "{a:?}");
    assert_eq!(a.violations, 0);
    assert_eq!(a, verify_bounds_random(&params).unwrap());
}
