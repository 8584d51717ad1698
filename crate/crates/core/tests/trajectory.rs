use mipeaks::trajectory::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy_with_spikes(rng: &mut ChaCha8Rng, len: usize, spikes: &[usize]) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..0.01)).collect();
    for &s in spikes {
        v[s] = 1.0;
    }
    v
}

#[test]
fn injected_spikes_are_recovered_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let len = rng.gen_range(50..200);
        let count = rng.gen_range(0..=len / 10);
        let mut spikes: Vec<usize> = rand::seq::index::sample(&mut rng, len, count).into_vec();
        spikes.sort_unstable();
        let v = noisy_with_spikes(&mut rng, len, &spikes);
        assert_eq!(detect_peaks(&v, &PeakConfig::default()).unwrap().indices, spikes);
    }
}

proptest! {
    #[test]
    fn peaks_invariant_under_positive_affine_maps(
        seed in any::<u64>(),
        len in 1usize..80,
        power in -8i32..8,
        shift in -100i32..100,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // dyadic values, power-of-two scales and integer shifts keep the map exact
        let v: Vec<f64> = (0..len).map(|_| rng.gen_range(0..64) as f64 / 8.0).collect();
        let base = detect_peaks(&v, &PeakConfig::default()).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * 2f64.powi(power)).collect();
        prop_assert_eq!(&detect_peaks(&scaled, &PeakConfig::default()).unwrap().indices, &base.indices);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift as f64).collect();
        prop_assert_eq!(&detect_peaks(&shifted, &PeakConfig::default()).unwrap().indices, &base.indices);
    }

    #[test]
    fn report_fields_are_consistent(seed in any::<u64>(), len in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = detect_peaks(&v, &PeakConfig::default()).unwrap();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= r.q1 && r.q1 <= r.median && r.median <= r.q3 && r.q3 <= hi);
        prop_assert_eq!(r.len, len);
        prop_assert!((r.ratio - r.indices.len() as f64 / len as f64).abs() < 1e-15);
        prop_assert_eq!(r.intervals.is_some(), r.indices.len() >= 2);
        prop_assert!(r.std >= 0.0);
    }
}

#[test]
fn constant_sequences_have_no_peaks() {
    for len in 1..50 {
        let r = detect_peaks(&vec![0.25; len], &PeakConfig::default()).unwrap();
        assert!(r.indices.is_empty());
        assert_eq!(r.aom, 0.0);
    }
}
