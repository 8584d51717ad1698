use mipeaks::hsic::*;
use mipeaks::trace_io::RepresentationTrace;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kernel(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Plug-in form of `E[kk'] + E[k]E[k'] - 2E[E[k]E[k']]` summed over every
/// index tuple. It carries a `1/n^2` normalisation where the trace formula
/// carries `1/(n-1)^2`.
fn exhaustive(x: &[Vec<f64>], y: &[Vec<f64>], sx: f64, sy: f64) -> f64 {
    let n = x.len();
    let nf = n as f64;
    let (mut a, mut kx, mut ky, mut c) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let k = kernel(&x[i], &x[j], sx);
            let l = kernel(&y[i], &y[j], sy);
            a += k * l;
            kx += k;
            ky += l;
            for q in 0..n {
                c += k * kernel(&y[i], &y[q], sy);
            }
        }
    }
    a / (nf * nf) + kx * ky / nf.powi(4) - 2.0 * c / nf.powi(3)
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn trace_formula_matches_exhaustive_sum(
        seed in any::<u64>(),
        n in 2usize..=6,
        dx in 1usize..=4,
        dy in 1usize..=4,
        sx in 0.5f64..200.0,
        sy in 0.5f64..200.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rows(&mut rng, n, dx, 3.0);
        let y = rows(&mut rng, n, dy, 3.0);
        let got = hsic_biased(&SampleSet::from_rows(&x).unwrap(), &SampleSet::from_rows(&y).unwrap(), sx, sy).unwrap();
        let nf = n as f64;
        let want = exhaustive(&x, &y, sx, sy) * nf * nf / ((nf - 1.0) * (nf - 1.0));
        prop_assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }

    #[test]
    fn symmetric_nonnegative_translation_invariant(
        seed in any::<u64>(),
        n in 2usize..=24,
        shift in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = SampleSet::from_rows(&rows(&mut rng, n, 3, 2.0)).unwrap();
        let y = SampleSet::from_rows(&rows(&mut rng, n, 2, 2.0)).unwrap();
        let xy = hsic_biased(&x, &y, 1.3, 0.7).unwrap();
        let yx = hsic_biased(&y, &x, 0.7, 1.3).unwrap();
        prop_assert!((xy - yx).abs() <= 1e-12);
        prop_assert!(xy >= -1e-12);
        let moved = x.translated(&[shift, -shift, 0.5 * shift]).unwrap();
        prop_assert!((hsic_biased(&moved, &y, 1.3, 0.7).unwrap() - xy).abs() <= 1e-10);
    }
}

#[test]
fn independent_vs_dependent_separation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 512;
    let x = rows(&mut rng, n, 4, 1.0);
    let y_ind = rows(&mut rng, n, 4, 1.0);
    let y_dep: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().map(|v| v + rng.gen_range(-0.01..0.01)).collect())
        .collect();
    let xs = SampleSet::from_rows(&x).unwrap();
    let ind = hsic_biased(&xs, &SampleSet::from_rows(&y_ind).unwrap(), 1.0, 1.0).unwrap();
    let dep = hsic_biased(&xs, &SampleSet::from_rows(&y_dep).unwrap(), 1.0, 1.0).unwrap();
    assert!(dep >= 10.0 * ind, "dependent {dep} independent {ind}");
}

fn trace(steps: &[Vec<f64>], gold: &[f64]) -> RepresentationTrace {
    let d = gold.len();
    let flat: Vec<f32> = steps.iter().flatten().map(|&v| v as f32).collect();
    let gold: Vec<f32> = gold.iter().map(|&v| v as f32).collect();
    RepresentationTrace::new(flat, steps.len(), gold, 1, d).unwrap()
}

#[test]
fn batch_copy_beats_shuffled_gold() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let golds = rows(&mut rng, 8, 3, 1.0);
    let noise: Vec<Vec<Vec<f64>>> = (0..8).map(|_| rows(&mut rng, 6, 3, 1.0)).collect();
    let build = |perm: &[usize]| -> Vec<RepresentationTrace> {
        (0..8)
            .map(|i| {
                let mut steps = noise[i].clone();
                steps[2] = golds[i].clone();
                trace(&steps, &golds[perm[i]])
            })
            .collect()
    };
    let cfg = KernelConfig::explicit(1.0);
    let p = TrajectoryParams::default();
    let matched = mi_trajectory(&build(&[0, 1, 2, 3, 4, 5, 6, 7]), &cfg, MiMode::BatchAnchored, &p).unwrap();
    let shuffled = mi_trajectory(&build(&[3, 7, 0, 5, 1, 6, 4, 2]), &cfg, MiMode::BatchAnchored, &p).unwrap();
    assert!(matched.values[2] > shuffled.values[2]);
    assert_eq!(matched.coverage, vec![8; 6]);
}

#[test]
fn single_mode_windowing() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let steps = rows(&mut rng, 20, 2, 1.0);
    let t = RepresentationTrace::new(
        steps.iter().flatten().map(|&v| v as f32).collect(),
        20,
        vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.5],
        3,
        2,
    )
    .unwrap();
    let mi = mi_trajectory(
        &[t],
        &KernelConfig::explicit(1.0),
        MiMode::SingleTrace,
        &TrajectoryParams::default(),
    )
    .unwrap();
    assert_eq!(mi.len(), 20);
    assert!(mi.values[..15].iter().all(|&v| v == mi.values[15]));

    let flat = RepresentationTrace::new(vec![1.5; 40], 20, vec![0.0, 1.0, 2.0, -1.0], 2, 2).unwrap();
    // constant steps have no spread of their own; the gold rows still set a bandwidth
    let mi = mi_trajectory(
        &[flat],
        &KernelConfig::median_heuristic(),
        MiMode::SingleTrace,
        &TrajectoryParams::default(),
    )
    .unwrap();
    assert!(mi.values.iter().all(|v| v.abs() <= 1e-12));
}

#[test]
fn trajectory_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let traces: Vec<RepresentationTrace> = (0..10)
        .map(|_| {
            let len = rng.gen_range(8..14);
            trace(&rows(&mut rng, len, 3, 1.0), &rows(&mut rng, 1, 3, 1.0)[0])
        })
        .collect();
    for cfg in [
        KernelConfig::median_heuristic(),
        KernelConfig::grid_search(default_grid()),
    ] {
        let a = mi_trajectory(&traces, &cfg, MiMode::BatchAnchored, &TrajectoryParams::default()).unwrap();
        let b = mi_trajectory(&traces, &cfg, MiMode::BatchAnchored, &TrajectoryParams::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|&v| v >= -1e-12 && v.is_finite()));
    }
}
