use itertools::Itertools;
use proptest::prelude::*;
use udad_core::evaluation::{
    evaluate_samples, intra_diversity, memorization, mode_coverage, sinkhorn_divergence,
    wasserstein2, wasserstein2_exact, EvalReference,
};
use udad_core::tensor::{normal_tensor, RngStreams, Tensor};

fn brute_force_w2(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows();
    let cost = |i: usize, j: usize| -> f64 {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y).powi(2))
            .sum()
    };
    let best = (0..n)
        .permutations(n)
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    (best / n as f64).sqrt()
}

fn points(seed: u64, n: usize) -> Tensor {
    normal_tensor(&mut RngStreams::new(seed).stream("pts", 0), n, 2)
}

#[test]
fn w2_examples() {
    let a = points(1, 30);
    assert_eq!(wasserstein2(&a, &a).unwrap(), 0.0);
    let p = Tensor::from_rows(&[[0.0, 0.0]]);
    let q = Tensor::from_rows(&[[3.0, 4.0]]);
    assert_eq!(wasserstein2(&p, &q).unwrap(), 5.0);
    assert!(wasserstein2(&Tensor::zeros(&[0, 2]), &q).is_err());
}

#[test]
fn exact_matches_brute_force() {
    for seed in 0..10 {
        let (a, b) = (points(100 + seed, 8), points(200 + seed, 8));
        let got = wasserstein2(&a, &b).unwrap();
        let want = brute_force_w2(&a, &b);
        assert!((got - want).abs() <= 1e-12, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn exact_zero_iff_same_multiset() {
    let a = points(3, 12);
    let perm: Vec<[f64; 2]> = (0..12).rev().map(|r| [a.row(r)[0], a.row(r)[1]]).collect();
    assert_eq!(
        wasserstein2_exact(&a, &Tensor::from_rows(&perm)).unwrap(),
        0.0
    );
    let mut moved = perm.clone();
    moved[4][1] += 1e-3;
    assert!(wasserstein2_exact(&a, &Tensor::from_rows(&moved)).unwrap() > 0.0);
}

#[test]
fn sinkhorn_regime_tracks_exact_value() {
    // Two well-separated clouds: the debiased entropic estimate should sit
    // close to the exact shift distance.
    let a = points(4, 300);
    let shifted: Vec<[f64; 2]> = (0..300).map(|r| [a.row(r)[0] + 3.0, a.row(r)[1]]).collect();
    let b = Tensor::from_rows(&shifted);
    let exact = wasserstein2_exact(&a, &b).unwrap();
    assert!((exact - 3.0).abs() < 1e-9);
    let approx = sinkhorn_divergence(&a, &b, 0.01, 500)
        .unwrap()
        .max(0.0)
        .sqrt();
    assert!((approx - exact).abs() < 0.05 * exact, "{approx} vs {exact}");

    // Unequal sizes take the entropic path.
    let c = points(5, 301);
    let v = wasserstein2(&a, &c).unwrap();
    assert!(v.is_finite() && v >= 0.0);
    assert!(sinkhorn_divergence(&a, &c, 0.0, 10).is_err());
}

fn cloud(n: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(prop::array::uniform2(-5.0f64..5.0), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn w2_is_symmetric_and_nonnegative(a in cloud(10), b in cloud(10)) {
        let (a, b) = (Tensor::from_rows(&a), Tensor::from_rows(&b));
        let ab = wasserstein2(&a, &b).unwrap();
        let ba = wasserstein2(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn w2_triangle(a in cloud(9), b in cloud(9), c in cloud(9)) {
        let (a, b, c) = (Tensor::from_rows(&a), Tensor::from_rows(&b), Tensor::from_rows(&c));
        let ac = wasserstein2(&a, &c).unwrap();
        let via = wasserstein2(&a, &b).unwrap() + wasserstein2(&b, &c).unwrap();
        prop_assert!(ac <= via + 1e-9);
    }

    #[test]
    fn w2_translation(a in cloud(10), b in cloud(10), shift in prop::array::uniform2(-3.0f64..3.0)) {
        let mv = |v: &[[f64; 2]]| Tensor::from_rows(&v.iter().map(|p| [p[0] + shift[0], p[1] + shift[1]]).collect::<Vec<_>>());
        let base = wasserstein2(&Tensor::from_rows(&a), &Tensor::from_rows(&b)).unwrap();
        let moved = wasserstein2(&mv(&a), &mv(&b)).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base));
        // Shifting only one side of an identical pair moves it by the shift.
        let one = wasserstein2(&Tensor::from_rows(&a), &mv(&a)).unwrap();
        let norm = (shift[0] * shift[0] + shift[1] * shift[1]).sqrt();
        prop_assert!((one - norm).abs() <= 1e-9 * (1.0 + norm));
    }

    #[test]
    fn diversity_ignores_sample_order(a in cloud(12), ex in cloud(3), seed in 0u64..1000) {
        let gen = Tensor::from_rows(&a);
        let mut order: Vec<usize> = (0..12).collect();
        // Deterministic shuffle driven by the seed.
        for i in (1..12).rev() {
            let j = ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64)) % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let perm = Tensor::from_rows(&order.iter().map(|&i| a[i]).collect::<Vec<_>>());
        let ex = Tensor::from_rows(&ex);
        let d1 = intra_diversity(&gen, &ex).unwrap();
        let d2 = intra_diversity(&perm, &ex).unwrap();
        prop_assert!((d1.value - d2.value).abs() <= 1e-12);
        prop_assert_eq!(d1.degenerate, d2.degenerate);
    }
}

#[test]
fn diversity_examples() {
    let square = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
    let one = Tensor::from_rows(&[[0.5, 0.5]]);
    let d = intra_diversity(&square, &one).unwrap();
    let want = (4.0 + 2.0 * 2f64.sqrt()) / 6.0;
    assert!((d.value - want).abs() < 1e-15);
    assert!((d.value - 1.1381).abs() < 1e-4);
    assert!(!d.degenerate);

    let same = Tensor::from_rows(&[[2.0, 1.0]; 5]);
    assert_eq!(intra_diversity(&same, &one).unwrap().value, 0.0);

    let ex = Tensor::from_rows(&[[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]]);
    let d = intra_diversity(&ex, &ex).unwrap();
    assert_eq!(d.value, 0.0);
    assert!(d.degenerate);

    assert!(intra_diversity(&one, &one).is_err());
}

#[test]
fn diversity_averages_non_empty_clusters() {
    // Cluster A: pair 2 apart. Cluster B: triangle of side 1. Cluster C: singleton.
    let gen = Tensor::from_rows(&[
        [-1.0, 0.0],
        [1.0, 0.0],
        [10.0, 0.0],
        [11.0, 0.0],
        [10.5, 3f64.sqrt() / 2.0],
        [-10.0, 0.0],
    ]);
    let ex = Tensor::from_rows(&[[0.0, 0.0], [10.5, 0.3], [-10.0, 0.0]]);
    let d = intra_diversity(&gen, &ex).unwrap();
    assert!((d.value - 1.5).abs() < 1e-12, "{}", d.value);
}

#[test]
fn coverage_examples() {
    let centers: Vec<[f64; 2]> = (0..8)
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / 8.0;
            [4.0 * th.cos(), 4.0 * th.sin()]
        })
        .collect();
    let c = Tensor::from_rows(&centers);
    assert_eq!(mode_coverage(&c, &c, 0.5).unwrap(), 1.0);
    let one = Tensor::from_rows(&[centers[3]; 10]);
    assert_eq!(mode_coverage(&one, &c, 0.5).unwrap(), 0.125);
    assert!(mode_coverage(&one, &c, 0.0).is_err());
}

#[test]
fn memorization_is_mean_nearest_distance() {
    let ex = Tensor::from_rows(&[[0.0, 0.0], [10.0, 0.0]]);
    let gen = Tensor::from_rows(&[[3.0, 4.0], [10.0, 1.0], [0.0, 0.0]]);
    assert!((memorization(&gen, &ex).unwrap() - 2.0).abs() < 1e-15);
}

#[test]
fn report_collects_all_metrics() {
    let target = points(7, 64);
    let source = points(8, 64);
    let reference = EvalReference {
        target: target.clone(),
        source,
        exemplars: target.head_rows(4),
        centers: Tensor::from_rows(&[[0.0, 0.0]]),
        radius: 1.0,
    };
    let r = evaluate_samples(&target, &reference).unwrap();
    assert_eq!(r.w2_to_target, 0.0);
    assert!(r.w2_to_source > 0.0);
    assert_eq!(r.coverage, 1.0);
    assert_eq!((r.n_generated, r.n_reference), (64, 64));
    assert!(r.diversity > 0.0 && r.memorization > 0.0);

    let mut bad = target.data().to_vec();
    bad[3] = f64::NAN;
    assert!(evaluate_samples(&Tensor::matrix(64, 2, bad).unwrap(), &reference).is_err());
}
