use apex_core::data_model::{read_tensor_file, write_tensor_file, Container, TensorFile};
use apex_core::disentangler::{fold_head, DisentangleState};
use apex_core::evaluator::masking::{apply_mask, MaskSpec};
use apex_core::evaluator::metrics::{auroc, average_precision, eer};
use apex_core::explainer::Region;
use apex_core::linalg::{adam_step, mat_exp, mat_exp_vjp, AdamState};
use apex_core::prototype_bank::{build_bank, Polarity};
use apex_core::schemes::{extract, purity, purity_of, select};
use apex_core::{
    apply_transform, gap, logits, ClassifierHead, DisentangleConfig, FeatureMap, FeatureMapSet, Matrix,
    Scheme, SpectrogramImage, Split, Tensor3,
};
use proptest::prelude::*;

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![
        Just(Scheme::Square),
        Just(Scheme::Time),
        Just(Scheme::Frequency),
        Just(Scheme::TimeFrequency)
    ]
}

fn matrix(n: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0..1.0f64, n * n).prop_map(move |v| Matrix::from_vec(n, n, v).unwrap().scaled(scale))
}

fn tensor(max_ft: usize, max_d: usize) -> impl Strategy<Value = Tensor3> {
    (1..=max_ft, 1..=max_ft, 1..=max_d).prop_flat_map(|(f, t, d)| {
        prop::collection::vec(-3.0..3.0f64, f * t * d).prop_map(move |v| Tensor3::from_vec(f, t, d, v).unwrap())
    })
}

fn taylor(a: &Matrix, terms: usize) -> Matrix {
    let mut sum = Matrix::identity(a.rows());
    let mut term = Matrix::identity(a.rows());
    for j in 1..terms {
        term = term.matmul(a).unwrap().scaled(1.0 / j as f64);
        sum = sum.add(&term).unwrap();
    }
    sum
}

/// Squares a 30-term series of `A / 2^s`; accurate for the norms used here.
fn oracle_exp(a: &Matrix) -> Matrix {
    let s = 4;
    let mut e = taylor(&a.scaled(1.0 / 16.0), 30);
    for _ in 0..s {
        e = e.matmul(&e).unwrap();
    }
    e
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exp_times_exp_neg_is_identity(d in 1usize..=16, scale in 0.0..3.0f64, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0) * scale);
        let r = mat_exp(&a).unwrap().matmul(&mat_exp(&a.scaled(-1.0)).unwrap()).unwrap();
        prop_assert!(r.sub(&Matrix::identity(d)).unwrap().frobenius_norm() <= 1e-10 * d as f64);
    }

    #[test]
    fn exp_matches_taylor_in_unit_ball(a in (1usize..=8).prop_flat_map(|n| matrix(n, 1.0))) {
        let norm = a.frobenius_norm();
        let a = if norm > 1.0 { a.scaled(1.0 / norm) } else { a };
        prop_assert!(mat_exp(&a).unwrap().max_abs_diff(&taylor(&a, 30)).unwrap() <= 1e-9);
    }

    #[test]
    fn vjp_matches_central_differences(
        (a, c) in (2usize..=6).prop_flat_map(|n| (matrix(n, 1.0), matrix(n, 1.0)))
    ) {
        // ‖A‖ ≤ 2, step 1e-6
        let norm = a.frobenius_norm();
        let a = if norm > 2.0 { a.scaled(2.0 / norm) } else { a };
        let h = 1e-6;
        let n = a.rows();
        let g = mat_exp_vjp(&a, &c).unwrap();
        let fd = Matrix::from_fn(n, n, |r, s| {
            let (mut p, mut m) = (a.clone(), a.clone());
            p[(r, s)] += h;
            m[(r, s)] -= h;
            oracle_exp(&p).sub(&oracle_exp(&m)).unwrap().dot(&c).unwrap() / (2.0 * h)
        });
        let rel = g.sub(&fd).unwrap().frobenius_norm() / fd.frobenius_norm().max(1e-12);
        prop_assert!(rel <= 1e-4, "rel = {rel}");
    }

    #[test]
    fn adam_zero_gradient_without_decay_is_identity(p in matrix(4, 5.0), steps in 1usize..10) {
        let mut st = AdamState::new(4, 4, 0.1, 0.9, 0.999, 0.0).unwrap();
        let mut q = p.clone();
        for _ in 0..steps {
            q = adam_step(&q, &Matrix::zeros(4, 4), &mut st).unwrap();
        }
        prop_assert_eq!(q, p);
    }

    #[test]
    fn gap_is_linear(
        (z1, z2) in (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(f, t, d)| {
            let v = || prop::collection::vec(-2.0..2.0f64, f * t * d);
            (v(), v()).prop_map(move |(a, b)| (Tensor3::from_vec(f, t, d, a).unwrap(), Tensor3::from_vec(f, t, d, b).unwrap()))
        }),
        alpha in -3.0..3.0f64,
    ) {
        let combo = Tensor3::from_vec(
            z1.freq(), z1.time(), z1.channels(),
            z1.as_slice().iter().zip(z2.as_slice()).map(|(a, b)| alpha * a + b).collect(),
        ).unwrap();
        let want: Vec<f64> = gap(&z1).iter().zip(gap(&z2)).map(|(a, b)| alpha * a + b).collect();
        for (g, w) in gap(&combo).iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn gap_commutes_with_channel_transform(
        (z, u) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(f, t, d)| {
            (prop::collection::vec(-2.0..2.0f64, f * t * d).prop_map(move |v| Tensor3::from_vec(f, t, d, v).unwrap()), matrix(d, 1.5))
        })
    ) {
        let lhs = gap(&apply_transform(&u, &z).unwrap());
        let rhs = u.matvec(&gap(&z)).unwrap();
        for (a, b) in lhs.iter().zip(&rhs) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn purity_is_a_fraction(v in prop::collection::vec(-5.0..5.0f64, 1..8), k in 0usize..8) {
        let k = k % v.len();
        let p = purity_of(&v, k).value;
        prop_assert!((0.0..=1.0 + 1e-15).contains(&p));
    }

    #[test]
    fn purity_one_iff_axis_aligned(d in 1usize..8, k in 0usize..8, c in prop_oneof![-4.0..-0.1f64, 0.1..4.0f64], eps in 1e-3..1.0f64) {
        let k = k % d;
        let mut v = vec![0.0; d];
        v[k] = c;
        prop_assert!((purity_of(&v, k).value - 1.0).abs() < 1e-15);
        if d > 1 {
            v[(k + 1) % d] = eps;
            prop_assert!(purity_of(&v, k).value < 1.0);
        }
    }

    #[test]
    fn selection_is_scale_equivariant(z in tensor(6, 4), k in 0usize..4, s in scheme(), c in 0.01..100.0f64) {
        let k = k % z.channels();
        let a = extract(&z, k, s);
        let b = extract(&z.scaled(c), k, s);
        prop_assert_eq!(a.coords, b.coords);
        prop_assert!((purity(&a) - purity(&b)).abs() <= 1e-12);
    }

    #[test]
    fn selection_is_repeatable(z in tensor(6, 4), k in 0usize..4, s in scheme()) {
        let k = k % z.channels();
        prop_assert_eq!(select(&z, k, s), select(&z, k, s));
    }

    #[test]
    fn containers_roundtrip_bit_identical(
        (f, t, d) in (1usize..6, 1usize..6, 1usize..6),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let fm = FeatureMap::new("s/1", (f, t, d), (4 * f, 3 * t), (0..f * t * d).map(|_| rng.random_range(-1e3..1e3f32)).collect()).unwrap();
        let sp = SpectrogramImage::new("s/1", 4 * f, 3 * t, (0..12 * f * t).map(|_| rng.random::<f32>()).collect()).unwrap();
        let w = Matrix::from_fn(3, d, |_, _| rng.random_range(-2.0..2.0f32) as f64);
        let head = ClassifierHead::new(w, vec![0.25, -1.5, 3.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (i, obj) in [TensorFile::from(fm), sp.into(), head.into()].into_iter().enumerate() {
            let path = dir.path().join(format!("{i}.apx"));
            write_tensor_file(&obj, &path).unwrap();
            let bytes = std::fs::read(&path).unwrap();
            let back = read_tensor_file(&path).unwrap();
            prop_assert_eq!(&back, &obj);
            prop_assert_eq!(back.to_container().unwrap().encode(), bytes.clone());
            prop_assert_eq!(Container::decode(&bytes).unwrap().encode(), bytes);
        }
    }

    #[test]
    fn masks_are_monotone_and_hard_masks_idempotent(
        (fi, ti) in (4usize..20, 4usize..20),
        seed in any::<u64>(),
        floor in 0.0..=1.0f64,
        softness in 0usize..4,
        kind in scheme(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let spec = SpectrogramImage::new("x", fi, ti, (0..fi * ti).map(|_| rng.random_range(0.0..5.0f32)).collect()).unwrap();
        let mut range = |n: usize| {
            let lo = rng.random_range(0..n);
            (lo, rng.random_range(lo + 1..=n))
        };
        let (fr, tr) = (range(fi), range(ti));
        let region = Region {
            kind,
            f_range: (kind != Scheme::Time).then_some(fr),
            t_range: (kind != Scheme::Frequency).then_some(tr),
        };
        let soft = MaskSpec { region, attenuation_floor: floor, edge_softness: softness };
        let out = apply_mask(&spec, &soft).unwrap();
        prop_assert!(out.values.iter().zip(&spec.values).all(|(a, b)| a <= b));
        for f in 0..fi {
            for t in 0..ti {
                if !region.contains(f, t) {
                    prop_assert_eq!(out.get(f, t), spec.get(f, t));
                }
            }
        }
        let hard = MaskSpec { region, attenuation_floor: 0.0, edge_softness: 0 };
        let once = apply_mask(&spec, &hard).unwrap();
        prop_assert_eq!(apply_mask(&once, &hard).unwrap(), once);
    }

    #[test]
    fn metrics_stay_in_unit_interval(
        (scores, labels) in (2usize..40).prop_flat_map(|n| (
            prop::collection::vec(-2.0..2.0f64, n),
            prop::collection::vec(any::<bool>(), n),
        ))
    ) {
        let mut labels = labels;
        labels[0] = true;
        labels[1] = false;
        for v in [eer(&scores, &labels).unwrap(), auroc(&scores, &labels).unwrap(), average_precision(&scores, &labels).unwrap().unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        // flipping the scores mirrors AUROC
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auroc(&neg, &labels).unwrap() - (1.0 - auroc(&scores, &labels).unwrap())).abs() < 1e-12);
    }
}

fn random_set(n: usize, (f, t, d): (usize, usize, usize), seed: u64) -> FeatureMapSet {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let maps = (0..n)
        .map(|i| {
            FeatureMap::new(format!("s{i:03}"), (f, t, d), (2 * f, 2 * t), (0..f * t * d).map(|_| rng.random_range(-1.0..1.0f32)).collect())
                .unwrap()
        })
        .collect();
    FeatureMapSet::new(maps, vec![vec![0]; n], vec![Split::Train; n]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bank_lists_are_sorted_and_sized(seed in any::<u64>(), m in 1usize..6, s in scheme(), neg in any::<bool>(), a in matrix(3, 0.5)) {
        let feats = random_set(12, (3, 4, 3), seed);
        let mut state = DisentangleState::new(DisentangleConfig::with_scheme(s), 3).unwrap();
        state.set_a(a).unwrap();
        let head = ClassifierHead::new(Matrix::identity(3), vec![0.0; 3]).unwrap();
        let folded = fold_head(&head, &state).unwrap();
        let polarity = if neg { Polarity::Negative } else { Polarity::Positive };
        let bank = build_bank(&state, &feats, &folded, m, polarity).unwrap();
        for list in &bank.per_channel {
            prop_assert_eq!(list.len(), m);
            for w in list.windows(2) {
                if neg {
                    prop_assert!(w[0].activation <= w[1].activation);
                } else {
                    prop_assert!(w[0].activation >= w[1].activation);
                }
            }
        }
        let again = build_bank(&state, &feats, &folded, m, polarity).unwrap();
        prop_assert_eq!(bank, again);
    }

    #[test]
    fn folded_pipeline_preserves_logits(seed in any::<u64>(), a in matrix(4, 0.8), w in prop::collection::vec(-2.0..2.0f64, 12)) {
        let feats = random_set(6, (3, 3, 4), seed);
        let head = ClassifierHead::new(Matrix::from_vec(3, 4, w).unwrap(), vec![0.1, -0.2, 0.3]).unwrap();
        let mut state = DisentangleState::new(DisentangleConfig::default(), 4).unwrap();
        state.set_a(a).unwrap();
        // the cached inverse stays an inverse
        let r = state.u.matmul(&state.u_inv).unwrap().sub(&Matrix::identity(4)).unwrap();
        prop_assert!(r.frobenius_norm() <= 1e-8 * 4.0);
        let folded = fold_head(&head, &state).unwrap();
        for fm in &feats.maps {
            let z = fm.to_tensor();
            let old = logits(&head, &gap(&z)).unwrap();
            let new = logits(&folded, &gap(&apply_transform(&state.u, &z).unwrap())).unwrap();
            for (o, n) in old.iter().zip(&new) {
                prop_assert!((o - n).abs() / o.abs().max(1e-8) <= 1e-5);
            }
        }
    }
}

#[test]
fn zero_generator_is_the_baseline_model() {
    let feats = random_set(5, (2, 3, 4), 9);
    let head = ClassifierHead::new(Matrix::from_fn(2, 4, |r, c| (r + 2 * c) as f64 - 3.0), vec![1.0, -1.0]).unwrap();
    let state = DisentangleState::new(DisentangleConfig::default(), 4).unwrap();
    assert_eq!(state.u, Matrix::identity(4));
    let folded = fold_head(&head, &state).unwrap();
    assert_eq!(folded.weights, head.weights);
    for fm in &feats.maps {
        let z = fm.to_tensor();
        assert_eq!(apply_transform(&state.u, &z).unwrap(), z);
    }
}
