use std::hint::black_box;

use apex_bench::{dataset, desk_config, random_map, random_matrix};
use apex_core::disentangler::{fit, purity_loss, recalc_prototype_sets, tensors_of, DisentangleState};
use apex_core::evaluator::masking::{apply_mask, MaskSpec};
use apex_core::evaluator::metrics::{auroc, eer};
use apex_core::explainer::{explain, Region};
use apex_core::linalg::{mat_exp, mat_exp_vjp};
use apex_core::prototype_bank::{build_bank, Polarity};
use apex_core::schemes::extract;
use apex_core::{fold_head, Scheme, SpectrogramImage};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn linalg(c: &mut Criterion) {
    let mut g = c.benchmark_group("mat_exp");
    for d in [16usize, 64, 128] {
        let a = random_matrix(d, 0.3, 1);
        let ct = random_matrix(d, 1.0, 2);
        g.bench_with_input(BenchmarkId::new("exp", d), &a, |b, a| b.iter(|| mat_exp(black_box(a)).unwrap()));
        g.bench_with_input(BenchmarkId::new("vjp", d), &a, |b, a| {
            b.iter(|| mat_exp_vjp(black_box(a), black_box(&ct)).unwrap())
        });
    }
    g.finish();
}

fn schemes(c: &mut Criterion) {
    let z = random_map(16, 64, 128, 3);
    let mut g = c.benchmark_group("extract_16x64x128");
    for s in Scheme::ALL {
        g.bench_function(s.as_str(), |b| b.iter(|| extract(black_box(&z), 7, s)));
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let ds = dataset(2000);
    let tensors = tensors_of(&ds.features);
    let mut state = DisentangleState::new(desk_config(Scheme::TimeFrequency), 16).unwrap();
    state.set_a(random_matrix(16, 0.05, 4)).unwrap();
    state.protosets = recalc_prototype_sets(&state, &ds.features, &tensors, 100).unwrap();
    let batch: Vec<(usize, usize)> = state
        .protosets
        .iter()
        .enumerate()
        .flat_map(|(k, set)| set.iter().take(32).map(move |p| (p.index, k)))
        .take(512)
        .collect();

    let mut g = c.benchmark_group("disentangler");
    g.bench_function("loss_and_grad_batch512", |b| b.iter(|| purity_loss(&state, &tensors, black_box(&batch)).unwrap()));
    g.bench_function("recalc_m100_n2000", |b| {
        b.iter(|| recalc_prototype_sets(&state, &ds.features, &tensors, 100).unwrap())
    });
    g.sample_size(10);
    let small = dataset(500);
    g.bench_function("fit_20_epochs_n500", |b| {
        b.iter(|| fit(&desk_config(Scheme::Square), &small.features, &small.head).unwrap())
    });
    g.finish();
}

fn inference(c: &mut Criterion) {
    let ds = dataset(500);
    let mut state = DisentangleState::new(desk_config(Scheme::Square), 16).unwrap();
    state.set_a(random_matrix(16, 0.1, 5)).unwrap();
    let folded = fold_head(&ds.head, &state).unwrap();
    let bank = build_bank(&state, &ds.features, &folded, 5, Polarity::Positive).unwrap();
    c.bench_function("build_bank_n500", |b| {
        b.iter(|| build_bank(&state, &ds.features, &folded, 5, Polarity::Positive).unwrap())
    });
    c.bench_function("explain_top4", |b| {
        b.iter(|| explain(black_box(&ds.features.maps[3]), &state, &folded, &bank, 4).unwrap())
    });

    let spec = SpectrogramImage::new("x", 128, 512, vec![1.0; 128 * 512]).unwrap();
    let mask = MaskSpec::new(Region {
        kind: Scheme::TimeFrequency,
        f_range: Some((40, 56)),
        t_range: Some((100, 116)),
    });
    c.bench_function("apply_mask_128x512", |b| b.iter(|| apply_mask(black_box(&spec), &mask).unwrap()));

    let scores: Vec<f64> = (0..10_000).map(|i| ((i * 7919) % 10_007) as f64).collect();
    let labels: Vec<bool> = (0..10_000).map(|i| i % 3 == 0).collect();
    c.bench_function("eer_auroc_n10000", |b| {
        b.iter(|| (eer(black_box(&scores), &labels).unwrap(), auroc(&scores, &labels).unwrap()))
    });
}

criterion_group!(benches, linalg, schemes, training, inference);
criterion_main!(benches);
