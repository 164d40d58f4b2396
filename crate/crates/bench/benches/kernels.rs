use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use seqwarp_bench::{population, truth_bundle};
use seqwarp_core::baseline::{baseline_init, baseline_loss_grad, BaselineConfig};
use seqwarp_core::conformal::{split_quantile, weighted_quantile};
use seqwarp_core::identify::identify_all;
use seqwarp_core::train::{gradient, objective, GradOptions};
use seqwarp_core::{basis_eval_series, build_design, log_evidence};

fn evidence(c: &mut Criterion) {
    let (ds, gt) = population(200, 1.0);
    let b = truth_bundle(&gt);
    let u = &ds.units[0];
    let rows = build_design(u, &b.basis, &b.effects, 1, u.horizon()).unwrap();
    c.bench_function("log_evidence/unit", |bench| {
        bench.iter(|| log_evidence(black_box(&rows), 5, &b.noise).unwrap())
    });
    c.bench_function("basis_series/unit", |bench| {
        bench.iter(|| basis_eval_series(&b.basis, black_box(&u.x), &u.z).unwrap())
    });
    c.bench_function("objective/200", |bench| bench.iter(|| objective(black_box(&ds), &b).unwrap()));
}

fn gradients(c: &mut Criterion) {
    let (ds, gt) = population(200, 1.0);
    let b = truth_bundle(&gt);
    let mut g = c.benchmark_group("gradient/200");
    for include_basis in [false, true] {
        let opts = GradOptions {
            include_basis,
            basis_rows_until: None,
        };
        g.bench_with_input(BenchmarkId::from_parameter(include_basis), &opts, |bench, o| {
            bench.iter(|| gradient(&ds, &b, *o).unwrap())
        });
    }
    g.finish();
    let bp = baseline_init(&ds, &BaselineConfig::default());
    let idx: Vec<usize> = (0..64).collect();
    c.bench_function("baseline_grad/64", |bench| bench.iter(|| baseline_loss_grad(&bp, &ds, black_box(&idx))));
}

fn identification(c: &mut Criterion) {
    let (ds, gt) = population(500, 0.0);
    let mut g = c.benchmark_group("identify");
    g.sample_size(10);
    g.bench_function("all/500", |bench| {
        bench.iter(|| identify_all(&ds, &gt.basis, 5, &BTreeMap::new()).unwrap())
    });
    g.finish();
}

fn quantiles(c: &mut Criterion) {
    let scores: Vec<f64> = (0..2000).map(|i| ((i * 7919) % 2003) as f64 / 13.0).collect();
    let weights: Vec<f64> = (0..2000).map(|i| 1.0 + (i % 5) as f64).collect();
    c.bench_function("split_quantile/2000", |b| b.iter(|| split_quantile(black_box(&scores), 0.05)));
    c.bench_function("weighted_quantile/2000", |b| {
        b.iter(|| weighted_quantile(black_box(&scores), &weights, 0.05).unwrap())
    });
}

criterion_group!(benches, evidence, gradients, identification, quantiles);
criterion_main!(benches);
