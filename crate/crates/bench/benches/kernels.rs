use std::hint::black_box;

use ckge_bench::fixture;
use ckge_core::distill::{total_loss, DistillContext, TableDistiller};
use ckge_core::eval::{evaluate, FilterIndex};
use ckge_core::scoring::margin_loss_grad;
use ckge_core::tokens::{compute_mask, diversity_loss_grad, token_objective, TokenBatch};
use ckge_core::trainer::{AdamParams, AdamState};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn margin(c: &mut Criterion) {
    let mut g = c.benchmark_group("margin_loss_grad");
    for batch in [256, 1024] {
        let f = fixture(5000, 50, 200, 4, batch, 10);
        g.bench_with_input(BenchmarkId::from_parameter(batch), &f, |b, f| {
            b.iter(|| {
                margin_loss_grad(
                    &f.entities,
                    &f.relations,
                    &f.positives,
                    &f.negatives,
                    9.0,
                    1.0 / batch as f32,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

fn masks(c: &mut Criterion) {
    let f = fixture(5000, 50, 200, 4, 1, 1);
    c.bench_function("compute_mask 4x5000x200", |b| {
        b.iter(|| compute_mask(black_box(&f.entity_tokens), &f.entities).unwrap())
    });
    let m = compute_mask(&f.entity_tokens, &f.entities).unwrap();
    c.bench_function("diversity_loss_grad 4x5000", |b| {
        b.iter(|| diversity_loss_grad(black_box(&m)))
    });
}

fn token_step(c: &mut Criterion) {
    let f = fixture(2000, 50, 100, 4, 512, 10);
    let batch = TokenBatch {
        entities: &f.entities,
        relations: &f.relations,
        positives: &f.positives,
        negatives: &f.negatives,
        margin: 9.0,
        trans_scale: 1.0 / 512.0,
        lambda: 0.1,
    };
    c.bench_function("token_objective 2000x100 b512", |b| {
        b.iter(|| token_objective(&batch, &f.entity_tokens, &f.relation_tokens).unwrap())
    });
}

fn distill_step(c: &mut Criterion) {
    let f = fixture(5000, 50, 200, 4, 1024, 10);
    let prev = fixture(4000, 40, 200, 4, 1, 1);
    let ctx = DistillContext {
        entity: TableDistiller::new(&prev.entities, &f.entity_tokens, 4000, false).unwrap(),
        relation: TableDistiller::new(&prev.relations, &f.relation_tokens, 40, false).unwrap(),
        alpha: 1e4,
    };
    c.bench_function("total_loss 5000x200 b1024", |b| {
        b.iter(|| {
            total_loss(
                &f.entities,
                &f.relations,
                &f.positives,
                &f.negatives,
                9.0,
                1.0 / 1024.0,
                &ctx,
            )
            .unwrap()
        })
    });
}

fn adam(c: &mut Criterion) {
    let f = fixture(5000, 1, 200, 1, 1, 1);
    let mut params = f.entities.as_slice().to_vec();
    let grads: Vec<f32> = params.iter().map(|x| x * 0.5).collect();
    let mut state = AdamState::new(params.len());
    let hp = AdamParams::with_lr(1e-3);
    c.bench_function("adam 1M", |b| {
        b.iter(|| state.step(&mut params, &grads, &hp).unwrap())
    });
}

fn ranking(c: &mut Criterion) {
    let f = fixture(5000, 50, 200, 4, 200, 1);
    let filter = FilterIndex::new(f.positives.iter());
    c.bench_function("filtered eval 200 triples x 5000", |b| {
        b.iter(|| {
            evaluate(
                &f.entities,
                &f.relations,
                &f.positives,
                5000,
                Some(&filter),
                false,
            )
            .unwrap()
        })
    });
}

criterion_group!(
    kernels,
    margin,
    masks,
    token_step,
    distill_step,
    adam,
    ranking
);
criterion_main!(kernels);
