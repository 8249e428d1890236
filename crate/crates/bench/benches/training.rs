use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use layerfed::autodiff::Tape;
use layerfed::encoder::KeptSet;
use layerfed::federation::{client_train, RoundPlan};
use layerfed::ssl::AugmentConfig;
use layerfed_bench::{random_tensor, DeskFixture};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = random_tensor(&[n, n], 1);
        let b = random_tensor(&[n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
                black_box(tape.matmul(&x, &y).unwrap())
            })
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let fx = DeskFixture::new(16);
    let images = fx.data.gather(&(0..32).collect::<Vec<_>>());
    let mut group = c.benchmark_group("desk");
    for phase in [1, 6] {
        let kept = KeptSet::prefix(phase);
        let mut enc = fx.encoder.clone();
        enc.set_trainable(phase, true).unwrap();
        group.bench_with_input(BenchmarkId::new("layerwise-step", phase), &phase, |bench, &phase| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let rep = enc.forward_on(&mut tape, &images, &kept, phase).unwrap();
                let z = enc.project_on(&mut tape, phase, &rep).unwrap();
                let loss = layerfed::ssl::nt_xent_stacked(&mut tape, &z, 0.5).unwrap();
                black_box(tape.backward(&loss).unwrap())
            })
        });
    }
    group.finish();
}

fn client_round(c: &mut Criterion) {
    let fx = DeskFixture::new(16);
    let aug = AugmentConfig::default();
    let mut group = c.benchmark_group("client");
    group.sample_size(10);
    for (name, mut plan) in
        [("layerwise-3", RoundPlan::layerwise(0, 3, KeptSet::prefix(3))), ("end2end", RoundPlan::end_to_end(0, 6))]
    {
        plan.clients = vec![0];
        plan.client_seeds = vec![7];
        group.bench_function(name, |bench| {
            bench.iter(|| {
                black_box(client_train(&fx.encoder, &plan, 0, fx.partition.shard(0), &fx.data, &fx.fed, &aug).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, forward_backward, client_round);
criterion_main!(benches);
