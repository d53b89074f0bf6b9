use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use cultlab::attribution::{aggregate_instances, instance_score, token_scores, Variant};
use cultlab_bench::fixture;

fn bench_attribution(c: &mut Criterion) {
    let f = fixture();
    let inst = &f.suite.mcq_neur.instances[0];
    c.bench_function("token_scores", |b| b.iter(|| token_scores(&f.model, inst).unwrap()));
    for variant in [Variant::Max, Variant::Norm] {
        c.bench_function(&format!("instance_score/{variant}"), |b| {
            b.iter(|| instance_score(&f.model, inst, variant).unwrap())
        });
    }
    let batch = &f.suite.mcq_neur.instances[..32];
    c.bench_function("aggregate/32", |b| {
        b.iter_batched(|| batch, |d| aggregate_instances(&f.model, d, Variant::Max).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_attribution
}
criterion_main!(benches);
