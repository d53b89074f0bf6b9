use criterion::{criterion_group, criterion_main, Criterion};
use cultlab::eval::{eval_accuracy, random_mask};
use cultlab::{Family, NeuronMask};
use cultlab_bench::fixture;
use std::collections::BTreeMap;

fn bench_eval(c: &mut Criterion) {
    let f = fixture();
    let data = &f.suite.crc_test;
    let none = NeuronMask::empty();
    c.bench_function("eval_accuracy/unmasked", |b| {
        b.iter(|| eval_accuracy(&f.model, data, &none, "none").unwrap())
    });
    let counts = BTreeMap::from([(Family::MlpGate, 10), (Family::AttnV, 2)]);
    let mask = random_mask(&f.model, &counts, 3).unwrap();
    c.bench_function("eval_accuracy/masked", |b| {
        b.iter(|| eval_accuracy(&f.model, data, &mask, "random").unwrap())
    });
    let prompt = &data.instances[0].prompt;
    c.bench_function("forward", |b| b.iter(|| f.model.forward(prompt, &none, false).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_eval
}
criterion_main!(benches);
