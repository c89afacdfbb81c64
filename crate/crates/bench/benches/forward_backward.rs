use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use htnet::model::{forward_batch, Topology};
use htnet::train::loss_and_grads;
use htnet::Skeleton;
use htnet_bench::fixture;

fn forward_backward(c: &mut Criterion) {
    let topo = Topology::new(&Skeleton::h36m17());
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for (channels, mixers) in [(48, 3), (240, 3)] {
        let (config, params, data) = fixture(channels, mixers, 16);
        let idx: Vec<usize> = (0..16).collect();
        let input = data.input_batch(&idx);
        let target = data.target_batch(&idx);
        let id = format!("C{channels}_M{mixers}_B16");
        group.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| forward_batch(&params, &config, &input, &topo).unwrap())
        });
        group.bench_function(BenchmarkId::new("forward_backward", &id), |b| {
            b.iter(|| loss_and_grads(&params, &config, &input, &target, &topo).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
