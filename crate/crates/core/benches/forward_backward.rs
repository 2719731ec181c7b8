use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use handpose::engine::{huber_loss_batch, ExecMode, Graph, Tensor};
use handpose::netzoo::{build_uninitialized, ArchSpec};

const BATCH: usize = 32;

fn setup(spec: &ArchSpec) -> (Graph<f32>, Vec<Tensor<f32>>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let graph = build_uninitialized::<f32>(spec, 1).unwrap();
    let inputs = graph
        .input_shapes()
        .iter()
        .map(|s| {
            let mut shape = vec![BATCH];
            shape.extend_from_slice(s);
            Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))
        })
        .collect();
    let targets = Tensor::from_fn(&[BATCH, spec.output_len()], |_| rng.random_range(-0.5..0.5));
    (graph, inputs, targets)
}

fn modes() -> [(&'static str, ExecMode); 2] {
    [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)]
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(10);
    for spec in [ArchSpec::deep(64, 16).with_prior(30), ArchSpec::multiscale(64, 16)] {
        let (mut graph, inputs, targets) = setup(&spec);
        let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
        for (name, mode) in modes() {
            graph.set_mode(mode);
            group.bench_function(BenchmarkId::new(spec.label(), name), |b| {
                b.iter(|| {
                    let out = graph.forward(&refs).unwrap();
                    let (_, grad) = huber_loss_batch(out, &targets, 1.0).unwrap();
                    graph.backward(&grad).unwrap();
                })
            });
        }
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    let spec = ArchSpec::deep(128, 16).with_prior(30);
    let (mut graph, inputs, _) = setup(&spec);
    let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
    for (name, mode) in modes() {
        graph.set_mode(mode);
        group.bench_function(BenchmarkId::new(spec.label(), name), |b| b.iter(|| graph.eval(&refs).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, forward_backward, forward);
criterion_main!(benches);
