use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use lcp::autodiff::Tape;
use lcp::data::{generate, DatasetManifest, Sample};
use lcp::detector::{detection_loss, match_anchors, DetectorConfig, ModelGraph};
use lcp::exec::{map_parallel, map_sequential};
use lcp::metrics::{detect, EvalConfig};

fn image_loss_gradient(model: &ModelGraph, sample: &Sample) -> f64 {
    let anchors = model.default_boxes();
    let targets = match_anchors(&anchors, &sample.boxes, 0.5);
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, |_| true);
    let x = tape.constant(sample.image.clone());
    let pass = model.forward(&mut tape, &params, x).unwrap();
    let loss = detection_loss(
        &mut tape,
        pass.logits,
        pass.offsets,
        &anchors,
        &targets,
        &sample.labels,
        &sample.boxes,
        50.0,
        3,
        &model.coder,
    )
    .unwrap();
    tape.backward(loss.total).unwrap();
    tape.grad(params[0]).unwrap().sq_norm()
}

fn bench(c: &mut Criterion) {
    let model = ModelGraph::new(&DetectorConfig::default(), 0).unwrap();
    let data = generate(&DatasetManifest::new(0, 16)).unwrap();
    let indices: Vec<usize> = (0..data.len()).collect();

    let mut group = c.benchmark_group("batch_gradient_16");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("sequential", 16), |b| {
        b.iter(|| map_sequential(&data.samples, |s| image_loss_gradient(&model, s)))
    });
    group.bench_function(BenchmarkId::new("parallel", 16), |b| {
        b.iter(|| map_parallel(&data.samples, |s| image_loss_gradient(&model, s)))
    });
    group.finish();

    let cfg = EvalConfig::default();
    let mut group = c.benchmark_group("detect_16");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("sequential", 16), |b| {
        b.iter(|| map_sequential(&indices, |&i| detect(&model, i, &data.samples[i].image, &cfg).unwrap().len()))
    });
    group.bench_function(BenchmarkId::new("parallel", 16), |b| {
        b.iter(|| map_parallel(&indices, |&i| detect(&model, i, &data.samples[i].image, &cfg).unwrap().len()))
    });
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
