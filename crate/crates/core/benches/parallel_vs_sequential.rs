//! Sequential against rayon-parallel execution for the three fan-out points:
//! per-sample gradients of one batch, evaluation of a test set, and ensemble
//! voting over stored logits. Build with `--no-default-features` to see the
//! fallback path, where both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fusionvote::config::RunConfig;
use fusionvote::data::{generate_synthetic, SynthConfig};
use fusionvote::ensemble::{ensemble_predictions, Strategy};
use fusionvote::losses::{LossKind, LossPolicy};
use fusionvote::model::build;
use fusionvote::par::Execution;
use fusionvote::trainer::{batch_gradient, evaluate};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn benches(c: &mut Criterion) {
    let (train, test) = generate_synthetic(&SynthConfig::new(vec![200, 150, 100, 80, 60], 0.5, 16, 0.1, 1)).unwrap();
    let cfg = RunConfig::default();
    let spec = cfg.network_spec(train.image_shape(), train.classes()).unwrap();
    let state = build::<f32>(&spec, 0).unwrap();
    let policy = LossPolicy::balanced_default();
    let batch: Vec<usize> = (0..128).collect();

    let mut g = c.benchmark_group("batch_gradient_128");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradient(&state, &train, &batch, &policy, LossKind::Lsr, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_test_set");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| evaluate(&state, &test, exec).unwrap()));
    }
    g.finish();

    let logits: Vec<Vec<Vec<f64>>> = (0..6)
        .map(|s| evaluate(&build::<f32>(&spec, s).unwrap(), &test, Execution::Parallel).unwrap().logits)
        .collect();
    let mut g = c.benchmark_group("t2v_ensemble_6");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| ensemble_predictions(&logits, Strategy::t2v_default(), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(parallel_vs_sequential, benches);
criterion_main!(parallel_vs_sequential);
