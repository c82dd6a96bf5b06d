//! Sequential vs parallel execution of the hot loops.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fvp_core::cloud::chamfer_distance_with;
use fvp_core::dataset::sample_pair_indices;
use fvp_core::probe::{evaluate_policy, ExpertController};
use fvp_core::trainer::{batch_loss_and_grad, FvpModel};
use fvp_core::{generate_synthetic, Exec, PretrainConfig, SceneConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn chamfer(c: &mut Criterion) {
    let set = generate_synthetic(&SceneConfig { n_points: 512, ..SceneConfig::default() }, 1, 0).unwrap();
    let frames = &set.trajectories[0].frames;
    let (a, b) = (frames[0].observation.view(), frames[1].observation.view());
    let mut g = c.benchmark_group("chamfer_512");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| chamfer_distance_with(black_box(a), black_box(b), exec).unwrap())
        });
    }
    g.finish();
}

fn batch_gradient(c: &mut Criterion) {
    let demos = generate_synthetic(&SceneConfig::default(), 4, 0).unwrap();
    let model = FvpModel::init(&PretrainConfig::default()).unwrap();
    let batch = sample_pair_indices(&demos, 1, 16, 0).unwrap();
    let mut g = c.benchmark_group("batch_gradient_16");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| batch_loss_and_grad(&model, &demos, black_box(&batch), 1, exec).unwrap())
        });
    }
    g.finish();
}

fn policy_evaluation(c: &mut Criterion) {
    let scene = SceneConfig::default();
    let expert = ExpertController { scene: scene.clone() };
    let mut g = c.benchmark_group("expert_rollouts_20");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| evaluate_policy(&expert, &scene, 20, 0, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, chamfer, batch_gradient, policy_evaluation);
criterion_main!(benches);
