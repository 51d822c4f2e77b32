//! Rayon fan-out against the sequential path on the two hot loops: per-sample
//! gradients of a training batch and closed-loop route rollouts. On a single
//! core the two should match; the gap grows with the worker count.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};

use transfuser_core::control::ControllerConfig;
use transfuser_core::eval::{run_route, EvalConfig};
use transfuser_core::fusion::FusionConfig;
use transfuser_core::head::Trajectory;
use transfuser_core::model::{forward, Method, ModelPolicy, ModelSpec, Profile, SampleInput};
use transfuser_core::nn::Graph;
use transfuser_core::parallel::{map_indexed, map_indexed_sequential, worker_count};
use transfuser_core::sim::{build_scenario, render_camera, scan_lidar, ScenarioKind};
use transfuser_core::tensor::ParamStore;

fn batch(spec: &ModelSpec) -> Vec<SampleInput<f32>> {
    (0..8)
        .map(|i| {
            let kind = ScenarioKind::ALL[i % ScenarioKind::ALL.len()];
            let w = build_scenario(kind, i as u64);
            let img = render_camera(&w, &spec.rig);
            let pts = scan_lidar(&w, &spec.rig);
            SampleInput::prepare(spec, &img, &pts, 3.0, [10.0, 0.0], i as u64).unwrap()
        })
        .collect()
}

fn grad(spec: &ModelSpec, params: &ParamStore<f32>, input: &SampleInput<f32>) -> f32 {
    let mut g = Graph::new(params);
    let out = forward(&mut g, spec, input).unwrap();
    let target = g.constant(Trajectory::from_deltas(&[[2.0, 0.0]; 4]).to_tensor());
    let loss = transfuser_core::head::l1_loss(&mut g, out.decoded.waypoints, target).unwrap();
    let grads = g.into_tape().backward(loss).unwrap();
    grads.get("head.out.b").unwrap().data()[0]
}

fn bench(c: &mut Criterion) {
    let spec = ModelSpec::new(Method::Transfuser, Profile::Desk, FusionConfig::desk());
    let params = spec.init_params::<f32>(0).unwrap();
    let inputs = batch(&spec);
    let mut g = c.benchmark_group(format!("batch_gradients_{}_workers", worker_count()));
    g.sample_size(10);
    g.bench_function("parallel", |b| {
        b.iter(|| black_box(map_indexed(inputs.len(), |i| grad(&spec, &params, &inputs[i]))))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(map_indexed_sequential(inputs.len(), |i| grad(&spec, &params, &inputs[i]))))
    });
    g.finish();

    let shared = Arc::new(params);
    let cfg = EvalConfig {
        time_limit: 10.0,
        ..EvalConfig::default()
    };
    let rollout = |i: usize| {
        let kind = ScenarioKind::ALL[i];
        let mut p = ModelPolicy::new(spec.clone(), shared.clone(), ControllerConfig::default(), 0.5, 5.0);
        run_route(&mut p, build_scenario(kind, i as u64), kind.name(), &cfg).unwrap().route_completion
    };
    let mut g = c.benchmark_group(format!("route_rollouts_{}_workers", worker_count()));
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| black_box(map_indexed(ScenarioKind::ALL.len(), rollout))));
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(map_indexed_sequential(ScenarioKind::ALL.len(), rollout)))
    });
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
