use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};

use gpct::chain::{build_chain, solve_chain};
use gpct::datasets::{build_lie_graph, gen_landmark_benchmark, gen_sinusoid_1d, landmark_map, LandmarkBenchConfig};
use gpct::lie::LieGroup;
use gpct::lie_ct::Values;
use gpct::lti::LtiModel;
use gpct::par::Execution;
use gpct::query::query_batch;

const PATHS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn linearize(c: &mut Criterion) {
    let cfg = LandmarkBenchConfig { n_states: 500, ..LandmarkBenchConfig::default() };
    let bench = gen_landmark_benchmark(&cfg, 1).unwrap();
    let graph =
        build_lie_graph(LieGroup::Se2, cfg.qc(), &bench.truth.times, &bench.log, &landmark_map(&bench.landmarks))
            .unwrap();
    let mut values = Values::new();
    for (s, (p, v)) in graph.states.iter().zip(bench.truth.lie_states().unwrap()) {
        values.insert_pose(s.pose, p);
        values.insert_vector(s.vel, v);
    }
    let mut group = c.benchmark_group("linearize_landmark_graph");
    for (name, exec) in PATHS {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| graph.linearize(&values, e).unwrap())
        });
    }
    group.finish();
}

fn queries(c: &mut Criterion) {
    let (_, log) = gen_sinusoid_1d(1.0, 600.0, 0.1, 2).unwrap();
    let meas = log.linear_measurements(1).unwrap();
    let model = LtiModel::wnoa(DMatrix::from_element(1, 1, 1.0)).unwrap();
    let times = log.times();
    let sol =
        solve_chain(&build_chain(&model, DVector::zeros(2), DMatrix::identity(2, 2), &times, &meas).unwrap()).unwrap();
    let taus: Vec<f64> = (0..20_000).map(|i| 0.013 + i as f64 * 0.0299).collect();
    let mut group = c.benchmark_group("query_batch_20k");
    for (name, exec) in PATHS {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| query_batch(&model, &sol, &taus, e).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, linearize, queries);
criterion_main!(benches);
