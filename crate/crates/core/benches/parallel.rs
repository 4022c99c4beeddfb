//! Sequential vs data-parallel execution of the hot loops: per-sample
//! gradients of a batch, test-set inference, and phantom generation.
//!
//! Build with `--no-default-features` to compile the sequential fallback
//! only; both execution modes are then identical.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use imfseg::data_model::TrainingConfig;
use imfseg::losses::plg_objective;
use imfseg::network::{backward, forward_with_tape, Architecture, NetworkParameters};
use imfseg::par::{self, Execution};
use imfseg::phantom::{generate, slice_spec, DatasetSpec, PhantomSpec};
use imfseg::pseudolabel::generate_pseudo;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn phantoms(n: usize) -> Vec<imfseg::phantom::Phantom> {
    (0..n as u64)
        .map(|seed| {
            generate(&PhantomSpec {
                seed,
                ..PhantomSpec::default()
            })
            .unwrap()
        })
        .collect()
}

fn batch_gradients(c: &mut Criterion) {
    let config = TrainingConfig::phantom();
    let params = NetworkParameters::init(Architecture::new(config.depth, config.base_channels), 0);
    let batch = phantoms(config.batch_size);
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let grads = par::map(exec, &batch, |ph| {
                    let (out, tape) = forward_with_tape(&params, &ph.image).unwrap();
                    let obj = plg_objective(&out, Some(&ph.muscle), &config);
                    backward(&params, &tape, &obj.d_p_a, &obj.d_p_b)
                });
                black_box(grads)
            })
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let config = TrainingConfig::phantom();
    let params = NetworkParameters::init(Architecture::new(config.depth, config.base_channels), 0);
    let slices = phantoms(16);
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                black_box(par::map(exec, &slices, |ph| {
                    generate_pseudo(&params, &ph.image, &config).unwrap()
                }))
            })
        });
    }
    group.finish();
}

fn phantom_generation(c: &mut Criterion) {
    let ds = DatasetSpec::default();
    let mut group = c.benchmark_group("phantom_generation");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                black_box(par::map_range(exec, 32, |i| {
                    generate(&slice_spec(&ds, "bench", i)).unwrap()
                }))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, inference, phantom_generation);
criterion_main!(benches);
