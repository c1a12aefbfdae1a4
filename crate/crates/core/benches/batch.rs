//! Sequential versus data-parallel batch execution on one outer-loop step and
//! on a held-out evaluation sweep.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use spiking_l2l::config::{preset, ExperimentConfig};
use spiking_l2l::outer_loop::{evaluate, initial_params, Trainer};
use spiking_l2l::parallel::{ExecMode, Executor};

fn bench_config() -> ExperimentConfig {
    let mut cfg = preset("exp2-sine-desk").expect("preset exists");
    cfg.outer.batch_size = 8;
    cfg
}

fn modes() -> [(&'static str, ExecMode); 2] {
    [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)]
}

fn trainer_step(c: &mut Criterion) {
    let cfg = bench_config();
    let mut group = c.benchmark_group("trainer_step");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_function(name, |b| {
            b.iter_batched(
                || Trainer::new(&cfg, Executor::new(mode, 0).expect("executor")).expect("trainer"),
                |mut t| t.step().expect("step"),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn eval_sweep(c: &mut Criterion) {
    let cfg = bench_config();
    let params = initial_params(&cfg).expect("params");
    let mut group = c.benchmark_group("eval_sweep");
    group.sample_size(10);
    for (name, mode) in modes() {
        let ex = Executor::new(mode, 0).expect("executor");
        group.bench_function(name, |b| b.iter(|| evaluate(&params, &cfg, 16, &ex).expect("eval")));
    }
    group.finish();
}

criterion_group!(benches, trainer_step, eval_sweep);
criterion_main!(benches);
