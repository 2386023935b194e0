//! Sequential vs parallel execution of the data-parallel loops.
//! Build with `--no-default-features` to compare against a rayon-free binary.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sandepth::config::TrainConfig;
use sandepth::data::generate_dataset;
use sandepth::trainer::{evaluate, EvalMode, Trainer};
use sandepth::ExecMode;

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn config() -> TrainConfig {
    let mut cfg = TrainConfig::compact();
    cfg.data.train_frames = 32;
    cfg.data.val_frames = 16;
    cfg.batch_size = 8;
    cfg
}

fn bench(c: &mut Criterion) {
    let cfg = config();
    let ds = generate_dataset(&cfg.data, ExecMode::Sequential);

    let mut g = c.benchmark_group("dataset");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| generate_dataset(&cfg.data, mode)));
    }
    g.finish();

    // stage-2 epochs exercise both the RGB and the sparse paths
    let mut stage2 = cfg.clone();
    stage2.stage1_epochs = 0;
    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(
                || Trainer::<f32>::new(&stage2).unwrap(),
                |mut t| t.run_epoch(&ds, mode).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    g.finish();

    let t = Trainer::<f32>::new(&cfg).unwrap();
    let mut g = c.benchmark_group("evaluate_completion");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&t.net, &t.store, &ds.val, EvalMode::Completion, 0.2, 7, cfg.eval_cap, mode).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
