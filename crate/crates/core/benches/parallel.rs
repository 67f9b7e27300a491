use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cia_core::config::{CiaMode, TrainConfig};
use cia_core::diagnostics::kl_matrix;
use cia_core::trainer::{evaluate, Trainer};
use cia_core::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn warm_trainer(exec: Exec) -> Trainer {
    let mut cfg = TrainConfig::default();
    cfg.run.mode = CiaMode::Cia;
    cfg.rl.batch_size = 8;
    cfg.log.eval_interval = 0;
    let mut t = Trainer::new(cfg, exec).unwrap();
    while t.buffer.len() < 8 {
        let ep = t.collect_episode().unwrap();
        t.counters.episodes += 1;
        t.buffer.push(ep);
    }
    t
}

fn bench_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_b8");
    group.sample_size(10);
    for (name, exec) in MODES {
        let mut t = warm_trainer(exec);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| t.train_step().unwrap())
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let t = warm_trainer(Exec::Sequential);
    let mut group = c.benchmark_group("evaluate_16");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&t.model, 16, 0, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_kl(c: &mut Criterion) {
    let models: Vec<_> = (0..3)
        .map(|seed| {
            let mut cfg = TrainConfig::default();
            cfg.run.seed = seed;
            Trainer::new(cfg, Exec::Sequential).unwrap().model
        })
        .collect();
    let mut group = c.benchmark_group("kl_matrix_3x4");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| kl_matrix(&models, 4, 0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_train_step, bench_evaluate, bench_kl);
criterion_main!(benches);
