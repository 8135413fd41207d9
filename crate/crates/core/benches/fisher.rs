use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use fim_core::bench::{generate_planted_task, MetricKind, PlantedShiftSpec};
use fim_core::fisher::{estimate_fim_diagonal, FisherOptions};
use fim_core::model::ModelKind;
use fim_core::surgery::{run_baselines, MaskVariant, TrainConfig};
use fim_core::ExecPolicy;

const POLICIES: [(&str, ExecPolicy); 2] = [("parallel", ExecPolicy::Parallel), ("sequential", ExecPolicy::Sequential)];

fn fisher_diagonal(c: &mut Criterion) {
    let mut group = c.benchmark_group("fisher_diagonal");
    for kind in [ModelKind::TinyMlp, ModelKind::TinyTransformer] {
        let spec = PlantedShiftSpec {
            kind,
            hidden_width: 32,
            n_eval: 400,
            n_probe: 256,
            ..PlantedShiftSpec::default()
        };
        let task = generate_planted_task("bench", &spec, 0).unwrap();
        for (name, exec) in POLICIES {
            let opts = FisherOptions::exact().with_exec(exec);
            group.bench_with_input(BenchmarkId::new(name, format!("{kind:?}")), &task, |b, t| {
                b.iter(|| estimate_fim_diagonal(black_box(&t.student), &t.probe, &opts).unwrap())
            });
        }
    }
    group.finish();
}

fn baseline_trials(c: &mut Criterion) {
    let mut group = c.benchmark_group("baseline_trials");
    group.sample_size(10);
    let spec = PlantedShiftSpec {
        n_train: 160,
        n_eval: 80,
        n_probe: 40,
        ..PlantedShiftSpec::default()
    };
    let task = generate_planted_task("bench", &spec, 0).unwrap();
    let variants = MaskVariant::standard();
    for (name, exec) in POLICIES {
        let cfg = TrainConfig {
            learning_rate: 5e-4,
            epochs: 3,
            checkpoint_epochs: vec![0, 3],
            exec,
            ..TrainConfig::default()
        };
        let fisher = FisherOptions::exact().with_exec(exec);
        group.bench_function(name, |b| {
            b.iter(|| {
                run_baselines(
                    &task.student,
                    &task.data,
                    &task.probe,
                    &fisher,
                    &cfg,
                    MetricKind::Accuracy,
                    "bench",
                    &variants,
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, fisher_diagonal, baseline_trials);
criterion_main!(benches);
