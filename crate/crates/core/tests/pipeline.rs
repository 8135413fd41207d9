use std::fs;

use fim_core::bench::{
    generate_planted_task, run_sweep, MetricKind, PlantedShiftSpec, RecordSchema, SweepConfig, TaskSource, TaskStatus,
};
use fim_core::fisher::FisherOptions;
use fim_core::model::{ModelConfig, ModelHandle, ParameterSnapshot};
use fim_core::stability::{deviation, track};
use fim_core::surgery::{finetune, FreezeMask, MaskVariant, TrainConfig};
use fim_core::ExecPolicy;

const WORDS: [&str; 8] = ["good", "great", "fine", "fun", "bad", "awful", "dull", "poor"];

fn text_dataset(dir: &std::path::Path) -> std::path::PathBuf {
    let mut out = String::new();
    for i in 0..90 {
        let positive = i % 2 == 0;
        let a = WORDS[(i * 7) % 4 + if positive { 0 } else { 4 }];
        let b = WORDS[(i * 3) % 8];
        let label = if positive { "pos" } else { "neg" };
        out.push_str(&format!("{{\"text\": \"the film was {a}, {b}!\", \"label\": \"{label}\"}}\n"));
    }
    let path = dir.join("reviews.jsonl");
    fs::write(&path, out).unwrap();
    path
}

fn train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        epochs: 3,
        checkpoint_epochs: vec![0, 1, 3],
        ..TrainConfig::default()
    }
}

#[test]
fn text_task_sweep_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let path = text_dataset(dir.path());
    let source = TaskSource::Jsonl {
        id: "reviews".into(),
        path,
        eval_path: None,
        schema: RecordSchema::SingleText,
        task: Default::default(),
        metric: MetricKind::Matthews,
        label_map: None,
        split_seed: 4,
        model: ModelConfig::tiny_transformer(64, 12, 2, 8, 2),
        probe: Default::default(),
    };
    let task = source.materialize().unwrap();
    assert_eq!((task.data.train.len(), task.data.eval.len()), (72, 18));
    assert_eq!(task.probe_info.size, 18);

    let config = SweepConfig {
        train: train_config(),
        variants: vec![MaskVariant::Full, MaskVariant::Top(1), MaskVariant::Bottom(1)],
        ..SweepConfig::default()
    };
    let report = run_sweep(&[source], &config);
    assert!(report.all_ok(), "{:?}", report.tasks[0].status);
    let t = &report.tasks[0];
    assert_eq!(t.values.len(), 3);
    assert!(t.values.iter().all(|v| v.unwrap().abs() <= 1.0));
    assert_eq!(t.ranking.len(), 2);

    let back: fim_core::bench::SweepReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn missing_file_fails_only_its_task() {
    let planted = TaskSource::Planted {
        id: "p".into(),
        seed: 1,
        spec: PlantedShiftSpec { n_train: 48, n_eval: 24, n_probe: 12, ..PlantedShiftSpec::default() },
    };
    let missing = TaskSource::Jsonl {
        id: "missing".into(),
        path: "/nonexistent/data.jsonl".into(),
        eval_path: None,
        schema: RecordSchema::Features,
        task: Default::default(),
        metric: MetricKind::Accuracy,
        label_map: None,
        split_seed: 0,
        model: ModelConfig::tiny_mlp(8, 2, 8, 2),
        probe: Default::default(),
    };
    let config = SweepConfig {
        train: TrainConfig { epochs: 1, checkpoint_epochs: vec![1], ..train_config() },
        ..SweepConfig::default()
    };
    let report = run_sweep(&[planted, missing], &config);
    assert_eq!(report.tasks[0].status, TaskStatus::Ok);
    assert!(matches!(&report.tasks[1].status, TaskStatus::Failed { error } if error.contains("data.jsonl")));
    assert!(!report.all_ok());
    assert!(report.table_csv().lines().skip(1).all(|l| l.ends_with(",failed")));
}

#[test]
fn checkpoints_on_disk_track_like_in_memory() {
    let spec = PlantedShiftSpec { n_train: 96, n_eval: 48, n_probe: 24, ..PlantedShiftSpec::default() };
    let task = generate_planted_task("p", &spec, 2).unwrap();
    let trial = finetune(
        &task.student,
        &FreezeMask::full(spec.num_layers),
        &task.data,
        &train_config(),
        MetricKind::Accuracy,
        "p",
        "full",
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut from_disk = Vec::new();
    for (epoch, snap) in &trial.checkpoints {
        let manifest = snap.write(dir.path(), &format!("ckpt_epoch{epoch}"), task.student.config()).unwrap();
        let (read, _) = ParameterSnapshot::read(&manifest).unwrap();
        assert_eq!(&read, snap);
        from_disk.push((*epoch, read));
    }
    let fisher = FisherOptions::exact();
    let a = track(&trial.checkpoints, &task.student, &task.probe, &fisher, ExecPolicy::Parallel).unwrap();
    let b = track(&from_disk, &task.student, &task.probe, &fisher, ExecPolicy::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(deviation(&a).epochs, vec![0, 1, 3]);

    let (loaded, _) = ModelHandle::load(&dir.path().join("ckpt_epoch3.json")).unwrap();
    assert_eq!(loaded.content_digest(), trial.model.content_digest());
}

#[test]
fn zero_shift_leaves_nothing_to_recover() {
    let spec = PlantedShiftSpec { shift_strength: 0.0, ..PlantedShiftSpec::default() };
    let task = generate_planted_task("null", &spec, 0).unwrap();
    assert_eq!(task.student.content_digest(), task.teacher.content_digest());
    let start = fim_core::surgery::evaluate(&task.student, &task.data.eval, MetricKind::Accuracy, ExecPolicy::Parallel).unwrap();
    assert_eq!(start, 1.0);
}

#[test]
fn planted_validation() {
    let bad = PlantedShiftSpec { planted_layer: 4, ..PlantedShiftSpec::default() };
    assert!(generate_planted_task("x", &bad, 0).is_err());
    let a = generate_planted_task("x", &PlantedShiftSpec::default(), 5).unwrap();
    let b = generate_planted_task("x", &PlantedShiftSpec::default(), 5).unwrap();
    assert_eq!(a.data, b.data);
    assert_eq!(a.student.content_digest(), b.student.content_digest());
    let spec = PlantedShiftSpec::default();
    let before = a.teacher.params();
    let after = a.student.params();
    for (l, group) in a.student.partition().ranked.iter().enumerate() {
        let changed = group.span.clone().any(|i| before.values()[i] != after.values()[i]);
        assert_eq!(changed, l == spec.planted_layer);
    }
    assert_ne!(
        before.tensor("block2.outer.weight").unwrap(),
        after.tensor("block2.outer.weight").unwrap()
    );
    assert_eq!(before.tensor("block2.inner.weight").unwrap(), after.tensor("block2.inner.weight").unwrap());
}
