use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{build_reference_model, Features, GroupId, Label, ModelConfig, TaskKind};

fn blob_data(n: usize, d: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let class = usize::from(x[0] + 0.5 * x[1] > 0.0);
            Example::dense(x, class)
        })
        .collect()
}

fn splits(d: usize, seed: u64) -> DataSplits {
    DataSplits {
        train: blob_data(96, d, seed),
        eval: blob_data(40, d, seed + 100),
    }
}

fn mlp(seed: u64, layers: usize) -> ModelHandle {
    build_reference_model(&ModelConfig { seed, ..ModelConfig::tiny_mlp(3, layers, 6, 2) }).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn frozen_groups_are_bit_exact() {
    let model = mlp(1, 4);
    let ranking = crate::fisher::rank_values(&[0.4, 0.1, 0.9, 0.2]);
    let mask = select_layers(&ranking, 1, SelectionEnd::Top).unwrap();
    let trial = finetune(&model, &mask, &splits(3, 0), &quick_config(), MetricKind::Accuracy, "t", "Top 1").unwrap();
    let before = model.params().values();
    let after = trial.model.params().values();
    for (id, group) in model.partition().groups() {
        let same = group.span.clone().all(|i| before[i].to_bits() == after[i].to_bits());
        let trainable = matches!(id, GroupId::Ranked(2) | GroupId::Head);
        assert_eq!(same, !trainable, "group {}", group.name);
    }
}

#[test]
fn linear_full_mask_equals_top_all() {
    let model = build_reference_model(&ModelConfig { seed: 2, ..ModelConfig::linear_softmax(3, 2) }).unwrap();
    let data = splits(3, 1);
    let cfg = quick_config();
    let full = finetune(&model, &FreezeMask::full(1), &data, &cfg, MetricKind::Accuracy, "t", "full").unwrap();
    let ranking = crate::fisher::rank_values(&[1.0]);
    let top = select_layers(&ranking, 1, SelectionEnd::Top).unwrap().with_preamble(true);
    let top = finetune(&model, &top, &data, &cfg, MetricKind::Accuracy, "t", "top").unwrap();
    assert_eq!(full.model.params().values(), top.model.params().values());
}

#[test]
fn separable_task_is_learned() {
    let model = build_reference_model(&ModelConfig { seed: 0, ..ModelConfig::linear_softmax(3, 2) }).unwrap();
    let cfg = TrainConfig {
        learning_rate: 5e-2,
        ..TrainConfig::default()
    };
    let trial = finetune(&model, &FreezeMask::full(1), &splits(3, 4), &cfg, MetricKind::Accuracy, "t", "full").unwrap();
    assert!(trial.result.final_train_metric >= 0.95, "{}", trial.result.final_train_metric);
    assert!(trial.result.train_loss.last() < trial.result.train_loss.first());
    assert_eq!(trial.result.eval_metric.len(), 11);
}

#[test]
fn top_k_masks_are_nested() {
    let ranking = crate::fisher::rank_values(&[0.3, 0.8, 0.1, 0.5, 0.6]);
    let mut prev: Vec<usize> = Vec::new();
    for k in 1..=5 {
        let cur = select_layers(&ranking, k, SelectionEnd::Top).unwrap().trainable_ranked();
        assert_eq!(cur.len(), k);
        assert!(prev.iter().all(|l| cur.contains(l)));
        prev = cur;
    }
}

#[test]
fn training_is_reproducible() {
    let model = mlp(3, 3);
    let data = splits(3, 2);
    let mask = FreezeMask::full(3);
    let a = finetune(&model, &mask, &data, &quick_config(), MetricKind::Accuracy, "t", "full").unwrap();
    let b = finetune(&model, &mask, &data, &quick_config(), MetricKind::Accuracy, "t", "full").unwrap();
    assert_eq!(a.model.params().values(), b.model.params().values());
    assert_eq!(a.result.checkpoints, b.result.checkpoints);
    assert_eq!(a.result.train_loss, b.result.train_loss);
    let other = TrainConfig { seed: 9, ..quick_config() };
    let c = finetune(&model, &mask, &data, &other, MetricKind::Accuracy, "t", "full").unwrap();
    assert_ne!(a.model.params().values(), c.model.params().values());
}

#[test]
fn checkpoints_follow_config() {
    let model = mlp(3, 2);
    let trial = finetune(&model, &FreezeMask::full(2), &splits(3, 2), &quick_config(), MetricKind::Accuracy, "t", "full").unwrap();
    let epochs: Vec<usize> = trial.checkpoints.iter().map(|(e, _)| *e).collect();
    assert_eq!(epochs, vec![0, 2, 5, 8, 10]);
    assert_eq!(trial.result.checkpoints[0].digest, trial.result.initial_digest);
    assert_eq!(trial.checkpoints.last().unwrap().1.content_digest, trial.model.content_digest());
    assert_eq!(trial.result.optimizer, OPTIMIZER);
}

#[test]
fn oversized_k_is_clamped_with_warning() {
    let model = mlp(5, 4);
    let data = splits(3, 5);
    let probe = data.eval[..10].to_vec();
    let out = run_baselines(
        &model,
        &data,
        &probe,
        &FisherOptions::exact(),
        &TrainConfig { epochs: 2, checkpoint_epochs: vec![0, 2], ..quick_config() },
        MetricKind::Accuracy,
        "t",
        &MaskVariant::standard(),
        ExecPolicy::Parallel,
    )
    .unwrap();
    assert_eq!(out.trials.len(), 7);
    let initial = &out.trials[0].result.initial_digest;
    assert!(out.trials.iter().all(|t| &t.result.initial_digest == initial));
    let labels: Vec<&str> = out.trials.iter().map(|t| t.result.variant.as_str()).collect();
    assert_eq!(labels, ["Full-model", "Top 1", "Top 2", "Top 3", "Top 4", "Top 5", "Bottom 1"]);
    assert!(out.trials[5].result.warnings[0].contains("clamped"));
    assert!(out.trials[4].result.warnings.is_empty());
    assert_eq!(out.trials[4].model.params().values(), out.trials[5].model.params().values());
}

#[test]
fn baselines_do_not_depend_on_exec_policy() {
    let model = mlp(6, 3);
    let data = splits(3, 6);
    let probe = data.eval[..12].to_vec();
    let cfg = TrainConfig { epochs: 2, checkpoint_epochs: vec![2], ..quick_config() };
    let variants = [MaskVariant::Full, MaskVariant::Top(1), MaskVariant::Bottom(1)];
    let run = |exec| {
        run_baselines(&model, &data, &probe, &FisherOptions::exact(), &cfg, MetricKind::Accuracy, "t", &variants, exec)
            .unwrap()
    };
    let a = run(ExecPolicy::Parallel);
    let b = run(ExecPolicy::Sequential);
    assert_eq!(a.ranking, b.ranking);
    for (x, y) in a.trials.iter().zip(&b.trials) {
        assert_eq!(x.result.checkpoints, y.result.checkpoints);
    }
}

#[test]
fn non_finite_loss_aborts() {
    let model = mlp(1, 2);
    let mut data = splits(3, 1);
    data.train[20].features = Features::Dense(vec![f64::NAN, 0.0, 0.0]);
    match finetune(&model, &FreezeMask::full(2), &data, &quick_config(), MetricKind::Accuracy, "t", "full") {
        Err(crate::Error::Diverged { epoch, .. }) => assert_eq!(epoch, 1),
        other => panic!("expected divergence, got {:?}", other.map(|t| t.result)),
    }
}

#[test]
fn invalid_masks_and_configs_are_rejected() {
    let model = mlp(1, 3);
    let data = splits(3, 1);
    let short = FreezeMask::full(2);
    assert!(finetune(&model, &short, &data, &quick_config(), MetricKind::Accuracy, "t", "x").is_err());

    let linear = build_reference_model(&ModelConfig::linear_softmax(3, 2)).unwrap();
    let frozen = FreezeMask::new(false, vec![false], MaskProvenance::default()).unwrap();
    assert!(finetune(&linear, &frozen, &data, &quick_config(), MetricKind::Accuracy, "t", "x").is_err());

    let late = TrainConfig { checkpoint_epochs: vec![12], ..quick_config() };
    assert!(late.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..quick_config() }.validate().is_err());
    assert!(finetune(&model, &FreezeMask::full(3), &data, &quick_config(), MetricKind::Pearson, "t", "x").is_err());
}

#[test]
fn constant_regression_predictions_score_zero_pearson() {
    let cfg = ModelConfig::tiny_mlp(3, 1, 4, 1).with_task(TaskKind::Regression);
    let mut model = build_reference_model(&cfg).unwrap();
    for v in model.params_mut().tensor_mut("head.weight").unwrap() {
        *v = 0.0;
    }
    let data: Vec<Example> = blob_data(10, 3, 0)
        .into_iter()
        .enumerate()
        .map(|(i, ex)| Example { label: Label::Value(i as f64), ..ex })
        .collect();
    assert_eq!(evaluate(&model, &data, MetricKind::Pearson, ExecPolicy::Sequential).unwrap(), 0.0);
}

#[test]
fn variant_keys_round_trip() {
    for v in MaskVariant::standard() {
        assert_eq!(v.key().parse::<MaskVariant>().unwrap(), v);
    }
    assert!("top-x".parse::<MaskVariant>().is_err());
}
