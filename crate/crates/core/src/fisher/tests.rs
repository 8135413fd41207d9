use proptest::prelude::*;

use super::*;
use crate::exec::ExecPolicy;
use crate::model::{build_reference_model, Example, ModelConfig};
use crate::model::ops::softmax_in_place;

fn dense_probe(n: usize, d: usize, classes: usize, seed: u64) -> Vec<Example> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Example::dense((0..d).map(|_| rng.random_range(-2.0..2.0)).collect(), i % classes))
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

/// diag F for softmax regression: x_i² p_c (1 - p_c) on weights, p_c (1 - p_c) on biases.
fn softmax_closed_form(model: &ModelHandle, probe: &[Example]) -> Vec<f64> {
    let w = model.params().tensor("layer0.weight").unwrap();
    let b = model.params().tensor("layer0.bias").unwrap();
    let c = b.len();
    let d = w.len() / c;
    let mut f = vec![0.0; d * c + c];
    for ex in probe {
        let x = match &ex.features {
            crate::model::Features::Dense(x) => x,
            _ => unreachable!(),
        };
        let mut p: Vec<f64> = (0..c).map(|k| b[k] + (0..d).map(|i| x[i] * w[i * c + k]).sum::<f64>()).collect();
        softmax_in_place(&mut p);
        for i in 0..d {
            for k in 0..c {
                f[i * c + k] += x[i] * x[i] * p[k] * (1.0 - p[k]);
            }
        }
        for k in 0..c {
            f[d * c + k] += p[k] * (1.0 - p[k]);
        }
    }
    f.iter().map(|v| v / probe.len() as f64).collect()
}

#[test]
fn bernoulli_matches_closed_form() {
    for seed in 0..3 {
        let m = build_reference_model(&ModelConfig { seed, ..ModelConfig::linear_softmax(4, 2) }).unwrap();
        let probe = dense_probe(30, 4, 2, seed + 10);
        let fim = estimate_fim_diagonal(&m, &probe, &FisherOptions::exact()).unwrap();
        assert!(rel_err(&fim.values, &softmax_closed_form(&m, &probe)) < 1e-10);
    }
}

#[test]
fn multiclass_softmax_matches_closed_form() {
    let m = build_reference_model(&ModelConfig { seed: 5, ..ModelConfig::linear_softmax(3, 5) }).unwrap();
    let probe = dense_probe(17, 3, 5, 1);
    let fim = estimate_fim_diagonal(&m, &probe, &FisherOptions::exact()).unwrap();
    assert!(rel_err(&fim.values, &softmax_closed_form(&m, &probe)) < 1e-10);
}

#[test]
fn uniform_softmax_hand_value() {
    let mut m = build_reference_model(&ModelConfig::linear_softmax(2, 2)).unwrap();
    m.params_mut().values_mut().iter_mut().for_each(|v| *v = 0.0);
    let probe = vec![Example::dense(vec![2.0, 0.0], 0)];
    let fim = estimate_fim_diagonal(&m, &probe, &FisherOptions::exact()).unwrap();
    // W[0][c] = 4 * 1/4, W[1][c] = 0, b[c] = 1/4
    assert_eq!(fim.values, vec![1.0, 1.0, 0.0, 0.0, 0.25, 0.25]);
}

#[test]
fn zero_head_disconnects_ranked_layers() {
    let mut m = build_reference_model(&ModelConfig { seed: 3, ..ModelConfig::tiny_mlp(4, 3, 8, 3) }).unwrap();
    for v in m.params_mut().tensor_mut("head.weight").unwrap() {
        *v = 0.0;
    }
    let probe = dense_probe(10, 4, 3, 0);
    let fim = estimate_fim_diagonal(&m, &probe, &FisherOptions::exact()).unwrap();
    let scores = aggregate_layer_scores(&fim, m.partition(), false).unwrap();
    assert_eq!(scores.scores, vec![0.0; 3]);
    assert_eq!(rank_layers(&scores).order, vec![0, 1, 2]);
    let head = &fim.values[m.partition().head.span.clone()];
    assert!(head.iter().any(|v| *v > 0.0));
}

#[test]
fn estimator_agrees_with_oracle() {
    let configs = [
        ModelConfig::linear_softmax(4, 3),
        ModelConfig::tiny_mlp(4, 3, 6, 3),
        ModelConfig::tiny_transformer(20, 6, 2, 4, 3),
    ];
    for cfg in configs {
        for seed in 0..3 {
            let m = build_reference_model(&ModelConfig { seed, ..cfg.clone() }).unwrap();
            let probe: Vec<Example> = match cfg.kind {
                crate::model::ModelKind::TinyTransformer => (0..8)
                    .map(|i| Example::tokens((0..4).map(|t| 3 + ((i * 7 + t * 5) % 17) as u32).collect(), i % 3))
                    .collect(),
                _ => dense_probe(8, 4, 3, seed),
            };
            let fast = estimate_fim_diagonal(&m, &probe, &FisherOptions::exact()).unwrap();
            let slow = brute_force_fim_oracle(&m, &probe).unwrap();
            assert!(rel_err(&fast.values, &slow.values) < 1e-10, "{:?} seed {seed}", cfg.kind);
        }
    }
}

#[test]
fn single_example_is_probability_weighted_square() {
    let m = build_reference_model(&ModelConfig { seed: 2, ..ModelConfig::tiny_mlp(3, 2, 5, 3) }).unwrap();
    let ex = Example::dense(vec![0.5, -1.0, 2.0], 0);
    let probs = match m.log_prob(&ex).unwrap() {
        crate::model::Output::LogProbs(lp) => lp.iter().map(|v| v.exp()).collect::<Vec<_>>(),
        _ => unreachable!(),
    };
    let g: Vec<Vec<f64>> = (0..3).map(|c| m.grad_log_prob(&ex, c).unwrap()).collect();
    let expected: Vec<f64> = (0..m.num_params())
        .map(|i| probs[0] * g[0][i] * g[0][i] + probs[1] * g[1][i] * g[1][i] + probs[2] * g[2][i] * g[2][i])
        .collect();
    let fim = estimate_fim_diagonal(&m, &[ex], &FisherOptions::exact()).unwrap();
    assert!(rel_err(&fim.values, &expected) < 1e-12);
}

#[test]
fn sampled_converges_to_exact() {
    let m = build_reference_model(&ModelConfig { seed: 4, ..ModelConfig::tiny_mlp(4, 3, 8, 3) }).unwrap();
    let probe = dense_probe(20, 4, 3, 9);
    let exact = estimate_fim_diagonal(&m, &probe, &FisherOptions::exact()).unwrap();
    let sampled = estimate_fim_diagonal(&m, &probe, &FisherOptions::sampled(11, 10_000)).unwrap();
    let a = aggregate_layer_scores(&exact, m.partition(), false).unwrap();
    let b = aggregate_layer_scores(&sampled, m.partition(), false).unwrap();
    for (x, y) in a.scores.iter().zip(&b.scores) {
        assert!((x - y).abs() / x < 0.05, "exact {x} sampled {y}");
    }
    assert_eq!(sampled.mode, EstimatorMode::Sampled);
}

#[test]
fn sampled_is_seeded() {
    let m = build_reference_model(&ModelConfig { seed: 4, ..ModelConfig::tiny_mlp(4, 2, 6, 3) }).unwrap();
    let probe = dense_probe(12, 4, 3, 2);
    let a = estimate_fim_diagonal(&m, &probe, &FisherOptions::sampled(7, 3)).unwrap();
    let b = estimate_fim_diagonal(&m, &probe, &FisherOptions::sampled(7, 3)).unwrap();
    let c = estimate_fim_diagonal(&m, &probe, &FisherOptions::sampled(8, 3)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.values, c.values);
}

#[test]
fn regression_fisher_is_squared_mean_gradient() {
    let cfg = ModelConfig { seed: 1, ..ModelConfig::tiny_mlp(3, 2, 5, 1) }.with_task(crate::model::TaskKind::Regression);
    let m = build_reference_model(&cfg).unwrap();
    let x = vec![0.3, -0.2, 1.1];
    let ex = Example { features: crate::model::Features::Dense(x), label: crate::model::Label::Value(0.0) };
    let mu = m.forward(&ex.features).unwrap()[0];
    // at y = mu + 1 the score is exactly the mean gradient
    let g = m.grad_log_density(&ex, mu + 1.0).unwrap();
    let fim = estimate_fim_diagonal(&m, std::slice::from_ref(&ex), &FisherOptions::exact()).unwrap();
    let expected: Vec<f64> = g.iter().map(|v| v * v).collect();
    assert!(rel_err(&fim.values, &expected) < 1e-12);
    assert!(matches!(brute_force_fim_oracle(&m, &[ex]), Err(crate::Error::Refusal(_))));
}

#[test]
fn empty_probe_is_rejected() {
    let m = build_reference_model(&ModelConfig::linear_softmax(2, 2)).unwrap();
    assert!(estimate_fim_diagonal(&m, &[], &FisherOptions::exact()).is_err());
    assert!(estimate_fim_diagonal(&m, &dense_probe(2, 2, 2, 0), &FisherOptions::sampled(0, 0)).is_err());
}

#[test]
fn oracle_refuses_large_models() {
    let m = build_reference_model(&ModelConfig::tiny_mlp(4, 2, 4, 17)).unwrap();
    assert!(matches!(brute_force_fim_oracle(&m, &dense_probe(1, 4, 17, 0)), Err(crate::Error::Refusal(_))));
    let m = build_reference_model(&ModelConfig::tiny_mlp(4, 4, 160, 2)).unwrap();
    assert!(matches!(brute_force_fim_oracle(&m, &dense_probe(1, 4, 2, 0)), Err(crate::Error::Refusal(_))));
}

#[test]
fn non_finite_fisher_names_group() {
    let mut m = build_reference_model(&ModelConfig { seed: 1, ..ModelConfig::tiny_mlp(2, 2, 4, 2) }).unwrap();
    m.params_mut().tensor_mut("block1.outer.weight").unwrap()[0] = f64::NAN;
    match estimate_fim_diagonal(&m, &dense_probe(3, 2, 2, 0), &FisherOptions::exact()) {
        Err(crate::Error::Numeric { group, .. }) => assert!(!group.is_empty()),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn parallel_and_sequential_are_bit_identical() {
    let m = build_reference_model(&ModelConfig { seed: 8, ..ModelConfig::tiny_mlp(4, 3, 8, 3) }).unwrap();
    let probe = dense_probe(150, 4, 3, 3);
    for opts in [FisherOptions::exact(), FisherOptions::sampled(3, 4)] {
        let a = estimate_fim_diagonal(&m, &probe, &opts.with_exec(ExecPolicy::Parallel)).unwrap();
        let b = estimate_fim_diagonal(&m, &probe, &opts.with_exec(ExecPolicy::Sequential)).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn exact_estimate_ignores_probe_order() {
    let m = build_reference_model(&ModelConfig { seed: 8, ..ModelConfig::tiny_mlp(4, 2, 6, 2) }).unwrap();
    let probe = dense_probe(40, 4, 2, 3);
    let mut rev = probe.clone();
    rev.reverse();
    let a = estimate_fim_diagonal(&m, &probe, &FisherOptions::exact()).unwrap();
    let b = estimate_fim_diagonal(&m, &rev, &FisherOptions::exact()).unwrap();
    assert!(rel_err(&a.values, &b.values) < 1e-12);
}

#[test]
fn aggregation_is_frobenius_norm() {
    let m = build_reference_model(&ModelConfig::linear_softmax(1, 2)).unwrap();
    let fim = FimDiagonal {
        values: vec![3.0, 0.0, 0.0, 4.0],
        layout_digest: m.params().layout_digest(),
        probe_size: 1,
        mode: EstimatorMode::ExactExpectation,
    };
    let raw = aggregate_layer_scores(&fim, m.partition(), false).unwrap();
    assert_eq!(raw.scores, vec![5.0]);
    let norm = aggregate_layer_scores(&fim, m.partition(), true).unwrap();
    assert_eq!(norm.scores, vec![2.5]);
    let zeros = FimDiagonal { values: vec![0.0; 4], ..fim.clone() };
    assert_eq!(aggregate_layer_scores(&zeros, m.partition(), false).unwrap().scores, vec![0.0]);
    let short = FimDiagonal { values: vec![1.0; 3], ..fim };
    assert!(aggregate_layer_scores(&short, m.partition(), false).is_err());
}

#[test]
fn aggregation_matches_per_tensor_reduction() {
    let m = build_reference_model(&ModelConfig { seed: 6, ..ModelConfig::tiny_mlp(3, 3, 5, 2) }).unwrap();
    let fim = estimate_fim_diagonal(&m, &dense_probe(10, 3, 2, 1), &FisherOptions::exact()).unwrap();
    let scores = aggregate_layer_scores(&fim, m.partition(), false).unwrap();
    for (l, group) in m.partition().ranked.iter().enumerate() {
        let mut sq = 0.0;
        for name in &group.tensors {
            let spec = m.params().spec(name).unwrap();
            sq += fim.values[spec.range()].iter().map(|v| v * v).sum::<f64>();
        }
        assert!((scores.scores[l] - sq.sqrt()).abs() <= 1e-12 * sq.sqrt().max(1.0));
    }
}

#[test]
fn ranking_examples() {
    assert_eq!(rank_values(&[0.1, 0.9, 0.5]).order, vec![1, 2, 0]);
    assert_eq!(rank_values(&[0.3, 0.3, 0.3]).order, vec![0, 1, 2]);
    assert_eq!(rank_values(&[0.2, 0.7, 0.2, 0.7]).order, vec![1, 3, 0, 2]);
    assert_eq!(rank_values(&[0.1, 0.9, 0.5]).positions(), vec![2, 0, 1]);
}

#[test]
fn select_layers_examples() {
    let ranking = rank_values(&[0.1, 0.9, 0.5, 0.3]);
    let top = select_layers(&ranking, 2, SelectionEnd::Top).unwrap();
    assert_eq!(top.trainable_ranked(), vec![1, 2]);
    let bottom = select_layers(&ranking, 1, SelectionEnd::Bottom).unwrap();
    assert_eq!(bottom.trainable_ranked(), vec![0]);
    assert!(!top.is_trainable(crate::model::GroupId::Preamble));
    assert!(top.is_trainable(crate::model::GroupId::Head));
    assert_eq!(top.provenance.k, Some(2));
    assert_eq!(top.provenance.ranking_digest, Some(ranking.digest()));
    assert!(select_layers(&ranking, 0, SelectionEnd::Top).is_err());
    assert!(select_layers(&ranking, 5, SelectionEnd::Top).is_err());
    assert_eq!("bottom".parse::<SelectionEnd>(), Ok(SelectionEnd::Bottom));
    assert!("middle".parse::<SelectionEnd>().is_err());
}

#[test]
fn score_file_round_trips() {
    let m = build_reference_model(&ModelConfig { seed: 1, ..ModelConfig::tiny_mlp(3, 2, 4, 2) }).unwrap();
    let pool = dense_probe(30, 3, 2, 0);
    let (probe, info) = sample_probe(&pool, 10, 4);
    let (scores, ranking) = score_and_rank(&m, &probe, &FisherOptions::exact()).unwrap();
    let file = ScoreFile::new(&m, info, &scores, &ranking);
    let back: ScoreFile = serde_json::from_str(&serde_json::to_string(&file).unwrap()).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.ranking(), ranking);
    assert_eq!(back.scores[1].group, "block1");
}

#[test]
fn probe_sampling() {
    let pool = dense_probe(50, 2, 2, 0);
    let (a, ia) = sample_probe(&pool, 20, 3);
    let (b, ib) = sample_probe(&pool, 20, 3);
    assert_eq!(a, b);
    assert_eq!(ia, ib);
    assert_eq!(a.len(), 20);
    assert!(ia.indices.windows(2).all(|w| w[0] < w[1]));
    let (_, other) = sample_probe(&pool, 20, 4);
    assert_ne!(other.indices, ia.indices);
    let (all, clamped) = sample_probe(&pool, 500, 3);
    assert_eq!(all.len(), 50);
    assert!(clamped.clamped);
    assert_eq!(clamped.requested, 500);
}

proptest! {
    #[test]
    fn ranking_is_sorted_permutation(scores in prop::collection::vec(0.0f64..10.0, 1..12), scale in 0.01f64..100.0) {
        let r = rank_values(&scores);
        let mut seen = r.order.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
        for w in r.order.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
        let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
        let rs = rank_values(&scaled);
        // scaling can only merge values into ties through rounding, never reorder
        for w in rs.order.windows(2) {
            prop_assert!(scores[w[0]] >= scores[w[1]]);
        }
    }

    #[test]
    fn top_and_bottom_partition_the_layers(scores in prop::collection::vec(0.0f64..1.0, 2..10), k_frac in 0.0f64..1.0) {
        let l = scores.len();
        let k = 1 + ((l - 1) as f64 * k_frac) as usize % (l - 1);
        let r = rank_values(&scores);
        let top = select_layers(&r, k, SelectionEnd::Top).unwrap().trainable_ranked();
        let bottom = select_layers(&r, l - k, SelectionEnd::Bottom).unwrap().trainable_ranked();
        prop_assert_eq!(top.len(), k);
        prop_assert!(top.iter().all(|t| !bottom.contains(t)));
        let mut all: Vec<usize> = top.into_iter().chain(bottom).collect();
        all.sort();
        prop_assert_eq!(all, (0..l).collect::<Vec<_>>());
    }
}
