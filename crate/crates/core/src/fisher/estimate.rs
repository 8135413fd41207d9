use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::exec::ExecPolicy;
use crate::model::{Example, ModelHandle, ScoreGradients, TaskKind};

/// How the inner expectation over y ~ p(y | x) is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    /// Sum over all classes weighted by the model's probabilities.
    #[default]
    ExactExpectation,
    /// Monte Carlo draws of y from the model's own predictive distribution.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherOptions {
    pub mode: EstimatorMode,
    pub seed: u64,
    /// Draws of y per probe example in sampled mode.
    pub samples_per_example: usize,
    #[serde(skip)]
    pub exec: ExecPolicy,
}

impl Default for FisherOptions {
    fn default() -> Self {
        FisherOptions {
            mode: EstimatorMode::ExactExpectation,
            seed: 0,
            samples_per_example: 1,
            exec: ExecPolicy::default(),
        }
    }
}

impl FisherOptions {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn sampled(seed: u64, samples_per_example: usize) -> Self {
        FisherOptions {
            mode: EstimatorMode::Sampled,
            seed,
            samples_per_example,
            ..Self::default()
        }
    }

    pub fn with_exec(mut self, exec: ExecPolicy) -> Self {
        self.exec = exec;
        self
    }
}

/// Per-parameter estimate of diag(F), laid out like the model's parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FimDiagonal {
    pub values: Vec<f64>,
    pub layout_digest: String,
    pub probe_size: usize,
    pub mode: EstimatorMode,
}

/// Examples processed per parallel wave; bounds the per-example buffers.
const WAVE: usize = 64;

/// Estimates (1/N) Σ_x E_{y~p(y|x)} [(∇θ log p(y|x))²] elementwise.
///
/// Per-example contributions may be computed in parallel, but they are
/// always summed in probe order, so the result does not depend on the
/// execution policy.
pub fn estimate_fim_diagonal(model: &ModelHandle, probe: &[Example], opts: &FisherOptions) -> Result<FimDiagonal> {
    if probe.is_empty() {
        return Err(input_err("probe sample is empty"));
    }
    if opts.mode == EstimatorMode::Sampled && opts.samples_per_example == 0 {
        return Err(input_err("samples_per_example must be at least 1"));
    }
    let n_params = model.num_params();
    let mut acc = vec![0.0; n_params];
    for (wave_idx, wave) in probe.chunks(WAVE).enumerate() {
        let base = wave_idx * WAVE;
        let contributions = opts
            .exec
            .map(wave, |i, ex| example_contribution(model, ex, base + i, opts));
        for c in contributions {
            for (a, v) in acc.iter_mut().zip(c?) {
                *a += v;
            }
        }
    }
    let inv_n = 1.0 / probe.len() as f64;
    acc.iter_mut().for_each(|v| *v *= inv_n);
    check_finite(model, &acc)?;
    Ok(FimDiagonal {
        values: acc,
        layout_digest: model.params().layout_digest(),
        probe_size: probe.len(),
        mode: opts.mode,
    })
}

fn example_contribution(model: &ModelHandle, ex: &Example, index: usize, opts: &FisherOptions) -> Result<Vec<f64>> {
    let mut rng = (opts.mode == EstimatorMode::Sampled).then(|| {
        let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
        r.set_stream(index as u64);
        r
    });
    let out = match model.score_gradients(&ex.features)? {
        ScoreGradients::Classes { probs, grads } => {
            let weights = match rng.as_mut() {
                None => probs,
                Some(r) => class_frequencies(&probs, opts.samples_per_example, r),
            };
            let mut out = vec![0.0; model.num_params()];
            for (w, g) in weights.iter().zip(&grads) {
                if *w == 0.0 {
                    continue;
                }
                for (o, gi) in out.iter_mut().zip(g) {
                    *o += w * gi * gi;
                }
            }
            out
        }
        ScoreGradients::Gaussian { grad_mean, .. } => {
            // E[(y − μ)²] = 1 under the unit-variance likelihood.
            let scale = match rng.as_mut() {
                None => 1.0,
                Some(r) => {
                    let s = opts.samples_per_example;
                    (0..s)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(r);
                            z * z
                        })
                        .sum::<f64>()
                        / s as f64
                }
            };
            grad_mean.iter().map(|g| scale * g * g).collect()
        }
    };
    Ok(out)
}

/// Empirical class frequencies of `draws` samples from `probs`.
fn class_frequencies(probs: &[f64], draws: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut counts = vec![0usize; probs.len()];
    for _ in 0..draws {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut pick = probs.len() - 1;
        for (c, p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                pick = c;
                break;
            }
        }
        counts[pick] += 1;
    }
    counts.into_iter().map(|k| k as f64 / draws as f64).collect()
}

fn check_finite(model: &ModelHandle, values: &[f64]) -> Result<()> {
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        let part = model.partition();
        let group = part
            .group_of(idx)
            .map(|g| part.group(g).name.clone())
            .unwrap_or_else(|| "?".into());
        let tensor = model
            .params()
            .specs()
            .iter()
            .find(|s| s.range().contains(&idx))
            .map(|s| s.name.clone())
            .unwrap_or_default();
        return Err(Error::Numeric {
            group,
            detail: format!("non-finite Fisher entry in {tensor}"),
        });
    }
    Ok(())
}

const ORACLE_MAX_CLASSES: usize = 16;
const ORACLE_MAX_PARAMS: usize = 100_000;

/// Exact-expectation Fisher diagonal computed the slow way: one
/// `grad_log_prob` call per (example, class), squared, weighted by the
/// class probability and summed.
pub fn brute_force_fim_oracle(model: &ModelHandle, probe: &[Example]) -> Result<FimDiagonal> {
    if model.task_kind() != TaskKind::Classification {
        return Err(Error::Refusal("oracle supports classification only".into()));
    }
    if model.num_classes() > ORACLE_MAX_CLASSES {
        return Err(Error::Refusal(format!(
            "{} classes exceeds the oracle limit of {ORACLE_MAX_CLASSES}",
            model.num_classes()
        )));
    }
    if model.num_params() > ORACLE_MAX_PARAMS {
        return Err(Error::Refusal(format!(
            "{} parameters exceeds the oracle limit of {ORACLE_MAX_PARAMS}",
            model.num_params()
        )));
    }
    if probe.is_empty() {
        return Err(input_err("probe sample is empty"));
    }
    let mut total = vec![0.0; model.num_params()];
    for ex in probe {
        let log_probs = match model.log_prob(ex)? {
            crate::model::Output::LogProbs(lp) => lp,
            crate::model::Output::Gaussian { .. } => unreachable!(),
        };
        for (class, lp) in log_probs.iter().enumerate() {
            let g = model.grad_log_prob(ex, class)?;
            let p = lp.exp();
            for i in 0..total.len() {
                total[i] += p * (g[i] * g[i]);
            }
        }
    }
    let n = probe.len() as f64;
    Ok(FimDiagonal {
        values: total.into_iter().map(|t| t / n).collect(),
        layout_digest: model.params().layout_digest(),
        probe_size: probe.len(),
        mode: EstimatorMode::ExactExpectation,
    })
}
