//! Teacher-student tasks with one planted layer.
//!
//! The teacher is a seeded reference model and labels every input. The
//! student handed to fine-tuning is the same model with only ranked layer
//! `j` shifted by Gaussian noise of relative size `shift_strength`, so
//! restoring layer `j` alone recovers the teacher. The shift lands on the
//! layer's write projection (the tensors that add into the residual
//! stream); layers without one are shifted whole.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricKind;
use super::{ProbePolicy, TaskSpec};
use crate::error::{input_err, Result};
use crate::fisher::{sample_probe, ProbeInfo};
use crate::model::{
    build_reference_model, gaussian_init, Example, Features, Label, ModelConfig, ModelHandle, ModelKind, TaskKind,
    FIRST_WORD_TOKEN,
};
use crate::surgery::DataSplits;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedShiftSpec {
    pub kind: ModelKind,
    pub num_layers: usize,
    pub planted_layer: usize,
    pub shift_strength: f64,
    pub input_dim: usize,
    pub hidden_width: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_probe: usize,
}

impl Default for PlantedShiftSpec {
    fn default() -> Self {
        PlantedShiftSpec {
            kind: ModelKind::TinyMlp,
            num_layers: 4,
            planted_layer: 2,
            shift_strength: 4.0,
            input_dim: 8,
            hidden_width: 16,
            num_classes: 2,
            vocab_size: 32,
            max_seq_len: 8,
            n_train: 480,
            n_eval: 200,
            n_probe: 100,
        }
    }
}

impl PlantedShiftSpec {
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            kind: self.kind,
            num_layers: self.num_layers,
            hidden_width: self.hidden_width,
            input_dim: self.input_dim,
            vocab_size: self.vocab_size,
            num_classes: self.num_classes,
            max_seq_len: self.max_seq_len,
            task: TaskKind::Classification,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.planted_layer >= self.num_layers {
            return Err(input_err(format!(
                "planted layer {} outside 0..{}",
                self.planted_layer, self.num_layers
            )));
        }
        if !self.shift_strength.is_finite() || self.shift_strength < 0.0 {
            return Err(input_err("shift strength must be finite and non-negative"));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(input_err("planted task needs train and eval examples"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub task: TaskSpec,
    pub data: DataSplits,
    pub probe: Vec<Example>,
    pub probe_info: ProbeInfo,
    pub teacher: ModelHandle,
    pub student: ModelHandle,
}

/// Seeds for the independent random streams of one generated task.
const STREAM_INPUTS: u64 = 1;
const STREAM_SHIFT: u64 = 2;
const PROBE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn generate_planted_task(id: &str, spec: &PlantedShiftSpec, seed: u64) -> Result<PlantedTask> {
    spec.validate()?;
    let cfg = spec.model_config(seed);
    let teacher = build_reference_model(&cfg)?;
    let student = shift_layer(&teacher, spec.planted_layer, spec.shift_strength, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_INPUTS);
    let mut draw = |n: usize| -> Result<Vec<Example>> {
        (0..n)
            .map(|_| {
                let features = random_input(spec, &mut rng);
                let class = teacher.predict(&features)? as usize;
                Ok(Example {
                    features,
                    label: Label::Class(class),
                })
            })
            .collect()
    };
    let train = draw(spec.n_train)?;
    let eval = draw(spec.n_eval)?;
    let probe_seed = seed ^ PROBE_SEED_SALT;
    let (probe, probe_info) = sample_probe(&eval, spec.n_probe, probe_seed);

    let task = TaskSpec {
        id: id.to_string(),
        task_kind: TaskKind::Classification,
        metric: MetricKind::Accuracy,
        num_classes: spec.num_classes,
        probe: ProbePolicy {
            size: spec.n_probe,
            seed: probe_seed,
        },
    };
    Ok(PlantedTask {
        task,
        data: DataSplits { train, eval },
        probe,
        probe_info,
        teacher,
        student,
    })
}

/// Adds `strength · N(0, σ²)` to the write-projection tensors of ranked
/// group `layer`, where σ is the tensor's unit-fan-in init scale.
pub fn shift_layer(model: &ModelHandle, layer: usize, strength: f64, seed: u64) -> Result<ModelHandle> {
    if layer >= model.partition().num_ranked() {
        return Err(input_err(format!("layer {layer} outside the model's ranked groups")));
    }
    let mut out = model.clone();
    if strength == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SHIFT);
    let tensors = &model.partition().ranked[layer].tensors;
    let mut names: Vec<String> = tensors.iter().filter(|n| is_write_projection(n)).cloned().collect();
    if names.is_empty() {
        names = tensors.clone();
    }
    for name in names {
        let spec = model.params().spec(&name).unwrap().clone();
        let fan_in = if spec.shape.len() == 2 { spec.shape[0] } else { spec.shape[0].max(1) };
        let noise = gaussian_init(&mut rng, spec.len(), strength / (fan_in as f64).sqrt());
        for (v, n) in out.params_mut().tensor_mut(&name).unwrap().iter_mut().zip(noise) {
            *v += n;
        }
    }
    Ok(out)
}

fn is_write_projection(name: &str) -> bool {
    name.contains(".outer.") || name.contains(".output.")
}

fn random_input(spec: &PlantedShiftSpec, rng: &mut ChaCha8Rng) -> Features {
    match spec.kind {
        ModelKind::TinyTransformer => {
            let len = rng.random_range((spec.max_seq_len / 2).max(1)..=spec.max_seq_len);
            Features::Tokens(
                (0..len)
                    .map(|_| rng.random_range(FIRST_WORD_TOKEN..spec.vocab_size as u32))
                    .collect(),
            )
        }
        _ => Features::Dense(gaussian_init(rng, spec.input_dim, 1.0)),
    }
}
