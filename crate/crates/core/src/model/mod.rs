//! Layered differentiable classifiers: the abstraction consumed by Fisher
//! scoring, fine-tuning and stability tracking, plus three small reference
//! networks.

mod linear;
mod mlp;
pub(crate) mod ops;
mod params;
mod snapshot;
mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, input_err, Result};

pub use params::{GroupId, LayerPartition, ParamGroup, ParamStore, TensorSpec};
pub use snapshot::{ParameterSnapshot, SnapshotManifest};

pub(crate) use linear::LinearSoftmax;
pub(crate) use mlp::TinyMlp;
pub(crate) use transformer::TinyTransformer;

/// Reserved token ids shared by the tokenizer and the transformer.
pub const PAD_TOKEN: u32 = 0;
pub const UNK_TOKEN: u32 = 1;
pub const SEP_TOKEN: u32 = 2;
pub const FIRST_WORD_TOKEN: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearSoftmax,
    TinyMlp,
    TinyTransformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    #[default]
    Classification,
    Regression,
}

/// Model-config file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default = "defaults::num_layers")]
    pub num_layers: usize,
    #[serde(default = "defaults::hidden_width")]
    pub hidden_width: usize,
    /// Feature count for dense-input models.
    #[serde(default = "defaults::input_dim")]
    pub input_dim: usize,
    #[serde(default = "defaults::vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    #[serde(default = "defaults::max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub task: TaskKind,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn num_layers() -> usize {
        1
    }
    pub fn hidden_width() -> usize {
        16
    }
    pub fn input_dim() -> usize {
        8
    }
    pub fn vocab_size() -> usize {
        64
    }
    pub fn num_classes() -> usize {
        2
    }
    pub fn max_seq_len() -> usize {
        16
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            num_layers: defaults::num_layers(),
            hidden_width: defaults::hidden_width(),
            input_dim: defaults::input_dim(),
            vocab_size: defaults::vocab_size(),
            num_classes: defaults::num_classes(),
            max_seq_len: defaults::max_seq_len(),
            task: TaskKind::Classification,
            seed: 0,
        }
    }

    pub fn linear_softmax(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            num_classes,
            ..Self::new(ModelKind::LinearSoftmax)
        }
    }

    pub fn tiny_mlp(input_dim: usize, num_layers: usize, width: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            num_layers,
            hidden_width: width,
            num_classes,
            ..Self::new(ModelKind::TinyMlp)
        }
    }

    pub fn tiny_transformer(
        vocab_size: usize,
        max_seq_len: usize,
        num_layers: usize,
        width: usize,
        num_classes: usize,
    ) -> Self {
        ModelConfig {
            vocab_size,
            max_seq_len,
            num_layers,
            hidden_width: width,
            num_classes,
            ..Self::new(ModelKind::TinyTransformer)
        }
    }

    pub fn with_task(mut self, task: TaskKind) -> Self {
        self.task = task;
        self
    }

    /// Width of the output layer: class count, or 1 (the mean) for regression.
    pub fn output_dim(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.num_classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(config_err("num_layers must be at least 1"));
        }
        if self.kind == ModelKind::LinearSoftmax && self.num_layers != 1 {
            return Err(config_err("linear-softmax has exactly one layer"));
        }
        if self.hidden_width < 1 {
            return Err(config_err("hidden_width must be at least 1"));
        }
        if self.task == TaskKind::Classification && self.num_classes < 2 {
            return Err(config_err("classification needs num_classes >= 2"));
        }
        match self.kind {
            ModelKind::LinearSoftmax | ModelKind::TinyMlp if self.input_dim < 1 => {
                Err(config_err("input_dim must be at least 1"))
            }
            ModelKind::TinyTransformer if self.vocab_size <= FIRST_WORD_TOKEN as usize => Err(
                config_err(format!("vocab_size must exceed the {FIRST_WORD_TOKEN} reserved ids")),
            ),
            ModelKind::TinyTransformer if self.max_seq_len < 1 => {
                Err(config_err("max_seq_len must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    /// Digest of everything that determines the parameter layout.
    pub fn architecture_digest(&self) -> String {
        let canonical = ModelConfig { seed: 0, ..self.clone() };
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canonical).expect("config serializes"));
        hex::encode(h.finalize())
    }
}

/// Input record: dense features for tabular models, token ids for text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Features {
    Dense(Vec<f64>),
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Features,
    pub label: Label,
}

impl Example {
    pub fn dense(x: Vec<f64>, class: usize) -> Self {
        Example {
            features: Features::Dense(x),
            label: Label::Class(class),
        }
    }

    pub fn tokens(t: Vec<u32>, class: usize) -> Self {
        Example {
            features: Features::Tokens(t),
            label: Label::Class(class),
        }
    }
}

/// Model output distribution p(y | x).
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    /// Per-class log-probabilities.
    LogProbs(Vec<f64>),
    /// Unit-variance Gaussian over the target.
    Gaussian { mean: f64, variance: f64 },
}

/// Score-function gradients for every outcome of one input, from a single
/// forward pass.
#[derive(Debug, Clone)]
pub enum ScoreGradients {
    Classes {
        probs: Vec<f64>,
        /// `grads[c]` = ∇θ log p(y = c | x).
        grads: Vec<Vec<f64>>,
    },
    Gaussian {
        mean: f64,
        /// ∇θ μ(x); the score for target y is (y − μ)·∇θ μ.
        grad_mean: Vec<f64>,
    },
}

/// Forward/backward interface implemented by each reference network.
pub(crate) trait Net {
    type Tape;
    fn forward(&self, p: &[f64], x: &Features) -> Result<(Vec<f64>, Self::Tape)>;
    /// Accumulates (d_out · ∂out/∂θ) into `grad`.
    fn backward(&self, p: &[f64], tape: &Self::Tape, d_out: &[f64], grad: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Arch {
    Linear(LinearSoftmax),
    Mlp(TinyMlp),
    Transformer(TinyTransformer),
}

fn run_net<N: Net>(
    net: &N,
    p: &[f64],
    x: &Features,
    dirs: impl FnOnce(&[f64]) -> Vec<Vec<f64>>,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (out, tape) = net.forward(p, x)?;
    let grads = dirs(&out)
        .into_iter()
        .map(|d| {
            let mut g = vec![0.0; p.len()];
            net.backward(p, &tape, &d, &mut g);
            g
        })
        .collect();
    Ok((out, grads))
}

/// A layered model: parameters, partition and enough metadata to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHandle {
    config: ModelConfig,
    store: ParamStore,
    partition: LayerPartition,
    arch: Arch,
}

/// Builds one of the reference networks with a deterministic, seeded
/// initialisation.
pub fn build_reference_model(config: &ModelConfig) -> Result<ModelHandle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (arch, store, partition) = match config.kind {
        ModelKind::LinearSoftmax => {
            let (net, s, p) = LinearSoftmax::build(config, &mut rng);
            (Arch::Linear(net), s, p)
        }
        ModelKind::TinyMlp => {
            let (net, s, p) = TinyMlp::build(config, &mut rng);
            (Arch::Mlp(net), s, p)
        }
        ModelKind::TinyTransformer => {
            let (net, s, p) = TinyTransformer::build(config, &mut rng);
            (Arch::Transformer(net), s, p)
        }
    };
    Ok(ModelHandle {
        config: config.clone(),
        store,
        partition,
        arch,
    })
}

impl ModelHandle {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn partition(&self) -> &LayerPartition {
        &self.partition
    }

    pub fn num_params(&self) -> usize {
        self.store.len()
    }

    pub fn task_kind(&self) -> TaskKind {
        self.config.task
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn architecture_digest(&self) -> String {
        self.config.architecture_digest()
    }

    pub fn content_digest(&self) -> String {
        self.store.content_digest()
    }

    fn dispatch(
        &self,
        x: &Features,
        dirs: impl FnOnce(&[f64]) -> Vec<Vec<f64>>,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let p = self.store.values();
        match &self.arch {
            Arch::Linear(n) => run_net(n, p, x, dirs),
            Arch::Mlp(n) => run_net(n, p, x, dirs),
            Arch::Transformer(n) => run_net(n, p, x, dirs),
        }
    }

    /// Raw network output: logits, or the predicted mean for regression.
    pub fn forward(&self, x: &Features) -> Result<Vec<f64>> {
        Ok(self.dispatch(x, |_| Vec::new())?.0)
    }

    pub fn log_prob(&self, ex: &Example) -> Result<Output> {
        let out = self.forward(&ex.features)?;
        Ok(match self.config.task {
            TaskKind::Classification => Output::LogProbs(ops::log_softmax(&out)),
            TaskKind::Regression => Output::Gaussian {
                mean: out[0],
                variance: 1.0,
            },
        })
    }

    /// ∇θ log p(y = class_index | x).
    pub fn grad_log_prob(&self, ex: &Example, class_index: usize) -> Result<Vec<f64>> {
        if self.config.task != TaskKind::Classification {
            return Err(input_err("grad_log_prob needs a classification model"));
        }
        let c = self.config.num_classes;
        if class_index >= c {
            return Err(input_err(format!(
                "class index {class_index} out of range for {c} classes"
            )));
        }
        let (_, mut g) = self.dispatch(&ex.features, |logits| {
            let mut d = ops::log_softmax(logits).iter().map(|l| -l.exp()).collect::<Vec<_>>();
            d[class_index] += 1.0;
            vec![d]
        })?;
        Ok(g.pop().unwrap())
    }

    /// ∇θ log N(y; μ(x), 1) = (y − μ)·∇θ μ.
    pub fn grad_log_density(&self, ex: &Example, y: f64) -> Result<Vec<f64>> {
        if self.config.task != TaskKind::Regression {
            return Err(input_err("grad_log_density needs a regression model"));
        }
        let (out, mut g) = self.dispatch(&ex.features, |_| vec![vec![1.0]])?;
        let r = y - out[0];
        let mut g = g.pop().unwrap();
        g.iter_mut().for_each(|v| *v *= r);
        Ok(g)
    }

    /// Score gradients for every class (or ∇μ for regression) from one
    /// forward pass.
    pub fn score_gradients(&self, x: &Features) -> Result<ScoreGradients> {
        match self.config.task {
            TaskKind::Classification => {
                let mut probs = Vec::new();
                let (_, grads) = self.dispatch(x, |logits| {
                    probs = ops::log_softmax(logits).iter().map(|l| l.exp()).collect();
                    (0..probs.len())
                        .map(|c| {
                            let mut d: Vec<f64> = probs.iter().map(|p| -p).collect();
                            d[c] += 1.0;
                            d
                        })
                        .collect()
                })?;
                Ok(ScoreGradients::Classes { probs, grads })
            }
            TaskKind::Regression => {
                let (out, mut g) = self.dispatch(x, |_| vec![vec![1.0]])?;
                Ok(ScoreGradients::Gaussian {
                    mean: out[0],
                    grad_mean: g.pop().unwrap(),
                })
            }
        }
    }

    /// Negative log-likelihood of the labelled example and its gradient.
    pub fn loss_and_grad(&self, ex: &Example) -> Result<(f64, Vec<f64>)> {
        match (self.config.task, ex.label) {
            (TaskKind::Classification, Label::Class(y)) => {
                self.check_class(y)?;
                let mut loss = 0.0;
                let (_, mut g) = self.dispatch(&ex.features, |logits| {
                    let lp = ops::log_softmax(logits);
                    loss = -lp[y];
                    let mut d: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                    d[y] -= 1.0;
                    vec![d]
                })?;
                Ok((loss, g.pop().unwrap()))
            }
            (TaskKind::Regression, Label::Value(y)) => {
                let mut loss = 0.0;
                let (_, mut g) = self.dispatch(&ex.features, |out| {
                    let r = out[0] - y;
                    loss = 0.5 * r * r + 0.5 * (2.0 * std::f64::consts::PI).ln();
                    vec![vec![r]]
                })?;
                Ok((loss, g.pop().unwrap()))
            }
            _ => Err(input_err("label type does not match the model task")),
        }
    }

    /// Predicted class, or predicted mean for regression.
    pub fn predict(&self, x: &Features) -> Result<f64> {
        let out = self.forward(x)?;
        Ok(match self.config.task {
            TaskKind::Classification => argmax(&out) as f64,
            TaskKind::Regression => out[0],
        })
    }

    pub fn validate_example(&self, ex: &Example) -> Result<()> {
        match (self.config.task, ex.label) {
            (TaskKind::Classification, Label::Class(y)) => self.check_class(y)?,
            (TaskKind::Regression, Label::Value(_)) => {}
            _ => return Err(input_err("label type does not match the model task")),
        }
        self.forward(&ex.features).map(|_| ())
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.config.num_classes {
            return Err(input_err(format!(
                "label {y} out of range for {} classes",
                self.config.num_classes
            )));
        }
        Ok(())
    }
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn dense_input(x: &Features, dim: usize) -> Result<&[f64]> {
    match x {
        Features::Dense(v) if v.len() == dim => Ok(v),
        Features::Dense(v) => Err(input_err(format!(
            "expected {dim} features, got {}",
            v.len()
        ))),
        Features::Tokens(_) => Err(input_err("dense model given token input")),
    }
}

pub(crate) fn gaussian_init(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}
