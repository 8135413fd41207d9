use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fim_core::bench::TaskSource;
use fim_core::fisher::{EstimatorMode, FisherOptions, DEFAULT_PROBE_SIZE};
use fim_core::model::ModelConfig;
use fim_core::surgery::TrainConfig;

use crate::UsageError;

/// The config file as written by the user. Every section is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    model: Option<ModelConfig>,
    train: TrainConfig,
    probe: ProbeSection,
    tasks: Vec<TaskSource>,
    output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ProbeSection {
    size: usize,
    seed: Option<u64>,
    mode: EstimatorMode,
    samples_per_example: usize,
    normalized: bool,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            size: DEFAULT_PROBE_SIZE,
            seed: None,
            mode: EstimatorMode::ExactExpectation,
            samples_per_example: 1,
            normalized: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("fim-out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedProbe {
    pub size: usize,
    pub seed: u64,
    pub mode: EstimatorMode,
    pub samples_per_example: usize,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_path: Option<PathBuf>,
    pub config_digest: Option<String>,
    /// Flag overrides in the order applied, as `key=value`.
    pub overrides: Vec<String>,
}

/// Fully resolved configuration, embedded verbatim in every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub probe: ResolvedProbe,
    pub tasks: Vec<TaskSource>,
    pub output: OutputSection,
    pub provenance: Provenance,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub probe_seed: Option<u64>,
    pub probe_size: Option<usize>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn file_digest(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunConfig {
    pub fn resolve(command: &str, path: Option<&Path>, flags: &Overrides) -> anyhow::Result<RunConfig> {
        let (file, raw, config_digest) = match path {
            None => (ConfigFile::default(), serde_json::Value::Null, None),
            Some(p) => {
                if !p.exists() {
                    return Err(UsageError(format!("config file {} does not exist", p.display())).into());
                }
                let text = fs::read_to_string(p)?;
                let raw: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| UsageError(format!("{}: invalid JSON: {e}", p.display())))?;
                let mut de = serde_json::Deserializer::from_str(&text);
                let file: ConfigFile = serde_path_to_error::deserialize(&mut de)
                    .map_err(|e| UsageError(format!("{}: at `{}`: {}", p.display(), e.path(), e.inner())))?;
                (file, raw, Some(file_digest(p)?))
            }
        };
        let mut overrides = Vec::new();
        let mut note = |key: &str, value: String| overrides.push(format!("{key}={value}"));

        let seed = match flags.seed {
            Some(s) => {
                note("seed", s.to_string());
                s
            }
            None => file.seed.unwrap_or(0),
        };
        let mut train = file.train;
        if flags.seed.is_some() || raw.pointer("/train/seed").is_none() {
            train.seed = seed;
        }
        if let Some(e) = flags.epochs {
            note("epochs", e.to_string());
            train.epochs = e;
            train.checkpoint_epochs.retain(|c| *c <= e);
            if !train.checkpoint_epochs.contains(&e) {
                train.checkpoint_epochs.push(e);
            }
        }
        train.validate().map_err(|e| UsageError(e.to_string()))?;

        let probe_seed = match (flags.probe_seed, flags.seed, file.probe.seed) {
            (Some(s), _, _) => {
                note("probe-seed", s.to_string());
                s
            }
            (None, Some(s), _) => s,
            (None, None, Some(s)) => s,
            (None, None, None) => seed,
        };
        let size = match flags.probe_size {
            Some(n) => {
                note("probe-size", n.to_string());
                n
            }
            None => file.probe.size,
        };
        if size == 0 {
            return Err(UsageError("probe size must be at least 1".into()).into());
        }
        let mut output = file.output;
        if let Some(out) = &flags.out {
            note("out", out.display().to_string());
            output.dir = out.clone();
        }
        if let Some(m) = &file.model {
            m.validate().map_err(|e| UsageError(e.to_string()))?;
        }
        Ok(RunConfig {
            command: command.to_string(),
            seed,
            model: file.model,
            train,
            probe: ResolvedProbe {
                size,
                seed: probe_seed,
                mode: file.probe.mode,
                samples_per_example: file.probe.samples_per_example,
                normalized: file.probe.normalized,
            },
            tasks: file.tasks,
            output,
            provenance: Provenance {
                config_path: path.map(Path::to_path_buf),
                config_digest,
                overrides,
            },
            inputs: BTreeMap::new(),
        })
    }

    pub fn fisher(&self) -> FisherOptions {
        FisherOptions {
            mode: self.probe.mode,
            seed: self.probe.seed,
            samples_per_example: self.probe.samples_per_example,
            ..FisherOptions::default()
        }
    }

    /// Records the digest of an input file; fails if it does not exist.
    pub fn add_input(&mut self, path: &Path) -> anyhow::Result<()> {
        if !path.exists() {
            return Err(UsageError(format!("input file {} does not exist", path.display())).into());
        }
        self.inputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}
