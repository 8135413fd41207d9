//! JSON-lines datasets: `{"text": ..., "label": ...}`,
//! `{"text_a": ..., "text_b": ..., "label": ...}`, or
//! `{"features": [...], "label": ...}`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tokenize::HashTokenizer;
use crate::error::{Error, Result};
use crate::model::{Example, Features, Label, TaskKind};
use crate::surgery::DataSplits;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordSchema {
    SingleText,
    TextPair,
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub schema: RecordSchema,
    pub task: TaskKind,
    /// Class names by index. Inferred from the data when absent.
    pub label_map: Option<Vec<String>>,
    pub tokenizer: HashTokenizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub label_map: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }
}

fn label_key(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn infer_label_map(keys: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&String> = keys.iter().collect();
    let ints: Option<Vec<usize>> = distinct.iter().map(|k| k.parse::<usize>().ok()).collect();
    match ints {
        Some(ints) if !ints.is_empty() => {
            let max = *ints.iter().max().unwrap();
            (0..=max).map(|i| i.to_string()).collect()
        }
        _ => distinct.into_iter().cloned().collect(),
    }
}

/// Parses every line of `path` into an example.
pub fn read_jsonl(path: &Path, opts: &IngestOptions) -> Result<Dataset> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{display}: {e}"))))?;
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: display.clone(),
        line,
        detail,
    };
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(raw).map_err(|e| parse_err(line, format!("malformed JSON: {e}")))?;
        let field = |name: &str| -> Result<&Value> {
            v.get(name)
                .ok_or_else(|| parse_err(line, format!("missing field `{name}`")))
        };
        let text_of = |name: &str| -> Result<String> {
            field(name)?
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| parse_err(line, format!("field `{name}` is not a string")))
        };
        let features = match opts.schema {
            RecordSchema::SingleText => Features::Tokens(opts.tokenizer.encode(&text_of("text")?)),
            RecordSchema::TextPair => {
                Features::Tokens(opts.tokenizer.encode_pair(&text_of("text_a")?, &text_of("text_b")?))
            }
            RecordSchema::Features => {
                let arr = field("features")?
                    .as_array()
                    .ok_or_else(|| parse_err(line, "`features` is not an array".into()))?;
                let xs: Option<Vec<f64>> = arr.iter().map(Value::as_f64).collect();
                Features::Dense(xs.ok_or_else(|| parse_err(line, "non-numeric feature".into()))?)
            }
        };
        let label = field("label")?.clone();
        rows.push((line, features, label));
    }

    if opts.task == TaskKind::Regression {
        let examples = rows
            .into_iter()
            .map(|(line, features, label)| {
                let y = label
                    .as_f64()
                    .ok_or_else(|| parse_err(line, "regression label must be a number".into()))?;
                Ok(Example {
                    features,
                    label: Label::Value(y),
                })
            })
            .collect::<Result<_>>()?;
        return Ok(Dataset {
            examples,
            label_map: Vec::new(),
        });
    }

    let keys: Vec<String> = rows
        .iter()
        .map(|(line, _, l)| label_key(l).ok_or_else(|| parse_err(*line, format!("unusable label {l}"))))
        .collect::<Result<_>>()?;
    let label_map = opts.label_map.clone().unwrap_or_else(|| infer_label_map(&keys));
    let examples = rows
        .into_iter()
        .zip(keys)
        .map(|((line, features, _), key)| {
            let class = label_map.iter().position(|m| *m == key).ok_or_else(|| {
                parse_err(line, format!("unknown label `{key}`; label map is {label_map:?}"))
            })?;
            Ok(Example {
                features,
                label: Label::Class(class),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { examples, label_map })
}

/// Seeded shuffle, then the first `round(train_fraction · n)` go to train.
pub fn split_examples(examples: Vec<Example>, train_fraction: f64, seed: u64) -> DataSplits {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (examples.len() as f64 * train_fraction).round() as usize;
    let mut slots: Vec<Option<Example>> = examples.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().unwrap();
    let train = idx[..n_train].iter().map(&mut take).collect();
    let eval = idx[n_train..].iter().map(&mut take).collect();
    DataSplits { train, eval }
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Reads a dataset and splits it 80/20 by seeded shuffle, or reads separate
/// train and eval files when `eval_path` is given.
pub fn ingest_jsonl(path: &Path, eval_path: Option<&Path>, opts: &IngestOptions, split_seed: u64) -> Result<(Dataset, DataSplits)> {
    let train = read_jsonl(path, opts)?;
    match eval_path {
        None => {
            let splits = split_examples(train.examples.clone(), DEFAULT_TRAIN_FRACTION, split_seed);
            Ok((train, splits))
        }
        Some(ep) => {
            let opts = IngestOptions {
                label_map: Some(train.label_map.clone()),
                ..opts.clone()
            };
            let eval = read_jsonl(ep, &opts)?;
            let splits = DataSplits {
                train: train.examples.clone(),
                eval: eval.examples,
            };
            Ok((train, splits))
        }
    }
}
