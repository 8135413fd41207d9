use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::ingest::{ingest_jsonl, IngestOptions, RecordSchema};
use super::metrics::MetricKind;
use super::planted::{generate_planted_task, PlantedShiftSpec};
use super::tokenize::HashTokenizer;
use super::{ProbePolicy, TaskSpec};
use crate::error::{config_err, Result};
use crate::exec::ExecPolicy;
use crate::fisher::{sample_probe, FisherOptions, ProbeInfo};
use crate::model::{build_reference_model, Example, ModelConfig, ModelHandle, TaskKind};
use crate::surgery::{run_baselines, DataSplits, MaskVariant, TrainConfig, TrialResult};

/// Where a sweep task's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSource {
    Planted {
        id: String,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        spec: PlantedShiftSpec,
    },
    Jsonl {
        id: String,
        path: PathBuf,
        #[serde(default)]
        eval_path: Option<PathBuf>,
        schema: RecordSchema,
        #[serde(default)]
        task: TaskKind,
        metric: MetricKind,
        #[serde(default)]
        label_map: Option<Vec<String>>,
        #[serde(default)]
        split_seed: u64,
        /// Model template; class count is taken from the data.
        model: ModelConfig,
        #[serde(default)]
        probe: ProbePolicy,
    },
}

impl TaskSource {
    pub fn id(&self) -> &str {
        match self {
            TaskSource::Planted { id, .. } | TaskSource::Jsonl { id, .. } => id,
        }
    }
}

/// A task ready to run: spec, starting model, splits and probe.
#[derive(Debug, Clone)]
pub struct MaterializedTask {
    pub task: TaskSpec,
    pub model: ModelHandle,
    pub data: DataSplits,
    pub probe: Vec<Example>,
    pub probe_info: ProbeInfo,
}

impl TaskSource {
    pub fn materialize(&self) -> Result<MaterializedTask> {
        match self {
            TaskSource::Planted { id, seed, spec } => {
                let t = generate_planted_task(id, spec, *seed)?;
                Ok(MaterializedTask {
                    task: t.task,
                    model: t.student,
                    data: t.data,
                    probe: t.probe,
                    probe_info: t.probe_info,
                })
            }
            TaskSource::Jsonl {
                id,
                path,
                eval_path,
                schema,
                task,
                metric,
                label_map,
                split_seed,
                model,
                probe,
            } => {
                let opts = IngestOptions {
                    schema: *schema,
                    task: *task,
                    label_map: label_map.clone(),
                    tokenizer: HashTokenizer {
                        vocab_size: model.vocab_size,
                        max_seq_len: model.max_seq_len,
                    },
                };
                let (dataset, data) = ingest_jsonl(path, eval_path.as_deref(), &opts, *split_seed)?;
                if data.train.is_empty() || data.eval.is_empty() {
                    return Err(config_err(format!("task `{id}`: empty train or eval split")));
                }
                let mut cfg = model.clone().with_task(*task);
                if *task == TaskKind::Classification {
                    cfg.num_classes = dataset.num_classes();
                }
                let spec = TaskSpec {
                    id: id.clone(),
                    task_kind: *task,
                    metric: *metric,
                    num_classes: cfg.num_classes,
                    probe: *probe,
                };
                spec.validate()?;
                let model = build_reference_model(&cfg)?;
                let (probe_set, probe_info) = sample_probe(&data.eval, probe.size, probe.seed);
                Ok(MaterializedTask {
                    task: spec,
                    model,
                    data,
                    probe: probe_set,
                    probe_info,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub train: TrainConfig,
    pub fisher: FisherOptions,
    pub variants: Vec<MaskVariant>,
    #[serde(skip)]
    pub exec: ExecPolicy,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            train: TrainConfig::default(),
            fisher: FisherOptions::default(),
            variants: MaskVariant::standard(),
            exec: ExecPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum TaskStatus {
    Ok,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: String,
    pub status: TaskStatus,
    pub metric: Option<MetricKind>,
    pub probe: Option<ProbeInfo>,
    pub layer_scores: Vec<f64>,
    pub ranking: Vec<usize>,
    /// Final eval metric per variant, in sweep variant order.
    pub values: Vec<Option<f64>>,
    /// (best Top-k − Full-model) in percentage points.
    pub relative_performance: Option<f64>,
    pub trials: Vec<TrialResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub variants: Vec<MaskVariant>,
    pub tasks: Vec<TaskReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

fn run_task(source: &TaskSource, config: &SweepConfig) -> Result<TaskReport> {
    let m = source.materialize()?;
    let outcome = run_baselines(
        &m.model,
        &m.data,
        &m.probe,
        &config.fisher,
        &config.train,
        m.task.metric,
        &m.task.id,
        &config.variants,
        config.exec,
    )?;
    let values: Vec<Option<f64>> = outcome.trials.iter().map(|t| Some(t.result.final_metric)).collect();
    let mut report = TaskReport {
        task_id: m.task.id.clone(),
        status: TaskStatus::Ok,
        metric: Some(m.task.metric),
        probe: Some(m.probe_info),
        layer_scores: outcome.scores.scores.clone(),
        ranking: outcome.ranking.order.clone(),
        values,
        relative_performance: None,
        trials: outcome.trials.into_iter().map(|t| t.result).collect(),
    };
    report.relative_performance = relative_performance(&config.variants, &report.values);
    Ok(report)
}

/// (max over Top-k rows − Full-model) × 100, when both are present.
pub(crate) fn relative_performance(variants: &[MaskVariant], values: &[Option<f64>]) -> Option<f64> {
    let mut full = None;
    let mut best: Option<f64> = None;
    for (v, x) in variants.iter().zip(values) {
        let Some(x) = *x else { continue };
        match v {
            MaskVariant::Full => full = Some(x),
            MaskVariant::Top(_) => best = Some(best.map_or(x, |b| b.max(x))),
            MaskVariant::Bottom(_) => {}
        }
    }
    Some((best? - full?) * 100.0)
}

/// Runs every task in order. A failing task is recorded, not fatal.
pub fn run_sweep(tasks: &[TaskSource], config: &SweepConfig) -> SweepReport {
    let reports = tasks
        .iter()
        .map(|src| {
            run_task(src, config).unwrap_or_else(|e| {
                log::error!("task `{}` failed: {e}", src.id());
                TaskReport {
                    task_id: src.id().to_string(),
                    status: TaskStatus::Failed { error: e.to_string() },
                    metric: None,
                    probe: None,
                    layer_scores: Vec::new(),
                    ranking: Vec::new(),
                    values: vec![None; config.variants.len()],
                    relative_performance: None,
                    trials: Vec::new(),
                }
            })
        })
        .collect();
    SweepReport {
        variants: config.variants.clone(),
        tasks: reports,
        run_config: None,
    }
}

impl SweepReport {
    pub fn all_ok(&self) -> bool {
        self.tasks.iter().all(|t| t.status == TaskStatus::Ok)
    }

    /// Keeps only the listed variants, in the report's order.
    pub fn restrict(&mut self, keep: &[MaskVariant]) {
        let mask: Vec<bool> = self.variants.iter().map(|v| keep.contains(v)).collect();
        let filter = |xs: &mut Vec<Option<f64>>| {
            let mut it = mask.iter();
            xs.retain(|_| *it.next().unwrap());
        };
        for t in &mut self.tasks {
            filter(&mut t.values);
            t.trials.retain(|tr| keep.iter().any(|k| k.label() == tr.variant));
        }
        self.variants.retain(|v| keep.contains(v));
        for t in &mut self.tasks {
            t.relative_performance = relative_performance(&self.variants, &t.values);
        }
    }

    /// Rows = variants, columns = tasks; values to three decimals.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("Layers finetuned");
        for t in &self.tasks {
            out.push(',');
            out.push_str(&csv_field(&t.task_id));
        }
        out.push('\n');
        for (row, v) in self.variants.iter().enumerate() {
            out.push_str(&v.label());
            for t in &self.tasks {
                out.push(',');
                match (&t.status, t.values.get(row).copied().flatten()) {
                    (TaskStatus::Failed { .. }, _) => out.push_str("failed"),
                    (_, Some(x)) => out.push_str(&format!("{x:.3}")),
                    (_, None) => {}
                }
            }
            out.push('\n');
        }
        out
    }

    /// `task,relative_performance` rows for bar charts.
    pub fn relative_csv(&self) -> String {
        let mut out = String::from("task,relative_performance\n");
        for t in &self.tasks {
            let rp = t.relative_performance.map(|x| format!("{x:.4}")).unwrap_or_default();
            out.push_str(&format!("{},{rp}\n", csv_field(&t.task_id)));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
