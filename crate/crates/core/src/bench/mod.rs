//! Desk-scale tasks, metrics and sweep reports.

pub mod ingest;
pub mod metrics;
pub mod planted;
mod sweep;
pub mod tokenize;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::fisher::DEFAULT_PROBE_SIZE;
use crate::model::TaskKind;

pub use ingest::{ingest_jsonl, read_jsonl, split_examples, Dataset, IngestOptions, RecordSchema};
pub use metrics::{compute_metric, MetricKind};
pub use planted::{generate_planted_task, shift_layer, PlantedShiftSpec, PlantedTask};
pub use sweep::{
    run_sweep, MaterializedTask, SweepConfig, SweepReport, TaskReport, TaskSource, TaskStatus,
};
pub use tokenize::HashTokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbePolicy {
    pub size: usize,
    pub seed: u64,
}

impl Default for ProbePolicy {
    fn default() -> Self {
        ProbePolicy {
            size: DEFAULT_PROBE_SIZE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub task_kind: TaskKind,
    pub metric: MetricKind,
    pub num_classes: usize,
    pub probe: ProbePolicy,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.metric.compatible_with(self.task_kind) {
            return Err(config_err(format!(
                "task `{}`: metric {:?} does not fit a {:?} task",
                self.id, self.metric, self.task_kind
            )));
        }
        Ok(())
    }
}
