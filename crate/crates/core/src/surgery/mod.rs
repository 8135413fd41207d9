//! Fine-tuning under a freeze mask, and the standard set of baseline trials.

mod mask;
mod train;

use serde::{Deserialize, Serialize};

use crate::bench::metrics::MetricKind;
use crate::error::Result;
use crate::exec::ExecPolicy;
use crate::fisher::{score_and_rank, select_layers, FisherOptions, LayerRanking, LayerScores, SelectionEnd};
use crate::model::{Example, ModelHandle};

pub use mask::{FreezeMask, MaskProvenance, MaskVariant};
pub use train::{evaluate, finetune, CheckpointDigest, DataSplits, TrainConfig, Trial, TrialResult, OPTIMIZER};

/// Builds the freeze mask for one variant. `k` beyond the model depth is
/// clamped; the returned warning says so.
pub fn mask_for_variant(variant: MaskVariant, ranking: &LayerRanking) -> Result<(FreezeMask, Option<String>)> {
    let depth = ranking.len();
    let (k, end) = match variant {
        MaskVariant::Full => return Ok((FreezeMask::full(depth), None)),
        MaskVariant::Top(k) => (k, SelectionEnd::Top),
        MaskVariant::Bottom(k) => (k, SelectionEnd::Bottom),
    };
    let warning = (k > depth).then(|| {
        let msg = format!("{} requested on a {depth}-layer model; clamped to k = {depth}", variant.key());
        log::warn!("{msg}");
        msg
    });
    Ok((select_layers(ranking, k.min(depth), end)?, warning))
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub scores: LayerScores,
    pub ranking: LayerRanking,
    pub trials: Vec<Trial>,
}

/// Ranks layers once on the untouched model, then runs every variant from
/// that same initial state and seed.
#[allow(clippy::too_many_arguments)]
pub fn run_baselines(
    model: &ModelHandle,
    data: &DataSplits,
    probe: &[Example],
    fisher: &FisherOptions,
    config: &TrainConfig,
    metric: MetricKind,
    task_id: &str,
    variants: &[MaskVariant],
    exec: ExecPolicy,
) -> Result<BaselineOutcome> {
    let (scores, ranking) = score_and_rank(model, probe, fisher)?;
    let trials = exec
        .map(variants, |_, &variant| -> Result<Trial> {
            let (mask, warning) = mask_for_variant(variant, &ranking)?;
            let mut trial = finetune(model, &mask, data, config, metric, task_id, &variant.label())?;
            trial.result.warnings.extend(warning);
            Ok(trial)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineOutcome {
        scores,
        ranking,
        trials,
    })
}

/// Trial manifest written per fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialManifest {
    pub config: TrainConfig,
    pub result: TrialResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

#[cfg(test)]
mod tests;
