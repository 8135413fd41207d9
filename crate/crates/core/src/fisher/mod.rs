//! Diagonal Fisher information, per-layer Frobenius scores, rankings and
//! top/bottom-k layer selection.

mod estimate;
mod probe;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input_err, Result};
use crate::model::{LayerPartition, ModelHandle};
use crate::surgery::{FreezeMask, MaskProvenance};

pub use estimate::{brute_force_fim_oracle, estimate_fim_diagonal, EstimatorMode, FimDiagonal, FisherOptions};
pub use probe::{sample_probe, ProbeInfo, DEFAULT_PROBE_SIZE};

/// One non-negative score per ranked group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub scores: Vec<f64>,
    pub group_names: Vec<String>,
    /// Scores divided by sqrt(group parameter count).
    pub normalized: bool,
    pub probe_size: usize,
    pub mode: EstimatorMode,
}

/// Frobenius norm of each ranked group's slice of the diagonal.
pub fn aggregate_layer_scores(fim: &FimDiagonal, partition: &LayerPartition, normalized: bool) -> Result<LayerScores> {
    if fim.values.len() != partition.total_len() {
        return Err(input_err(format!(
            "Fisher diagonal has {} entries but the partition covers {}",
            fim.values.len(),
            partition.total_len()
        )));
    }
    let scores = partition
        .ranked
        .iter()
        .map(|g| {
            let norm = fim.values[g.span.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
            if normalized && !g.is_empty() {
                norm / (g.len() as f64).sqrt()
            } else {
                norm
            }
        })
        .collect();
    Ok(LayerScores {
        scores,
        group_names: partition.ranked.iter().map(|g| g.name.clone()).collect(),
        normalized,
        probe_size: fim.probe_size,
        mode: fim.mode,
    })
}

/// Layer indices by descending score; equal scores keep ascending index order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerRanking {
    pub order: Vec<usize>,
    pub tie_policy: String,
}

pub const TIE_POLICY: &str = "lower-index-first";

impl LayerRanking {
    pub fn from_order(order: Vec<usize>) -> Self {
        LayerRanking {
            order,
            tie_policy: TIE_POLICY.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Zero-based rank position of every layer (`positions()[layer]`).
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.order.len()];
        for (rank, &layer) in self.order.iter().enumerate() {
            pos[layer] = rank;
        }
        pos
    }

    pub fn top(&self) -> Option<usize> {
        self.order.first().copied()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.order {
            h.update((*l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn rank_layers(scores: &LayerScores) -> LayerRanking {
    rank_values(&scores.scores)
}

pub fn rank_values(scores: &[f64]) -> LayerRanking {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // sort_by is stable, so ties stay in ascending index order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    LayerRanking::from_order(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionEnd {
    Top,
    Bottom,
}

impl std::str::FromStr for SelectionEnd {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "top" => Ok(SelectionEnd::Top),
            "bottom" => Ok(SelectionEnd::Bottom),
            other => Err(format!("expected `top` or `bottom`, got `{other}`")),
        }
    }
}

/// Marks `k` ranked groups from one end of the ranking, plus the head,
/// trainable. The preamble stays frozen.
pub fn select_layers(ranking: &LayerRanking, k: usize, end: SelectionEnd) -> Result<FreezeMask> {
    let l = ranking.len();
    if k < 1 || k > l {
        return Err(input_err(format!("k = {k} outside 1..={l}")));
    }
    let chosen: &[usize] = match end {
        SelectionEnd::Top => &ranking.order[..k],
        SelectionEnd::Bottom => &ranking.order[l - k..],
    };
    let mut ranked = vec![false; l];
    for &g in chosen {
        ranked[g] = true;
    }
    FreezeMask::new(
        false,
        ranked,
        MaskProvenance {
            ranking_digest: Some(ranking.digest()),
            k: Some(k),
            end: Some(end),
        },
    )
}

/// Convenience: exact Fisher → unnormalised scores → ranking.
pub fn score_and_rank(model: &ModelHandle, probe: &[crate::model::Example], opts: &FisherOptions) -> Result<(LayerScores, LayerRanking)> {
    let fim = estimate_fim_diagonal(model, probe, opts)?;
    let scores = aggregate_layer_scores(&fim, model.partition(), false)?;
    let ranking = rank_layers(&scores);
    Ok((scores, ranking))
}

/// Contents of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub model_digest: String,
    pub architecture_digest: String,
    pub probe: ProbeInfo,
    pub estimator_mode: EstimatorMode,
    pub normalized: bool,
    pub scores: Vec<GroupScore>,
    pub ranking: Vec<usize>,
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub layer: usize,
    pub group: String,
    pub score: f64,
}

impl ScoreFile {
    pub fn new(model: &ModelHandle, probe: ProbeInfo, scores: &LayerScores, ranking: &LayerRanking) -> Self {
        ScoreFile {
            model_digest: model.content_digest(),
            architecture_digest: model.architecture_digest(),
            probe,
            estimator_mode: scores.mode,
            normalized: scores.normalized,
            scores: scores
                .scores
                .iter()
                .zip(&scores.group_names)
                .enumerate()
                .map(|(layer, (score, group))| GroupScore {
                    layer,
                    group: group.clone(),
                    score: *score,
                })
                .collect(),
            ranking: ranking.order.clone(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            run_config: None,
        }
    }

    pub fn ranking(&self) -> LayerRanking {
        LayerRanking::from_order(self.ranking.clone())
    }
}

#[cfg(test)]
mod tests;
