//! Layer-ranking trajectories across training checkpoints and how far they
//! drift from the reference (pre-training) ranking.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::exec::ExecPolicy;
use crate::fisher::{score_and_rank, FisherOptions, LayerRanking, LayerScores};
use crate::model::{Example, ModelHandle, ParameterSnapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub scores: LayerScores,
    pub ranking: LayerRanking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTrajectory {
    pub reference_epoch: usize,
    pub points: Vec<TrajectoryPoint>,
}

impl RankTrajectory {
    /// Validates ordering and depth; the reference is epoch 0 when present,
    /// otherwise the first point.
    pub fn new(points: Vec<TrajectoryPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(input_err("trajectory is empty"));
        }
        if points.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
            return Err(input_err("trajectory epochs must be strictly increasing"));
        }
        let depth = points[0].ranking.len();
        if points.iter().any(|p| p.ranking.len() != depth) {
            return Err(input_err("rankings in a trajectory must cover the same layers"));
        }
        let reference_epoch = if points.iter().any(|p| p.epoch == 0) { 0 } else { points[0].epoch };
        Ok(RankTrajectory { reference_epoch, points })
    }

    pub fn reference(&self) -> &TrajectoryPoint {
        self.points
            .iter()
            .find(|p| p.epoch == self.reference_epoch)
            .expect("reference epoch is one of the points")
    }

    /// Rows of (epoch, layer, 1-based rank) for plotting.
    pub fn plot_rows(&self) -> Vec<(usize, usize, usize)> {
        self.points
            .iter()
            .flat_map(|p| {
                p.ranking
                    .positions()
                    .into_iter()
                    .enumerate()
                    .map(move |(layer, pos)| (p.epoch, layer, pos + 1))
            })
            .collect()
    }

    pub fn plot_csv(&self) -> String {
        let mut out = String::from("epoch,layer,rank\n");
        for (e, l, r) in self.plot_rows() {
            out.push_str(&format!("{e},{l},{r}\n"));
        }
        out
    }
}

/// Restores each checkpoint into a copy of `template` and scores it on the
/// same probe. Checkpoints are scored independently and assembled in epoch
/// order.
pub fn track(
    checkpoints: &[(usize, ParameterSnapshot)],
    template: &ModelHandle,
    probe: &[Example],
    fisher: &FisherOptions,
    exec: ExecPolicy,
) -> Result<RankTrajectory> {
    if checkpoints.len() < 2 {
        return Err(input_err("stability tracking needs at least two checkpoints"));
    }
    let arch = template.architecture_digest();
    if let Some((_, bad)) = checkpoints.iter().find(|(_, s)| s.architecture_digest != arch) {
        return Err(Error::Snapshot(format!(
            "checkpoint architecture {} does not match model {}",
            bad.architecture_digest, arch
        )));
    }
    let mut sorted: Vec<&(usize, ParameterSnapshot)> = checkpoints.iter().collect();
    sorted.sort_by_key(|(e, _)| *e);
    let points = exec
        .map(&sorted, |_, (epoch, snap)| -> Result<TrajectoryPoint> {
            let mut model = template.clone();
            model.restore(snap)?;
            let (scores, ranking) = score_and_rank(&model, probe, fisher)?;
            Ok(TrajectoryPoint {
                epoch: *epoch,
                scores,
                ranking,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    RankTrajectory::new(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub reference_epoch: usize,
    pub epochs: Vec<usize>,
    /// Mean absolute rank displacement against the reference, per epoch.
    pub displacement: Vec<f64>,
    /// Kendall tau against the reference, per epoch.
    pub kendall_tau: Vec<f64>,
    /// `per_layer[layer][t]` = |rank_t(layer) − rank_ref(layer)|.
    pub per_layer: Vec<Vec<usize>>,
}

pub fn deviation(trajectory: &RankTrajectory) -> DeviationReport {
    let reference = &trajectory.reference().ranking;
    let depth = reference.len();
    let mut per_layer = vec![Vec::with_capacity(trajectory.points.len()); depth];
    let mut displacement = Vec::new();
    let mut kendall = Vec::new();
    for p in &trajectory.points {
        let shifts = layer_displacements(&p.ranking, reference);
        for (layer, s) in shifts.iter().enumerate() {
            per_layer[layer].push(*s);
        }
        displacement.push(mean_displacement(&p.ranking, reference));
        kendall.push(kendall_tau(&p.ranking, reference));
    }
    DeviationReport {
        reference_epoch: trajectory.reference_epoch,
        epochs: trajectory.points.iter().map(|p| p.epoch).collect(),
        displacement,
        kendall_tau: kendall,
        per_layer,
    }
}

fn layer_displacements(a: &LayerRanking, b: &LayerRanking) -> Vec<usize> {
    a.positions()
        .into_iter()
        .zip(b.positions())
        .map(|(x, y)| x.abs_diff(y))
        .collect()
}

/// (1/L) Σ_layers |rank_a(layer) − rank_b(layer)|.
pub fn mean_displacement(a: &LayerRanking, b: &LayerRanking) -> f64 {
    let d = layer_displacements(a, b);
    if d.is_empty() {
        return 0.0;
    }
    d.iter().sum::<usize>() as f64 / d.len() as f64
}

/// Kendall rank correlation between two permutations of the same layers.
/// Defined as 1 for fewer than two layers.
pub fn kendall_tau(a: &LayerRanking, b: &LayerRanking) -> f64 {
    let (pa, pb) = (a.positions(), b.positions());
    let n = pa.len();
    if n < 2 {
        return 1.0;
    }
    let mut score: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            let sa = (pa[i] as i64 - pa[j] as i64).signum();
            let sb = (pb[i] as i64 - pb[j] as i64).signum();
            score += sa * sb;
        }
    }
    score as f64 / (n * (n - 1) / 2) as f64
}

/// Trajectory file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub trajectory: RankTrajectory,
    pub deviation: DeviationReport,
    pub checkpoint_digests: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}
