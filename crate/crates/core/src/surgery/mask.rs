use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::fisher::SelectionEnd;
use crate::model::{GroupId, LayerPartition};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskProvenance {
    pub ranking_digest: Option<String>,
    pub k: Option<usize>,
    pub end: Option<SelectionEnd>,
}

/// Trainability per parameter group. The head is always trainable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    preamble: bool,
    ranked: Vec<bool>,
    pub provenance: MaskProvenance,
}

impl FreezeMask {
    pub fn new(preamble: bool, ranked: Vec<bool>, provenance: MaskProvenance) -> Result<Self> {
        Ok(FreezeMask {
            preamble,
            ranked,
            provenance,
        })
    }

    /// Everything trainable, preamble included.
    pub fn full(num_ranked: usize) -> Self {
        FreezeMask {
            preamble: true,
            ranked: vec![true; num_ranked],
            provenance: MaskProvenance::default(),
        }
    }

    pub fn with_preamble(mut self, trainable: bool) -> Self {
        self.preamble = trainable;
        self
    }

    pub fn num_ranked(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_trainable(&self, id: GroupId) -> bool {
        match id {
            GroupId::Preamble => self.preamble,
            GroupId::Ranked(i) => self.ranked.get(i).copied().unwrap_or(false),
            GroupId::Head => true,
        }
    }

    pub fn trainable_ranked(&self) -> Vec<usize> {
        (0..self.ranked.len()).filter(|&i| self.ranked[i]).collect()
    }

    /// Checks the mask against a partition: matching depth and at least one
    /// trainable parameter.
    pub fn check(&self, partition: &LayerPartition) -> Result<()> {
        if self.ranked.len() != partition.num_ranked() {
            return Err(input_err(format!(
                "mask covers {} ranked groups, model has {}",
                self.ranked.len(),
                partition.num_ranked()
            )));
        }
        let trainable: usize = partition
            .groups()
            .filter(|(id, _)| self.is_trainable(*id))
            .map(|(_, g)| g.len())
            .sum();
        if trainable == 0 {
            return Err(input_err("mask leaves no trainable parameters"));
        }
        Ok(())
    }

    /// Flat-index spans that receive updates.
    pub fn trainable_spans(&self, partition: &LayerPartition) -> Vec<std::ops::Range<usize>> {
        partition
            .groups()
            .filter(|(id, g)| self.is_trainable(*id) && !g.is_empty())
            .map(|(_, g)| g.span.clone())
            .collect()
    }

    pub fn trainable_group_names(&self, partition: &LayerPartition) -> Vec<String> {
        partition
            .groups()
            .filter(|(id, _)| self.is_trainable(*id))
            .map(|(_, g)| g.name.clone())
            .collect()
    }
}

/// The seven mask variants of a baseline sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskVariant {
    Full,
    Top(usize),
    Bottom(usize),
}

impl MaskVariant {
    /// Full-model, Top 1..5, Bottom 1.
    pub fn standard() -> Vec<MaskVariant> {
        let mut v = vec![MaskVariant::Full];
        v.extend((1..=5).map(MaskVariant::Top));
        v.push(MaskVariant::Bottom(1));
        v
    }

    /// Row label used in report tables.
    pub fn label(&self) -> String {
        match self {
            MaskVariant::Full => "Full-model".into(),
            MaskVariant::Top(k) => format!("Top {k}"),
            MaskVariant::Bottom(k) => format!("Bottom {k}"),
        }
    }

    /// Short key used on the command line (`full`, `top-3`, `bottom-1`).
    pub fn key(&self) -> String {
        match self {
            MaskVariant::Full => "full".into(),
            MaskVariant::Top(k) => format!("top-{k}"),
            MaskVariant::Bottom(k) => format!("bottom-{k}"),
        }
    }
}

impl std::str::FromStr for MaskVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "full" {
            return Ok(MaskVariant::Full);
        }
        let parse = |rest: &str| rest.parse::<usize>().ok().filter(|k| *k >= 1);
        if let Some(k) = s.strip_prefix("top-").and_then(parse) {
            return Ok(MaskVariant::Top(k));
        }
        if let Some(k) = s.strip_prefix("bottom-").and_then(parse) {
            return Ok(MaskVariant::Bottom(k));
        }
        Err(format!("unknown mask variant `{s}` (expected full, top-K or bottom-K)"))
    }
}

impl std::fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.key())
    }
}
