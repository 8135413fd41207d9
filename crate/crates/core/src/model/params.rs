//! Flat parameter storage with named tensor views and the layer partition.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All model parameters in one contiguous `f64` buffer.
///
/// Gradients and Fisher diagonals share this exact layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    specs: Vec<TensorSpec>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.spec(name).map(|s| &self.values[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.spec(name)?.range();
        Some(&mut self.values[range])
    }

    /// SHA-256 over tensor names, shapes and value bit patterns.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        hash_layout(&mut h, &self.specs);
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over tensor names and shapes only.
    pub fn layout_digest(&self) -> String {
        let mut h = Sha256::new();
        hash_layout(&mut h, &self.specs);
        hex::encode(h.finalize())
    }

    pub(crate) fn set_values(&mut self, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.values.len());
        self.values = values;
    }
}

fn hash_layout(h: &mut Sha256, specs: &[TensorSpec]) {
    for s in specs {
        h.update(s.name.as_bytes());
        h.update([0u8]);
        for d in &s.shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update([0xffu8]);
    }
}

/// Identifies one partition group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupId {
    Preamble,
    Ranked(usize),
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    /// Names of the tensors in this group.
    pub tensors: Vec<String>,
    /// Contiguous span of the flat parameter vector owned by the group.
    pub span: Range<usize>,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.span.len()
    }

    pub fn is_empty(&self) -> bool {
        self.span.is_empty()
    }
}

/// Assignment of every parameter to exactly one of: the frozen preamble,
/// one of the depth-ordered ranked groups, or the always-trainable head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub preamble: ParamGroup,
    pub ranked: Vec<ParamGroup>,
    pub head: ParamGroup,
}

impl LayerPartition {
    pub fn num_ranked(&self) -> usize {
        self.ranked.len()
    }

    pub fn group(&self, id: GroupId) -> &ParamGroup {
        match id {
            GroupId::Preamble => &self.preamble,
            GroupId::Ranked(i) => &self.ranked[i],
            GroupId::Head => &self.head,
        }
    }

    /// All groups in storage order: preamble, ranked groups by depth, head.
    pub fn groups(&self) -> impl Iterator<Item = (GroupId, &ParamGroup)> {
        std::iter::once((GroupId::Preamble, &self.preamble))
            .chain(
                self.ranked
                    .iter()
                    .enumerate()
                    .map(|(i, g)| (GroupId::Ranked(i), g)),
            )
            .chain(std::iter::once((GroupId::Head, &self.head)))
    }

    /// Group owning flat parameter index `idx`.
    pub fn group_of(&self, idx: usize) -> Option<GroupId> {
        self.groups()
            .find(|(_, g)| g.span.contains(&idx))
            .map(|(id, _)| id)
    }

    pub fn total_len(&self) -> usize {
        self.groups().map(|(_, g)| g.len()).sum()
    }
}

/// Appends tensors group by group so that every group occupies a
/// contiguous span.
#[derive(Debug, Default)]
pub(crate) struct StoreBuilder {
    specs: Vec<TensorSpec>,
    values: Vec<f64>,
    groups: Vec<ParamGroup>,
    open: Option<ParamGroup>,
}

impl StoreBuilder {
    pub fn begin_group(&mut self, name: impl Into<String>) {
        self.end_group();
        let at = self.values.len();
        self.open = Some(ParamGroup {
            name: name.into(),
            tensors: Vec::new(),
            span: at..at,
        });
    }

    fn end_group(&mut self) {
        if let Some(mut g) = self.open.take() {
            g.span.end = self.values.len();
            self.groups.push(g);
        }
    }

    /// Adds a tensor to the open group and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Vec<f64>) -> usize {
        let name = name.into();
        let len: usize = shape.iter().product();
        assert_eq!(init.len(), len, "initializer length for {name}");
        let offset = self.values.len();
        self.open
            .as_mut()
            .expect("push outside of a group")
            .tensors
            .push(name.clone());
        self.specs.push(TensorSpec {
            name,
            shape: shape.to_vec(),
            offset,
        });
        self.values.extend(init);
        offset
    }

    /// Finishes the store. Expects groups in the order preamble, ranked..., head.
    pub fn finish(mut self) -> (ParamStore, LayerPartition) {
        self.end_group();
        let mut groups = self.groups;
        assert!(groups.len() >= 2, "need at least preamble and head groups");
        let head = groups.pop().unwrap();
        let preamble = groups.remove(0);
        (
            ParamStore {
                specs: self.specs,
                values: self.values,
            },
            LayerPartition {
                preamble,
                ranked: groups,
                head,
            },
        )
    }
}
