//! Named weight matrices with layer metadata.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::{derive_seed, gaussian_matrix, seeded};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmoduleKind {
    AttentionProj,
    Ffn,
    Embedding,
    Other,
}

impl SubmoduleKind {
    pub const ALL: [SubmoduleKind; 4] = [
        SubmoduleKind::AttentionProj,
        SubmoduleKind::Ffn,
        SubmoduleKind::Embedding,
        SubmoduleKind::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubmoduleKind::AttentionProj => "attention_proj",
            SubmoduleKind::Ffn => "ffn",
            SubmoduleKind::Embedding => "embedding",
            SubmoduleKind::Other => "other",
        }
    }
}

impl fmt::Display for SubmoduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Storage precision of an entry. Values are always held as `f64`; `F32`
/// entries hold values exactly representable in single precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub matrix: Tensor,
    pub layer_index: usize,
    pub kind: SubmoduleKind,
    #[serde(default)]
    pub dtype: Dtype,
}

impl ModelEntry {
    pub fn new(name: impl Into<String>, matrix: Tensor, layer_index: usize, kind: SubmoduleKind) -> Self {
        Self {
            name: name.into(),
            matrix,
            layer_index,
            kind,
            dtype: Dtype::F64,
        }
    }
}

/// Ordered, uniquely named weight matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelContainer {
    entries: Vec<ModelEntry>,
    total_layers: usize,
    provenance: String,
}

impl ModelContainer {
    pub fn new(total_layers: usize, provenance: impl Into<String>) -> Self {
        Self {
            entries: Vec::new(),
            total_layers,
            provenance: provenance.into(),
        }
    }

    pub fn push(&mut self, entry: ModelEntry) -> Result<()> {
        if entry.matrix.rank() != 2 {
            bail!(Shape, "entry '{}' is not a matrix: {:?}", entry.name, entry.matrix.shape());
        }
        if !entry.matrix.is_finite() {
            bail!(Numerics, "entry '{}' has non-finite values", entry.name);
        }
        if entry.layer_index >= self.total_layers {
            bail!(
                InvalidArgument,
                "entry '{}' has layer index {} outside [0, {})",
                entry.name,
                entry.layer_index,
                self.total_layers
            );
        }
        if self.get(&entry.name).is_some() {
            bail!(InvalidArgument, "duplicate entry name '{}'", entry.name);
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[ModelEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ModelEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_layers(&self) -> usize {
        self.total_layers
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn dense_params(&self) -> usize {
        self.entries.iter().map(|e| e.matrix.len()).sum()
    }
}

/// Per-entry layer inputs: entry `i` gets a `cols_i × samples` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    inputs: Vec<Tensor>,
}

impl Calibration {
    pub fn new(model: &ModelContainer, inputs: Vec<Tensor>) -> Result<Self> {
        if inputs.len() != model.len() {
            bail!(Shape, "{} calibration inputs for {} entries", inputs.len(), model.len());
        }
        for (e, x) in model.entries().iter().zip(&inputs) {
            if x.rank() != 2 || x.rows() != e.matrix.cols() || x.cols() == 0 {
                bail!(Shape, "calibration for '{}' has shape {:?}, needs {} rows", e.name, x.shape(), e.matrix.cols());
            }
        }
        Ok(Self { inputs })
    }

    /// Standard Gaussian inputs, one independent seeded stream per entry.
    pub fn gaussian(model: &ModelContainer, samples: usize, seed: u64) -> Self {
        let inputs = model
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| gaussian_matrix(&mut seeded(derive_seed(seed, i as u64)), e.matrix.cols(), samples))
            .collect();
        Self { inputs }
    }

    pub fn input(&self, entry: usize) -> &Tensor {
        &self.inputs[entry]
    }

    pub fn samples(&self) -> usize {
        self.inputs.first().map_or(0, Tensor::cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_bad_layers() {
        let mut m = ModelContainer::new(2, "test");
        let w = Tensor::zeros(&[2, 2]);
        m.push(ModelEntry::new("a", w.clone(), 0, SubmoduleKind::Ffn)).unwrap();
        assert!(m.push(ModelEntry::new("a", w.clone(), 1, SubmoduleKind::Ffn)).is_err());
        assert!(m.push(ModelEntry::new("b", w.clone(), 2, SubmoduleKind::Ffn)).is_err());
        assert!(m.push(ModelEntry::new("c", Tensor::zeros(&[2, 2, 2]), 1, SubmoduleKind::Ffn)).is_err());
        assert_eq!(m.dense_params(), 4);
    }
}
