//! Containers exchanged between pipeline stages: embedding sets (EMBX and
//! CSV), image corpora (EMBX) and named-tensor checkpoints (GAPW).

mod checkpoint;
mod csv_io;
mod embx;
mod images;

pub use checkpoint::{read_gapw, write_gapw, Checkpoint};
pub use csv_io::{export_csv, import_csv};
pub use embx::{decode as decode_embx, encode as encode_embx, read_embx, write_embx};
pub use images::{images_to_set, set_to_images};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub vector: Vec<f32>,
    pub label: u8,
    pub generator_id: u32,
    pub tag: String,
}

/// Labeled vectors sharing one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, vector: Vec<f32>, label: u8, generator_id: u32, tag: impl Into<String>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector of length {} in a set of dim {}",
                vector.len(),
                self.dim
            )));
        }
        if label > 1 {
            return Err(Error::Data(format!("label {label} is not 0 or 1")));
        }
        self.records.push(EmbeddingRecord {
            vector,
            label,
            generator_id,
            tag: tag.into(),
        });
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.vector.len() != self.dim {
                return Err(Error::Shape(format!(
                    "record {i} has length {}, set dim is {}",
                    r.vector.len(),
                    self.dim
                )));
            }
            if r.label > 1 {
                return Err(Error::Data(format!("record {i} has label {}", r.label)));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Vectors widened to `f64`.
    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .map(|r| r.vector.iter().map(|&v| v as f64).collect())
            .collect()
    }

    /// Vectors of one class, widened to `f64`.
    pub fn class_rows(&self, label: u8) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.vector.iter().map(|&v| v as f64).collect())
            .collect()
    }

    pub fn filter(&self, keep: impl Fn(&EmbeddingRecord) -> bool) -> Self {
        Self {
            dim: self.dim,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }
}
