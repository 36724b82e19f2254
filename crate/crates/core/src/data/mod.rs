//! Video records, datasets, the VSEQ container and synthetic generators.

mod cowatch;
mod synth;
mod vseq;

pub use cowatch::{gen_cowatch, gen_cowatch_with, CowatchConfig, CowatchData, Interaction, Triplet};
pub use synth::{gen_classification, gen_classification_with_truth, SynthConfig, SynthTruth};
pub use vseq::{decode_vseq, encode_vseq, read_vseq, write_vseq, VSEQ_MAGIC, VSEQ_VERSION};

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// One video: an id, its label set and a T×D matrix of frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub labels: Vec<u32>,
    pub frames: Matrix,
}

impl VideoRecord {
    pub fn new(id: impl Into<String>, labels: Vec<u32>, frames: Matrix) -> Self {
        Self { id: id.into(), labels, frames }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn validate(&self, dim: usize, num_classes: usize) -> Result<()> {
        if self.frames.rows() == 0 {
            return Err(Error::data(format!("video {:?} has no frames", self.id)));
        }
        if self.frames.cols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.frames.cols() });
        }
        if !self.frames.is_finite() {
            return Err(Error::data(format!("video {:?} has non-finite frame values", self.id)));
        }
        let mut seen = HashSet::with_capacity(self.labels.len());
        for &l in &self.labels {
            if l as usize >= num_classes {
                return Err(Error::data(format!(
                    "video {:?} label {l} out of range (num_classes = {num_classes})",
                    self.id
                )));
            }
            if !seen.insert(l) {
                return Err(Error::data(format!("video {:?} repeats label {l}", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<VideoRecord>,
    pub num_classes: usize,
    pub dim: usize,
}

impl Dataset {
    pub fn new(records: Vec<VideoRecord>, num_classes: usize, dim: usize) -> Result<Self> {
        let ds = Self { records, num_classes, dim };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim must be positive"));
        }
        for r in &self.records {
            r.validate(self.dim, self.num_classes)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Replaces the class count, checking every label against it.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        self.num_classes = num_classes;
        self.validate()?;
        Ok(self)
    }

    /// Splits off the last `fraction` of records (rounded down) as a second dataset.
    pub fn split_tail(&self, fraction: f64) -> (Dataset, Dataset) {
        let n_tail = ((self.records.len() as f64) * fraction).floor() as usize;
        let cut = self.records.len() - n_tail;
        let head = Dataset { records: self.records[..cut].to_vec(), ..self.clone_header() };
        let tail = Dataset { records: self.records[cut..].to_vec(), ..self.clone_header() };
        (head, tail)
    }

    fn clone_header(&self) -> Dataset {
        Dataset { records: Vec::new(), num_classes: self.num_classes, dim: self.dim }
    }

    /// All frames of all records stacked into one matrix.
    pub fn stacked_frames(&self) -> Matrix {
        let total: usize = self.records.iter().map(|r| r.num_frames()).sum();
        let mut data = Vec::with_capacity(total * self.dim);
        for r in &self.records {
            data.extend_from_slice(r.frames.as_slice());
        }
        Matrix::from_vec(total, self.dim, data).expect("consistent dims")
    }
}
