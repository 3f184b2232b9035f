//! Asynchronous multimodal samples: synthetic generation, the on-disk
//! manifest/payload format, and padded batching.

mod batch;
mod generator;
mod io;

pub use batch::{make_batches, Batch};
pub use generator::{score_class, generate_planted, generate_synthetic, keyword_vector, GeneratorSpec, Planted};
pub use io::{load_dataset, save_dataset, Dataset, ManifestHeader, ManifestRecord};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest and highest sentiment score.
pub const SCORE_RANGE: (f64, f64) = (-3.0, 3.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    L,
    V,
    A,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::L, Modality::V, Modality::A];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::L => "L",
            Modality::V => "V",
            Modality::A => "A",
        }
    }

    /// One-hot modality label (`y_L = [1,0,0]`, ...).
    pub fn one_hot(self) -> [f64; 3] {
        let mut y = [0.0; 3];
        y[self.index()] = 1.0;
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TaskMode {
    Regression,
    Classification { classes: usize },
}

impl TaskMode {
    /// Width of the prediction head.
    pub fn output_dim(self) -> usize {
        match self {
            TaskMode::Regression => 1,
            TaskMode::Classification { classes } => classes,
        }
    }

    pub fn check_label(self, label: Label) -> std::result::Result<(), String> {
        match (self, label) {
            (TaskMode::Regression, Label::Score(s)) => {
                if (SCORE_RANGE.0..=SCORE_RANGE.1).contains(&s) {
                    Ok(())
                } else {
                    Err(format!("score {s} outside [{}, {}]", SCORE_RANGE.0, SCORE_RANGE.1))
                }
            }
            (TaskMode::Classification { classes }, Label::Class(c)) => {
                if c < classes {
                    Ok(())
                } else {
                    Err(format!("class {c} outside 0..{classes}"))
                }
            }
            _ => Err(format!("label {label:?} does not match mode {self:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Score(f64),
    Class(usize),
}

impl Label {
    /// Regression score clamped to the annotation range.
    pub fn score(s: f64) -> Self {
        Label::Score(s.clamp(SCORE_RANGE.0, SCORE_RANGE.1))
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Label::Score(s) => s,
            Label::Class(c) => c as f64,
        }
    }
}

/// A `len × dim` feature matrix in row-major `f32` storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    len: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Sequence {
    pub fn new(len: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if len == 0 || dim == 0 || data.len() != len * dim {
            return Err(Error::InvalidArgument(format!(
                "sequence {len}x{dim} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { len, dim, data })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    /// Sequences in `Modality::ALL` order.
    pub seqs: [Sequence; 3],
    pub label: Label,
}

impl MultimodalSample {
    pub fn seq(&self, m: Modality) -> &Sequence {
        &self.seqs[m.index()]
    }

    pub fn lengths(&self) -> [usize; 3] {
        [self.seqs[0].len(), self.seqs[1].len(), self.seqs[2].len()]
    }
}

/// Shape information shared by every sample of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub mode: TaskMode,
    pub dims: [usize; 3],
    /// Dataset-wide maximum lengths `T̂_m` every batch is padded to.
    pub max_lengths: [usize; 3],
}

impl DatasetInfo {
    /// Checks that a sample fits this dataset.
    pub fn validate(&self, s: &MultimodalSample) -> Result<()> {
        for m in Modality::ALL {
            let seq = s.seq(m);
            if seq.dim() != self.dims[m.index()] {
                return Err(Error::Record {
                    record: s.id.clone(),
                    reason: format!(
                        "{} features have dim {}, expected {}",
                        m.name(),
                        seq.dim(),
                        self.dims[m.index()]
                    ),
                });
            }
            if seq.len() > self.max_lengths[m.index()] {
                return Err(Error::Record {
                    record: s.id.clone(),
                    reason: format!(
                        "{} length {} exceeds maximum {}",
                        m.name(),
                        seq.len(),
                        self.max_lengths[m.index()]
                    ),
                });
            }
        }
        self.mode.check_label(s.label).map_err(|reason| Error::Record {
            record: s.id.clone(),
            reason,
        })
    }
}
