//! Paired-modality datasets: synthetic generation, directory ingestion, batching
//! and a single-file archive format.

mod archive;
mod batch;
mod directory;
mod synth;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use archive::{read_archive, write_archive, ArchiveHeader};
pub use batch::{make_batches, BatchIter, BatchLabels, PairedBatch};
pub use directory::{load_directory_dataset, DirectoryLayout, LabelSource, LoadReport, Rejection};
pub use synth::{generate_synth_dataset, GenerativeModel, ModalitySet, SynthData, SynthTaskSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ordinary,
    Privileged,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    /// Row-major per-position class map of the given height and width.
    Map { height: usize, width: usize, classes: Vec<usize> },
}

/// One instance observed through both modalities. `x_o` and `x_p` are `[c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: u64,
    pub x_o: Tensor,
    pub x_p: Tensor,
    pub y: Label,
}

impl PairedSample {
    pub fn validate(&self, task: TaskKind) -> Result<()> {
        let (so, sp) = (self.x_o.shape(), self.x_p.shape());
        if so.len() != 3 || sp.len() != 3 {
            return Err(Error::Data(format!("sample {}: inputs must be [c, h, w]", self.id)));
        }
        if so[1..] != sp[1..] {
            return Err(Error::Data(format!(
                "sample {}: spatial dims differ ({:?} vs {:?})",
                self.id, so, sp
            )));
        }
        match (&self.y, task) {
            (Label::Class(_), TaskKind::Classification) => Ok(()),
            (Label::Map { height, width, classes }, TaskKind::Segmentation) => {
                if [*height, *width] != so[1..] || classes.len() != height * width {
                    return Err(Error::Data(format!(
                        "sample {}: label map {}x{} does not match input {:?}",
                        self.id, height, width, so
                    )));
                }
                Ok(())
            }
            _ => Err(Error::Data(format!("sample {}: label kind does not match task", self.id))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task_kind: TaskKind,
    pub n_classes: usize,
    pub ignore_label: Option<usize>,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn new(task_kind: TaskKind, n_classes: usize, samples: Vec<PairedSample>) -> Self {
        Dataset {
            task_kind,
            n_classes,
            ignore_label: None,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ordinary_dims(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.x_o.shape())
    }

    pub fn privileged_dims(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.x_p.shape())
    }

    /// Splits off the last `count` samples into a second dataset.
    pub fn split_tail(mut self, count: usize) -> (Dataset, Dataset) {
        let at = self.samples.len().saturating_sub(count);
        let tail = self.samples.split_off(at);
        let rest = Dataset {
            samples: tail,
            ..self.clone_header()
        };
        (self, rest)
    }

    pub fn clone_header(&self) -> Dataset {
        Dataset {
            task_kind: self.task_kind,
            n_classes: self.n_classes,
            ignore_label: self.ignore_label,
            samples: Vec::new(),
        }
    }

    /// Content digest over ids, arrays and labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.task_kind as u8]);
        h.update((self.n_classes as u64).to_le_bytes());
        for s in &self.samples {
            h.update(s.id.to_le_bytes());
            for t in [&s.x_o, &s.x_p] {
                for d in t.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
            match &s.y {
                Label::Class(c) => h.update((*c as u64).to_le_bytes()),
                Label::Map { classes, .. } => {
                    for c in classes {
                        h.update((*c as u64).to_le_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }
}
