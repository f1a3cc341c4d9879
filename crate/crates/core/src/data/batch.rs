use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Label, TaskKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum BatchLabels {
    Classes(Vec<usize>),
    /// Flattened `[b × h × w]` class maps.
    Maps {
        height: usize,
        width: usize,
        classes: Vec<usize>,
    },
}

impl BatchLabels {
    pub fn len(&self) -> usize {
        match self {
            BatchLabels::Classes(c) => c.len(),
            BatchLabels::Maps { height, width, classes } => classes.len() / (height * width).max(1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One entry per prediction row (samples, or positions in `[n, h, w]` order).
    pub fn rows(&self, ignore: Option<usize>) -> Vec<Option<usize>> {
        let classes = match self {
            BatchLabels::Classes(c) => c,
            BatchLabels::Maps { classes, .. } => classes,
        };
        classes
            .iter()
            .map(|&c| if Some(c) == ignore { None } else { Some(c) })
            .collect()
    }
}

/// Stacked paired samples. Row `i` of `x_o`, `x_p` and `y` belong to instance `ids[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub ids: Vec<u64>,
    pub x_o: Tensor,
    pub x_p: Tensor,
    pub y: BatchLabels,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn from_indices(dataset: &Dataset, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let samples: Vec<_> = idx.iter().map(|&i| &dataset.samples[i]).collect();
        let x_o = Tensor::stack(&samples.iter().map(|s| &s.x_o).collect::<Vec<_>>())?;
        let x_p = Tensor::stack(&samples.iter().map(|s| &s.x_p).collect::<Vec<_>>())?;
        let y = match dataset.task_kind {
            TaskKind::Classification => BatchLabels::Classes(
                samples
                    .iter()
                    .map(|s| match s.y {
                        Label::Class(c) => Ok(c),
                        _ => Err(Error::Data(format!("sample {} has a map label", s.id))),
                    })
                    .collect::<Result<_>>()?,
            ),
            TaskKind::Segmentation => {
                let mut classes = Vec::new();
                let mut hw = None;
                for s in &samples {
                    let Label::Map { height, width, classes: c } = &s.y else {
                        return Err(Error::Data(format!("sample {} has a class label", s.id)));
                    };
                    if *hw.get_or_insert((*height, *width)) != (*height, *width) {
                        return Err(Error::Data("label maps differ in size".into()));
                    }
                    classes.extend_from_slice(c);
                }
                let (height, width) = hw.unwrap_or((0, 0));
                BatchLabels::Maps { height, width, classes }
            }
        };
        Ok(PairedBatch {
            ids: samples.iter().map(|s| s.id).collect(),
            x_o,
            x_p,
            y,
        })
    }

    /// The whole dataset as one batch, in order.
    pub fn full(dataset: &Dataset) -> Result<Self> {
        Self::from_indices(dataset, &(0..dataset.len()).collect::<Vec<_>>())
    }
}

/// Single-consumer iterator over shuffled batches.
pub struct BatchIter<'d> {
    dataset: &'d Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    drop_incomplete: bool,
}

impl<'d> Iterator for BatchIter<'d> {
    type Item = Result<PairedBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_incomplete && remaining < self.batch_size) {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(PairedBatch::from_indices(self.dataset, idx))
    }
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        if self.drop_incomplete {
            self.order.len() / self.batch_size
        } else {
            self.order.len().div_ceil(self.batch_size)
        }
    }
}

/// Shuffled mini-batches; the final short batch is kept unless `drop_incomplete`.
pub fn make_batches(
    dataset: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    drop_incomplete: bool,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if drop_incomplete && batch_size > dataset.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds dataset size {} with drop_incomplete",
            batch_size,
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(BatchIter {
        dataset,
        order,
        batch_size,
        pos: 0,
        drop_incomplete,
    })
}
