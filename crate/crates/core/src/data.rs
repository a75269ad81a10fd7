//! Labeled image datasets and batches.

use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("images must be rank 4 (N, H, W, C), got {0:?}")]
    Rank(Vec<usize>),
    #[error("{images} images but {labels} labels")]
    Count { images: usize, labels: usize },
    #[error("label {label} at index {index} outside [0, {classes})")]
    Label { index: usize, label: usize, classes: usize },
    #[error("pixel value {value} at offset {offset} outside the [0, 1] contract")]
    Pixel { offset: usize, value: f32 },
    #[error("class {0} has no sample in a train split")]
    MissingClass(usize),
    #[error("class count must be >= 2, got {0}")]
    Classes(usize),
}

/// Images `(N, H, W, C)` in `[0, 1]` with labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self, DataError> {
        if images.shape().len() != 4 {
            return Err(DataError::Rank(images.shape().to_vec()));
        }
        if classes < 2 {
            return Err(DataError::Classes(classes));
        }
        if images.batch() != labels.len() {
            return Err(DataError::Count {
                images: images.batch(),
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::Label { index, label, classes });
        }
        if let Some((offset, &value)) = images
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::Pixel { offset, value });
        }
        if split == Split::Train {
            let mut seen = vec![false; classes];
            for &l in &labels {
                seen[l] = true;
            }
            if let Some(c) = seen.iter().position(|s| !s) {
                return Err(DataError::MissingClass(c));
            }
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`
    pub fn image_shape(&self) -> &[usize] {
        self.images.sample_shape()
    }

    /// Same images, new labels. Labels are validated against `classes`.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self, DataError> {
        Self::new(self.images.clone(), labels, self.classes, self.split)
    }

    pub fn batch(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            inputs: self.images.select(indices).expect("batch index in range"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.to_vec(),
        }
    }

    pub fn as_batch(&self) -> LabeledBatch {
        LabeledBatch {
            inputs: self.images.clone(),
            labels: self.labels.clone(),
            ids: (0..self.len()).collect(),
        }
    }

    /// Sorted, seed-determined subset of `n` distinct indices (all indices
    /// when `n >= len`).
    pub fn subsample_indices(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if n >= idx.len() {
            return idx;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.sort_unstable();
        idx
    }
}

/// A batch of inputs with labels. `ids` are the samples' positions in
/// their source dataset and key every per-sample random stream.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
