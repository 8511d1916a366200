//! Dataset provisioning: in-memory attributed image sets, a deterministic
//! synthetic generator, and IDX file loading.

mod idx;
mod synthetic;

pub use idx::{load_idx, write_idx_images, write_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{generate_synthetic, SyntheticAttr, SyntheticSpec};

use thiserror::Error;

use crate::rng::SeedRng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("truncated file: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("batch size {batch} exceeds dataset size {n}")]
    BatchTooLarge { batch: usize, n: usize },
    #[error("unsupported format: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images in [-1,1] paired with binary attribute vectors.
#[derive(Debug, Clone)]
pub struct AttributedDataset {
    images: Tensor,
    attributes: Tensor,
    attr_names: Vec<String>,
    split: Split,
}

impl AttributedDataset {
    /// Validates every invariant; loaders go through here rather than
    /// trusting their inputs.
    pub fn new(images: Tensor, attributes: Tensor, attr_names: Vec<String>, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be rank 4 (N,C,H,W), got {:?}",
                images.shape()
            )));
        }
        if attributes.rank() != 2 {
            return Err(DataError::Invalid(format!(
                "attributes must be rank 2 (N,A), got {:?}",
                attributes.shape()
            )));
        }
        if images.shape()[0] != attributes.shape()[0] {
            return Err(DataError::SizeMismatch(format!(
                "{} images vs {} attribute rows",
                images.shape()[0],
                attributes.shape()[0]
            )));
        }
        if attributes.shape()[1] != attr_names.len() {
            return Err(DataError::SizeMismatch(format!(
                "{} attribute columns vs {} names",
                attributes.shape()[1],
                attr_names.len()
            )));
        }
        if let Some(v) = images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(DataError::Invalid(format!("pixel {v} outside [-1,1]")));
        }
        if let Some(v) = attributes.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(DataError::Invalid(format!("attribute {v} not binary")));
        }
        Ok(AttributedDataset {
            images,
            attributes,
            attr_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn attr_count(&self) -> usize {
        self.attributes.shape()[1]
    }

    pub fn attr_names(&self) -> &[String] {
        &self.attr_names
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attr_names.iter().position(|n| n == name)
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn attributes(&self) -> &Tensor {
        &self.attributes
    }

    /// Single image as [1,C,H,W].
    pub fn image(&self, i: usize) -> Tensor {
        let (c, h, w) = (self.channels(), self.images.shape()[2], self.images.shape()[3]);
        let plane = c * h * w;
        let data = self.images.data()[i * plane..(i + 1) * plane].to_vec();
        Tensor::from_vec(&[1, c, h, w], data).unwrap()
    }

    /// Attribute row as [1,A].
    pub fn attr_row(&self, i: usize) -> Tensor {
        let a = self.attr_count();
        let data = self.attributes.data()[i * a..(i + 1) * a].to_vec();
        Tensor::from_vec(&[1, a], data).unwrap()
    }

    /// Gather rows by index into a batch (images, attributes).
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let (c, h, w) = (self.channels(), self.images.shape()[2], self.images.shape()[3]);
        let plane = c * h * w;
        let a = self.attr_count();
        let mut img = Vec::with_capacity(indices.len() * plane);
        let mut attrs = Vec::with_capacity(indices.len() * a);
        for &i in indices {
            img.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
            attrs.extend_from_slice(&self.attributes.data()[i * a..(i + 1) * a]);
        }
        (
            Tensor::from_vec(&[indices.len(), c, h, w], img).unwrap(),
            Tensor::from_vec(&[indices.len(), a], attrs).unwrap(),
        )
    }

    /// Split off the first `n` rows as one dataset and the rest as another.
    pub fn split_at(&self, n: usize, first: Split, second: Split) -> (AttributedDataset, AttributedDataset) {
        let head: Vec<usize> = (0..n.min(self.len())).collect();
        let tail: Vec<usize> = (n.min(self.len())..self.len()).collect();
        let (hi, ha) = self.gather(&head);
        let (ti, ta) = self.gather(&tail);
        (
            AttributedDataset::new(hi, ha, self.attr_names.clone(), first).unwrap(),
            AttributedDataset::new(ti, ta, self.attr_names.clone(), second).unwrap(),
        )
    }
}

/// Mini-batch order for one epoch: a seeded shuffle of the row indices with
/// the ragged tail dropped. The order is a pure function of (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeedRng::derived(seed, epoch);
    rng.shuffle(&mut order);
    order
}

pub struct BatchIterator<'a> {
    dataset: &'a AttributedDataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

/// Seeded per-epoch batches; the final ragged batch is dropped so batch
/// statistics stay clean.
pub fn batch_iterator(
    dataset: &AttributedDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIterator<'_>> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(DataError::BatchTooLarge {
            batch: batch_size,
            n: dataset.len(),
        });
    }
    Ok(BatchIterator {
        dataset,
        order: epoch_order(dataset.len(), seed, epoch),
        batch_size,
        cursor: 0,
    })
}

impl Iterator for BatchIterator<'_> {
    type Item = (Tensor, Tensor);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor + self.batch_size > self.order.len() {
            return None;
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        Some(self.dataset.gather(idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(n: usize) -> AttributedDataset {
        let images = Tensor::zeros(&[n, 1, 4, 4]);
        let attrs = Tensor::from_vec(&[n, 1], (0..n).map(|i| (i % 2) as f64).collect()).unwrap();
        AttributedDataset::new(images, attrs, vec!["flag".into()], Split::Train).unwrap()
    }

    #[test]
    fn constructor_validates() {
        let img = Tensor::zeros(&[2, 1, 4, 4]);
        let bad_attr = Tensor::filled(&[2, 1], 0.5);
        assert!(AttributedDataset::new(img.clone(), bad_attr, vec!["a".into()], Split::Train).is_err());
        let out_of_range = Tensor::filled(&[2, 1, 4, 4], 2.0);
        let ok_attr = Tensor::zeros(&[2, 1]);
        assert!(AttributedDataset::new(out_of_range, ok_attr.clone(), vec!["a".into()], Split::Train).is_err());
        let mismatched = Tensor::zeros(&[3, 1]);
        assert!(AttributedDataset::new(img, mismatched, vec!["a".into()], Split::Train).is_err());
    }

    #[test]
    fn single_batch_is_a_permutation() {
        let ds = toy_dataset(6);
        let batches: Vec<_> = batch_iterator(&ds, 6, 1, 0).unwrap().collect();
        assert_eq!(batches.len(), 1);
        // All six attribute values present.
        let sum: f64 = batches[0].1.data().iter().sum();
        assert_eq!(sum, 3.0);
    }

    #[test]
    fn iteration_is_deterministic_per_seed_epoch() {
        let ds = toy_dataset(10);
        let run = |seed, epoch| -> Vec<f64> {
            batch_iterator(&ds, 4, seed, epoch)
                .unwrap()
                .flat_map(|(_, a)| a.data().to_vec())
                .collect()
        };
        assert_eq!(run(1, 0), run(1, 0));
        assert_ne!(run(1, 0), run(1, 1));
        assert_ne!(run(1, 0), run(2, 0));
    }

    #[test]
    fn ragged_tail_dropped() {
        let ds = toy_dataset(10);
        let batches: Vec<_> = batch_iterator(&ds, 4, 7, 3).unwrap().collect();
        assert_eq!(batches.len(), 2);
        assert!(batch_iterator(&ds, 11, 0, 0).is_err());
    }

    #[test]
    fn gather_and_split() {
        let ds = toy_dataset(8);
        let (img, attrs) = ds.gather(&[1, 3, 5]);
        assert_eq!(img.shape(), &[3, 1, 4, 4]);
        assert_eq!(attrs.data(), &[1.0, 1.0, 1.0]);
        let (train, test) = ds.split_at(6, Split::Train, Split::Test);
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 2);
        assert_eq!(test.split(), Split::Test);
    }
}
