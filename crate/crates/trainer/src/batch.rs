//! Mini-batch assembly and the two samplers.

use dcr_core::Scalar;
use dcr_datagen::{derive_seed, ConceptDataset, LabeledImageSet};
use dcr_nets::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TrainError};

/// Random streams drawn from the training seed.
pub(crate) mod stream {
    pub const TRAIN_ORDER: u64 = 101;
    pub const CONCEPT: u64 = 102;
    pub const CONCEPT_EVAL: u64 = 103;
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub labels: Vec<u8>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gathers rows of a flat `N x item` f32 array into a tensor of shape `[n, c, h, w]`.
pub fn gather<T: Scalar>(images: &[f32], shape: [usize; 3], indices: &[usize]) -> Result<Tensor<T>> {
    let item: usize = shape.iter().product();
    let mut data = Vec::with_capacity(indices.len() * item);
    for &i in indices {
        let row = images
            .get(i * item..(i + 1) * item)
            .ok_or_else(|| TrainError::InvalidInput(format!("example {i} out of range")))?;
        data.extend(row.iter().map(|&p| T::lit(p as f64)));
    }
    Ok(Tensor::from_vec([indices.len(), shape[0], shape[1], shape[2]], data)?)
}

pub fn labeled_batch<T: Scalar>(set: &LabeledImageSet, indices: &[usize]) -> Result<Batch<T>> {
    Ok(Batch {
        x: gather(&set.images, set.shape(), indices)?,
        labels: indices.iter().map(|&i| set.labels[i]).collect(),
    })
}

/// Shuffled passes over `0..n`, reshuffled every epoch from `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, stream::TRAIN_ORDER), epoch as u64)));
    // a trailing batch of one cannot be batch-normalised
    order.chunks(batch_size).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
}

/// Endless reshuffling cycle over one index list.
#[derive(Clone, Debug)]
struct Cycler {
    items: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.items.len() {
            self.items.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.items[self.pos - 1]
    }
}

/// Infinite sampler of exactly balanced concept batches, independent of the training order.
#[derive(Clone, Debug)]
pub struct ConceptSampler {
    pos: Cycler,
    neg: Cycler,
    rng: ChaCha8Rng,
}

impl ConceptSampler {
    pub fn new(set: &ConceptDataset, seed: u64) -> Result<Self> {
        let split = |c: u8| (0..set.len()).filter(|&i| set.concept_labels[i] == c).collect::<Vec<_>>();
        let (pos, neg) = (split(1), split(0));
        if pos.is_empty() || neg.is_empty() {
            return Err(TrainError::InvalidInput("concept set needs examples of both classes".into()));
        }
        let n = (pos.len(), neg.len());
        Ok(ConceptSampler {
            pos: Cycler { items: pos, pos: n.0 },
            neg: Cycler { items: neg, pos: n.1 },
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::CONCEPT)),
        })
    }

    /// Indices of the next batch, alternating concept and non-concept rows.
    pub fn next_indices(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|i| if i % 2 == 0 { self.pos.next(&mut self.rng) } else { self.neg.next(&mut self.rng) })
            .collect()
    }

    pub fn next_batch<T: Scalar>(&mut self, set: &ConceptDataset, size: usize) -> Result<Batch<T>> {
        let idx = self.next_indices(size);
        Ok(Batch {
            x: gather(&set.images, set.shape(), &idx)?,
            labels: idx.iter().map(|&i| set.concept_labels[i]).collect(),
        })
    }
}
