use rand::seq::SliceRandom;

use super::{Dataset, LabeledBatch};
use crate::rng;
use crate::tensor::Scalar;

/// Permutation of `0..n` determined by `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng(rng::derive(seed, epoch as u64)));
    idx
}

/// Batches of one epoch in shuffled order; the last batch may be partial.
pub struct BatchIter<'a, T: Scalar> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> BatchIter<'_, T> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = LabeledBatch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.ds.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(b)
    }
}

pub fn batch_iter<T: Scalar>(ds: &Dataset, batch_size: usize, shuffle_seed: u64, epoch: usize) -> BatchIter<'_, T> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    BatchIter {
        ds,
        order: epoch_permutation(ds.len(), shuffle_seed, epoch),
        batch_size,
        pos: 0,
        _marker: std::marker::PhantomData,
    }
}

/// Unshuffled batches, for evaluation.
pub(crate) fn sequential_batches(n: usize, batch_size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(batch_size.max(1)).map(move |s| (s..(s + batch_size).min(n)).collect())
}
