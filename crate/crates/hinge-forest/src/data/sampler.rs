use rand::seq::SliceRandom;

use super::{DatasetSplit, SplitTag};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::seed_stream;
use crate::tensor::Tensor;

/// Deterministically permutes `data` and cuts it into consecutive splits of
/// `floor(fraction * N)` rows each. Fractions must be positive and sum to at
/// most one; splits are tagged train, validation, test in order.
pub fn shuffle_split<R: Real>(
    data: &DatasetSplit<R>,
    fractions: &[f64],
    rng_seed: u64,
) -> Result<Vec<DatasetSplit<R>>> {
    if fractions.is_empty() || fractions.len() > 3 {
        return Err(Error::Config(format!(
            "expected between one and three split fractions, got {}",
            fractions.len()
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f <= 0.0) || sum > 1.0 + 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to at most 1, got {fractions:?}"
        )));
    }

    let n = data.len();
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(&mut seed_stream(rng_seed, "split"));

    let tags = [SplitTag::Train, SplitTag::Validation, SplitTag::Test];
    let mut splits = Vec::with_capacity(fractions.len());
    let mut offset = 0usize;
    for (i, &fraction) in fractions.iter().enumerate() {
        let size = (fraction * n as f64).floor() as usize;
        if size == 0 {
            return Err(Error::Config(format!(
                "split fraction {fraction} of {n} rows produces an empty split"
            )));
        }
        splits.push(data.select(&permutation[offset..offset + size], tags[i])?);
        offset += size;
    }
    Ok(splits)
}

/// Endless mini-batch stream over one split.
///
/// Each epoch draws a fresh deterministic permutation from the seed and the
/// epoch number; the final short batch of an epoch is emitted as-is, so one
/// epoch spans `ceil(N / batch_size)` batches and visits every row exactly
/// once. A batch size larger than the split clamps to the whole split.
pub struct MinibatchIter<'a, R: Real> {
    split: &'a DatasetSplit<R>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    clamped: bool,
}

impl<'a, R: Real> MinibatchIter<'a, R> {
    pub fn new(split: &'a DatasetSplit<R>, batch_size: usize, rng_seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if split.is_empty() {
            return Err(Error::Config("cannot iterate an empty split".into()));
        }
        let clamped = batch_size > split.len();
        let mut iter = MinibatchIter {
            split,
            batch_size: batch_size.min(split.len()),
            seed: rng_seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            clamped,
        };
        iter.reshuffle();
        Ok(iter)
    }

    /// True when the requested batch size exceeded the split and was clamped.
    pub fn clamped(&self) -> bool {
        self.clamped
    }

    pub fn effective_batch_size(&self) -> usize {
        self.batch_size
    }

    /// Batches per epoch: `ceil(N / batch_size)`.
    pub fn batches_per_epoch(&self) -> usize {
        self.split.len().div_ceil(self.batch_size)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.split.len()).collect();
        self.order
            .shuffle(&mut seed_stream(self.seed, &format!("batch/epoch{}", self.epoch)));
        self.cursor = 0;
    }
}

impl<R: Real> Iterator for MinibatchIter<'_, R> {
    type Item = (Tensor<R>, Tensor<R>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = &self.order[self.cursor..end];
        self.cursor = end;
        Some(self.split.gather(indices))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Labels;

    fn dataset(n: usize) -> DatasetSplit<f64> {
        DatasetSplit {
            features: Tensor::from_vec(&[n, 1], (0..n).map(|i| i as f64).collect()).unwrap(),
            labels: Labels::Classes((0..n).map(|i| i % 3).collect()),
            tag: SplitTag::Train,
            class_names: vec!["0".into(), "1".into(), "2".into()],
        }
    }

    #[test]
    fn single_fraction_is_a_permutation() {
        let data = dataset(10);
        let splits = shuffle_split(&data, &[1.0], 5).unwrap();
        assert_eq!(splits.len(), 1);
        let mut values: Vec<f64> = splits[0].features.data().to_vec();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(values, (0..10).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_gives_identical_splits() {
        let data = dataset(30);
        let a = shuffle_split(&data, &[0.5, 0.25, 0.25], 11).unwrap();
        let b = shuffle_split(&data, &[0.5, 0.25, 0.25], 11).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.features.data(), y.features.data());
        }
    }

    #[test]
    fn abalone_sized_split_uses_the_floor_rule() {
        let data = dataset(4177);
        let splits = shuffle_split(&data, &[0.5, 0.25, 0.25], 1).unwrap();
        assert_eq!(splits[0].len(), 2088);
        assert_eq!(splits[1].len(), 1044);
        assert_eq!(splits[2].len(), 1044);
        assert_eq!(splits[0].tag, SplitTag::Train);
        assert_eq!(splits[1].tag, SplitTag::Validation);
        assert_eq!(splits[2].tag, SplitTag::Test);
    }

    #[test]
    fn splits_are_disjoint_and_cover_the_permuted_prefix() {
        let data = dataset(20);
        let splits = shuffle_split(&data, &[0.5, 0.3], 3).unwrap();
        let mut seen: Vec<f64> = Vec::new();
        for s in &splits {
            seen.extend_from_slice(s.features.data());
        }
        assert_eq!(seen.len(), 10 + 6);
        let mut unique = seen.clone();
        unique.sort_by(|a, b| a.partial_cmp(b).unwrap());
        unique.dedup();
        assert_eq!(unique.len(), seen.len());
    }

    #[test]
    fn empty_split_is_a_configuration_error() {
        let data = dataset(5);
        assert!(shuffle_split(&data, &[0.9, 0.05], 1).is_err());
    }

    #[test]
    fn remainder_batch_is_emitted_as_is() {
        let data = dataset(10);
        let mut iter = MinibatchIter::new(&data, 3, 7).unwrap();
        let sizes: Vec<usize> = (0..4).map(|_| iter.next().unwrap().0.extent0()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert_eq!(iter.batches_per_epoch(), 4);
    }

    #[test]
    fn mnist_batch_count_per_epoch() {
        let data = dataset(60_000);
        let iter = MinibatchIter::new(&data, 53, 1).unwrap();
        assert_eq!(iter.batches_per_epoch(), 1133);
    }

    #[test]
    fn epochs_cover_every_row_once_with_fresh_orders() {
        let data = dataset(10);
        let mut iter = MinibatchIter::new(&data, 4, 13).unwrap();
        let mut epoch1: Vec<f64> = Vec::new();
        for _ in 0..3 {
            epoch1.extend_from_slice(iter.next().unwrap().0.data());
        }
        let mut epoch2: Vec<f64> = Vec::new();
        for _ in 0..3 {
            epoch2.extend_from_slice(iter.next().unwrap().0.data());
        }
        assert_ne!(epoch1, epoch2);
        let mut sorted1 = epoch1.clone();
        sorted1.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut sorted2 = epoch2.clone();
        sorted2.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let all: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(sorted1, all);
        assert_eq!(sorted2, all);

        // Reproducible across constructions.
        let mut again = MinibatchIter::new(&data, 4, 13).unwrap();
        let mut epoch1_again: Vec<f64> = Vec::new();
        for _ in 0..3 {
            epoch1_again.extend_from_slice(again.next().unwrap().0.data());
        }
        assert_eq!(epoch1, epoch1_again);
    }

    #[test]
    fn oversized_batch_clamps_to_the_split() {
        let data = dataset(4);
        let mut iter = MinibatchIter::new(&data, 100, 1).unwrap();
        assert!(iter.clamped());
        assert_eq!(iter.effective_batch_size(), 4);
        assert_eq!(iter.next().unwrap().0.extent0(), 4);
    }
}
