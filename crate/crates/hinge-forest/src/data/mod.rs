//! Dataset ingestion and batching: delimited text and IDX image files,
//! deterministic shuffling and splitting, and mini-batch iteration.
//!
//! Loaders do not standardize features; normalization is the graph's job so
//! training and testing share one code path.

mod csv;
mod idx;
mod sampler;

pub use csv::{load_csv, ColumnRef, CsvOptions};
pub use idx::load_idx;
pub use sampler::{shuffle_split, MinibatchIter};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "val",
            SplitTag::Test => "test",
        }
    }
}

/// Targets attached to a dataset: class indices or real regression values.
#[derive(Clone, Debug)]
pub enum Labels<R: Real> {
    Classes(Vec<usize>),
    Reals(Vec<R>),
}

impl<R: Real> Labels<R> {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Reals(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> Labels<R> {
        match self {
            Labels::Classes(v) => Labels::Classes(indices.iter().map(|&i| v[i]).collect()),
            Labels::Reals(v) => Labels::Reals(indices.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Tensor form fed to the graph's label input: `[N]` of class indices
    /// for classification, `[N, 1]` of targets for regression.
    pub fn to_tensor(&self) -> Tensor<R> {
        match self {
            Labels::Classes(v) => Tensor::from_vec(
                &[v.len()],
                v.iter().map(|&c| R::from_f64(c as f64)).collect(),
            )
            .unwrap(),
            Labels::Reals(v) => Tensor::from_vec(&[v.len(), 1], v.clone()).unwrap(),
        }
    }
}

/// One split of a dataset: features, aligned labels, and a tag.
#[derive(Clone, Debug)]
pub struct DatasetSplit<R: Real> {
    pub features: Tensor<R>,
    pub labels: Labels<R>,
    pub tag: SplitTag,
    /// Class names in index order, when labels were mapped from text.
    pub class_names: Vec<String>,
}

impl<R: Real> DatasetSplit<R> {
    pub fn len(&self) -> usize {
        self.features.extent0()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of distinct classes: the mapped alphabet size if known,
    /// otherwise max label + 1.
    pub fn classes(&self) -> Option<usize> {
        match &self.labels {
            Labels::Classes(v) => {
                if !self.class_names.is_empty() {
                    Some(self.class_names.len())
                } else {
                    v.iter().max().map(|&m| m + 1)
                }
            }
            Labels::Reals(_) => None,
        }
    }

    /// Shape of one example (feature extents without the leading N).
    pub fn example_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// New split with the given rows, in order.
    pub fn select(&self, indices: &[usize], tag: SplitTag) -> Result<DatasetSplit<R>> {
        let shape = self.features.shape();
        let row: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!(
                    "row index {i} out of range for {} rows",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.features.data()[i * row..(i + 1) * row]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[0] = indices.len();
        Ok(DatasetSplit {
            features: Tensor::from_vec(&new_shape, data)?,
            labels: self.labels.select(indices),
            tag,
            class_names: self.class_names.clone(),
        })
    }

    /// Copies rows `indices` into batch tensors `(features, labels)`.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<R>, Tensor<R>) {
        let shape = self.features.shape();
        let row: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.features.data()[i * row..(i + 1) * row]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[0] = indices.len();
        let features = Tensor::from_vec(&new_shape, data).unwrap();
        let labels = self.labels.select(indices).to_tensor();
        (features, labels)
    }
}
