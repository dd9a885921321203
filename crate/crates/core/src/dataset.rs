//! Labelled feature vectors.

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Multi-hot class membership over `c` classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiHot(Vec<bool>);

impl MultiHot {
    pub fn new(bits: Vec<bool>) -> Self {
        MultiHot(bits)
    }

    /// Builds a label vector of length `num_classes` with the given classes set.
    pub fn from_classes(num_classes: usize, classes: &[usize]) -> Result<Self> {
        let mut bits = vec![false; num_classes];
        for &class in classes {
            if class >= num_classes {
                return Err(Error::OutOfRange {
                    index: class,
                    len: num_classes,
                });
            }
            bits[class] = true;
        }
        Ok(MultiHot(bits))
    }

    pub fn single(num_classes: usize, class: usize) -> Result<Self> {
        Self::from_classes(num_classes, &[class])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn is_set(&self, class: usize) -> bool {
        self.0[class]
    }

    /// Indices of the positive classes, ascending.
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// True when the two label sets share at least one class.
    pub fn intersects(&self, other: &MultiHot) -> bool {
        self.0.iter().zip(&other.0).any(|(&a, &b)| a && b)
    }
}

/// `n` feature vectors of dimension `d` with multi-hot labels over `c` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<MultiHot>,
    num_classes: usize,
}

impl Dataset {
    /// Validates that every item carries at least one label of the right length.
    pub fn new(features: Array2<f64>, labels: Vec<MultiHot>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.nrows() {
            return Err(Error::dim("dataset labels", features.nrows(), labels.len()));
        }
        for label in &labels {
            if label.len() != num_classes {
                return Err(Error::dim("dataset label length", num_classes, label.len()));
            }
            if label.count() == 0 {
                return Err(Error::NoLabel);
            }
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn num_items(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[MultiHot] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &MultiHot {
        &self.labels[i]
    }
}
