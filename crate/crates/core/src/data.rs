//! Labelled in-memory datasets.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Feature matrix `[n, d]` with class labels and a per-sample group id.
///
/// The group is the generating cluster for synthetic data and the user id (or
/// the label, if absent) for ingested CSV data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>, groups: Vec<usize>, num_classes: usize) -> Result<Self> {
        let x = x.as_matrix();
        if labels.len() != x.rows() || groups.len() != x.rows() {
            return Err(Error::shape("dataset rows", &[x.rows()], &[labels.len(), groups.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index {
                what: "label",
                index: bad,
                bound: num_classes,
            });
        }
        Ok(Self {
            x,
            labels,
            groups,
            num_classes,
        })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            x: Tensor::zeros(&[0, dim]),
            labels: Vec::new(),
            groups: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Appends the rows of `other`.
    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if other.is_empty() {
            return Ok(());
        }
        if self.dim() != other.dim() {
            return Err(Error::shape("dataset extend", &[self.dim()], &[other.dim()]));
        }
        let mut data = std::mem::replace(&mut self.x, Tensor::zeros(&[0])).into_data();
        data.extend_from_slice(other.x.data());
        self.x = Tensor::new(vec![self.labels.len() + other.len(), other.dim()], data)?;
        self.labels.extend_from_slice(&other.labels);
        self.groups.extend_from_slice(&other.groups);
        Ok(())
    }

    /// Row indices per class label.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Sorted distinct labels present.
    pub fn distinct_labels(&self) -> Vec<usize> {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l
    }
}
