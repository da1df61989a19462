use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Images `[N, C, side, side]` in `[0, 1]` with labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.ndim() != 4 || features.shape()[2] != features.shape()[3] {
            return Err(Error::dim(format!(
                "dataset features must be [N, C, S, S], got {:?}",
                features.shape()
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn side(&self) -> usize {
        self.features.shape()[2]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (x, y) = self.batch(indices)?;
        Self::new(x, y, self.classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Indices of each class, ascending.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Training sets must contain every class.
    pub fn ensure_all_classes(&self) -> Result<()> {
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(c) => Err(Error::Input(format!("class {c} has no examples"))),
            None => Ok(()),
        }
    }
}
