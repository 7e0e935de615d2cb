//! Datasets, synthetic blob generation and the seeded deletion split.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Distance of every blob centre from the origin.
pub const BLOB_CENTER_RADIUS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::Shape(format!("inputs must be n×d, got {:?}", inputs.shape())));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::Input(format!("{} labels for {} rows", labels.len(), inputs.rows())));
        }
        if num_classes == 0 {
            return Err(Error::Input("num_classes must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Input(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `indices` as a `(inputs, labels)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = self.inputs.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        let (x, y) = self.batch(indices)?;
        Self::new(x, y, self.num_classes, name)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Content fingerprint used for cache keys.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.inputs.len() * 8 + self.labels.len() * 8 + 32);
        bytes.extend_from_slice(self.name.as_bytes());
        for d in self.inputs.shape() {
            bytes.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in self.inputs.data() {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        for &y in &self.labels {
            bytes.extend_from_slice(&(y as u64).to_le_bytes());
        }
        bytes
    }
}

/// Gaussian clusters, one per class, with centres spaced evenly on a circle of
/// radius [`BLOB_CENTER_RADIUS`] in the first two input dimensions (on a line
/// when `dim == 1`). Rows are ordered class by class.
pub fn gen_blobs<T: Scalar>(
    rng: &mut SeededRng,
    n_per_class: usize,
    classes: usize,
    dim: usize,
    spread: f64,
) -> Result<Dataset<T>> {
    if n_per_class == 0 || classes == 0 || dim == 0 {
        return Err(Error::Input("blob counts must be positive".into()));
    }
    if spread.is_nan() || spread <= 0.0 {
        return Err(Error::Input(format!("spread must be positive, got {spread}")));
    }
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let mut c = vec![0.0; dim];
            if dim == 1 {
                c[0] = BLOB_CENTER_RADIUS * (2.0 * k as f64 - (classes as f64 - 1.0));
            } else {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                c[0] = BLOB_CENTER_RADIUS * angle.cos();
                c[1] = BLOB_CENTER_RADIUS * angle.sin();
            }
            c
        })
        .collect();
    let n = n_per_class * classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(center.iter().map(|&c| T::lit(c + spread * rng.standard_normal())));
            labels.push(k);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes, "blobs")
}

/// Whether deleted rows are drawn from the whole dataset or from one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeletionMode {
    #[default]
    Uniform,
    /// Delete only rows of the given class (`ratio` is then relative to that class).
    Class(usize),
}

/// Partition of dataset rows into a forget set `D_f` and a retain set `D_r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionSplit {
    pub forget_indices: Vec<usize>,
    pub retain_indices: Vec<usize>,
    pub delete_ratio: f64,
    pub seed: u64,
}

impl DeletionSplit {
    pub fn len(&self) -> usize {
        self.forget_indices.len() + self.retain_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Uniform-without-replacement deletion of `round(ratio·n)` rows.
pub fn split_delete<T: Scalar>(dataset: &Dataset<T>, ratio: f64, rng: &mut SeededRng) -> Result<DeletionSplit> {
    split_delete_mode(dataset, ratio, DeletionMode::Uniform, rng)
}

pub fn split_delete_mode<T: Scalar>(
    dataset: &Dataset<T>,
    ratio: f64,
    mode: DeletionMode,
    rng: &mut SeededRng,
) -> Result<DeletionSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Input(format!("delete ratio must be in (0,1), got {ratio}")));
    }
    let n = dataset.len();
    let mut candidates: Vec<usize> = match mode {
        DeletionMode::Uniform => dataset.all_indices(),
        DeletionMode::Class(c) => (0..n).filter(|&i| dataset.labels[i] == c).collect(),
    };
    let k = (ratio * candidates.len() as f64).round() as usize;
    if k == 0 || k >= n {
        return Err(Error::Input(format!(
            "delete ratio {ratio} on {} candidate rows leaves an empty forget or retain set",
            candidates.len()
        )));
    }
    // Partial Fisher–Yates: the first k slots are a uniform k-subset.
    for i in 0..k {
        let j = i + rng.below(candidates.len() - i);
        candidates.swap(i, j);
    }
    let forget: BTreeSet<usize> = candidates[..k].iter().copied().collect();
    let retain: Vec<usize> = (0..n).filter(|i| !forget.contains(i)).collect();
    Ok(DeletionSplit {
        forget_indices: forget.into_iter().collect(),
        retain_indices: retain,
        delete_ratio: ratio,
        seed: rng.seed(),
    })
}
