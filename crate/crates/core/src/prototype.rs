//! Per-class target prototypes: unit-norm running means of target features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormAxis {
    /// Softmax over the batch samples for each class.
    #[default]
    Samples,
    /// Softmax over the classes for each sample.
    Classes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub temperature_t1: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            temperature_t1: 0.05,
        }
    }
}

impl SimilarityConfig {
    pub fn new(temperature_t1: f64) -> Result<Self> {
        if temperature_t1 > 0.0 && temperature_t1.is_finite() {
            Ok(SimilarityConfig { temperature_t1 })
        } else {
            Err(Error::InvalidArgument(format!(
                "similarity temperature must be positive, got {temperature_t1}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    prototypes: Matrix,
    momentum: f64,
    initialized: Vec<bool>,
}

fn normalize(v: &mut [f64]) {
    let n = linalg::norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(l) => Err(Error::InvalidArgument(format!(
            "label {l} out of range for {classes} classes"
        ))),
        None => Ok(()),
    }
}

/// Sum of the rows of `features` per label, with counts.
fn class_sums(features: &Matrix, labels: &[usize], classes: usize) -> (Matrix, Vec<usize>) {
    let mut sums = Matrix::zeros(classes, features.cols());
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (s, v) in sums.row_mut(y).iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    (sums, counts)
}

impl PrototypeSet {
    /// Class means of the labeled target features, renormalized to unit length.
    /// Every class must have at least one labeled sample.
    pub fn init(
        labeled_features: &Matrix,
        labels: &[usize],
        classes: usize,
        momentum: f64,
    ) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "prototype momentum must lie in (0, 1), got {momentum}"
            )));
        }
        if labels.len() != labeled_features.rows() {
            return Err(Error::shape(
                "PrototypeSet::init",
                format!("{} labels", labeled_features.rows()),
                format!("{} labels", labels.len()),
            ));
        }
        check_labels(labels, classes)?;
        let (mut sums, counts) = class_sums(labeled_features, labels, classes);
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!(
                "class {k} has no labeled target sample"
            )));
        }
        for k in 0..classes {
            let row = sums.row_mut(k);
            row.iter_mut().for_each(|v| *v /= counts[k] as f64);
            normalize(row);
        }
        Ok(PrototypeSet {
            prototypes: sums,
            momentum,
            initialized: vec![true; classes],
        })
    }

    /// Builds a set directly from prototype rows (normalized on entry).
    pub fn from_matrix(mut prototypes: Matrix, momentum: f64) -> Result<Self> {
        for k in 0..prototypes.rows() {
            if linalg::norm(prototypes.row(k)) == 0.0 {
                return Err(Error::Degenerate(format!("prototype {k} is zero")));
            }
            normalize(prototypes.row_mut(k));
        }
        let classes = prototypes.rows();
        Ok(PrototypeSet {
            prototypes,
            momentum,
            initialized: vec![true; classes],
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized.get(class).copied().unwrap_or(false)
    }

    /// `c_k ← α·c_k + (1−α)·mean_k(batch)`, renormalized. Classes absent from
    /// the batch keep their prototype.
    pub fn ema_update(&self, batch_features: &Matrix, batch_labels: &[usize]) -> Result<Self> {
        if batch_features.cols() != self.feature_dim() {
            return Err(Error::shape(
                "ema_update",
                format!("feature dim {}", self.feature_dim()),
                format!("feature dim {}", batch_features.cols()),
            ));
        }
        if batch_labels.len() != batch_features.rows() {
            return Err(Error::shape(
                "ema_update",
                format!("{} labels", batch_features.rows()),
                format!("{} labels", batch_labels.len()),
            ));
        }
        check_labels(batch_labels, self.class_count())?;
        let (sums, counts) = class_sums(batch_features, batch_labels, self.class_count());
        let alpha = self.momentum;
        let mut next = self.clone();
        for k in 0..self.class_count() {
            if counts[k] == 0 {
                continue;
            }
            let n = counts[k] as f64;
            let row = next.prototypes.row_mut(k);
            if self.initialized[k] {
                for (c, s) in row.iter_mut().zip(sums.row(k)) {
                    *c = alpha * *c + (1.0 - alpha) * s / n;
                }
            } else {
                for (c, s) in row.iter_mut().zip(sums.row(k)) {
                    *c = s / n;
                }
            }
            normalize(row);
            next.initialized[k] = linalg::norm(row) > 0.0;
        }
        Ok(next)
    }

    fn check_features(&self, features: &Matrix, op: &'static str) -> Result<()> {
        if features.cols() != self.feature_dim() {
            return Err(Error::shape(
                op,
                format!("feature dim {}", self.feature_dim()),
                format!("feature dim {}", features.cols()),
            ));
        }
        if features.rows() == 0 {
            return Err(Error::InvalidArgument(format!("{op}: empty batch")));
        }
        if let Some(k) = self.initialized.iter().position(|&i| !i) {
            return Err(Error::InvalidArgument(format!(
                "{op}: prototype for class {k} is uninitialized"
            )));
        }
        Ok(())
    }

    /// C×N matrix: for each class, a softmax over the batch samples of
    /// `sim(f_i, c_k)/T₁`. Rows sum to one.
    pub fn similarity_softmax_over_samples(
        &self,
        features: &Matrix,
        cfg: SimilarityConfig,
    ) -> Result<Matrix> {
        self.check_features(features, "similarity_softmax_over_samples")?;
        let sims = self.prototypes.matmul_t(features)?;
        linalg::row_softmax(&sims, cfg.temperature_t1)
    }

    /// N×C matrix: for each sample, a softmax over classes of `sim(f_i, c_k)/T₁`.
    /// This is the prototype-based classifier's prediction.
    pub fn similarity_softmax_over_classes(
        &self,
        features: &Matrix,
        cfg: SimilarityConfig,
    ) -> Result<Matrix> {
        self.check_features(features, "similarity_softmax_over_classes")?;
        let sims = features.matmul_t(&self.prototypes)?;
        linalg::row_softmax(&sims, cfg.temperature_t1)
    }

    /// Nearest prototype by cosine for each row of `features`, with its similarity.
    pub fn nearest(&self, features: &Matrix) -> Result<Vec<(usize, f64)>> {
        self.check_features(features, "nearest")?;
        let sims = features.matmul_t(&self.prototypes)?;
        Ok((0..sims.rows())
            .map(|i| {
                let k = linalg::argmax(sims.row(i));
                (k, sims[(i, k)])
            })
            .collect())
    }

    /// Mean cosine distance between matching prototypes of two sets.
    pub fn drift(&self, other: &PrototypeSet) -> f64 {
        let k = self.class_count();
        (0..k)
            .map(|i| 1.0 - linalg::dot(self.prototypes.row(i), other.prototypes.row(i)))
            .sum::<f64>()
            / k as f64
    }
}
