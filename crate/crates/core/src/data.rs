//! Synthetic domain-shift scenarios, vector-space augmentation, and CSV ingestion.
//!
//! Source classes are isotropic Gaussians whose means sit on a circle in the
//! first two input coordinates. The target domain applies
//! `x ↦ scale·R(θ)·x + t` to the same class distributions, with `R(θ)`
//! rotating the (x₀, x₁) plane, so label marginals match while the
//! class-conditionals shift.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainScenario {
    pub classes: usize,
    pub input_dim: usize,
    /// Distance of each source class mean from the origin.
    pub class_radius: f64,
    /// Per-coordinate standard deviation of every class.
    pub class_spread: f64,
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    pub source_samples: usize,
    pub target_unlabeled: usize,
    /// Upper bound on labeled target samples, `shots × classes`.
    pub target_labeled_budget: usize,
    pub shots: usize,
    pub seed: u64,
}

impl Default for DomainScenario {
    fn default() -> Self {
        DomainScenario {
            classes: 5,
            input_dim: 2,
            class_radius: 2.0,
            class_spread: 0.5,
            rotation_deg: 30.0,
            translation: vec![0.5, 0.0],
            scale: 1.0,
            source_samples: 500,
            target_unlabeled: 500,
            target_labeled_budget: 50,
            shots: 1,
            seed: 0,
        }
    }
}

impl DomainScenario {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 1 || self.input_dim < 2 {
            return Err(Error::InvalidArgument(
                "scenario needs at least one class and two input dimensions".into(),
            ));
        }
        if self.shots < 1 {
            return Err(Error::InvalidArgument("shots must be at least 1".into()));
        }
        if self.shots * self.classes > self.target_labeled_budget {
            return Err(Error::InvalidArgument(format!(
                "{} shots x {} classes exceeds the labeled target budget of {}",
                self.shots, self.classes, self.target_labeled_budget
            )));
        }
        if self.source_samples == 0 || self.target_unlabeled == 0 {
            return Err(Error::InvalidArgument("source and unlabeled splits must be non-empty".into()));
        }
        if self.translation.len() > self.input_dim {
            return Err(Error::InvalidArgument(
                "translation has more coordinates than the input".into(),
            ));
        }
        if !(self.class_spread >= 0.0 && self.scale > 0.0) {
            return Err(Error::InvalidArgument("spread must be >= 0 and scale > 0".into()));
        }
        Ok(())
    }

    /// Class means of the source domain.
    pub fn source_means(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d65_616e);
        let extra = Normal::new(0.0, self.class_radius / 2.0).expect("finite std");
        (0..self.classes)
            .map(|k| {
                let angle = std::f64::consts::TAU * k as f64 / self.classes as f64;
                let mut mean = vec![self.class_radius * angle.cos(), self.class_radius * angle.sin()];
                mean.extend((2..self.input_dim).map(|_| extra.sample(&mut rng)));
                mean
            })
            .collect()
    }

    /// Diagonal standard deviations of every source class.
    pub fn source_stds(&self) -> Vec<Vec<f64>> {
        vec![vec![self.class_spread; self.input_dim]; self.classes]
    }

    /// Applies the source→target map to one point.
    pub fn to_target(&self, x: &[f64]) -> Vec<f64> {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let mut out = x.to_vec();
        out[0] = c * x[0] - s * x[1];
        out[1] = s * x[0] + c * x[1];
        for (i, v) in out.iter_mut().enumerate() {
            *v = self.scale * *v + self.translation.get(i).copied().unwrap_or(0.0);
        }
        out
    }

    pub fn is_identity_shift(&self) -> bool {
        self.rotation_deg.rem_euclid(360.0) == 0.0
            && self.scale == 1.0
            && self.translation.iter().all(|&t| t == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

/// Unlabeled target data. Ground-truth labels are kept for evaluation only
/// and are reachable solely through [`UnlabeledSet::labels_for_evaluation`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub features: Matrix,
    eval_labels: Vec<usize>,
}

impl UnlabeledSet {
    pub fn new(features: Matrix, eval_labels: Vec<usize>) -> Self {
        assert_eq!(features.rows(), eval_labels.len());
        UnlabeledSet {
            features,
            eval_labels,
        }
    }

    /// Ground truth for scoring. Training code must never call this.
    pub fn labels_for_evaluation(&self) -> &[usize] {
        &self.eval_labels
    }

    /// Replaces the evaluation labels, e.g. to poison them in leakage tests.
    pub fn with_eval_labels(mut self, labels: Vec<usize>) -> Self {
        assert_eq!(labels.len(), self.eval_labels.len());
        self.eval_labels = labels;
        self
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsdaSplit {
    pub classes: usize,
    pub source: LabeledSet,
    pub target_labeled: LabeledSet,
    pub target_unlabeled: UnlabeledSet,
}

impl SsdaSplit {
    pub fn input_dim(&self) -> usize {
        self.source.features.cols()
    }
}

/// Balanced label sequence of length `n`, shuffled.
fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn sample_points(
    scenario: &DomainScenario,
    labels: &[usize],
    target: bool,
    rng: &mut ChaCha8Rng,
) -> Matrix {
    let means = scenario.source_means();
    let stds = scenario.source_stds();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(labels.len() * scenario.input_dim);
    for &y in labels {
        let x: Vec<f64> = (0..scenario.input_dim)
            .map(|j| means[y][j] + stds[y][j] * unit.sample(rng))
            .collect();
        if target {
            data.extend(scenario.to_target(&x));
        } else {
            data.extend(x);
        }
    }
    Matrix::from_vec(labels.len(), scenario.input_dim, data).expect("sized")
}

/// Draws a deterministic split for the scenario.
///
/// Source, unlabeled target and each class's labeled shots come from separate
/// random streams, so changing `shots` leaves the other splits untouched and
/// the k-shot labeled set is a prefix of the (k+1)-shot one.
pub fn generate(scenario: &DomainScenario) -> Result<SsdaSplit> {
    scenario.validate()?;
    let c = scenario.classes;
    let stream = |parts: &[u64]| ChaCha8Rng::seed_from_u64(mix_seed(&[&[scenario.seed], parts].concat()));

    let mut rng = stream(&[1]);
    let source_y = balanced_labels(scenario.source_samples, c, &mut rng);
    let source_x = sample_points(scenario, &source_y, false, &mut rng);

    let mut rng = stream(&[2]);
    let unlabeled_y = balanced_labels(scenario.target_unlabeled, c, &mut rng);
    let unlabeled_x = sample_points(scenario, &unlabeled_y, true, &mut rng);

    let mut labeled_y = Vec::with_capacity(scenario.shots * c);
    let mut labeled_x = Vec::with_capacity(scenario.shots * c * scenario.input_dim);
    for k in 0..c {
        let mut rng = stream(&[3, k as u64]);
        let y = vec![k; scenario.shots];
        labeled_x.extend_from_slice(sample_points(scenario, &y, true, &mut rng).data());
        labeled_y.extend(y);
    }

    Ok(SsdaSplit {
        classes: c,
        source: LabeledSet {
            features: source_x,
            labels: source_y,
        },
        target_labeled: LabeledSet {
            features: Matrix::from_vec(labeled_y.len(), scenario.input_dim, labeled_x)?,
            labels: labeled_y,
        },
        target_unlabeled: UnlabeledSet::new(unlabeled_x, unlabeled_y),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    pub strong_dropout_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            weak_noise_sigma: 0.05,
            strong_noise_sigma: 0.3,
            strong_dropout_prob: 0.1,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.weak_noise_sigma >= 0.0 && self.strong_noise_sigma > self.weak_noise_sigma) {
            return Err(Error::InvalidArgument(
                "strong noise must exceed weak noise, both nonnegative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.strong_dropout_prob) {
            return Err(Error::InvalidArgument("dropout probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strength {
    Weak,
    Strong,
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Label-preserving perturbation: Gaussian noise, plus coordinate dropout for
/// the strong view. `seed` and `step` fix the random stream.
pub fn augment(batch: &Matrix, policy: &AugmentPolicy, strength: Strength, seed: u64, step: u64) -> Matrix {
    let tag = match strength {
        Strength::Weak => 1,
        Strength::Strong => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, step, tag]));
    let sigma = match strength {
        Strength::Weak => policy.weak_noise_sigma,
        Strength::Strong => policy.strong_noise_sigma,
    };
    let mut out = batch.clone();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        out.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    if strength == Strength::Strong && policy.strong_dropout_prob > 0.0 {
        let drop = Bernoulli::new(policy.strong_dropout_prob).expect("probability in range");
        out.data_mut().iter_mut().for_each(|v| {
            if drop.sample(&mut rng) {
                *v = 0.0;
            }
        });
    }
    out
}

/// Uniform index sample with replacement.
pub fn sample_indices<R: Rng>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

/// Reads a split from CSV with header `split,label,f0,...,f{d-1}`.
///
/// `split` is one of `source`, `target_labeled`, `target_unlabeled`. Labels on
/// unlabeled rows are kept as evaluation-only ground truth.
pub fn load_csv(path: &Path) -> Result<SsdaSplit> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, 1, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let headers = reader.headers().map_err(|e| csv_error(path, 1, e))?.clone();
    if headers.len() < 3 || &headers[0] != "split" || &headers[1] != "label" {
        return Err(parse_err(1, "header must start with split,label,f0".into()));
    }
    for (j, h) in headers.iter().skip(2).enumerate() {
        if h != format!("f{j}") {
            return Err(parse_err(1, format!("expected column f{j}, found {h}")));
        }
    }
    let dim = headers.len() - 2;

    let mut parts: [(Vec<f64>, Vec<usize>); 3] = Default::default();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, 0, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 2 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", dim + 2, record.len()),
            ));
        }
        let slot = match record[0].trim() {
            "source" => 0,
            "target_labeled" => 1,
            "target_unlabeled" => 2,
            other => return Err(parse_err(line, format!("unknown split token {other:?}"))),
        };
        let label: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("invalid label {:?}", &record[1])))?;
        let (feats, labels) = &mut parts[slot];
        for (j, field) in record.iter().skip(2).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric feature f{j}: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature f{j}")));
            }
            feats.push(v);
        }
        labels.push(label);
    }
    let [(sx, sy), (lx, ly), (ux, uy)] = parts;
    if ly.is_empty() {
        return Err(parse_err(0, "target_labeled split is empty".into()));
    }
    if sy.is_empty() || uy.is_empty() {
        return Err(parse_err(0, "source and target_unlabeled splits must be non-empty".into()));
    }
    let classes = sy.iter().chain(&ly).chain(&uy).max().map_or(0, |m| m + 1);
    let mat = |v: Vec<f64>, n: usize| Matrix::from_vec(n, dim, v);
    Ok(SsdaSplit {
        classes,
        source: LabeledSet {
            features: mat(sx, sy.len())?,
            labels: sy,
        },
        target_labeled: LabeledSet {
            features: mat(lx, ly.len())?,
            labels: ly,
        },
        target_unlabeled: UnlabeledSet::new(mat(ux, uy.len())?, uy),
    })
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    let line = e.position().map_or(line, |p| p.line() as usize);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Writes a split in the format [`load_csv`] reads.
pub fn write_csv(split: &SsdaSplit, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, 0, e))?;
    let dim = split.input_dim();
    let mut header = vec!["split".to_string(), "label".to_string()];
    header.extend((0..dim).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| csv_error(path, 0, e))?;
    let sets: [(&str, &Matrix, &[usize]); 3] = [
        ("source", &split.source.features, &split.source.labels),
        ("target_labeled", &split.target_labeled.features, &split.target_labeled.labels),
        (
            "target_unlabeled",
            &split.target_unlabeled.features,
            split.target_unlabeled.labels_for_evaluation(),
        ),
    ];
    for (name, x, y) in sets {
        for (i, label) in y.iter().enumerate() {
            let mut rec = vec![name.to_string(), label.to_string()];
            rec.extend(x.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(|e| csv_error(path, 0, e))?;
        }
    }
    w.flush()?;
    Ok(())
}
