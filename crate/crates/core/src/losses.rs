//! Loss terms of the training objective, each returning its value together
//! with gradients for every tensor that receives one.
//!
//! Gradient routing: transport plans, pseudo-label targets and prototypes are
//! constants. Prototype gradients are still computed for `intra` and `inter`
//! so callers can route them if they want to.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::prototype::{NormAxis, SimilarityConfig};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

fn clamped_nll(p: f64) -> (f64, f64) {
    if p > LOG_FLOOR {
        (-p.ln(), -1.0 / p)
    } else {
        (-LOG_FLOOR.ln(), 0.0)
    }
}

fn check_labels(labels: &[usize], probs: &Matrix, op: &'static str) -> Result<()> {
    if labels.len() != probs.rows() {
        return Err(Error::shape(op, format!("{} labels", probs.rows()), labels.len()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= probs.cols()) {
        return Err(Error::InvalidArgument(format!(
            "{op}: label {y} out of range for {} classes",
            probs.cols()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BaseLoss {
    pub value: f64,
    pub supervised: f64,
    pub unlabeled: f64,
    /// Number of unlabeled samples that carried a target.
    pub masked_in: usize,
    pub grad_source: Matrix,
    pub grad_labeled_target: Matrix,
    pub grad_strong: Matrix,
}

/// Supervised cross-entropy over source ∪ labeled target, plus cross-entropy
/// of the strong view against a hard target for every unlabeled sample that
/// has one. Each of the two terms is averaged over its contributing samples.
pub fn base_loss_with_targets(
    source_probs: &Matrix,
    source_labels: &[usize],
    labeled_probs: &Matrix,
    labeled_labels: &[usize],
    strong_probs: &Matrix,
    targets: &[Option<usize>],
) -> Result<BaseLoss> {
    check_labels(source_labels, source_probs, "base_loss source")?;
    check_labels(labeled_labels, labeled_probs, "base_loss labeled target")?;
    if targets.len() != strong_probs.rows() {
        return Err(Error::shape(
            "base_loss unlabeled",
            format!("{} targets", strong_probs.rows()),
            targets.len(),
        ));
    }
    let n_sup = source_labels.len() + labeled_labels.len();
    let mut supervised = 0.0;
    let mut grad_source = Matrix::zeros(source_probs.rows(), source_probs.cols());
    let mut grad_labeled = Matrix::zeros(labeled_probs.rows(), labeled_probs.cols());
    for (probs, labels, grad) in [
        (source_probs, source_labels, &mut grad_source),
        (labeled_probs, labeled_labels, &mut grad_labeled),
    ] {
        for (i, &y) in labels.iter().enumerate() {
            let (v, g) = clamped_nll(probs[(i, y)]);
            supervised += v;
            grad[(i, y)] = g / n_sup as f64;
        }
    }
    if n_sup > 0 {
        supervised /= n_sup as f64;
    }

    let masked_in = targets.iter().flatten().count();
    let mut unlabeled = 0.0;
    let mut grad_strong = Matrix::zeros(strong_probs.rows(), strong_probs.cols());
    for (i, t) in targets.iter().enumerate() {
        if let Some(y) = *t {
            if y >= strong_probs.cols() {
                return Err(Error::InvalidArgument(format!("pseudo-label {y} out of range")));
            }
            let (v, g) = clamped_nll(strong_probs[(i, y)]);
            unlabeled += v;
            grad_strong[(i, y)] = g / masked_in as f64;
        }
    }
    if masked_in > 0 {
        unlabeled /= masked_in as f64;
    }
    Ok(BaseLoss {
        value: supervised + unlabeled,
        supervised,
        unlabeled,
        masked_in,
        grad_source,
        grad_labeled_target: grad_labeled,
        grad_strong,
    })
}

/// FixMatch-style hard targets: weak-view argmax where its max probability reaches `tau1`.
pub fn confident_targets(weak_probs: &Matrix, tau1: f64) -> Vec<Option<usize>> {
    (0..weak_probs.rows())
        .map(|i| {
            let row = weak_probs.row(i);
            let k = linalg::argmax(row);
            (row[k] >= tau1).then_some(k)
        })
        .collect()
}

/// Baseline objective with the weak view used only through its thresholded argmax.
pub fn base_loss(
    source_probs: &Matrix,
    source_labels: &[usize],
    labeled_probs: &Matrix,
    labeled_labels: &[usize],
    weak_probs: &Matrix,
    strong_probs: &Matrix,
    tau1: f64,
) -> Result<BaseLoss> {
    if weak_probs.shape() != strong_probs.shape() {
        return Err(Error::shape(
            "base_loss views",
            format!("{:?}", weak_probs.shape()),
            format!("{:?}", strong_probs.shape()),
        ));
    }
    base_loss_with_targets(
        source_probs,
        source_labels,
        labeled_probs,
        labeled_labels,
        strong_probs,
        &confident_targets(weak_probs, tau1),
    )
}

#[derive(Debug, Clone)]
pub struct IntraLoss {
    pub value: f64,
    pub grad_features: Matrix,
    pub grad_prototypes: Matrix,
}

/// `⟨γ₀, C^s⟩_F` with a precomputed strong-view cost matrix.
pub fn intra_loss_from_cost(plan: &Matrix, strong_cost: &Matrix) -> Result<f64> {
    if plan.shape() != strong_cost.shape() {
        return Err(Error::shape(
            "intra_loss",
            format!("{:?}", plan.shape()),
            format!("{:?}", strong_cost.shape()),
        ));
    }
    linalg::frobenius_inner(plan, strong_cost)
}

/// `Σ_kj γ₀[k,j]·(1 − c_kᵀ f_j)` with gradients for the strong features and prototypes.
pub fn intra_loss(plan: &Matrix, prototypes: &Matrix, strong_features: &Matrix) -> Result<IntraLoss> {
    if plan.shape() != (prototypes.rows(), strong_features.rows()) {
        return Err(Error::shape(
            "intra_loss",
            format!("{}x{} plan", prototypes.rows(), strong_features.rows()),
            format!("{:?} plan", plan.shape()),
        ));
    }
    if prototypes.cols() != strong_features.cols() {
        return Err(Error::shape(
            "intra_loss",
            format!("feature dim {}", prototypes.cols()),
            strong_features.cols(),
        ));
    }
    let sims = prototypes.matmul_t(strong_features)?;
    let value = plan.sum() - linalg::frobenius_inner(plan, &sims)?;
    Ok(IntraLoss {
        value,
        grad_features: plan.t_matmul(prototypes)?.scale(-1.0),
        grad_prototypes: plan.matmul(strong_features)?.scale(-1.0),
    })
}

#[derive(Debug, Clone)]
pub struct InterLoss {
    pub value: f64,
    pub grad_features: Matrix,
    pub grad_prototypes: Matrix,
}

/// Alignment loss from an already computed C×N similarity matrix.
pub fn inter_loss_from_similarity(similarity: &Matrix, source_labels: &[usize]) -> Result<f64> {
    if source_labels.len() != similarity.cols() {
        return Err(Error::shape(
            "inter_loss",
            format!("{} labels", similarity.cols()),
            source_labels.len(),
        ));
    }
    let mut total = 0.0;
    for (i, &y) in source_labels.iter().enumerate() {
        if y >= similarity.rows() {
            return Err(Error::InvalidArgument(format!("source label {y} out of range")));
        }
        total += clamped_nll(similarity[(y, i)]).0;
    }
    Ok(total / source_labels.len().max(1) as f64)
}

/// `−(1/N) Σ_i log s^{y_i}_i` where `s` is the prototype/source similarity
/// softmax, normalized along `axis`. Similarity is the dot product, which is
/// the cosine on the unit-norm inputs this is fed.
pub fn inter_loss(
    prototypes: &Matrix,
    source_features: &Matrix,
    source_labels: &[usize],
    cfg: SimilarityConfig,
    axis: NormAxis,
) -> Result<InterLoss> {
    let (classes, n) = (prototypes.rows(), source_features.rows());
    if source_labels.len() != n {
        return Err(Error::shape("inter_loss", format!("{n} labels"), source_labels.len()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("inter_loss: empty batch".into()));
    }
    if let Some(&y) = source_labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("source label {y} out of range")));
    }
    let t = cfg.temperature_t1;
    // z[k, i] = c_k·f_i / T₁ ; dz holds ∂L/∂z
    let logits = prototypes.matmul_t(source_features)?;
    let mut dz = Matrix::zeros(classes, n);
    let mut value = 0.0;
    let inv_n = 1.0 / n as f64;
    match axis {
        NormAxis::Samples => {
            let s = linalg::row_softmax(&logits, t)?;
            for (i, &y) in source_labels.iter().enumerate() {
                let (v, g) = clamped_nll(s[(y, i)]);
                value += v;
                // A clamped probability contributes a constant.
                if g != 0.0 {
                    for j in 0..n {
                        dz[(y, j)] += inv_n * s[(y, j)];
                    }
                    dz[(y, i)] -= inv_n;
                }
            }
        }
        NormAxis::Classes => {
            let s = linalg::row_softmax(&logits.transpose(), t)?;
            for (i, &y) in source_labels.iter().enumerate() {
                let (v, g) = clamped_nll(s[(i, y)]);
                value += v;
                if g != 0.0 {
                    for k in 0..classes {
                        let indicator = f64::from(u8::from(y == k));
                        dz[(k, i)] = inv_n * (s[(i, k)] - indicator);
                    }
                }
            }
        }
    }
    let dz = dz.scale(1.0 / t);
    Ok(InterLoss {
        value: value * inv_n,
        grad_features: dz.t_matmul(prototypes)?,
        grad_prototypes: dz.matmul(source_features)?,
    })
}

/// `‖φ(R) − I‖₁` and its gradient w.r.t. `R`. Zero rows fall back to uniform
/// and receive zero gradient.
fn phi_identity_l1(r: &Matrix) -> Result<(f64, Matrix)> {
    let phi = linalg::row_normalize_phi(r)?;
    let n = r.rows();
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, r.cols());
    for k in 0..n {
        let total: f64 = r.row(k).iter().sum();
        let signs: Vec<f64> = (0..r.cols())
            .map(|j| {
                let d = phi[(k, j)] - f64::from(u8::from(j == k));
                value += d.abs();
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        if total > 0.0 {
            let weighted = linalg::dot(&signs, phi.row(k));
            for j in 0..r.cols() {
                grad[(k, j)] = (signs[j] - weighted) / total;
            }
        }
    }
    Ok((value, grad))
}

/// One classifier's half of the dual term:
/// `‖φ(AᵀB) − I‖₁ + ‖φ(BᵀA) − I‖₁` with gradients for `A` (weak) and `B` (strong).
pub fn cross_correlation_term(weak: &Matrix, strong: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if weak.shape() != strong.shape() {
        return Err(Error::shape(
            "cross_correlation_term",
            format!("{:?}", weak.shape()),
            format!("{:?}", strong.shape()),
        ));
    }
    let r = weak.t_matmul(strong)?;
    let (v1, g1) = phi_identity_l1(&r)?;
    let (v2, g2) = phi_identity_l1(&r.transpose())?;
    // R = AᵀB: ∂/∂A = B·G1ᵀ + B·G2 ; ∂/∂B = A·G1 + A·G2ᵀ
    let mut ga = strong.matmul(&g1.transpose())?;
    ga.add_assign(&strong.matmul(&g2)?)?;
    let mut gb = weak.matmul(&g1)?;
    gb.add_assign(&weak.matmul(&g2.transpose())?)?;
    Ok((v1 + v2, ga, gb))
}

#[derive(Debug, Clone)]
pub struct DualLoss {
    pub value: f64,
    pub linear: f64,
    pub prototype: f64,
    pub grad_weak_sharpened: Matrix,
    pub grad_strong_sharpened: Matrix,
    pub grad_weak_similarity: Matrix,
    pub grad_strong_similarity: Matrix,
}

/// Which classifier views contribute to the batch term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualBranches {
    pub linear: bool,
    pub prototype: bool,
}

impl Default for DualBranches {
    fn default() -> Self {
        DualBranches {
            linear: true,
            prototype: true,
        }
    }
}

/// `(1/2C)·(‖φ(R_l)−I‖₁ + ‖φ(R_lᵀ)−I‖₁ + ‖φ(R_p)−I‖₁ + ‖φ(R_pᵀ)−I‖₁)` with
/// `R_l = P̂wᵀP̂s` and `R_p = SwᵀSs`.
pub fn dual_consistency_loss(
    weak_sharpened: &Matrix,
    strong_sharpened: &Matrix,
    weak_similarity: &Matrix,
    strong_similarity: &Matrix,
) -> Result<DualLoss> {
    dual_consistency_loss_with(
        weak_sharpened,
        strong_sharpened,
        weak_similarity,
        strong_similarity,
        DualBranches::default(),
    )
}

pub fn dual_consistency_loss_with(
    weak_sharpened: &Matrix,
    strong_sharpened: &Matrix,
    weak_similarity: &Matrix,
    strong_similarity: &Matrix,
    branches: DualBranches,
) -> Result<DualLoss> {
    let shape = weak_sharpened.shape();
    for m in [strong_sharpened, weak_similarity, strong_similarity] {
        if m.shape() != shape {
            return Err(Error::shape(
                "dual_consistency_loss",
                format!("{shape:?}"),
                format!("{:?}", m.shape()),
            ));
        }
    }
    let scale = 1.0 / (2.0 * shape.1 as f64);
    let zeros = || Matrix::zeros(shape.0, shape.1);
    let (linear, gpw, gps) = if branches.linear {
        cross_correlation_term(weak_sharpened, strong_sharpened)?
    } else {
        (0.0, zeros(), zeros())
    };
    let (prototype, gsw, gss) = if branches.prototype {
        cross_correlation_term(weak_similarity, strong_similarity)?
    } else {
        (0.0, zeros(), zeros())
    };
    Ok(DualLoss {
        value: scale * (linear + prototype),
        linear: scale * linear,
        prototype: scale * prototype,
        grad_weak_sharpened: gpw.scale(scale),
        grad_strong_sharpened: gps.scale(scale),
        grad_weak_similarity: gsw.scale(scale),
        grad_strong_similarity: gss.scale(scale),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_intra: f64,
    pub lambda_inter: f64,
    pub lambda_batch: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_intra: 1.0,
            lambda_inter: 1.0,
            lambda_batch: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_intra", self.lambda_intra),
            ("lambda_inter", self.lambda_inter),
            ("lambda_batch", self.lambda_batch),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss values of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub base: f64,
    pub intra: f64,
    pub inter: f64,
    pub batch: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub base: f64,
    pub intra: f64,
    pub inter: f64,
    pub batch: f64,
    pub total: f64,
    /// Weighted gradient blocks keyed by the tensor they belong to.
    pub gradients: BTreeMap<String, Matrix>,
}

impl LossReport {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            base: self.base,
            intra: self.intra,
            inter: self.inter,
            batch: self.batch,
        }
    }

    /// Adds `weight · grad` into the block named `key`.
    pub fn accumulate(&mut self, key: &str, weight: f64, grad: &Matrix) -> Result<()> {
        match self.gradients.get_mut(key) {
            Some(g) => g.axpy(weight, grad),
            None => {
                self.gradients.insert(key.to_string(), grad.scale(weight));
                Ok(())
            }
        }
    }
}

/// `base + λ_intra·intra + λ_inter·inter + λ_batch·batch`.
pub fn total_loss(components: LossComponents, weights: &LossWeights) -> LossReport {
    let LossComponents {
        base,
        intra,
        inter,
        batch,
    } = components;
    LossReport {
        base,
        intra,
        inter,
        batch,
        total: base
            + weights.lambda_intra * intra
            + weights.lambda_inter * inter
            + weights.lambda_batch * batch,
        gradients: BTreeMap::new(),
    }
}
