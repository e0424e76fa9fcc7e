//! The full per-batch objective: forward every view through the network,
//! evaluate each enabled loss term, and backpropagate the weighted sum into
//! the network parameters.
//!
//! Quantities treated as constants (prototypes, transport plan, pseudo-label
//! targets) live in [`FrozenTargets`], so the objective is a deterministic
//! function of the parameters and can be checked by finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SharpenConfig};
use crate::losses::{self, DualBranches, LossComponents, LossReport, LossWeights};
use crate::model::{FeatureCache, Gradients, Network, ProbCache};
use crate::ot::TransportPlan;
use crate::prototype::{NormAxis, SimilarityConfig};

/// One training batch: labeled source, labeled target, and both views of the
/// unlabeled target samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source_x: Matrix,
    pub source_y: Vec<usize>,
    pub labeled_x: Matrix,
    pub labeled_y: Vec<usize>,
    pub weak_x: Matrix,
    pub strong_x: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermMask {
    pub intra: bool,
    pub inter: bool,
    pub batch: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        intra: true,
        inter: true,
        batch: true,
    };
    pub const NONE: TermMask = TermMask {
        intra: false,
        inter: false,
        batch: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub similarity: SimilarityConfig,
    pub sharpen: SharpenConfig,
    pub inter_axis: NormAxis,
    pub weights: LossWeights,
    pub terms: TermMask,
    pub branches: DualBranches,
    /// Also emit the gradient w.r.t. the prototypes (ablation only).
    pub route_prototype_gradients: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            similarity: SimilarityConfig::default(),
            sharpen: SharpenConfig::default(),
            inter_axis: NormAxis::Samples,
            weights: LossWeights::default(),
            terms: TermMask::ALL,
            branches: DualBranches::default(),
            route_prototype_gradients: false,
        }
    }
}

/// Constants of one step.
#[derive(Debug, Clone)]
pub struct FrozenTargets {
    /// Prototype matrix (C×d) in effect for this step.
    pub prototypes: Matrix,
    /// Transport plan between prototypes and the weak view; `None` disables the intra term.
    pub plan: Option<TransportPlan>,
    /// Hard target per unlabeled sample for the strong-view cross-entropy.
    pub pseudo_targets: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct ViewForward {
    pub features: Matrix,
    pub probs: Matrix,
    feature_cache: FeatureCache,
    prob_cache: ProbCache,
}

fn forward_view(net: &Network, x: &Matrix) -> Result<ViewForward> {
    let (features, feature_cache) = net.forward_features(x)?;
    let (probs, prob_cache) = net.forward_probs(&features)?;
    Ok(ViewForward {
        features,
        probs,
        feature_cache,
        prob_cache,
    })
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub source: ViewForward,
    pub labeled: ViewForward,
    pub weak: ViewForward,
    pub strong: ViewForward,
}

pub fn forward(net: &Network, batch: &Batch) -> Result<ForwardPass> {
    Ok(ForwardPass {
        source: forward_view(net, &batch.source_x)?,
        labeled: forward_view(net, &batch.labeled_x)?,
        weak: forward_view(net, &batch.weak_x)?,
        strong: forward_view(net, &batch.strong_x)?,
    })
}

struct ViewGrads {
    probs: Matrix,
    features: Matrix,
}

impl ViewGrads {
    fn zeros(v: &ViewForward) -> Self {
        ViewGrads {
            probs: Matrix::zeros(v.probs.rows(), v.probs.cols()),
            features: Matrix::zeros(v.features.rows(), v.features.cols()),
        }
    }
}

/// Gradient of `loss(S)` w.r.t. features, where `S = softmax_classes(F·Pᵀ/T)`
/// and `grad_s` is `∂loss/∂S`.
fn class_similarity_vjp(s: &Matrix, grad_s: &Matrix, prototypes: &Matrix, t: f64) -> Result<Matrix> {
    let mut dz = Matrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        dz.row_mut(r)
            .copy_from_slice(&linalg::softmax_vjp(s.row(r), grad_s.row(r), t));
    }
    dz.matmul(prototypes)
}

/// Evaluates the objective. With `backward` set, also returns parameter gradients.
pub fn compute(
    net: &Network,
    fwd: &ForwardPass,
    batch: &Batch,
    frozen: &FrozenTargets,
    cfg: &ObjectiveConfig,
    backward: bool,
) -> Result<(LossReport, Option<Gradients>)> {
    let protos = &frozen.prototypes;
    let mut g_source = ViewGrads::zeros(&fwd.source);
    let mut g_labeled = ViewGrads::zeros(&fwd.labeled);
    let mut g_weak = ViewGrads::zeros(&fwd.weak);
    let mut g_strong = ViewGrads::zeros(&fwd.strong);
    let mut g_protos = Matrix::zeros(protos.rows(), protos.cols());
    let w = cfg.weights;

    let base = losses::base_loss_with_targets(
        &fwd.source.probs,
        &batch.source_y,
        &fwd.labeled.probs,
        &batch.labeled_y,
        &fwd.strong.probs,
        &frozen.pseudo_targets,
    )?;
    g_source.probs.add_assign(&base.grad_source)?;
    g_labeled.probs.add_assign(&base.grad_labeled_target)?;
    g_strong.probs.add_assign(&base.grad_strong)?;

    let mut components = LossComponents {
        base: base.value,
        ..LossComponents::default()
    };

    if cfg.terms.intra {
        if let Some(plan) = frozen.plan.as_ref().filter(|p| p.converged) {
            let intra = losses::intra_loss(&plan.plan, protos, &fwd.strong.features)?;
            components.intra = intra.value;
            g_strong.features.axpy(w.lambda_intra, &intra.grad_features)?;
            g_protos.axpy(w.lambda_intra, &intra.grad_prototypes)?;
        }
    }

    if cfg.terms.inter {
        let inter = losses::inter_loss(
            protos,
            &fwd.source.features,
            &batch.source_y,
            cfg.similarity,
            cfg.inter_axis,
        )?;
        components.inter = inter.value;
        g_source.features.axpy(w.lambda_inter, &inter.grad_features)?;
        g_protos.axpy(w.lambda_inter, &inter.grad_prototypes)?;
    }

    if cfg.terms.batch {
        let t1 = cfg.similarity.temperature_t1;
        let pw = linalg::sharpen_rows(&fwd.weak.probs, cfg.sharpen)?;
        let ps = linalg::sharpen_rows(&fwd.strong.probs, cfg.sharpen)?;
        let sw = linalg::row_softmax(&fwd.weak.features.matmul_t(protos)?, t1)?;
        let ss = linalg::row_softmax(&fwd.strong.features.matmul_t(protos)?, t1)?;
        let dual = losses::dual_consistency_loss_with(&pw, &ps, &sw, &ss, cfg.branches)?;
        components.batch = dual.value;
        let lb = w.lambda_batch;
        g_weak.probs.axpy(
            lb,
            &linalg::sharpen_rows_vjp(&fwd.weak.probs, &pw, &dual.grad_weak_sharpened, cfg.sharpen),
        )?;
        g_strong.probs.axpy(
            lb,
            &linalg::sharpen_rows_vjp(&fwd.strong.probs, &ps, &dual.grad_strong_sharpened, cfg.sharpen),
        )?;
        g_weak.features.axpy(
            lb,
            &class_similarity_vjp(&sw, &dual.grad_weak_similarity, protos, t1)?,
        )?;
        g_strong.features.axpy(
            lb,
            &class_similarity_vjp(&ss, &dual.grad_strong_similarity, protos, t1)?,
        )?;
    }

    let mut report = losses::total_loss(components, &w);
    if !report.total.is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    for (name, g) in [
        ("source", &g_source),
        ("labeled_target", &g_labeled),
        ("weak", &g_weak),
        ("strong", &g_strong),
    ] {
        report.accumulate(&format!("{name}.probs"), 1.0, &g.probs)?;
        report.accumulate(&format!("{name}.features"), 1.0, &g.features)?;
    }
    if cfg.route_prototype_gradients {
        report.accumulate("prototypes", 1.0, &g_protos)?;
    }

    if !backward {
        return Ok((report, None));
    }
    let mut grads = Gradients::zeros_like(net);
    for (view, g) in [
        (&fwd.source, g_source),
        (&fwd.labeled, g_labeled),
        (&fwd.weak, g_weak),
        (&fwd.strong, g_strong),
    ] {
        let mut gf = net.backward_probs(&view.prob_cache, &g.probs, &mut grads)?;
        gf.add_assign(&g.features)?;
        net.backward_features(&view.feature_cache, &gf, &mut grads)?;
    }
    Ok((report, Some(grads)))
}

/// Objective value alone, re-running the forward pass. Used as the
/// finite-difference side of gradient checks.
pub fn value(net: &Network, batch: &Batch, frozen: &FrozenTargets, cfg: &ObjectiveConfig) -> Result<LossReport> {
    let fwd = forward(net, batch)?;
    Ok(compute(net, &fwd, batch, frozen, cfg, false)?.0)
}
