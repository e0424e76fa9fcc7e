//! Finite-difference verification of every hand-written gradient: each loss
//! against its differentiable inputs, and the composed objective against
//! every network parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::{check_gradient, GradCheckConfig, GradCheckReport};
use crate::linalg::{self, Matrix};
use crate::losses;
use crate::model::{ModelDims, Network};
use crate::objective::{self, Batch, FrozenTargets, ObjectiveConfig, TermMask};
use crate::ot::{self, SinkhornConfig, TransportProblem};
use crate::prototype::{NormAxis, SimilarityConfig};

#[derive(Debug, Clone, Serialize)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

const SAMPLES: usize = 8;
const CLASSES: usize = 3;
const FEATURE_DIM: usize = 4;
const INPUT_DIM: usize = 3;
const HIDDEN_DIM: usize = 5;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = gaussian(rng, rows, cols);
    for r in 0..rows {
        let n = linalg::norm(m.row(r));
        m.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    m
}

fn stochastic_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    linalg::row_softmax(&gaussian(rng, rows, cols), 1.0).expect("finite logits")
}

fn labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|i| if i < CLASSES { i } else { rng.random_range(0..CLASSES) }).collect()
}

/// Checks `f` around `at` against `analytic`.
fn check_matrix<F>(name: &str, at: &Matrix, analytic: &Matrix, cfg: &GradCheckConfig, f: F) -> NamedCheck
where
    F: Fn(&Matrix) -> f64,
{
    let (rows, cols) = at.shape();
    let report = check_gradient(
        |x| f(&Matrix::from_vec(rows, cols, x.to_vec()).expect("sized")),
        at.data(),
        analytic.data(),
        cfg,
    );
    NamedCheck {
        name: name.to_string(),
        report,
    }
}

/// Every loss term against each input that receives a gradient.
pub fn loss_checks(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let src_p = stochastic_rows(&mut rng, SAMPLES, CLASSES);
    let src_y = labels(&mut rng, SAMPLES);
    let lab_p = stochastic_rows(&mut rng, CLASSES, CLASSES);
    let lab_y: Vec<usize> = (0..CLASSES).collect();
    let strong_p = stochastic_rows(&mut rng, SAMPLES, CLASSES);
    let targets: Vec<Option<usize>> = (0..SAMPLES)
        .map(|i| (i % 3 != 0).then(|| rng.random_range(0..CLASSES)))
        .collect();
    let base = losses::base_loss_with_targets(&src_p, &src_y, &lab_p, &lab_y, &strong_p, &targets)?;
    let value = |s: &Matrix, l: &Matrix, u: &Matrix| {
        losses::base_loss_with_targets(s, &src_y, l, &lab_y, u, &targets)
            .map_or(f64::NAN, |b| b.value)
    };
    out.push(check_matrix("base/source_probs", &src_p, &base.grad_source, cfg, |m| {
        value(m, &lab_p, &strong_p)
    }));
    out.push(check_matrix("base/labeled_probs", &lab_p, &base.grad_labeled_target, cfg, |m| {
        value(&src_p, m, &strong_p)
    }));
    out.push(check_matrix("base/strong_probs", &strong_p, &base.grad_strong, cfg, |m| {
        value(&src_p, &lab_p, m)
    }));

    let protos = unit_rows(&mut rng, CLASSES, FEATURE_DIM);
    let feats = unit_rows(&mut rng, SAMPLES, FEATURE_DIM);
    let cost = ot::build_cost_matrix(&protos, &feats)?;
    let plan = ot::solve_sinkhorn(&TransportProblem::uniform(cost, &SinkhornConfig::default()))?.plan;
    let intra = losses::intra_loss(&plan, &protos, &feats)?;
    out.push(check_matrix("intra/strong_features", &feats, &intra.grad_features, cfg, |m| {
        losses::intra_loss(&plan, &protos, m).map_or(f64::NAN, |l| l.value)
    }));
    out.push(check_matrix("intra/prototypes", &protos, &intra.grad_prototypes, cfg, |m| {
        losses::intra_loss(&plan, m, &feats).map_or(f64::NAN, |l| l.value)
    }));

    let sim = SimilarityConfig::default();
    for (axis, tag) in [(NormAxis::Samples, "samples"), (NormAxis::Classes, "classes")] {
        let inter = losses::inter_loss(&protos, &feats, &src_y, sim, axis)?;
        let f = |p: &Matrix, x: &Matrix| {
            losses::inter_loss(p, x, &src_y, sim, axis).map_or(f64::NAN, |l| l.value)
        };
        out.push(check_matrix(
            &format!("inter_{tag}/source_features"),
            &feats,
            &inter.grad_features,
            cfg,
            |m| f(&protos, m),
        ));
        out.push(check_matrix(
            &format!("inter_{tag}/prototypes"),
            &protos,
            &inter.grad_prototypes,
            cfg,
            |m| f(m, &feats),
        ));
    }

    let pw = stochastic_rows(&mut rng, SAMPLES, CLASSES);
    let ps = stochastic_rows(&mut rng, SAMPLES, CLASSES);
    let sw = stochastic_rows(&mut rng, SAMPLES, CLASSES);
    let ss = stochastic_rows(&mut rng, SAMPLES, CLASSES);
    let dual = losses::dual_consistency_loss(&pw, &ps, &sw, &ss)?;
    let f = |a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix| {
        losses::dual_consistency_loss(a, b, c, d).map_or(f64::NAN, |l| l.value)
    };
    out.push(check_matrix("batch/weak_sharpened", &pw, &dual.grad_weak_sharpened, cfg, |m| {
        f(m, &ps, &sw, &ss)
    }));
    out.push(check_matrix("batch/strong_sharpened", &ps, &dual.grad_strong_sharpened, cfg, |m| {
        f(&pw, m, &sw, &ss)
    }));
    out.push(check_matrix("batch/weak_similarity", &sw, &dual.grad_weak_similarity, cfg, |m| {
        f(&pw, &ps, m, &ss)
    }));
    out.push(check_matrix("batch/strong_similarity", &ss, &dual.grad_strong_similarity, cfg, |m| {
        f(&pw, &ps, &sw, m)
    }));
    Ok(out)
}

/// A random small network, batch and frozen targets for objective checks.
pub fn small_problem(seed: u64) -> Result<(Network, Batch, FrozenTargets)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims {
        input_dim: INPUT_DIM,
        hidden_dim: HIDDEN_DIM,
        feature_dim: FEATURE_DIM,
        classes: CLASSES,
    };
    let mut net = Network::new(dims, &mut rng);
    // Nonzero biases so every bias gradient is exercised.
    for block in [1, 3, 5] {
        let bias = gaussian(&mut rng, 1, net.params()[block].cols()).scale(0.1);
        *net.params_mut()[block] = bias;
    }
    let weak_x = gaussian(&mut rng, SAMPLES, INPUT_DIM);
    let noise = gaussian(&mut rng, SAMPLES, INPUT_DIM).scale(0.3);
    let mut strong_x = weak_x.clone();
    strong_x.add_assign(&noise)?;
    let batch = Batch {
        source_x: gaussian(&mut rng, SAMPLES, INPUT_DIM),
        source_y: labels(&mut rng, SAMPLES),
        labeled_x: gaussian(&mut rng, CLASSES, INPUT_DIM),
        labeled_y: (0..CLASSES).collect(),
        weak_x,
        strong_x,
    };
    let prototypes = unit_rows(&mut rng, CLASSES, FEATURE_DIM);
    let (weak_f, _) = net.forward_features(&batch.weak_x)?;
    let cost = ot::build_cost_matrix(&prototypes, &weak_f)?;
    let plan = ot::solve_sinkhorn(&TransportProblem::uniform(cost, &SinkhornConfig::default()))?;
    let pseudo_targets = (0..SAMPLES)
        .map(|i| (i % 2 == 0).then(|| rng.random_range(0..CLASSES)))
        .collect();
    Ok((
        net,
        batch,
        FrozenTargets {
            prototypes,
            plan: Some(plan),
            pseudo_targets,
        },
    ))
}

/// The objective with each term alone, all terms together, and the class-axis
/// inter variant, against every network parameter.
pub fn objective_checks(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<NamedCheck>> {
    let (net, batch, frozen) = small_problem(seed)?;
    let only = |intra, inter, batch| TermMask { intra, inter, batch };
    let variants = [
        ("objective/base", only(false, false, false), NormAxis::Samples),
        ("objective/intra", only(true, false, false), NormAxis::Samples),
        ("objective/inter", only(false, true, false), NormAxis::Samples),
        ("objective/inter_classes", only(false, true, false), NormAxis::Classes),
        ("objective/batch", only(false, false, true), NormAxis::Samples),
        ("objective/total", TermMask::ALL, NormAxis::Samples),
    ];
    let mut out = Vec::new();
    for (name, terms, axis) in variants {
        let obj = ObjectiveConfig {
            terms,
            inter_axis: axis,
            ..ObjectiveConfig::default()
        };
        let fwd = objective::forward(&net, &batch)?;
        let (_, grads) = objective::compute(&net, &fwd, &batch, &frozen, &obj, true)?;
        let analytic = grads.expect("backward requested").flatten();
        let theta = net.flat_params();
        let mut probe = net.clone();
        let report = check_gradient(
            |x| {
                probe.set_flat_params(x).expect("same length");
                objective::value(&probe, &batch, &frozen, &obj).map_or(f64::NAN, |r| r.total)
            },
            &theta,
            &analytic,
            cfg,
        );
        out.push(NamedCheck {
            name: name.to_string(),
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_gradients_match_finite_differences() {
        let cfg = GradCheckConfig::default();
        for seed in 0..3 {
            for c in loss_checks(seed, &cfg).unwrap().into_iter().chain(objective_checks(seed, &cfg).unwrap()) {
                assert!(c.report.passed, "seed {seed} {}: {:?}", c.name, c.report);
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let (net, batch, frozen) = small_problem(0).unwrap();
        let obj = ObjectiveConfig::default();
        let fwd = objective::forward(&net, &batch).unwrap();
        let (_, grads) = objective::compute(&net, &fwd, &batch, &frozen, &obj, true).unwrap();
        let mut analytic = grads.unwrap().flatten();
        analytic[0] *= 1.5;
        let mut probe = net.clone();
        let report = check_gradient(
            |x| {
                probe.set_flat_params(x).unwrap();
                objective::value(&probe, &batch, &frozen, &obj).unwrap().total
            },
            &net.flat_params(),
            &analytic,
            &GradCheckConfig::default(),
        );
        assert!(!report.passed);
    }
}
