//! Three-way pseudo-labeling of unlabeled target samples: a confident linear
//! prediction, a fallback to the transport plan, or no label at all.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::ot::TransportPlan;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub tau1: f64,
    pub tau2: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            tau1: 0.95,
            tau2: 0.4,
        }
    }
}

impl PseudoLabelConfig {
    /// Requires `0 ≤ τ₂ ≤ τ₁ ≤ 1` with `τ₁ > 0`. `τ₂ = τ₁` is accepted as the
    /// control setting where the transport branch can never fire.
    pub fn new(tau1: f64, tau2: f64) -> Result<Self> {
        let cfg = PseudoLabelConfig { tau1, tau2 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau1 <= 1.0 && self.tau2 >= 0.0 && self.tau2 <= self.tau1) {
            return Err(Error::InvalidArgument(format!(
                "pseudo-label thresholds need 0 <= tau2 <= tau1 <= 1, got tau1={} tau2={}",
                self.tau1, self.tau2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PseudoLabelDecision {
    Confident { class: usize, confidence: f64 },
    OtPlan { class: usize },
    Abstain,
}

impl PseudoLabelDecision {
    pub fn class(&self) -> Option<usize> {
        match *self {
            PseudoLabelDecision::Confident { class, .. } | PseudoLabelDecision::OtPlan { class } => {
                Some(class)
            }
            PseudoLabelDecision::Abstain => None,
        }
    }

    pub fn branch(&self) -> &'static str {
        match self {
            PseudoLabelDecision::Confident { .. } => "confident",
            PseudoLabelDecision::OtPlan { .. } => "ot",
            PseudoLabelDecision::Abstain => "abstain",
        }
    }
}

/// Labels one sample from its weak-view probabilities and its plan column.
pub fn decide(
    weak_probs: &[f64],
    plan_column: Option<&[f64]>,
    cfg: &PseudoLabelConfig,
) -> Result<PseudoLabelDecision> {
    let total: f64 = weak_probs.iter().sum();
    if weak_probs.is_empty() || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "weak probabilities must sum to 1, got {total}"
        )));
    }
    if let Some(col) = plan_column {
        if col.len() != weak_probs.len() {
            return Err(Error::shape(
                "decide",
                format!("plan column of length {}", weak_probs.len()),
                col.len(),
            ));
        }
    }
    let class = linalg::argmax(weak_probs);
    let confidence = weak_probs[class];
    if confidence >= cfg.tau1 {
        return Ok(PseudoLabelDecision::Confident { class, confidence });
    }
    if confidence >= cfg.tau2 {
        if let Some(col) = plan_column.filter(|c| c.iter().any(|&v| v > 0.0)) {
            return Ok(PseudoLabelDecision::OtPlan {
                class: linalg::argmax(col),
            });
        }
    }
    Ok(PseudoLabelDecision::Abstain)
}

/// Applies [`decide`] to every row. An absent or unconverged plan turns the
/// transport branch into abstention.
pub fn batch_decide(
    weak_probs: &Matrix,
    plan: Option<&TransportPlan>,
    cfg: &PseudoLabelConfig,
) -> Result<Vec<PseudoLabelDecision>> {
    let plan = plan.filter(|p| p.converged);
    if let Some(p) = plan {
        if p.plan.shape() != (weak_probs.cols(), weak_probs.rows()) {
            return Err(Error::shape(
                "batch_decide",
                format!("{}x{} plan", weak_probs.cols(), weak_probs.rows()),
                format!("{:?} plan", p.plan.shape()),
            ));
        }
    }
    (0..weak_probs.rows())
        .map(|i| {
            let column = plan.map(|p| p.plan.column(i));
            decide(weak_probs.row(i), column.as_deref(), cfg)
        })
        .collect()
}

/// `(accuracy over labeled decisions, coverage)`. All-abstain gives `(1.0, 0.0)`.
pub fn pseudo_label_accuracy(decisions: &[PseudoLabelDecision], true_labels: &[usize]) -> (f64, f64) {
    assert_eq!(decisions.len(), true_labels.len(), "unaligned decisions");
    let mut decided = 0usize;
    let mut correct = 0usize;
    for (d, &y) in decisions.iter().zip(true_labels) {
        if let Some(c) = d.class() {
            decided += 1;
            correct += usize::from(c == y);
        }
    }
    let accuracy = if decided == 0 {
        1.0
    } else {
        correct as f64 / decided as f64
    };
    let coverage = if decisions.is_empty() {
        0.0
    } else {
        decided as f64 / decisions.len() as f64
    };
    (accuracy, coverage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(tau2: f64) -> PseudoLabelConfig {
        PseudoLabelConfig::new(0.95, tau2).unwrap()
    }

    #[test]
    fn three_branches() {
        let c = cfg(0.4);
        let d = decide(&[0.01, 0.97, 0.02], None, &c).unwrap();
        assert_eq!(
            d,
            PseudoLabelDecision::Confident {
                class: 1,
                confidence: 0.97
            }
        );
        let col = [0.1, 0.7, 0.2];
        let d = decide(&[0.5, 0.3, 0.2], Some(&col), &c).unwrap();
        assert_eq!(d, PseudoLabelDecision::OtPlan { class: 1 });
        let d = decide(&[0.2, 0.2, 0.2, 0.2, 0.2], None, &c).unwrap();
        assert_eq!(d, PseudoLabelDecision::Abstain);
    }

    #[test]
    fn middle_band_without_usable_column_abstains() {
        let c = cfg(0.4);
        assert_eq!(decide(&[0.5, 0.5], None, &c).unwrap(), PseudoLabelDecision::Abstain);
        assert_eq!(
            decide(&[0.5, 0.5], Some(&[0.0, 0.0]), &c).unwrap(),
            PseudoLabelDecision::Abstain
        );
        assert_eq!(
            decide(&[0.5, 0.5], Some(&[0.3, 0.3]), &c).unwrap(),
            PseudoLabelDecision::OtPlan { class: 0 }
        );
        assert!(decide(&[0.5, 0.5], Some(&[0.3]), &c).is_err());
        assert!(decide(&[0.5, 0.6], None, &c).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PseudoLabelConfig::new(0.95, 0.96).is_err());
        assert!(PseudoLabelConfig::new(1.2, 0.1).is_err());
        assert!(PseudoLabelConfig::new(0.95, -0.1).is_err());
        assert!(PseudoLabelConfig::new(0.95, 0.95).is_ok());
    }

    fn plan_of(m: Matrix, converged: bool) -> TransportPlan {
        TransportPlan {
            plan: m,
            row_residual: 0.0,
            col_residual: 0.0,
            iterations: 1,
            converged,
        }
    }

    #[test]
    fn batch_examples() {
        let c = cfg(0.4);
        let uniform = Matrix::filled(4, 10, 0.1);
        let out = batch_decide(&uniform, None, &c).unwrap();
        assert!(out.iter().all(|d| *d == PseudoLabelDecision::Abstain));

        let onehot = Matrix::identity(3);
        let out = batch_decide(&onehot, None, &c).unwrap();
        for (i, d) in out.iter().enumerate() {
            assert_eq!(d.class(), Some(i));
            assert_eq!(d.branch(), "confident");
        }

        let mixed = Matrix::from_rows(&[
            vec![0.01, 0.97, 0.02],
            vec![0.5, 0.3, 0.2],
            vec![0.4 / 2.0, 0.4, 0.4],
        ]);
        let plan = Matrix::from_rows(&[vec![0.3, 0.1, 0.0], vec![0.0, 0.7, 0.0], vec![0.0, 0.2, 0.0]]);
        let out = batch_decide(&mixed, Some(&plan_of(plan.clone(), true)), &c).unwrap();
        assert_eq!(out[0].class(), Some(1));
        assert_eq!(out[1], PseudoLabelDecision::OtPlan { class: 1 });
        // max 0.4 ≥ τ₂ but the column is empty
        assert_eq!(out[2], PseudoLabelDecision::Abstain);

        let out = batch_decide(&mixed, Some(&plan_of(plan, false)), &c).unwrap();
        assert_eq!(out[1], PseudoLabelDecision::Abstain);

        assert!(batch_decide(&mixed, Some(&plan_of(Matrix::zeros(3, 2), true)), &c).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let conf = |c| PseudoLabelDecision::Confident {
            class: c,
            confidence: 1.0,
        };
        assert_eq!(pseudo_label_accuracy(&[conf(0), conf(1)], &[0, 1]), (1.0, 1.0));
        assert_eq!(
            pseudo_label_accuracy(&[PseudoLabelDecision::Abstain; 3], &[0, 1, 2]),
            (1.0, 0.0)
        );
        let mut ds = vec![PseudoLabelDecision::Abstain; 4];
        ds.extend([conf(0), conf(1), PseudoLabelDecision::OtPlan { class: 0 }, conf(2)]);
        let truth = [0, 0, 0, 0, 0, 1, 1, 1];
        assert_eq!(pseudo_label_accuracy(&ds, &truth), (0.5, 0.5));
    }

    fn prob_rows(n: usize, c: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(prop::collection::vec(0.001f64..1.0, c), n).prop_map(move |rows| {
            let rows: Vec<Vec<f64>> = rows
                .into_iter()
                .map(|mut r| {
                    // spike one entry to reach the confident band sometimes
                    r[0] *= 20.0;
                    let s: f64 = r.iter().sum();
                    r.iter().map(|v| v / s).collect()
                })
                .collect();
            Matrix::from_rows(&rows)
        })
    }

    fn plan_for(n: usize, c: usize) -> impl Strategy<Value = TransportPlan> {
        prop::collection::vec(0.0f64..1.0, n * c)
            .prop_map(move |v| plan_of(Matrix::from_vec(c, n, v).unwrap(), true))
    }

    proptest! {
        #[test]
        fn tau1_monotone(probs in prob_rows(12, 4), plan in plan_for(12, 4), lo in 0.5f64..0.9, bump in 0.0f64..0.1) {
            let a = batch_decide(&probs, Some(&plan), &PseudoLabelConfig::new(lo, 0.2).unwrap()).unwrap();
            let b = batch_decide(&probs, Some(&plan), &PseudoLabelConfig::new(lo + bump, 0.2).unwrap()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                if *x == PseudoLabelDecision::Abstain {
                    let confident = matches!(y, PseudoLabelDecision::Confident { .. });
                    prop_assert!(!confident);
                }
                if let PseudoLabelDecision::Confident { class, .. } = y {
                    prop_assert_eq!(x.class(), Some(*class));
                }
            }
        }

        #[test]
        fn tau2_monotone_coverage(probs in prob_rows(12, 4), plan in plan_for(12, 4), t in 0.0f64..0.9, bump in 0.0f64..0.05) {
            let truth = vec![0; 12];
            let a = batch_decide(&probs, Some(&plan), &PseudoLabelConfig::new(0.95, t).unwrap()).unwrap();
            let b = batch_decide(&probs, Some(&plan), &PseudoLabelConfig::new(0.95, t + bump).unwrap()).unwrap();
            prop_assert!(pseudo_label_accuracy(&b, &truth).1 <= pseudo_label_accuracy(&a, &truth).1);
        }

        #[test]
        fn extreme_tau2(probs in prob_rows(12, 4), plan in plan_for(12, 4)) {
            let none = batch_decide(&probs, Some(&plan), &PseudoLabelConfig::new(0.95, 0.95).unwrap()).unwrap();
            let any_ot = none.iter().any(|d| matches!(d, PseudoLabelDecision::OtPlan { .. }));
            prop_assert!(!any_ot);
            let all = batch_decide(&probs, Some(&plan), &PseudoLabelConfig::new(0.95, 0.0).unwrap()).unwrap();
            for (i, d) in all.iter().enumerate() {
                let usable = plan.plan.column(i).iter().any(|&v| v > 0.0);
                if linalg::argmax(probs.row(i)) < 4 && probs.row(i).iter().copied().fold(0.0, f64::max) < 0.95 && usable {
                    let is_ot = matches!(d, PseudoLabelDecision::OtPlan { .. });
                    prop_assert!(is_ot);
                }
            }
            let again = batch_decide(&probs, Some(&plan), &PseudoLabelConfig::new(0.95, 0.0).unwrap()).unwrap();
            prop_assert_eq!(all, again);
        }
    }
}
