// Confident, transport and abstain decisions for a handful of samples.

use std::f64::consts::FRAC_1_SQRT_2;

use promm::ot::{self, SinkhornConfig, TransportProblem};
use promm::pseudo_label::{self, PseudoLabelConfig};
use promm::Matrix;

pub fn run_example() -> promm::Result<()> {
    let weak_probs = Matrix::from_rows(&[
        vec![0.97, 0.02, 0.01],
        vec![0.5, 0.3, 0.2],
        vec![0.35, 0.33, 0.32],
        vec![0.1, 0.6, 0.3],
    ]);
    let prototypes = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-FRAC_1_SQRT_2, -FRAC_1_SQRT_2]]);
    let features = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-0.6, -0.8], vec![0.1, 0.99]]);
    let cost = ot::build_cost_matrix(&prototypes, &features)?;
    let plan = ot::solve_sinkhorn(&TransportProblem::uniform(cost, &SinkhornConfig::default()))?;
    let decisions = pseudo_label::batch_decide(&weak_probs, Some(&plan), &PseudoLabelConfig::default())?;
    for (i, d) in decisions.iter().enumerate() {
        println!("sample {i}: {} {:?}", d.branch(), d.class());
    }
    let (acc, coverage) = pseudo_label::pseudo_label_accuracy(&decisions, &[0, 1, 2, 1]);
    println!("accuracy {acc:.3} coverage {coverage:.3}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> promm::Result<()> {
    run_example()
}
