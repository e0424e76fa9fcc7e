// Entropic transport between prototypes and features, checked against the exact LP.

use promm::ot::{self, SinkhornConfig, TransportProblem};
use promm::Matrix;

pub fn run_example() -> promm::Result<()> {
    let prototypes = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let features = Matrix::from_rows(&[
        vec![0.9, 0.1],
        vec![0.8, 0.6],
        vec![0.1, 0.99],
        vec![-0.2, 0.98],
    ]);
    let cost = ot::build_cost_matrix(&prototypes, &features)?;
    let exact = ot::solve_exact_lp(&cost, &[0.5, 0.5], &[0.25; 4])?;
    println!("exact LP cost {:.4}", exact.cost(&cost)?);
    // Smaller epsilon approaches the LP optimum but converges more slowly.
    let mut plan = None;
    for epsilon in [0.2, 0.1, 0.05] {
        let cfg = SinkhornConfig {
            epsilon,
            ..SinkhornConfig::default()
        };
        let p = ot::solve_sinkhorn(&TransportProblem::uniform(cost.clone(), &cfg))?;
        println!(
            "epsilon {epsilon}: cost {:.4}, {} iterations, residual {:.1e}, converged {}",
            p.cost(&cost)?,
            p.iterations,
            p.max_residual(),
            p.converged
        );
        plan = Some(p);
    }
    let plan = plan.expect("solved");
    for j in 0..features.rows() {
        println!("feature {j} -> prototype {}", ot::plan_column_argmax(&plan, j)?);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> promm::Result<()> {
    run_example()
}
