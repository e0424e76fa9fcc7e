// Batch-level consistency between weak and strong views for both classifiers.

use promm::linalg::{self, SharpenConfig};
use promm::losses;
use promm::Matrix;

pub fn run_example() -> promm::Result<()> {
    let weak = Matrix::from_rows(&[vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.2, 0.2, 0.6]]);
    let agreeing = weak.clone();
    let shuffled = Matrix::from_rows(&[vec![0.1, 0.8, 0.1], vec![0.2, 0.2, 0.6], vec![0.8, 0.1, 0.1]]);
    let sharpen = SharpenConfig::default();
    let pw = linalg::sharpen_rows(&weak, sharpen)?;
    for (name, strong) in [("agreeing", &agreeing), ("shuffled", &shuffled)] {
        let ps = linalg::sharpen_rows(strong, sharpen)?;
        let loss = losses::dual_consistency_loss(&pw, &ps, &weak, strong)?;
        println!(
            "{name}: total {:.4} linear {:.4} prototype {:.4}",
            loss.value, loss.linear, loss.prototype
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> promm::Result<()> {
    run_example()
}
