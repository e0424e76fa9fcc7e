// Prototypes from labeled target features, then EMA updates from new batches.

use promm::prototype::{PrototypeSet, SimilarityConfig};
use promm::Matrix;

pub fn run_example() -> promm::Result<()> {
    let labeled = Matrix::from_rows(&[vec![1.0, 0.1], vec![0.1, 1.0], vec![-1.0, 0.0]]);
    let mut protos = PrototypeSet::init(&labeled, &[0, 1, 2], 3, 0.9)?;
    let batch = Matrix::from_rows(&[vec![0.7, 0.7], vec![-0.9, -0.3]]);
    for step in 0..5 {
        let next = protos.ema_update(&batch, &[1, 2])?;
        println!("step {step}: drift {:.4}", next.drift(&protos));
        protos = next;
    }
    let probs = protos.similarity_softmax_over_classes(&batch, SimilarityConfig::default())?;
    for r in 0..probs.rows() {
        println!("sample {r}: {:?}", probs.row(r).iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> promm::Result<()> {
    run_example()
}
