// A short training run, then evaluation of the saved checkpoint.

use promm::runner::{self, RunConfig};

pub fn run_example() -> promm::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::default().with_seed(3);
    cfg.train.steps = 200;
    cfg.out = dir.path().to_path_buf();
    let outcome = runner::train(&cfg)?;
    for r in &outcome.records {
        if r.step % 100 == 0 {
            println!("step {:>4}: loss {:.4} mca {:.3}", r.step, r.loss_total, r.mca);
        }
    }
    let split = runner::load_split(&cfg)?;
    let report = runner::evaluate(&dir.path().join("checkpoint.bin"), &split)?;
    println!("checkpoint: overall {:.3} mca {:.3}", report.overall_acc, report.mca);
    println!("config hash {}", outcome.config_hash);
    Ok(())
}

#[allow(dead_code)]
fn main() -> promm::Result<()> {
    run_example()
}
