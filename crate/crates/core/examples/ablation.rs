// Compares the base objective with the full objective over two seeds.

use promm::runner::{suites, AblationMask, RunConfig};

pub fn run_example() -> promm::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::default();
    cfg.train.steps = 150;
    cfg.train.audit_every_epochs = 0;
    cfg.out = dir.path().to_path_buf();
    let base = AblationMask {
        intra: false,
        inter: false,
        batch: false,
        ..AblationMask::FULL
    };
    let masks = vec![("base".to_string(), base), ("full".to_string(), AblationMask::FULL)];
    let result = suites::ablation_subset(&cfg, masks, &[0, 1])?;
    for row in &result.aggregate {
        println!("{:<6} mca {:.3} ± {:.3}", row.member, row.mca_mean, row.mca_std);
    }
    suites::write_suite(&result, dir.path())?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> promm::Result<()> {
    run_example()
}
