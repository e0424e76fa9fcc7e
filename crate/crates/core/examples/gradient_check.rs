// Finite-difference check of every loss gradient and of the full objective.

use promm::checks;
use promm::gradcheck::GradCheckConfig;

pub fn run_example() -> promm::Result<()> {
    let cfg = GradCheckConfig::default();
    let all = checks::loss_checks(7, &cfg)?.into_iter().chain(checks::objective_checks(7, &cfg)?);
    for c in all {
        println!(
            "{:<32} {:>4} entries  max rel err {:.2e}  {}",
            c.name,
            c.report.checked,
            c.report.max_rel_error,
            if c.report.passed { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> promm::Result<()> {
    run_example()
}
