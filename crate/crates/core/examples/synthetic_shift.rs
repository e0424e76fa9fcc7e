// Generates a shifted two-domain scenario and round-trips it through CSV.

use promm::data::{self, DomainScenario};

pub fn run_example() -> promm::Result<()> {
    let scenario = DomainScenario {
        shots: 3,
        rotation_deg: 45.0,
        ..DomainScenario::default()
    };
    let split = data::generate(&scenario)?;
    println!(
        "{} classes: {} source, {} labeled target, {} unlabeled target",
        split.classes,
        split.source.labels.len(),
        split.target_labeled.labels.len(),
        split.target_unlabeled.len()
    );
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("split.csv");
    data::write_csv(&split, &path)?;
    let back = data::load_csv(&path)?;
    println!("csv round trip preserves labels: {}", back.source.labels == split.source.labels);
    Ok(())
}

#[allow(dead_code)]
fn main() -> promm::Result<()> {
    run_example()
}
