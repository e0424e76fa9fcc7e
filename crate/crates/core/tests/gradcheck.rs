use promm::checks;
use promm::gradcheck::GradCheckConfig;

#[test]
fn every_gradient_matches_finite_differences_over_20_seeds() {
    let cfg = GradCheckConfig::default();
    let mut names = std::collections::BTreeSet::new();
    for seed in 0..20 {
        let all = checks::loss_checks(seed, &cfg)
            .unwrap()
            .into_iter()
            .chain(checks::objective_checks(seed, &cfg).unwrap());
        for c in all {
            assert!(c.report.checked > 0, "{} checked nothing", c.name);
            assert!(c.report.passed, "seed {seed} {}: {:?}", c.name, c.report);
            names.insert(c.name);
        }
    }
    for required in [
        "base/source_probs",
        "base/labeled_probs",
        "base/strong_probs",
        "intra/strong_features",
        "inter_samples/source_features",
        "batch/weak_sharpened",
        "batch/strong_similarity",
        "objective/total",
    ] {
        assert!(names.contains(required), "missing check {required}");
    }
}

#[test]
fn objective_check_covers_every_parameter() {
    let (net, _, _) = checks::small_problem(0).unwrap();
    let reports = checks::objective_checks(0, &GradCheckConfig::default()).unwrap();
    assert!(reports.iter().all(|c| c.report.checked == net.param_count()));
}
