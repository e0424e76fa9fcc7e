//! Acceptance criteria. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line; exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use promm::checks;
use promm::gradcheck::GradCheckConfig;
use promm::linalg::{self, SharpenConfig};
use promm::losses;
use promm::ot::{self, SinkhornConfig, TransportProblem};
use promm::prototype::PrototypeSet;
use promm::runner::{self, suites, AblationMask, RunConfig};
use promm::Matrix;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let row = m.row_mut(r);
        row.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        let n = linalg::norm(row);
        row.iter_mut().for_each(|v| *v /= n);
    }
    m
}

fn c1_transport() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = SinkhornConfig {
        epsilon: 0.01,
        ..SinkhornConfig::default()
    };
    let (mut worst_res, mut worst_gap, mut failures) = (0.0f64, 0.0f64, 0);
    for _ in 0..25 {
        let (k, m) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let cost = ot::build_cost_matrix(&unit_rows(&mut rng, k, 3), &unit_rows(&mut rng, m, 3)).unwrap();
        let problem = TransportProblem::uniform(cost.clone(), &cfg);
        let plan = ot::solve_sinkhorn(&problem).unwrap();
        let exact = ot::solve_exact_lp(&cost, &problem.row_marginal, &problem.col_marginal).unwrap();
        let (entropic, optimal) = (plan.cost(&cost).unwrap(), exact.cost(&cost).unwrap());
        let gap = (entropic - optimal).abs() / optimal.max(1e-12);
        worst_res = worst_res.max(plan.max_residual());
        worst_gap = worst_gap.max(gap);
        if plan.max_residual() > 1e-6 || gap > 0.02 {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        failures == 0 && within(elapsed, 1),
        format!(
            "25 instances, max residual {worst_res:.2e}, max cost gap {:.3}%, {failures} failures, {elapsed:.2?}",
            100.0 * worst_gap
        ),
    )
}

fn c2_gradients() -> Verdict {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let (mut total, mut failed, mut worst) = (0, Vec::new(), 0.0f64);
    for seed in 0..20 {
        let all = checks::loss_checks(seed, &cfg)
            .unwrap()
            .into_iter()
            .chain(checks::objective_checks(seed, &cfg).unwrap());
        for c in all {
            total += 1;
            worst = worst.max(c.report.max_rel_error);
            if !c.report.passed {
                failed.push(format!("{}@{seed}", c.name));
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        failed.is_empty() && within(elapsed, 30),
        format!("{total} checks over 20 seeds, worst rel err {worst:.2e}, failed {failed:?}, {elapsed:.2?}"),
    )
}

fn c3_identities() -> Verdict {
    let half = Matrix::from_rows(&[vec![0.5, 0.5]]);
    let empty = Matrix::zeros(0, 2);
    let ce = losses::base_loss(&half, &[0], &empty, &[], &empty, &empty, 0.95).unwrap().value;
    let dual = losses::dual_consistency_loss(&half, &half, &half, &half).unwrap().value;
    let plan = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]);
    let cost = Matrix::from_rows(&[vec![0.2, 1.8], vec![1.8, 0.2]]);
    let intra = losses::intra_loss_from_cost(&plan, &cost).unwrap();
    let errs = [(ce - 2f64.ln()).abs(), (dual - 2.0).abs(), (intra - 0.2).abs()];
    verdict(
        errs.iter().all(|&e| e <= 1e-9),
        format!("half-confidence CE {ce:.12}, dual {dual:.12}, intra {intra:.12}"),
    )
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| 3.0 * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    linalg::row_softmax(&Matrix::row_vector(&logits), 1.0).unwrap().row(0).to_vec()
}

fn c4_sharpen_and_phi() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = [0usize; 4];
    for _ in 0..1000 {
        let n = rng.random_range(2..=8);
        let p = random_distribution(&mut rng, n);
        let cfg = SharpenConfig::new(rng.random_range(0.05..0.99)).unwrap();
        let q = linalg::sharpen(&p, cfg).unwrap();
        violations[0] += usize::from(linalg::entropy(&q) > linalg::entropy(&p) + 1e-12);
        violations[1] += usize::from(linalg::argmax(&q) != linalg::argmax(&p));

        let rows = rng.random_range(1..=6);
        let cols = rng.random_range(1..=6);
        let data = (0..rows * cols).map(|_| rng.random_range(0.0..2.0)).collect();
        let r = Matrix::from_vec(rows, cols, data).unwrap();
        let phi = linalg::row_normalize_phi(&r).unwrap();
        let twice = linalg::row_normalize_phi(&phi).unwrap();
        violations[2] += usize::from(twice.max_abs_diff(&phi) > 1e-12);
        let stochastic = |v: &[f64]| (v.iter().sum::<f64>() - 1.0).abs() <= 1e-12 && v.iter().all(|&x| x >= 0.0);
        let bad = !stochastic(&q) || (0..rows).any(|i| !stochastic(phi.row(i)));
        violations[3] += usize::from(bad);
    }
    verdict(
        violations.iter().all(|&v| v == 0),
        format!(
            "1000 inputs each; violations: entropy {}, argmax {}, idempotence {}, row-stochastic {}",
            violations[0], violations[1], violations[2], violations[3]
        ),
    )
}

fn quick(mut cfg: RunConfig) -> RunConfig {
    cfg.train.audit_every_epochs = 0;
    cfg.out = std::env::temp_dir().join(format!("promm-acceptance-{}", std::process::id()));
    cfg
}

fn c5_pseudo_labels() -> Verdict {
    let start = Instant::now();
    let mut cfg = quick(RunConfig::default());
    cfg.transport.full_dataset = true;
    let r = suites::pseudo_label_comparison(&cfg, &SEEDS).unwrap();
    let elapsed = start.elapsed();
    verdict(
        r.three_way >= r.linear && r.three_way >= r.prototype && within(elapsed, 120),
        format!(
            "coverage {:.3} (all three rules), accuracy three-way {:.4} linear {:.4} prototype {:.4}, {elapsed:.1?}",
            r.coverage, r.three_way, r.linear, r.prototype
        ),
    )
}

fn c6_ablation() -> Verdict {
    let start = Instant::now();
    let base = AblationMask {
        intra: false,
        inter: false,
        batch: false,
        ..AblationMask::FULL
    };
    let masks = vec![("base".to_string(), base), ("full".to_string(), AblationMask::FULL)];
    let r = suites::ablation_subset(&quick(RunConfig::default()), masks, &SEEDS).unwrap();
    let (b, f) = (r.member("base").unwrap().mca_mean, r.member("full").unwrap().mca_mean);
    let elapsed = start.elapsed();
    verdict(
        f - b >= 0.03 && within(elapsed, 300),
        format!("MCA base {b:.4} full {f:.4} (+{:.1} pp), {elapsed:.1?}", 100.0 * (f - b)),
    )
}

fn c7_tau2() -> Verdict {
    let start = Instant::now();
    let sweep = suites::tau2_sweep(&quick(RunConfig::default()), &[0.1, 0.2, 0.3, 0.4, 0.5], &SEEDS).unwrap();
    let band: Vec<String> = sweep
        .result
        .aggregate
        .iter()
        .map(|a| format!("{}={:.4}", a.member, a.mca_mean))
        .collect();
    verdict(
        sweep.active_range() <= 0.03 && sweep.control_mca < sweep.active_min,
        format!(
            "range {:.2} pp, control {:.4} vs band min {:.4} [{}], {:.1?}",
            100.0 * sweep.active_range(),
            sweep.control_mca,
            sweep.active_min,
            band.join(" "),
            start.elapsed()
        ),
    )
}

fn c8_shots() -> Verdict {
    let start = Instant::now();
    let sweep = suites::shots_sweep(&quick(RunConfig::default()), &[1, 3, 5, 10], &SEEDS).unwrap();
    let means: Vec<String> = sweep
        .result
        .aggregate
        .iter()
        .map(|a| format!("{}:{:.4}±{:.4}", a.value, a.mca_mean, a.mca_std))
        .collect();
    verdict(
        sweep.spearman_rho > 0.0,
        format!("spearman {:.3}, MCA by shots [{}], {:.1?}", sweep.spearman_rho, means.join(" "), start.elapsed()),
    )
}

fn c9_ema() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dim = rng.random_range(2..=16);
        let target = unit_rows(&mut rng, 1, dim);
        let mut start = unit_rows(&mut rng, 1, dim);
        // keep away from the antipode, where the direction is undefined
        while linalg::dot(start.row(0), target.row(0)) < -0.99 {
            start = unit_rows(&mut rng, 1, dim);
        }
        let mut set = PrototypeSet::from_matrix(start, 0.9).unwrap();
        let distance = |s: &PrototypeSet| 1.0 - linalg::dot(s.matrix().row(0), target.row(0));
        let initial = distance(&set);
        for _ in 0..50 {
            set = set.ema_update(&target, &[0]).unwrap();
        }
        worst = worst.max(distance(&set) / initial);
    }
    verdict(worst <= 1e-2, format!("100 random starts, worst distance ratio after 50 updates {worst:.2e}"))
}

fn c10_determinism() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let cfg = RunConfig {
            out: d.path().to_path_buf(),
            ..RunConfig::default()
        };
        runner::train(&cfg).unwrap();
    }
    let same = |f: &str| std::fs::read(dirs[0].path().join(f)).unwrap() == std::fs::read(dirs[1].path().join(f)).unwrap();
    let (metrics, ckpt) = (same("metrics.csv"), same("checkpoint.bin"));
    verdict(
        metrics && ckpt,
        format!("default config, seed 0: metrics.csv identical {metrics}, checkpoint identical {ckpt}"),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("C1 transport vs exact LP", c1_transport),
        ("C2 gradient suite", c2_gradients),
        ("C3 closed-form loss identities", c3_identities),
        ("C4 sharpening and normalization properties", c4_sharpen_and_phi),
        ("C5 pseudo-label strategy", c5_pseudo_labels),
        ("C6 ablation direction", c6_ablation),
        ("C7 tau2 robustness", c7_tau2),
        ("C8 shots monotonicity", c8_shots),
        ("C9 prototype EMA convergence", c9_ema),
        ("C10 determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let v = run();
        failed += usize::from(!v.pass);
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let _ = std::fs::remove_dir_all(quick(RunConfig::default()).out);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
