//! Multi-run experiments: component ablations, the τ₂ and shots sweeps, and
//! the pseudo-label comparison. Member runs are independent and execute on
//! the rayon pool, each writing into its own subdirectory.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

use super::config::{AblationMask, RunConfig};
use super::train::{self, PseudoLabelStudy};

/// Final metrics of one member run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub member: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
    pub overall_acc: f64,
    pub mca: f64,
    pub loss_intra: f64,
    pub loss_inter: f64,
    pub loss_batch: f64,
    pub pl_coverage: f64,
    pub pl_three_way_acc: f64,
    pub pl_linear_acc: f64,
    pub pl_prototype_acc: f64,
}

/// Mean and sample standard deviation of one member over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub member: String,
    pub value: f64,
    pub seeds: usize,
    pub mca_mean: f64,
    pub mca_std: f64,
    pub overall_mean: f64,
    pub overall_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub runs: Vec<RunRow>,
    pub aggregate: Vec<AggregateRow>,
}

impl SuiteResult {
    pub fn member(&self, name: &str) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|r| r.member == name)
    }
}

/// `(mean, sample standard deviation)`; a single value has deviation 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation. Constant inputs give 0.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "unaligned series");
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// A named configuration with the swept value it stands for.
#[derive(Debug, Clone)]
pub struct Member {
    pub name: String,
    pub value: f64,
    pub config: RunConfig,
}

/// Runs every member under every seed in parallel and aggregates per member.
pub fn run_members(base: &RunConfig, members: &[Member], seeds: &[u64]) -> Result<SuiteResult> {
    if seeds.is_empty() {
        return Err(Error::Config("a suite needs at least one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..members.len())
        .flat_map(|m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let runs: Vec<RunRow> = jobs
        .par_iter()
        .map(|&(m, seed)| {
            let member = &members[m];
            let mut cfg = member.config.clone().with_seed(seed);
            cfg.out = base.out.join(&member.name).join(format!("seed{seed}"));
            let outcome = train::train(&cfg)?;
            let last = outcome.final_record();
            let study: PseudoLabelStudy = outcome.study;
            Ok(RunRow {
                member: member.name.clone(),
                value: member.value,
                seed,
                config_hash: outcome.config_hash.clone(),
                overall_acc: last.overall_acc,
                mca: last.mca,
                loss_intra: last.loss_intra,
                loss_inter: last.loss_inter,
                loss_batch: last.loss_batch,
                pl_coverage: study.coverage(),
                pl_three_way_acc: study.three_way_accuracy(),
                pl_linear_acc: study.linear_accuracy(),
                pl_prototype_acc: study.prototype_accuracy(),
            })
        })
        .collect::<Result<_>>()?;

    let aggregate = members
        .iter()
        .map(|m| {
            let rows: Vec<&RunRow> = runs.iter().filter(|r| r.member == m.name).collect();
            let (mca_mean, mca_std) = mean_std(&rows.iter().map(|r| r.mca).collect::<Vec<_>>());
            let (overall_mean, overall_std) =
                mean_std(&rows.iter().map(|r| r.overall_acc).collect::<Vec<_>>());
            AggregateRow {
                member: m.name.clone(),
                value: m.value,
                seeds: rows.len(),
                mca_mean,
                mca_std,
                overall_mean,
                overall_std,
            }
        })
        .collect();
    Ok(SuiteResult { runs, aggregate })
}

/// Loss-term masks: all eight on/off combinations of the intra, inter and batch terms.
pub fn term_masks() -> Vec<(String, AblationMask)> {
    (0..8u8)
        .map(|bits| {
            let mask = AblationMask {
                intra: bits & 1 != 0,
                inter: bits & 2 != 0,
                batch: bits & 4 != 0,
                ..AblationMask::FULL
            };
            (format!("terms_{}", mask.label()), mask)
        })
        .collect()
}

/// Prototype-branch masks over (linear branch, prototype branch, prototype EMA).
pub fn prototype_masks() -> Vec<(String, AblationMask)> {
    [
        ("linear_static", true, false, false),
        ("prototype_ema", false, true, true),
        ("linear_ema", true, false, true),
        ("both_static", true, true, false),
        ("both_ema", true, true, true),
    ]
    .iter()
    .map(|&(name, linear, prototype, ema)| {
        (
            format!("branches_{name}"),
            AblationMask {
                linear_branch: linear,
                prototype_branch: prototype,
                prototype_ema: ema,
                ..AblationMask::FULL
            },
        )
    })
    .collect()
}

fn masked(base: &RunConfig, masks: Vec<(String, AblationMask)>) -> Vec<Member> {
    masks
        .into_iter()
        .map(|(name, mask)| Member {
            name,
            value: f64::NAN,
            config: RunConfig {
                ablation: mask,
                ..base.clone()
            },
        })
        .collect()
}

/// The eight loss-term masks followed by the five prototype-branch masks.
pub fn ablation_suite(base: &RunConfig, seeds: &[u64]) -> Result<SuiteResult> {
    let mut masks = term_masks();
    masks.extend(prototype_masks());
    run_members(base, &masked(base, masks), seeds)
}

/// Runs the given masks only.
pub fn ablation_subset(base: &RunConfig, masks: Vec<(String, AblationMask)>, seeds: &[u64]) -> Result<SuiteResult> {
    run_members(base, &masked(base, masks), seeds)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tau2Sweep {
    pub result: SuiteResult,
    /// Mean MCA of the `τ₂ = τ₁` control, where the transport branch never fires.
    pub control_mca: f64,
    pub active_min: f64,
    pub active_max: f64,
}

impl Tau2Sweep {
    pub fn active_range(&self) -> f64 {
        self.active_max - self.active_min
    }
}

/// One run per τ₂ value and seed, plus the `τ₂ = τ₁` control.
pub fn tau2_sweep(base: &RunConfig, values: &[f64], seeds: &[u64]) -> Result<Tau2Sweep> {
    let tau1 = base.thresholds.tau1;
    if values.is_empty() || values.iter().any(|&v| !(0.0..=tau1).contains(&v)) {
        return Err(Error::Config(format!("tau2 values must be non-empty and lie in [0, {tau1}]")));
    }
    let mut points = values.to_vec();
    if !points.contains(&tau1) {
        points.push(tau1);
    }
    let members: Vec<Member> = points
        .iter()
        .map(|&v| {
            let mut config = base.clone();
            config.thresholds.tau2 = v;
            Member {
                name: if v == tau1 { "tau2_control".into() } else { format!("tau2_{v}") },
                value: v,
                config,
            }
        })
        .collect();
    let result = run_members(base, &members, seeds)?;
    let control_mca = result.member("tau2_control").expect("control present").mca_mean;
    let active: Vec<f64> = result
        .aggregate
        .iter()
        .filter(|r| r.member != "tau2_control")
        .map(|r| r.mca_mean)
        .collect();
    let (active_min, active_max) = if active.is_empty() {
        (control_mca, control_mca)
    } else {
        (
            active.iter().copied().fold(f64::INFINITY, f64::min),
            active.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    Ok(Tau2Sweep {
        result,
        control_mca,
        active_min,
        active_max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShotsSweep {
    pub result: SuiteResult,
    /// Spearman correlation between shots and mean MCA.
    pub spearman_rho: f64,
}

/// One run per shot count and seed.
pub fn shots_sweep(base: &RunConfig, shots: &[usize], seeds: &[u64]) -> Result<ShotsSweep> {
    if shots.is_empty() || shots.contains(&0) {
        return Err(Error::Config("shot counts must be non-empty and >= 1".into()));
    }
    let members: Vec<Member> = shots
        .iter()
        .map(|&k| {
            let mut config = base.clone();
            config.scenario.shots = k;
            Member {
                name: format!("shots_{k}"),
                value: k as f64,
                config,
            }
        })
        .collect();
    let result = run_members(base, &members, seeds)?;
    let x: Vec<f64> = result.aggregate.iter().map(|r| r.value).collect();
    let y: Vec<f64> = result.aggregate.iter().map(|r| r.mca_mean).collect();
    Ok(ShotsSweep {
        spearman_rho: spearman(&x, &y),
        result,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoLabelComparison {
    pub runs: Vec<RunRow>,
    pub coverage: f64,
    pub three_way: f64,
    pub linear: f64,
    pub prototype: f64,
}

/// Mean pseudo-label accuracy of the three-way rule and of the linear and
/// prototype rankings at the same coverage, over full-objective runs.
pub fn pseudo_label_comparison(base: &RunConfig, seeds: &[u64]) -> Result<PseudoLabelComparison> {
    let member = Member {
        name: "pseudo_labels".into(),
        value: f64::NAN,
        config: base.clone(),
    };
    let result = run_members(base, &[member], seeds)?;
    let avg = |f: fn(&RunRow) -> f64| mean_std(&result.runs.iter().map(f).collect::<Vec<_>>()).0;
    Ok(PseudoLabelComparison {
        coverage: avg(|r| r.pl_coverage),
        three_way: avg(|r| r.pl_three_way_acc),
        linear: avg(|r| r.pl_linear_acc),
        prototype: avg(|r| r.pl_prototype_acc),
        runs: result.runs,
    })
}

/// Writes `runs.csv` and `aggregate.csv` into `dir`.
pub fn write_suite(result: &SuiteResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rows(&result.runs, &dir.join("runs.csv"))?;
    write_rows(&result.aggregate, &dir.join("aggregate.csv"))
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(format!("{}: {e}", path.display())));
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    for r in rows {
        w.serialize(r).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}
