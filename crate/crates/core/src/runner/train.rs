//! The training loop, evaluation, and the artifacts a run leaves behind.
//!
//! Per step: sample the three batches, forward every view, solve the
//! prototype-to-weak-view transport problem, assign pseudo-labels with the
//! pre-update prototypes, evaluate and backpropagate the objective, then
//! update prototypes and parameters.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{self, mix_seed, SsdaSplit, Strength, UnlabeledSet};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{self, ModelDims, Network, OptimizerState};
use crate::objective::{self, Batch, FrozenTargets};
use crate::ot::{self, SinkhornConfig, TransportPlan, TransportProblem};
use crate::prototype::PrototypeSet;
use crate::pseudo_label::{self, PseudoLabelDecision};

use super::config::RunConfig;

const STREAM_INIT: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_LABELED: u64 = 3;
const STREAM_PERMUTATION: u64 = 4;
const STREAM_AUGMENT: u64 = 5;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const AUDIT_FILE: &str = "pseudo_labels.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LAST_GOOD_FILE: &str = "last_good.bin";
pub const CONFIG_FILE: &str = "config.toml";

/// One row of `metrics.csv`. Branch accuracies cover the steps since the
/// previous row; a branch that assigned nothing reports accuracy 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss_base: f64,
    pub loss_intra: f64,
    pub loss_inter: f64,
    pub loss_batch: f64,
    pub loss_total: f64,
    pub overall_acc: f64,
    pub mca: f64,
    pub pl_confident_acc: f64,
    pub pl_confident_cov: f64,
    pub pl_ot_acc: f64,
    pub pl_ot_cov: f64,
    pub pl_abstain_rate: f64,
    pub ot_converged_rate: f64,
    pub prototype_drift: f64,
}

/// Pseudo-label accuracy of the three-way rule against two single-source
/// rankings given the same number of labels per batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PseudoLabelStudy {
    pub samples: usize,
    pub labeled: usize,
    pub three_way_correct: usize,
    pub linear_correct: usize,
    pub prototype_correct: usize,
}

impl PseudoLabelStudy {
    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn coverage(&self) -> f64 {
        Self::ratio(self.labeled, self.samples)
    }

    pub fn three_way_accuracy(&self) -> f64 {
        Self::ratio(self.three_way_correct, self.labeled)
    }

    pub fn linear_accuracy(&self) -> f64 {
        Self::ratio(self.linear_correct, self.labeled)
    }

    pub fn prototype_accuracy(&self) -> f64 {
        Self::ratio(self.prototype_correct, self.labeled)
    }

    /// Records one batch: `scores` are per-sample `(class, confidence)` pairs.
    fn add(
        &mut self,
        decisions: &[PseudoLabelDecision],
        linear: &[(usize, f64)],
        prototype: &[(usize, f64)],
        truth: &[usize],
    ) {
        let n = decisions.iter().filter(|d| d.class().is_some()).count();
        self.samples += decisions.len();
        self.labeled += n;
        self.three_way_correct += decisions
            .iter()
            .zip(truth)
            .filter(|(d, &y)| d.class() == Some(y))
            .count();
        self.linear_correct += top_n_correct(linear, truth, n);
        self.prototype_correct += top_n_correct(prototype, truth, n);
    }
}

/// Correct predictions among the `n` most confident samples; ties keep index order.
fn top_n_correct(scores: &[(usize, f64)], truth: &[usize], n: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].1.total_cmp(&scores[a].1));
    order.iter().take(n).filter(|&&i| scores[i].0 == truth[i]).count()
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    config_hash: &'a str,
    seed: u64,
    steps: usize,
    ablation: String,
    final_metrics: &'a MetricsRecord,
    sinkhorn_unconverged_steps: usize,
    pseudo_label_study: StudySummary,
}

#[derive(Debug, Serialize)]
struct StudySummary {
    counts: PseudoLabelStudy,
    coverage: f64,
    three_way_accuracy: f64,
    linear_accuracy: f64,
    prototype_accuracy: f64,
}

#[derive(Debug, Serialize)]
struct AuditRow {
    epoch: usize,
    sample_id: usize,
    branch: &'static str,
    assigned: Option<usize>,
    #[serde(rename = "true")]
    truth: usize,
    confidence: f64,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config_hash: String,
    pub records: Vec<MetricsRecord>,
    pub study: PseudoLabelStudy,
    pub network: Network,
    pub prototypes: PrototypeSet,
    pub out_dir: PathBuf,
    pub sinkhorn_unconverged_steps: usize,
}

impl RunOutcome {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("every run records step 0")
    }
}

/// Accuracy over all samples and the mean of per-class accuracies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub overall_acc: f64,
    pub mca: f64,
    pub per_class_acc: Vec<f64>,
}

/// Classes without samples are left out of the class mean.
pub fn accuracy_metrics(predictions: &[usize], truth: &[usize], classes: usize) -> EvalReport {
    assert_eq!(predictions.len(), truth.len(), "unaligned predictions");
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(truth) {
        counts[y] += 1;
        hits[y] += usize::from(p == y);
    }
    let per_class_acc: Vec<f64> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    let present: Vec<f64> = per_class_acc
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(&a, _)| a)
        .collect();
    let total: usize = hits.iter().sum();
    EvalReport {
        samples: truth.len(),
        overall_acc: if truth.is_empty() { 0.0 } else { total as f64 / truth.len() as f64 },
        mca: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
        per_class_acc,
    }
}

/// Scores `net` on the held-out labels of the unlabeled target split.
pub fn evaluate_network(net: &Network, unlabeled: &UnlabeledSet, classes: usize) -> Result<EvalReport> {
    let predictions = net.predict(&unlabeled.features)?;
    Ok(accuracy_metrics(&predictions, unlabeled.labels_for_evaluation(), classes))
}

/// Loads a checkpoint and scores it on the split.
pub fn evaluate(checkpoint: &Path, split: &SsdaSplit) -> Result<EvalReport> {
    let (net, _) = model::load_checkpoint(checkpoint)?;
    let dims = net.dims();
    if dims.input_dim != split.input_dim() || dims.classes != split.classes {
        return Err(Error::shape(
            "evaluate",
            format!("input {} / {} classes", dims.input_dim, dims.classes),
            format!("input {} / {} classes", split.input_dim(), split.classes),
        ));
    }
    evaluate_network(&net, &split.target_unlabeled, split.classes)
}

/// The split a config points at: its CSV if set, else the generated scenario.
pub fn load_split(cfg: &RunConfig) -> Result<SsdaSplit> {
    match &cfg.csv {
        Some(path) => data::load_csv(path),
        None => data::generate(&cfg.scenario).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        }),
    }
}

fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_PERMUTATION, epoch as u64]));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

fn solve_plan(prototypes: &PrototypeSet, features: &Matrix, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let cost = ot::build_cost_matrix(prototypes.matrix(), features)?;
    ot::solve_sinkhorn(&TransportProblem::uniform(cost, cfg))
}

/// Decisions for rows of `probs` whose plan columns are `columns[i]` of `plan`.
fn decide_with_columns(
    probs: &Matrix,
    plan: Option<&TransportPlan>,
    columns: &[usize],
    cfg: &pseudo_label::PseudoLabelConfig,
) -> Result<Vec<PseudoLabelDecision>> {
    let plan = plan.filter(|p| p.converged);
    (0..probs.rows())
        .map(|i| {
            let col = plan.map(|p| p.plan.column(columns[i]));
            pseudo_label::decide(probs.row(i), col.as_deref(), cfg)
        })
        .collect()
}

fn row_argmax_scores(m: &Matrix) -> Vec<(usize, f64)> {
    (0..m.rows())
        .map(|r| {
            let k = linalg::argmax(m.row(r));
            (k, m[(r, k)])
        })
        .collect()
}

#[derive(Default)]
struct BranchWindow {
    samples: usize,
    confident: (usize, usize),
    ot: (usize, usize),
    abstain: usize,
    steps: usize,
    converged: usize,
}

impl BranchWindow {
    fn add(&mut self, decisions: &[PseudoLabelDecision], truth: &[usize], converged: bool) {
        self.steps += 1;
        self.converged += usize::from(converged);
        self.samples += decisions.len();
        for (d, &y) in decisions.iter().zip(truth) {
            match d {
                PseudoLabelDecision::Confident { class, .. } => {
                    self.confident.0 += 1;
                    self.confident.1 += usize::from(*class == y);
                }
                PseudoLabelDecision::OtPlan { class } => {
                    self.ot.0 += 1;
                    self.ot.1 += usize::from(*class == y);
                }
                PseudoLabelDecision::Abstain => self.abstain += 1,
            }
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    PseudoLabelStudy::ratio(num, den)
}

struct Artifacts {
    dir: PathBuf,
    metrics: csv::Writer<fs::File>,
    audit: csv::Writer<fs::File>,
}

fn io_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{}: {other:?}", path.display()))),
    }
}

impl Artifacts {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_toml_string())?;
        let mp = dir.join(METRICS_FILE);
        let ap = dir.join(AUDIT_FILE);
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            metrics: csv::Writer::from_path(&mp).map_err(|e| io_err(&mp, e))?,
            audit: csv::Writer::from_path(&ap).map_err(|e| io_err(&ap, e))?,
        })
    }

    fn record(&mut self, r: &MetricsRecord) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        self.metrics.serialize(r).map_err(|e| io_err(&path, e))
    }

    fn audit_row(&mut self, row: &AuditRow) -> Result<()> {
        let path = self.dir.join(AUDIT_FILE);
        self.audit.serialize(row).map_err(|e| io_err(&path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.audit.flush()?;
        Ok(())
    }
}

/// Trains on the split the config names and writes artifacts to `cfg.out`.
pub fn train(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let split = load_split(cfg)?;
    train_on_split(cfg, &split)
}

/// Trains on an explicit split. Labels of the unlabeled split feed metrics
/// and the audit only; they never reach the loss, the prototypes, or the
/// parameters.
pub fn train_on_split(cfg: &RunConfig, split: &SsdaSplit) -> Result<RunOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    let classes = split.classes;
    let unlabeled = &split.target_unlabeled;
    let truth_all = unlabeled.labels_for_evaluation();
    let n_u = unlabeled.len();
    if n_u == 0 || split.source.labels.is_empty() || split.target_labeled.labels.is_empty() {
        return Err(Error::Config("every split must be non-empty".into()));
    }
    for (name, m) in [
        ("source", &split.source.features),
        ("labeled target", &split.target_labeled.features),
        ("unlabeled target", &unlabeled.features),
    ] {
        if !m.is_finite() {
            return Err(Error::InvalidArgument(format!("{name} features contain non-finite values")));
        }
    }

    let mut artifacts = Artifacts::create(&cfg.out, cfg)?;
    let dims = ModelDims {
        input_dim: split.input_dim(),
        hidden_dim: t.hidden_dim,
        feature_dim: t.feature_dim,
        classes,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_INIT]));
    let mut net = Network::new(dims, &mut init_rng);
    let mut opt = OptimizerState::new(&net, t.learning_rate, t.momentum).with_schedule(t.schedule);
    let (initial_features, _) = net.forward_features(&split.target_labeled.features)?;
    let mut protos = PrototypeSet::init(
        &initial_features,
        &split.target_labeled.labels,
        classes,
        cfg.prototypes.momentum,
    )?;

    let obj = cfg.objective();
    let pl_cfg = cfg.pseudo_label();
    let sk = cfg.sinkhorn();
    let uses_ot = cfg.ablation.intra;
    let bu = t.batch_unlabeled;
    let steps_per_epoch = n_u.div_ceil(bu);
    let aug_seed = mix_seed(&[cfg.seed, STREAM_AUGMENT]);

    let mut records = Vec::new();
    let mut study = PseudoLabelStudy::default();
    let mut window = BranchWindow::default();
    let mut drift_reference = protos.clone();
    let mut permutation = Vec::new();
    let mut full_plan: Option<TransportPlan> = None;
    let mut unconverged = 0usize;
    let mut last_audit: Option<usize> = None;

    for step in 0..=t.steps {
        let epoch = step / steps_per_epoch;
        let epoch_start = step % steps_per_epoch == 0;
        if epoch_start {
            permutation = epoch_permutation(n_u, cfg.seed, epoch);
        }
        let audit_due = t.audit_every_epochs > 0
            && ((epoch_start && epoch.is_multiple_of(t.audit_every_epochs)) || step == t.steps)
            && last_audit != Some(step);

        let outcome = (|| -> Result<()> {
            if uses_ot && cfg.transport.full_dataset && (epoch_start || full_plan.is_none()) {
                let (f, _) = net.forward_features(&unlabeled.features)?;
                full_plan = Some(solve_plan(&protos, &f, &sk)?);
            }
            if audit_due {
                last_audit = Some(step);
                let (f, _) = net.forward_features(&unlabeled.features)?;
                let (p, _) = net.forward_probs(&f)?;
                let plan = if uses_ot { Some(solve_plan(&protos, &f, &sk)?) } else { None };
                let decisions = pseudo_label::batch_decide(&p, plan.as_ref(), &pl_cfg)?;
                for (i, d) in decisions.iter().enumerate() {
                    artifacts.audit_row(&AuditRow {
                        epoch,
                        sample_id: i,
                        branch: d.branch(),
                        assigned: d.class(),
                        truth: truth_all[i],
                        confidence: p[(i, linalg::argmax(p.row(i)))],
                    })?;
                }
            }

            let offset = (step % steps_per_epoch) * bu;
            let u_idx: Vec<usize> = (0..bu).map(|i| permutation[(offset + i) % n_u]).collect();
            let mut src_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_SOURCE, step as u64]));
            let mut lab_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_LABELED, step as u64]));
            let s_idx = data::sample_indices(split.source.labels.len(), t.batch_source, &mut src_rng);
            let l_idx = data::sample_indices(split.target_labeled.labels.len(), t.batch_labeled, &mut lab_rng);
            let raw_u = unlabeled.features.select_rows(&u_idx);
            let batch = Batch {
                source_x: split.source.features.select_rows(&s_idx),
                source_y: s_idx.iter().map(|&i| split.source.labels[i]).collect(),
                labeled_x: split.target_labeled.features.select_rows(&l_idx),
                labeled_y: l_idx.iter().map(|&i| split.target_labeled.labels[i]).collect(),
                weak_x: data::augment(&raw_u, &cfg.augment, Strength::Weak, aug_seed, step as u64),
                strong_x: data::augment(&raw_u, &cfg.augment, Strength::Strong, aug_seed, step as u64),
            };

            let fwd = objective::forward(&net, &batch)?;
            let plan = if uses_ot {
                Some(solve_plan(&protos, &fwd.weak.features, &sk)?)
            } else {
                None
            };
            let converged = plan.as_ref().is_some_and(|p| p.converged);
            if uses_ot && !converged {
                unconverged += 1;
                log::debug!("step {step}: transport plan did not converge; intra term and OT labels skipped");
            }
            let decisions = match (&full_plan, uses_ot) {
                (Some(fp), true) => decide_with_columns(&fwd.weak.probs, Some(fp), &u_idx, &pl_cfg)?,
                _ => pseudo_label::batch_decide(&fwd.weak.probs, plan.as_ref(), &pl_cfg)?,
            };

            let truth: Vec<usize> = u_idx.iter().map(|&i| truth_all[i]).collect();
            window.add(&decisions, &truth, converged);
            let proto_scores = row_argmax_scores(&fwd.weak.features.matmul_t(protos.matrix())?);
            study.add(&decisions, &row_argmax_scores(&fwd.weak.probs), &proto_scores, &truth);

            let frozen = FrozenTargets {
                prototypes: protos.matrix().clone(),
                plan,
                pseudo_targets: decisions.iter().map(|d| d.class()).collect(),
            };
            let training = step < t.steps;
            let (report, grads) = objective::compute(&net, &fwd, &batch, &frozen, &obj, training)?;

            if step % t.metrics_every == 0 || step == t.steps {
                let eval = evaluate_network(&net, unlabeled, classes)?;
                let w = std::mem::take(&mut window);
                let record = MetricsRecord {
                    step,
                    epoch,
                    learning_rate: opt.schedule.rate(opt.learning_rate, step),
                    loss_base: report.base,
                    loss_intra: report.intra,
                    loss_inter: report.inter,
                    loss_batch: report.batch,
                    loss_total: report.total,
                    overall_acc: eval.overall_acc,
                    mca: eval.mca,
                    pl_confident_acc: ratio(w.confident.1, w.confident.0),
                    pl_confident_cov: ratio(w.confident.0, w.samples),
                    pl_ot_acc: ratio(w.ot.1, w.ot.0),
                    pl_ot_cov: ratio(w.ot.0, w.samples),
                    pl_abstain_rate: ratio(w.abstain, w.samples),
                    ot_converged_rate: if uses_ot { ratio(w.converged, w.steps) } else { 0.0 },
                    prototype_drift: protos.drift(&drift_reference),
                };
                drift_reference = protos.clone();
                artifacts.record(&record)?;
                records.push(record);
            }

            if let Some(grads) = grads {
                if cfg.ablation.prototype_ema {
                    // Labeled target features plus pseudo-labeled weak-view features.
                    let picked: Vec<(usize, usize)> = decisions
                        .iter()
                        .enumerate()
                        .filter_map(|(i, d)| d.class().map(|c| (i, c)))
                        .collect();
                    let mut labels = batch.labeled_y.clone();
                    labels.extend(picked.iter().map(|&(_, c)| c));
                    let mut rows = fwd.labeled.features.data().to_vec();
                    for &(i, _) in &picked {
                        rows.extend_from_slice(fwd.weak.features.row(i));
                    }
                    let feats = Matrix::from_vec(labels.len(), fwd.weak.features.cols(), rows)?;
                    protos = protos.ema_update(&feats, &labels)?;
                }
                opt.sgd_step(&mut net, &grads)?;
            }
            Ok(())
        })();

        if let Err(e) = outcome {
            if e.exit_code() == 2 {
                let path = cfg.out.join(LAST_GOOD_FILE);
                model::save_checkpoint(&path, &net, Some(&protos))?;
                artifacts.flush()?;
                return Err(Error::NumericalAbort {
                    step,
                    reason: e.to_string(),
                    last_good: Some(path),
                });
            }
            return Err(e);
        }
    }

    artifacts.flush()?;
    model::save_checkpoint(&cfg.out.join(CHECKPOINT_FILE), &net, Some(&protos))?;
    let config_hash = cfg.hash();
    let final_record = records.last().expect("final step is recorded");
    let summary = Summary {
        config_hash: &config_hash,
        seed: cfg.seed,
        steps: t.steps,
        ablation: cfg.ablation.label(),
        final_metrics: final_record,
        sinkhorn_unconverged_steps: unconverged,
        pseudo_label_study: StudySummary {
            counts: study,
            coverage: study.coverage(),
            three_way_accuracy: study.three_way_accuracy(),
            linear_accuracy: study.linear_accuracy(),
            prototype_accuracy: study.prototype_accuracy(),
        },
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(cfg.out.join(SUMMARY_FILE), json)?;

    Ok(RunOutcome {
        config_hash,
        records,
        study,
        network: net,
        prototypes: protos,
        out_dir: cfg.out.clone(),
        sinkhorn_unconverged_steps: unconverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let truth: Vec<usize> = (0..5).flat_map(|k| vec![k; 4]).collect();
        let constant = accuracy_metrics(&[2; 20], &truth, 5);
        assert!((constant.overall_acc - 0.2).abs() < 1e-12);
        assert!((constant.mca - 0.2).abs() < 1e-12);

        let perfect = accuracy_metrics(&truth, &truth, 5);
        assert_eq!((perfect.overall_acc, perfect.mca), (1.0, 1.0));

        let mut truth = vec![0; 10];
        truth.extend(vec![1; 30]);
        let mut pred = vec![0; 10];
        pred.extend(vec![1; 15]);
        pred.extend(vec![0; 15]);
        let r = accuracy_metrics(&pred, &truth, 2);
        assert!((r.overall_acc - 0.625).abs() < 1e-12);
        assert!((r.mca - 0.75).abs() < 1e-12);
    }

    #[test]
    fn top_n_ranks_by_confidence() {
        let scores = [(0, 0.9), (1, 0.2), (2, 0.95), (0, 0.5)];
        let truth = [0, 1, 1, 0];
        assert_eq!(top_n_correct(&scores, &truth, 1), 0);
        assert_eq!(top_n_correct(&scores, &truth, 2), 1);
        assert_eq!(top_n_correct(&scores, &truth, 4), 3);
    }
}
