//! Run configuration: TOML file plus `--set section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentPolicy, DomainScenario};
use crate::error::{Error, Result};
use crate::linalg::SharpenConfig;
use crate::losses::{DualBranches, LossWeights};
use crate::model::LrSchedule;
use crate::objective::{ObjectiveConfig, TermMask};
use crate::ot::SinkhornConfig;
use crate::prototype::{NormAxis, SimilarityConfig};
use crate::pseudo_label::PseudoLabelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSection {
    pub tau1: f64,
    pub tau2: f64,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        let d = PseudoLabelConfig::default();
        ThresholdSection {
            tau1: d.tau1,
            tau2: d.tau2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureSection {
    /// Prototype similarity temperature.
    pub t1: f64,
    /// Sharpening temperature.
    pub t2: f64,
}

impl Default for TemperatureSection {
    fn default() -> Self {
        TemperatureSection { t1: 0.05, t2: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeSection {
    /// EMA momentum α.
    pub momentum: f64,
    /// Softmax axis of the source-to-prototype similarity in the inter term.
    pub inter_axis: NormAxis,
}

impl Default for PrototypeSection {
    fn default() -> Self {
        PrototypeSection {
            momentum: 0.9,
            inter_axis: NormAxis::Samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    /// Assign transport pseudo-labels from one plan over the whole unlabeled
    /// set, recomputed every epoch, instead of per minibatch.
    pub full_dataset: bool,
}

impl Default for TransportSection {
    fn default() -> Self {
        let d = SinkhornConfig::default();
        TransportSection {
            epsilon: d.epsilon,
            max_iters: d.max_iters,
            tolerance: d.tolerance,
            full_dataset: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_source: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Metrics cadence in steps.
    pub metrics_every: usize,
    /// Pseudo-label audit cadence in epochs over the unlabeled set; 0 disables it.
    pub audit_every_epochs: usize,
    pub schedule: LrSchedule,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 1500,
            batch_source: 32,
            batch_labeled: 16,
            batch_unlabeled: 64,
            hidden_dim: 64,
            feature_dim: 16,
            metrics_every: 50,
            audit_every_epochs: 10,
            schedule: LrSchedule::Constant,
        }
    }
}

/// Component switches for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationMask {
    pub intra: bool,
    pub inter: bool,
    pub batch: bool,
    pub prototype_ema: bool,
    /// Linear-classifier branch of the batch consistency term.
    pub linear_branch: bool,
    /// Prototype-classifier branch of the batch consistency term.
    pub prototype_branch: bool,
}

impl Default for AblationMask {
    fn default() -> Self {
        AblationMask::FULL
    }
}

impl AblationMask {
    pub const FULL: AblationMask = AblationMask {
        intra: true,
        inter: true,
        batch: true,
        prototype_ema: true,
        linear_branch: true,
        prototype_branch: true,
    };

    pub fn terms(&self) -> TermMask {
        TermMask {
            intra: self.intra,
            inter: self.inter,
            batch: self.batch && (self.linear_branch || self.prototype_branch),
        }
    }

    /// Compact tag such as `intra+inter+batch`.
    pub fn label(&self) -> String {
        let on: Vec<&str> = [
            ("intra", self.intra),
            ("inter", self.inter),
            ("batch", self.batch),
        ]
        .iter()
        .filter(|(_, b)| *b)
        .map(|(n, _)| *n)
        .collect();
        if on.is_empty() {
            "base".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Load the split from this CSV instead of generating the scenario.
    pub csv: Option<PathBuf>,
    pub scenario: DomainScenario,
    pub augment: AugmentPolicy,
    pub thresholds: ThresholdSection,
    pub temperatures: TemperatureSection,
    pub prototypes: PrototypeSection,
    pub transport: TransportSection,
    pub weights: LossWeights,
    pub train: TrainSection,
    pub ablation: AblationMask,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            csv: None,
            scenario: DomainScenario::default(),
            augment: AugmentPolicy::default(),
            thresholds: ThresholdSection::default(),
            temperatures: TemperatureSection::default(),
            prototypes: PrototypeSection::default(),
            transport: TransportSection::default(),
            weights: LossWeights {
                lambda_inter: 0.1,
                ..LossWeights::default()
            },
            train: TrainSection::default(),
            ablation: AblationMask::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets the run seed and the scenario seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.scenario.seed = seed;
        self
    }

    /// Re-checks every threshold and temperature constraint.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        self.pseudo_label().validate().map_err(cfg_err)?;
        SimilarityConfig::new(self.temperatures.t1).map_err(cfg_err)?;
        SharpenConfig::new(self.temperatures.t2).map_err(cfg_err)?;
        self.sinkhorn().validate().map_err(cfg_err)?;
        self.weights.validate().map_err(cfg_err)?;
        if self.csv.is_none() {
            self.scenario.validate().map_err(cfg_err)?;
        }
        self.augment.validate().map_err(cfg_err)?;
        let m = self.prototypes.momentum;
        if !(m > 0.0 && m < 1.0) {
            return Err(Error::Config(format!("prototype momentum must lie in (0, 1), got {m}")));
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config("optimizer momentum must lie in [0, 1)".into()));
        }
        if t.batch_source == 0 || t.batch_labeled == 0 || t.batch_unlabeled == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if t.hidden_dim == 0 || t.feature_dim < 2 {
            return Err(Error::Config("hidden_dim must be positive and feature_dim >= 2".into()));
        }
        if t.metrics_every == 0 {
            return Err(Error::Config("metrics_every must be positive".into()));
        }
        if let LrSchedule::InverseDecay { gamma, power } = t.schedule {
            if !(gamma >= 0.0 && power >= 0.0) {
                return Err(Error::Config("schedule gamma and power must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn pseudo_label(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            tau1: self.thresholds.tau1,
            tau2: self.thresholds.tau2,
        }
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.transport.epsilon,
            max_iters: self.transport.max_iters,
            tolerance: self.transport.tolerance,
            unbalanced: false,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            similarity: SimilarityConfig {
                temperature_t1: self.temperatures.t1,
            },
            sharpen: SharpenConfig {
                temperature_t2: self.temperatures.t2,
            },
            inter_axis: self.prototypes.inter_axis,
            weights: self.weights,
            terms: self.ablation.terms(),
            branches: DualBranches {
                linear: self.ablation.linear_branch,
                prototype: self.ablation.prototype_branch,
            },
            route_prototype_gradients: false,
        }
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cursor = table;
    for p in parents {
        let entry = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?} crosses a non-table value")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_are_typed() {
        let cfg = RunConfig::load(
            None,
            &[
                "thresholds.tau2=0.3".into(),
                "train.steps=10".into(),
                "out=some/dir".into(),
                "ablation.intra=false".into(),
                "scenario.translation=[1.0, 2.0]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.thresholds.tau2, 0.3);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.out, PathBuf::from("some/dir"));
        assert!(!cfg.ablation.intra);
        assert_eq!(cfg.scenario.translation, vec![1.0, 2.0]);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in [
            "thresholds.tau2=0.99",
            "temperatures.t1=0",
            "temperatures.t2=-1",
            "transport.epsilon=0",
            "prototypes.momentum=1.0",
            "train.batch_source=0",
            "train.no_such_key=1",
            "thresholds=3",
            "noequals",
        ] {
            let err = RunConfig::load(None, &[bad.to_string()]).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad}: {err}");
        }
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig {
            out: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.clone().with_seed(1).hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default().with_seed(4);
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn shipped_default_file_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.toml");
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), RunConfig::default());
    }
}
