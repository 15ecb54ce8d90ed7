//! Experiment configuration: the model switches, the optimization schedule,
//! the seed list and where the data comes from.

use std::path::{Path, PathBuf};

use ddtr_core::data::DatasetSpec;
use ddtr_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Optimization schedule of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Backbone learning rate is `lr * backbone_lr_scale`.
    pub backbone_lr_scale: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier applied over the final third of the steps.
    pub lr_drop: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 1e-3,
            backbone_lr_scale: 1.0,
            weight_decay: 1e-4,
            lr_drop: 0.1,
            clip_norm: 0.1,
        }
    }
}

impl TrainingConfig {
    /// First step (0-based) trained at the dropped learning rate.
    pub fn drop_step(&self) -> usize {
        self.steps - self.steps / 3
    }

    pub fn lr_factor(&self, step: usize) -> f64 {
        if step >= self.drop_step() {
            self.lr_drop
        } else {
            1.0
        }
    }
}

/// Training and held-out images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum DatasetSource {
    /// Generated on the fly: training images `0..train`, held-out images
    /// start at index [`HELD_OUT_START`].
    Synthetic { spec: DatasetSpec, train: usize, test: usize },
    /// A directory with `train/` and `test/` dataset subdirectories.
    Path(PathBuf),
}

/// First generator index of the held-out split.
pub const HELD_OUT_START: usize = 1_000_000;

impl Default for DatasetSource {
    fn default() -> Self {
        Self::Synthetic { spec: DatasetSpec::default(), train: 2000, test: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSource,
    /// Class scored by the metrics ("malignant").
    pub eval_class: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            dataset: DatasetSource::default(),
            eval_class: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let t = &self.training;
        if t.steps == 0 || t.batch_size == 0 {
            return bad("training.steps and training.batch_size must be positive");
        }
        let finite_pos = |x: f64| x.is_finite() && x > 0.0;
        if !finite_pos(t.lr) || !finite_pos(t.backbone_lr_scale) || !finite_pos(t.lr_drop) {
            return bad("training.lr, backbone_lr_scale and lr_drop must be positive");
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0 && t.clip_norm.is_finite() && t.clip_norm >= 0.0) {
            return bad("training.weight_decay and clip_norm must be non-negative");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.eval_class == 0 || self.eval_class > self.model.num_classes {
            return bad("eval_class must name one of the model's classes (1-based)");
        }
        if let DatasetSource::Synthetic { spec, train, test } = &self.dataset {
            spec.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
            if *train == 0 || *test == 0 {
                return bad("synthetic train and test counts must be positive");
            }
            if spec.num_classes > self.model.num_classes {
                return bad("dataset has more classes than the model");
            }
        }
        Ok(())
    }

    /// Short stable identifier of the model and training settings (seeds excluded).
    pub fn digest(&self) -> String {
        let key = serde_json::to_string(&(&self.model, &self.training, &self.dataset, self.eval_class))
            .expect("config serializes");
        // 64-bit FNV-1a, stable across toolchains and platforms
        let hash =
            key.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3));
        format!("{hash:016x}")
    }
}
