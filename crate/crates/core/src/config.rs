//! Experiment configuration: a single TOML document with nested sections.
//! Unknown keys are rejected so typos fail fast, and configs round-trip
//! through serialization losslessly.

use crate::error::{Error, Result};
use crate::extraction::{ExtractionConfig, FinetuneConfig};
use crate::nn::{Architecture, Augmentation, TrainConfig};
use crate::poison::{MislabelStrategy, PoisonPolicy, TargetMode, TriggerSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSection>,
    pub train: TrainSection,
    pub extraction: ExtractionSection,
    pub finetune: FinetuneSection,
    pub detector: DetectorSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptive: Option<AdaptiveSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::per_class")]
    pub per_class: usize,
    #[serde(default = "defaults::val_per_class")]
    pub val_per_class: usize,
    #[serde(default = "defaults::channels")]
    pub channels: usize,
    #[serde(default = "defaults::side")]
    pub height: usize,
    #[serde(default = "defaults::side")]
    pub width: usize,
    /// |D_c| as a fraction of the training set size.
    #[serde(default = "defaults::reserve_fraction")]
    pub reserve_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Smallcnn,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchKind,
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "defaults::conv1")]
    pub conv1: usize,
    #[serde(default = "defaults::conv2")]
    pub conv2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    Patch,
    Blend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    AllToOne,
    AllToAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub trigger: TriggerKind,
    pub target: TargetKind,
    #[serde(default)]
    pub target_class: usize,
    pub poison_rate: f64,
    #[serde(default = "defaults::blend_alpha")]
    pub blend_alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    None,
    FlipCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::augmentation")]
    pub augmentation: AugmentationKind,
    /// (epoch, multiplier) pairs
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Shift,
    RandomOther,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionSection {
    pub eta: f64,
    #[serde(default = "defaults::extraction_batch")]
    pub batch_size: usize,
    /// None = one epoch over the reserved clean set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default = "defaults::strategy")]
    pub strategy: StrategyKind,
    #[serde(default = "defaults::soft_epsilon")]
    pub soft_epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub lr: f64,
    #[serde(default = "defaults::finetune_epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::decay_every")]
    pub decay_every: usize,
    #[serde(default = "defaults::finetune_batch")]
    pub batch_size: usize,
    #[serde(default = "defaults::finetune_augment")]
    pub augment: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Hard,
    SoftB,
    SoftMprime,
    SimpleRatio,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    #[serde(default = "defaults::rule")]
    pub rule: RuleKind,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::target_fpr")]
    pub target_fpr: f64,
    /// Optional evaluation-time Gaussian noise (approximates a noisy
    /// augmented validation set); 0 disables it.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Preset confidence threshold for the single-model rules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveSection {
    /// Grid axes: every (lambda1, lambda2) combination is optimized.
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    #[serde(default = "defaults::adaptive_steps")]
    pub steps: usize,
    #[serde(default = "defaults::step_size")]
    pub step_size: f64,
    #[serde(default = "defaults::adaptive_batch")]
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub etas: Vec<f64>,
    #[serde(default = "defaults::extraction_batch")]
    pub batch_size: usize,
}

mod defaults {
    use super::*;

    pub fn classes() -> usize {
        8
    }
    pub fn per_class() -> usize {
        500
    }
    pub fn val_per_class() -> usize {
        100
    }
    pub fn channels() -> usize {
        3
    }
    pub fn side() -> usize {
        16
    }
    pub fn reserve_fraction() -> f64 {
        0.05
    }
    pub fn hidden() -> Vec<usize> {
        vec![64]
    }
    pub fn conv1() -> usize {
        16
    }
    pub fn conv2() -> usize {
        32
    }
    pub fn blend_alpha() -> f64 {
        0.2
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn augmentation() -> AugmentationKind {
        AugmentationKind::None
    }
    pub fn extraction_batch() -> usize {
        128
    }
    pub fn strategy() -> StrategyKind {
        StrategyKind::Shift
    }
    pub fn soft_epsilon() -> f64 {
        1.0
    }
    pub fn finetune_epochs() -> usize {
        10
    }
    pub fn decay_every() -> usize {
        2
    }
    pub fn finetune_batch() -> usize {
        64
    }
    pub fn finetune_augment() -> bool {
        true
    }
    pub fn rule() -> RuleKind {
        RuleKind::Modified
    }
    pub fn gamma() -> f64 {
        0.5
    }
    pub fn target_fpr() -> f64 {
        0.01
    }
    pub fn adaptive_steps() -> usize {
        200
    }
    pub fn step_size() -> f64 {
        1e-2
    }
    pub fn adaptive_batch() -> usize {
        32
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Dependency(path.display().to_string())
            } else {
                Error::io(path.display().to_string(), e)
            }
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if !(d.reserve_fraction > 0.0 && d.reserve_fraction < 1.0) {
            return Err(Error::Config(format!(
                "dataset.reserve_fraction {} outside (0,1)",
                d.reserve_fraction
            )));
        }
        match d.kind {
            DatasetKind::Synthetic => {
                if d.classes < 2 || d.per_class == 0 || d.val_per_class == 0 {
                    return Err(Error::Config(
                        "dataset: classes >= 2 and nonzero per_class/val_per_class required"
                            .into(),
                    ));
                }
            }
            DatasetKind::Idx => {
                for (name, v) in [
                    ("train_images", &d.train_images),
                    ("train_labels", &d.train_labels),
                    ("test_images", &d.test_images),
                    ("test_labels", &d.test_labels),
                ] {
                    if v.is_none() {
                        return Err(Error::Config(format!(
                            "dataset.{name} is required when kind = \"idx\""
                        )));
                    }
                }
            }
        }
        if let Some(a) = &self.attack {
            if !(0.0..=1.0).contains(&a.poison_rate) {
                return Err(Error::Config(format!(
                    "attack.poison_rate {} outside [0,1]",
                    a.poison_rate
                )));
            }
            if !(0.0..=1.0).contains(&a.blend_alpha) {
                return Err(Error::Config(format!(
                    "attack.blend_alpha {} outside [0,1]",
                    a.blend_alpha
                )));
            }
            if a.target == TargetKind::AllToOne && a.target_class >= d.classes {
                return Err(Error::Config(format!(
                    "attack.target_class {} out of range for {} classes",
                    a.target_class, d.classes
                )));
            }
        }
        if !(self.detector.gamma > 0.0 && self.detector.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "detector.gamma {} outside (0,1]",
                self.detector.gamma
            )));
        }
        if !(self.detector.target_fpr > 0.0 && self.detector.target_fpr < 1.0) {
            return Err(Error::Config(format!(
                "detector.target_fpr {} outside (0,1)",
                self.detector.target_fpr
            )));
        }
        if self.detector.noise_sigma < 0.0 {
            return Err(Error::Config(
                "detector.noise_sigma must be nonnegative".into(),
            ));
        }
        self.train_config(0).validate()?;
        self.extraction_config(0).validate()?;
        self.finetune_config(0).validate()?;
        if let Some(a) = &self.adaptive {
            if a.lambda1.is_empty() || a.lambda2.is_empty() {
                return Err(Error::Config(
                    "adaptive.lambda1 and lambda2 must be nonempty".into(),
                ));
            }
            for &l1 in &a.lambda1 {
                for &l2 in &a.lambda2 {
                    crate::adaptive::AdaptiveConfig {
                        lambda1: l1,
                        lambda2: l2,
                        steps: a.steps,
                        step_size: a.step_size,
                        batch_size: a.batch_size,
                        seed: 0,
                    }
                    .validate()?;
                }
            }
        }
        if let Some(s) = &self.sweep {
            if s.etas.is_empty() {
                return Err(Error::Config("sweep.etas must be nonempty".into()));
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [
            self.dataset.channels,
            self.dataset.height,
            self.dataset.width,
        ]
    }

    pub fn build_architecture(&self, shape: [usize; 3], classes: usize) -> Result<Architecture> {
        let [c, h, w] = shape;
        match self.model.arch {
            ArchKind::Smallcnn => Architecture::small_cnn_sized(
                c,
                h,
                w,
                classes,
                self.model.conv1,
                self.model.conv2,
            ),
            ArchKind::Mlp => Architecture::mlp(c, h, w, &self.model.hidden, classes),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            base_lr: self.train.lr,
            lr_schedule: self.train.lr_schedule.clone(),
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            seed,
            augmentation: match self.train.augmentation {
                AugmentationKind::None => Augmentation::None,
                AugmentationKind::FlipCrop => Augmentation::FlipCrop,
            },
        }
    }

    pub fn extraction_config(&self, seed: u64) -> ExtractionConfig {
        ExtractionConfig {
            eta: self.extraction.eta,
            iterations: self.extraction.iterations,
            batch_size: self.extraction.batch_size,
            strategy: match self.extraction.strategy {
                StrategyKind::Shift => MislabelStrategy::Shift,
                StrategyKind::RandomOther => MislabelStrategy::RandomOther { seed },
                StrategyKind::Soft => MislabelStrategy::Soft {
                    epsilon: self.extraction.soft_epsilon,
                },
            },
            seed,
        }
    }

    pub fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            initial_lr: self.finetune.lr,
            epochs: self.finetune.epochs,
            decay_every: self.finetune.decay_every,
            batch_size: self.finetune.batch_size,
            momentum: 0.9,
            augment: self.finetune.augment,
            seed,
        }
    }

    /// Poisoning policy for the configured attack, if any.
    pub fn poison_policy(&self, shape: [usize; 3], seed: u64) -> Result<Option<PoisonPolicy>> {
        let Some(a) = &self.attack else {
            return Ok(None);
        };
        let trigger = match a.trigger {
            TriggerKind::Patch => TriggerSpec::default_patch(shape)?,
            TriggerKind::Blend => TriggerSpec::default_blend(shape, a.blend_alpha)?,
        };
        let target = match a.target {
            TargetKind::AllToOne => TargetMode::AllToOne {
                target: a.target_class,
            },
            TargetKind::AllToAll => TargetMode::AllToAll,
        };
        Ok(Some(PoisonPolicy {
            trigger,
            target,
            poison_rate: a.poison_rate,
            seed,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
seed = 42
output_dir = "runs/demo"

[dataset]
kind = "synthetic"
classes = 4
per_class = 50
val_per_class = 20
channels = 1
height = 8
width = 8

[model]
arch = "mlp"
hidden = [16]

[attack]
trigger = "patch"
target = "all_to_one"
target_class = 0
poison_rate = 0.02

[train]
epochs = 5
batch_size = 32
lr = 0.1

[extraction]
eta = 1e-3
batch_size = 32

[finetune]
lr = 0.05

[detector]
rule = "modified"
gamma = 0.5
target_fpr = 0.01
"#;

    #[test]
    fn sample_config_parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.dataset.classes, 4);
        assert!(cfg.attack.is_some());
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg, "serialization round-trip is lossless");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = SAMPLE.replace("[detector]", "[detector]\ntypo_key = 3");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("typo_key"), "{err}");
        let bad = SAMPLE.replace("[model]", "[modle]");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn invalid_values_are_caught_with_field_context() {
        let bad = SAMPLE.replace("poison_rate = 0.02", "poison_rate = 1.5");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("poison_rate"), "{err}");

        let bad = SAMPLE.replace("gamma = 0.5", "gamma = 0.0");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
    }

    #[test]
    fn idx_kind_requires_paths() {
        let bad = SAMPLE.replace("kind = \"synthetic\"", "kind = \"idx\"");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("train_images"), "{err}");
    }

    #[test]
    fn attack_section_is_optional() {
        let mut lines: Vec<&str> = SAMPLE.lines().collect();
        let start = lines.iter().position(|l| *l == "[attack]").unwrap();
        lines.drain(start..start + 5);
        let cfg = ExperimentConfig::from_toml(&lines.join("\n")).unwrap();
        assert!(cfg.attack.is_none());
        assert!(cfg.poison_policy([1, 8, 8], 0).unwrap().is_none());
    }
}
