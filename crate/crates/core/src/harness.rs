//! Config-driven experiment orchestration: dataset construction, poisoning,
//! training, extraction, finetuning, calibration, evaluation and reporting,
//! with per-stage manifests and artifact reuse.

use crate::adaptive::{grid_csv, low_opacity_eval, optimize_adaptive_trigger, AdaptiveConfig};
use crate::checkpoint::{load_dataset, load_network, read_file, save_dataset, save_network};
use crate::config::{DatasetKind, ExperimentConfig, RuleKind};
use crate::data::{make_synthetic_dataset, LabeledDataset};
use crate::detector::{calibrate_threshold, ConfPair, DecisionRule, Detector};
use crate::error::{Error, Result};
use crate::extraction::{sweep_csv, unlearning_sweep};
use crate::metrics::{
    asr_on_triggered, auroc, build_triggered_set, clean_accuracy, roc_points, TriggeredSet,
};
use crate::nn::Network;
use crate::poison::{poison_dataset, PoisonPolicy};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Derive a stage-specific seed from the global seed.
pub fn stage_seed(global: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().fold(String::new(), |mut acc, b| {
        let _ = write!(acc, "{b:02x}");
        acc
    })
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(path)?))
}

/// Numeric + textual result of a full pipeline run.
#[derive(Debug, Clone)]
pub struct RunReport {
    /// ordered key=value pairs; byte-identical across reruns with one seed
    pub machine: Vec<(String, String)>,
    pub stage_times_ms: Vec<(String, u128)>,
    /// full report document (config echo, results, machine, timings)
    pub text: String,
}

impl RunReport {
    pub fn machine_section(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.machine {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.machine
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Parse a machine value as f64 ("na" and missing keys are None).
    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }
}

/// A pipeline bound to a config and output directory.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    out: PathBuf,
    force: bool,
}

struct StageGuard<'a> {
    pipeline: &'a Pipeline,
    name: &'static str,
    order: u32,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
    started: Instant,
}

impl<'a> StageGuard<'a> {
    fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .push((self.pipeline.rel(path), file_hash(path)?));
        Ok(())
    }

    fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs
            .push((self.pipeline.rel(path), file_hash(path)?));
        Ok(())
    }

    fn finish(self) -> Result<u128> {
        let mut text = String::new();
        let _ = writeln!(text, "stage={}", self.name);
        let _ = writeln!(text, "order={}", self.order);
        let _ = writeln!(text, "seed={}", self.pipeline.cfg.seed);
        for (p, h) in &self.inputs {
            let _ = writeln!(text, "input={p}:{h}");
        }
        for (p, h) in &self.outputs {
            let _ = writeln!(text, "output={p}:{h}");
        }
        let path = self.pipeline.manifest_path(self.name);
        write_text(&path, &text)?;
        Ok(self.started.elapsed().as_millis())
    }
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out_override: Option<&Path>, force: bool) -> Self {
        let out = out_override
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
        Pipeline { cfg, out, force }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.out)
            .unwrap_or(path)
            .display()
            .to_string()
    }

    // -- artifact paths ----------------------------------------------------

    pub fn train_data_path(&self) -> PathBuf {
        self.out.join("data/train.bdxd")
    }
    pub fn val_data_path(&self) -> PathBuf {
        self.out.join("data/val.bdxd")
    }
    pub fn reserve_data_path(&self) -> PathBuf {
        self.out.join("data/reserve.bdxd")
    }
    pub fn poisoned_data_path(&self) -> PathBuf {
        self.out.join("data/poisoned.bdxd")
    }
    pub fn poison_indices_path(&self) -> PathBuf {
        self.out.join("data/poison_indices.txt")
    }
    pub fn suspect_path(&self) -> PathBuf {
        self.out.join("models/suspect.bdxp")
    }
    pub fn expert_path(&self) -> PathBuf {
        self.out.join("models/expert.bdxp")
    }
    pub fn auxiliary_path(&self) -> PathBuf {
        self.out.join("models/auxiliary.bdxp")
    }
    pub fn alpha_path(&self) -> PathBuf {
        self.out.join("calibration/alpha.txt")
    }
    pub fn calibration_scores_path(&self) -> PathBuf {
        self.out.join("calibration/scores_calibration.csv")
    }
    pub fn eval_scores_path(&self) -> PathBuf {
        self.out.join("eval/scores_eval.csv")
    }
    pub fn roc_path(&self) -> PathBuf {
        self.out.join("eval/roc.csv")
    }
    pub fn report_path(&self) -> PathBuf {
        self.out.join("report.txt")
    }
    pub fn adaptive_grid_path(&self) -> PathBuf {
        self.out.join("adaptive/grid.csv")
    }
    pub fn low_opacity_path(&self) -> PathBuf {
        self.out.join("adaptive/low_opacity.csv")
    }
    pub fn sweep_path(&self) -> PathBuf {
        self.out.join("sweep/sweep.csv")
    }
    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.out.join(format!("manifests/{stage}.manifest"))
    }

    fn stage(&self, name: &'static str, order: u32) -> StageGuard<'_> {
        StageGuard {
            pipeline: self,
            name,
            order,
            inputs: vec![("config".into(), sha256_hex(self.cfg.to_toml().as_bytes()))],
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    fn skip(&self, outputs: &[PathBuf]) -> bool {
        !self.force && outputs.iter().all(|p| p.exists())
    }

    fn require(&self, path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Dependency(path.display().to_string()))
        }
    }

    fn policy(&self) -> Result<Option<PoisonPolicy>> {
        self.cfg
            .poison_policy(self.cfg.image_shape(), stage_seed(self.cfg.seed, "poison"))
    }

    // -- stages ------------------------------------------------------------

    /// Build train/val/reserve datasets. The reserved clean set is carved
    /// from held-out data, never from the (to-be-poisoned) training set.
    pub fn stage_data(&self) -> Result<Option<u128>> {
        let outputs = [
            self.train_data_path(),
            self.val_data_path(),
            self.reserve_data_path(),
        ];
        if self.skip(&outputs) {
            return Ok(None);
        }
        let mut guard = self.stage("data", 1);
        let d = &self.cfg.dataset;
        let (train, val, reserve) = match d.kind {
            DatasetKind::Synthetic => {
                let shape = self.cfg.image_shape();
                let train = make_synthetic_dataset(
                    d.classes,
                    d.per_class,
                    shape,
                    stage_seed(self.cfg.seed, "data-train"),
                )?;
                let val = make_synthetic_dataset(
                    d.classes,
                    d.val_per_class,
                    shape,
                    stage_seed(self.cfg.seed, "data-val"),
                )?;
                let reserve_n = reserve_size(train.len(), d.reserve_fraction);
                let per_class = reserve_n.div_ceil(d.classes).max(1);
                let pool = make_synthetic_dataset(
                    d.classes,
                    per_class,
                    shape,
                    stage_seed(self.cfg.seed, "data-reserve"),
                )?;
                let (reserve, _) = pool.split(reserve_n, stage_seed(self.cfg.seed, "reserve-cut"))?;
                (train, val, reserve)
            }
            DatasetKind::Idx => {
                let train = crate::idx::load_idx(
                    Path::new(d.train_images.as_ref().unwrap()),
                    Path::new(d.train_labels.as_ref().unwrap()),
                )?;
                let held_out = crate::idx::load_idx(
                    Path::new(d.test_images.as_ref().unwrap()),
                    Path::new(d.test_labels.as_ref().unwrap()),
                )?;
                let reserve_n = reserve_size(train.len(), d.reserve_fraction).min(held_out.len());
                let (reserve, val) =
                    held_out.split(reserve_n, stage_seed(self.cfg.seed, "reserve-cut"))?;
                (train, val, reserve)
            }
        };
        save_dataset(&self.train_data_path(), &train)?;
        save_dataset(&self.val_data_path(), &val)?;
        save_dataset(&self.reserve_data_path(), &reserve)?;
        for p in &outputs {
            guard.record_output(p)?;
        }
        Ok(Some(guard.finish()?))
    }

    /// Apply the poisoning policy to the training set.
    pub fn stage_poison(&self) -> Result<Option<u128>> {
        let outputs = [self.poisoned_data_path(), self.poison_indices_path()];
        if self.skip(&outputs) {
            return Ok(None);
        }
        self.require(&self.train_data_path())?;
        let mut guard = self.stage("poison", 2);
        guard.record_input(&self.train_data_path())?;
        let train = load_dataset(&self.train_data_path())?;
        let (poisoned, indices) = match self.policy()? {
            Some(policy) => poison_dataset(&train, &policy)?,
            None => (train, Vec::new()),
        };
        save_dataset(&self.poisoned_data_path(), &poisoned)?;
        let index_text = indices
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join("\n");
        write_text(&self.poison_indices_path(), &index_text)?;
        for p in &outputs {
            guard.record_output(p)?;
        }
        Ok(Some(guard.finish()?))
    }

    /// Train the (possibly backdoored) suspect model.
    pub fn stage_train(&self) -> Result<Option<u128>> {
        let outputs = [self.suspect_path()];
        if self.skip(&outputs) {
            return Ok(None);
        }
        self.require(&self.poisoned_data_path())?;
        let mut guard = self.stage("train", 3);
        guard.record_input(&self.poisoned_data_path())?;
        let poisoned = load_dataset(&self.poisoned_data_path())?;
        let shape = sample_shape3(&poisoned)?;
        let arch = self.cfg.build_architecture(shape, poisoned.num_classes())?;
        let init = Network::new(arch, stage_seed(self.cfg.seed, "init"))?;
        let trained = crate::nn::train(
            &init,
            &poisoned,
            &self.cfg.train_config(stage_seed(self.cfg.seed, "train")),
        )?;
        save_network(&self.suspect_path(), &trained)?;
        guard.record_output(&self.suspect_path())?;
        Ok(Some(guard.finish()?))
    }

    /// Extract the backdoor expert from the suspect model.
    pub fn stage_extract(&self) -> Result<Option<u128>> {
        let outputs = [self.expert_path()];
        if self.skip(&outputs) {
            return Ok(None);
        }
        self.require(&self.suspect_path())?;
        self.require(&self.reserve_data_path())?;
        let mut guard = self.stage("extract", 4);
        guard.record_input(&self.suspect_path())?;
        guard.record_input(&self.reserve_data_path())?;
        let suspect = load_network(&self.suspect_path())?;
        let reserve = load_dataset(&self.reserve_data_path())?;
        let expert = crate::extraction::extract_backdoor_expert(
            &suspect,
            &reserve,
            &self.cfg.extraction_config(stage_seed(self.cfg.seed, "extract")),
        )?;
        save_network(&self.expert_path(), &expert)?;
        guard.record_output(&self.expert_path())?;
        Ok(Some(guard.finish()?))
    }

    /// Clean-finetune the auxiliary model.
    pub fn stage_finetune(&self) -> Result<Option<u128>> {
        let outputs = [self.auxiliary_path()];
        if self.skip(&outputs) {
            return Ok(None);
        }
        self.require(&self.suspect_path())?;
        self.require(&self.reserve_data_path())?;
        let mut guard = self.stage("finetune", 5);
        guard.record_input(&self.suspect_path())?;
        guard.record_input(&self.reserve_data_path())?;
        let suspect = load_network(&self.suspect_path())?;
        let reserve = load_dataset(&self.reserve_data_path())?;
        let auxiliary = crate::extraction::clean_finetune(
            &suspect,
            &reserve,
            &self.cfg.finetune_config(stage_seed(self.cfg.seed, "finetune")),
        )?;
        save_network(&self.auxiliary_path(), &auxiliary)?;
        guard.record_output(&self.auxiliary_path())?;
        Ok(Some(guard.finish()?))
    }

    fn decision_rule(&self) -> DecisionRule {
        match self.cfg.detector.rule {
            RuleKind::Hard => DecisionRule::Hard,
            RuleKind::SoftB => DecisionRule::SoftB {
                tau: self.cfg.detector.tau,
            },
            RuleKind::SoftMprime => DecisionRule::SoftMPrime {
                tau: self.cfg.detector.tau,
            },
            RuleKind::SimpleRatio => DecisionRule::SimpleRatio,
            RuleKind::Modified => DecisionRule::Modified,
        }
    }

    fn load_detector(&self) -> Result<Detector> {
        for p in [
            self.suspect_path(),
            self.expert_path(),
            self.auxiliary_path(),
        ] {
            self.require(&p)?;
        }
        Detector::new(
            load_network(&self.suspect_path())?,
            load_network(&self.expert_path())?,
            load_network(&self.auxiliary_path())?,
            self.decision_rule(),
            self.cfg.detector.gamma,
        )
    }

    /// Calibrate the rejection threshold on the reserved clean set.
    pub fn stage_calibrate(&self) -> Result<Option<u128>> {
        let outputs = [self.alpha_path(), self.calibration_scores_path()];
        if self.skip(&outputs) {
            return Ok(None);
        }
        self.require(&self.reserve_data_path())?;
        let mut guard = self.stage("calibrate", 6);
        for p in [
            self.suspect_path(),
            self.expert_path(),
            self.auxiliary_path(),
            self.reserve_data_path(),
        ] {
            self.require(&p)?;
            guard.record_input(&p)?;
        }
        let detector = self.load_detector()?;
        let reserve = load_dataset(&self.reserve_data_path())?;
        let rows = score_rows(&detector, reserve.inputs())?;
        let scores: Vec<f64> = rows.iter().map(|r| r.rule_score).collect();
        let alpha = calibrate_threshold(&scores, self.cfg.detector.target_fpr)?;
        let mut text = String::new();
        let _ = writeln!(text, "alpha={alpha}");
        let _ = writeln!(text, "rule={}", detector.rule.name());
        let _ = writeln!(text, "target_fpr={}", self.cfg.detector.target_fpr);
        let _ = writeln!(text, "n={}", scores.len());
        write_text(&self.alpha_path(), &text)?;
        write_text(
            &self.calibration_scores_path(),
            &score_csv(&rows, &[], alpha),
        )?;
        for p in &outputs {
            guard.record_output(p)?;
        }
        Ok(Some(guard.finish()?))
    }

    pub fn load_alpha(&self) -> Result<f64> {
        self.require(&self.alpha_path())?;
        let text = std::fs::read_to_string(self.alpha_path())
            .map_err(|e| Error::io(self.alpha_path().display().to_string(), e))?;
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("alpha=") {
                return v.parse::<f64>().map_err(|_| Error::Parse {
                    what: "alpha file".into(),
                    detail: format!("bad alpha value {v:?}"),
                });
            }
        }
        Err(Error::Parse {
            what: "alpha file".into(),
            detail: "missing alpha= line".into(),
        })
    }

    /// Evaluate everything and write the run report.
    pub fn stage_eval(&self) -> Result<Option<(u128, RunReport)>> {
        let outputs = [
            self.eval_scores_path(),
            self.roc_path(),
            self.report_path(),
        ];
        if self.skip(&outputs) {
            return Ok(None);
        }
        let mut guard = self.stage("eval", 7);
        for p in [
            self.suspect_path(),
            self.expert_path(),
            self.auxiliary_path(),
            self.val_data_path(),
            self.alpha_path(),
        ] {
            self.require(&p)?;
            guard.record_input(&p)?;
        }
        let mut detector = self.load_detector()?;
        detector.alpha = Some(self.load_alpha()?);
        let val = load_dataset(&self.val_data_path())?;
        let report = self.evaluate(&detector, &val)?;
        guard.record_output(&self.eval_scores_path())?;
        guard.record_output(&self.roc_path())?;
        guard.record_output(&self.report_path())?;
        Ok(Some((guard.finish()?, report)))
    }

    fn evaluate(&self, detector: &Detector, val: &LabeledDataset) -> Result<RunReport> {
        let alpha = detector
            .alpha
            .ok_or_else(|| Error::State("evaluation needs a calibrated alpha".into()))?;
        let policy = self.policy()?;
        let triggered = match &policy {
            Some(p) => Some(build_triggered_set(val, &p.trigger, &p.target)?),
            None => None,
        };

        // raw and per-model metrics
        let ca_raw = clean_accuracy(&detector.suspect, val)?;
        let ca_expert = clean_accuracy(&detector.expert, val)?;
        let ca_auxiliary = clean_accuracy(&detector.auxiliary, val)?;
        let (asr_raw, asr_expert, asr_auxiliary) = match &triggered {
            Some(t) => (
                Some(asr_on_triggered(&detector.suspect, t)?),
                Some(asr_on_triggered(&detector.expert, t)?),
                Some(asr_on_triggered(&detector.auxiliary, t)?),
            ),
            None => (None, None, None),
        };

        // per-input scoring under the configured rule
        let clean_rows = score_rows(detector, val.inputs())?;
        let triggered_rows = match &triggered {
            Some(t) => score_rows(detector, &t.inputs)?,
            None => Vec::new(),
        };

        // defended metrics from the same rows
        let mut ca_def_hits = 0usize;
        for (i, row) in clean_rows.iter().enumerate() {
            if row.prediction == val.label(i) && row.rule_score > alpha {
                ca_def_hits += 1;
            }
        }
        let ca_defended = ca_def_hits as f64 / val.len() as f64;
        let asr_defended = triggered.as_ref().map(|t| {
            let mut hits = 0usize;
            for (i, row) in triggered_rows.iter().enumerate() {
                if row.prediction == t.targets[i] && row.rule_score > alpha {
                    hits += 1;
                }
            }
            hits as f64 / t.len() as f64
        });

        // AUROC per rule variant, optionally on noise-augmented copies
        let sigma = self.cfg.detector.noise_sigma;
        let (auroc_rows_clean, auroc_rows_triggered) = if sigma > 0.0 && triggered.is_some() {
            let seed = stage_seed(self.cfg.seed, "noise");
            let noisy_clean = noisy_inputs(val.inputs(), sigma, seed);
            let noisy_trig = noisy_inputs(&triggered.as_ref().unwrap().inputs, sigma, seed + 1);
            (
                score_rows(detector, &noisy_clean)?,
                score_rows(detector, &noisy_trig)?,
            )
        } else {
            (clean_rows.clone(), triggered_rows.clone())
        };
        let mut aurocs: Vec<(&str, Option<f64>)> = Vec::new();
        for (name, pick) in [
            ("modified", RuleScorePick::Modified),
            ("simple_ratio", RuleScorePick::Simple),
            ("soft_b", RuleScorePick::SoftB),
            ("soft_mprime", RuleScorePick::SoftMPrime),
        ] {
            let value = if auroc_rows_triggered.is_empty() {
                None
            } else {
                let c: Vec<f64> = auroc_rows_clean.iter().map(|r| pick.of(r)).collect();
                let b: Vec<f64> = auroc_rows_triggered.iter().map(|r| pick.of(r)).collect();
                Some(auroc(&c, &b)?)
            };
            aurocs.push((name, value));
        }

        // artifacts: score dump and ROC of the configured rule
        write_text(
            &self.eval_scores_path(),
            &score_csv(&clean_rows, &triggered_rows, alpha),
        )?;
        let roc_csv = if auroc_rows_triggered.is_empty() {
            String::from("threshold,fpr,tpr\n")
        } else {
            let c: Vec<f64> = auroc_rows_clean.iter().map(|r| r.rule_score).collect();
            let b: Vec<f64> = auroc_rows_triggered.iter().map(|r| r.rule_score).collect();
            let mut out = String::from("threshold,fpr,tpr\n");
            for p in roc_points(&c, &b)? {
                let _ = writeln!(out, "{},{:.6},{:.6}", p.threshold, p.fpr, p.tpr);
            }
            out
        };
        write_text(&self.roc_path(), &roc_csv)?;

        // assemble the report
        let fmt = |v: f64| format!("{v:.6}");
        let opt = |v: Option<f64>| v.map(fmt).unwrap_or_else(|| "na".into());
        let mut machine: Vec<(String, String)> = vec![
            ("version".into(), crate::VERSION.into()),
            ("seed".into(), self.cfg.seed.to_string()),
            ("rule".into(), detector.rule.name().into()),
            ("gamma".into(), fmt(detector.gamma)),
            (
                "target_fpr".into(),
                self.cfg.detector.target_fpr.to_string(),
            ),
            ("alpha".into(), format!("{alpha}")),
            ("ca_raw".into(), fmt(ca_raw)),
            ("asr_raw".into(), opt(asr_raw)),
            ("ca_expert".into(), fmt(ca_expert)),
            ("asr_expert".into(), opt(asr_expert)),
            ("ca_auxiliary".into(), fmt(ca_auxiliary)),
            ("asr_auxiliary".into(), opt(asr_auxiliary)),
            ("ca_defended".into(), fmt(ca_defended)),
            ("asr_defended".into(), opt(asr_defended)),
        ];
        for (name, value) in &aurocs {
            machine.push((format!("auroc_{name}"), opt(*value)));
        }
        machine.push(("n_clean_eval".into(), val.len().to_string()));
        machine.push((
            "n_backdoor_eval".into(),
            triggered.as_ref().map_or(0, TriggeredSet::len).to_string(),
        ));

        let mut results = String::new();
        let _ = writeln!(
            results,
            "suspect model    : CA {}  ASR {}",
            fmt(ca_raw),
            opt(asr_raw)
        );
        let _ = writeln!(
            results,
            "backdoor expert  : CA {}  ASR {}",
            fmt(ca_expert),
            opt(asr_expert)
        );
        let _ = writeln!(
            results,
            "auxiliary model  : CA {}  ASR {}",
            fmt(ca_auxiliary),
            opt(asr_auxiliary)
        );
        let _ = writeln!(
            results,
            "defended         : CA {}  ASR {}  (alpha {alpha}, target FPR {})",
            fmt(ca_defended),
            opt(asr_defended),
            self.cfg.detector.target_fpr
        );
        if triggered.is_some() {
            for (name, value) in &aurocs {
                let _ = writeln!(results, "AUROC {name:<12}: {}", opt(*value));
            }
        } else {
            let _ = writeln!(results, "AUROC            : not applicable (no attack)");
        }

        let report = RunReport {
            machine,
            stage_times_ms: Vec::new(),
            text: String::new(),
        };
        let mut text = String::new();
        let _ = writeln!(text, "badexpert run report (version {})", crate::VERSION);
        let _ = writeln!(text, "\n== config ==\n{}", self.cfg.to_toml());
        let _ = writeln!(text, "== results ==\n{results}");
        let _ = writeln!(text, "== machine ==\n{}", report.machine_section());
        write_text(&self.report_path(), &text)?;
        Ok(RunReport { text, ..report })
    }

    /// Adaptive-attack stage: optimize triggers over the lambda grid and,
    /// for blend attacks, sweep low-opacity variants.
    pub fn stage_adaptive(&self) -> Result<Option<u128>> {
        let Some(section) = &self.cfg.adaptive else {
            return Ok(None);
        };
        let is_blend = matches!(
            self.cfg.attack.as_ref().map(|a| a.trigger),
            Some(crate::config::TriggerKind::Blend)
        );
        let mut outputs = vec![self.adaptive_grid_path()];
        if is_blend {
            outputs.push(self.low_opacity_path());
        }
        if self.skip(&outputs) {
            return Ok(None);
        }
        self.require(&self.val_data_path())?;
        let mut guard = self.stage("adaptive", 8);
        for p in [
            self.suspect_path(),
            self.expert_path(),
            self.auxiliary_path(),
            self.val_data_path(),
            self.alpha_path(),
        ] {
            self.require(&p)?;
            guard.record_input(&p)?;
        }
        let mut detector = self.load_detector()?;
        detector.alpha = Some(self.load_alpha()?);
        let val = load_dataset(&self.val_data_path())?;
        let target = match self.policy()? {
            Some(PoisonPolicy {
                target: crate::poison::TargetMode::AllToOne { target },
                ..
            }) => target,
            _ => 0,
        };

        let clean_scores = detector.score_all(val.inputs())?;
        let mut rows = Vec::new();
        for &lambda1 in &section.lambda1 {
            for &lambda2 in &section.lambda2 {
                let cfg = AdaptiveConfig {
                    lambda1,
                    lambda2,
                    steps: section.steps,
                    step_size: section.step_size,
                    batch_size: section.batch_size,
                    seed: stage_seed(self.cfg.seed, "adaptive"),
                };
                let (trigger, _) = optimize_adaptive_trigger(
                    &detector.suspect,
                    &detector.expert,
                    target,
                    &val,
                    &cfg,
                )?;
                let triggered: Vec<Tensor> = val
                    .inputs()
                    .iter()
                    .map(|x| crate::adaptive::apply_adaptive(x, &trigger))
                    .collect::<Result<_>>()?;
                let preds = crate::parallel::predict_all(&detector.suspect, &triggered)?;
                let asr =
                    preds.iter().filter(|&&p| p == target).count() as f64 / preds.len() as f64;
                let bd_scores = detector.score_all(&triggered)?;
                rows.push((
                    lambda1,
                    lambda2,
                    trigger.mask_norm(),
                    asr,
                    auroc(&clean_scores, &bd_scores)?,
                ));
            }
        }
        write_text(&self.adaptive_grid_path(), &grid_csv(&rows))?;
        guard.record_output(&self.adaptive_grid_path())?;

        if is_blend {
            if let Some(policy) = self.policy()? {
                let rows = low_opacity_eval(
                    &detector,
                    &policy.trigger,
                    &[0.20, 0.15, 0.10],
                    &val,
                    &policy.target,
                )?;
                let mut out = String::from("alpha,asr,auroc\n");
                for r in rows {
                    let _ = writeln!(out, "{},{:.6},{:.6}", r.alpha, r.asr, r.auroc);
                }
                write_text(&self.low_opacity_path(), &out)?;
                guard.record_output(&self.low_opacity_path())?;
            }
        }
        Ok(Some(guard.finish()?))
    }

    /// Unlearning-rate sweep stage.
    pub fn stage_sweep(&self) -> Result<Option<u128>> {
        let Some(section) = &self.cfg.sweep else {
            return Ok(None);
        };
        let outputs = [self.sweep_path()];
        if self.skip(&outputs) {
            return Ok(None);
        }
        let mut guard = self.stage("sweep", 9);
        for p in [
            self.suspect_path(),
            self.reserve_data_path(),
            self.val_data_path(),
        ] {
            self.require(&p)?;
            guard.record_input(&p)?;
        }
        let policy = self.policy()?.ok_or_else(|| {
            Error::Config("sweep requires an attack section (for ASR probes)".into())
        })?;
        let suspect = load_network(&self.suspect_path())?;
        let reserve = load_dataset(&self.reserve_data_path())?;
        let val = load_dataset(&self.val_data_path())?;
        let triggered = build_triggered_set(&val, &policy.trigger, &policy.target)?;
        let mut cfg = self.cfg.extraction_config(stage_seed(self.cfg.seed, "sweep"));
        cfg.batch_size = section.batch_size;
        let points = unlearning_sweep(&suspect, &reserve, &section.etas, &val, &triggered, &cfg)?;
        write_text(&self.sweep_path(), &sweep_csv(&points))?;
        guard.record_output(&self.sweep_path())?;
        Ok(Some(guard.finish()?))
    }

    /// Execute every configured stage in order; stages whose outputs already
    /// exist are skipped unless the pipeline was built with `force`.
    pub fn run(&self) -> Result<RunReport> {
        let mut times: Vec<(String, u128)> = Vec::new();
        let mut push = |name: &str, t: Option<u128>| {
            if let Some(ms) = t {
                times.push((name.to_string(), ms));
            }
        };
        push("data", self.stage_data()?);
        push("poison", self.stage_poison()?);
        push("train", self.stage_train()?);
        push("extract", self.stage_extract()?);
        push("finetune", self.stage_finetune()?);
        push("calibrate", self.stage_calibrate()?);
        let eval = self.stage_eval()?;
        let mut report = match eval {
            Some((ms, report)) => {
                push("eval", Some(ms));
                report
            }
            None => self.read_report()?,
        };
        push("adaptive", self.stage_adaptive()?);
        push("sweep", self.stage_sweep()?);
        report.stage_times_ms = times;
        // append timings to the on-disk report (separate from the machine section)
        let mut text = report.text.clone();
        let _ = writeln!(text, "== timings ==");
        for (stage, ms) in &report.stage_times_ms {
            let _ = writeln!(text, "{stage}_ms={ms}");
        }
        write_text(&self.report_path(), &text)?;
        report.text = text;
        Ok(report)
    }

    /// Re-read an existing report into a `RunReport` (used when eval was
    /// skipped because its outputs already exist).
    pub fn read_report(&self) -> Result<RunReport> {
        self.require(&self.report_path())?;
        let text = std::fs::read_to_string(self.report_path())
            .map_err(|e| Error::io(self.report_path().display().to_string(), e))?;
        let machine = extract_machine_section(&text)
            .ok_or_else(|| Error::Parse {
                what: "report".into(),
                detail: "missing machine section".into(),
            })?
            .lines()
            .filter_map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
            })
            .collect();
        Ok(RunReport {
            machine,
            stage_times_ms: Vec::new(),
            text,
        })
    }

    /// Check that every manifest input hash was produced by an earlier stage
    /// (or is the config itself): the stage graph must be a valid DAG.
    pub fn verify_manifests(&self) -> Result<()> {
        let dir = self.out.join("manifests");
        let mut stages: Vec<(u32, String, Vec<(String, String)>, Vec<(String, String)>)> =
            Vec::new();
        let entries = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
            let text = std::fs::read_to_string(entry.path())
                .map_err(|e| Error::io(entry.path().display().to_string(), e))?;
            let mut order = 0u32;
            let mut name = String::new();
            let mut inputs = Vec::new();
            let mut outputs = Vec::new();
            for line in text.lines() {
                if let Some(v) = line.strip_prefix("order=") {
                    order = v.parse().unwrap_or(0);
                } else if let Some(v) = line.strip_prefix("stage=") {
                    name = v.to_string();
                } else if let Some(v) = line.strip_prefix("input=") {
                    if let Some((p, h)) = v.rsplit_once(':') {
                        inputs.push((p.to_string(), h.to_string()));
                    }
                } else if let Some(v) = line.strip_prefix("output=") {
                    if let Some((p, h)) = v.rsplit_once(':') {
                        outputs.push((p.to_string(), h.to_string()));
                    }
                }
            }
            stages.push((order, name, inputs, outputs));
        }
        stages.sort_by_key(|s| s.0);
        let mut produced: std::collections::HashMap<String, (u32, String)> =
            std::collections::HashMap::new();
        for (order, name, inputs, outputs) in &stages {
            for (path, hash) in inputs {
                if path == "config" {
                    continue;
                }
                match produced.get(path) {
                    Some((src_order, src_hash)) if src_order < order => {
                        if src_hash != hash {
                            return Err(Error::Dependency(format!(
                                "stage {name} consumed {path} with hash {hash} but it was produced as {src_hash}"
                            )));
                        }
                    }
                    _ => {
                        return Err(Error::Dependency(format!(
                            "stage {name} consumed {path} that no earlier stage produced"
                        )));
                    }
                }
            }
            for (path, hash) in outputs {
                produced.insert(path.clone(), (*order, hash.clone()));
            }
        }
        Ok(())
    }
}

fn reserve_size(train_len: usize, fraction: f64) -> usize {
    ((train_len as f64 * fraction).round() as usize).max(1)
}

fn sample_shape3(d: &LabeledDataset) -> Result<[usize; 3]> {
    let s = d.sample_shape()?;
    if s.len() != 3 {
        return Err(Error::InputShape {
            expected: "(c, h, w) samples".into(),
            got: format!("{s:?}"),
        });
    }
    Ok([s[0], s[1], s[2]])
}

/// Per-input scores under every rule variant plus the configured one.
#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub prediction: usize,
    pub conf_b: f64,
    pub conf_mprime: f64,
    pub rule_score: f64,
    pub modified: f64,
    pub simple: f64,
    pub soft_b: f64,
    pub soft_mprime: f64,
}

enum RuleScorePick {
    Modified,
    Simple,
    SoftB,
    SoftMPrime,
}

impl RuleScorePick {
    fn of(&self, row: &ScoreRow) -> f64 {
        match self {
            RuleScorePick::Modified => row.modified,
            RuleScorePick::Simple => row.simple,
            RuleScorePick::SoftB => row.soft_b,
            RuleScorePick::SoftMPrime => row.soft_mprime,
        }
    }
}

fn score_rows(detector: &Detector, inputs: &[Tensor]) -> Result<Vec<ScoreRow>> {
    crate::parallel::install(|| {
        inputs
            .par_iter()
            .map(|x| {
                let (prediction, pair) = detector.confidences(x)?;
                let ConfPair {
                    conf_b,
                    conf_mprime,
                } = pair;
                let modified = crate::detector::score_modified(pair, detector.gamma);
                let simple = crate::detector::score_simple(pair);
                let soft_b = crate::detector::score_single_b(pair);
                let soft_mprime = crate::detector::score_single_mprime(pair);
                let rule_score = match detector.rule {
                    DecisionRule::Hard => modified,
                    _ => detector.score_pair(pair),
                };
                Ok(ScoreRow {
                    prediction,
                    conf_b,
                    conf_mprime,
                    rule_score,
                    modified,
                    simple,
                    soft_b,
                    soft_mprime,
                })
            })
            .collect()
    })
}

/// Scoring dump: `index,prediction,conf_b,conf_mprime,score,is_backdoor_truth,decision`.
fn score_csv(clean: &[ScoreRow], triggered: &[ScoreRow], alpha: f64) -> String {
    let mut out = String::from("index,prediction,conf_b,conf_mprime,score,is_backdoor_truth,decision\n");
    let mut index = 0usize;
    for (rows, truth) in [(clean, 0u8), (triggered, 1u8)] {
        for r in rows {
            let decision = u8::from(r.rule_score <= alpha);
            let _ = writeln!(
                out,
                "{index},{},{:.6},{:.6},{:.6},{truth},{decision}",
                r.prediction, r.conf_b, r.conf_mprime, r.rule_score
            );
            index += 1;
        }
    }
    out
}

/// Gaussian-noised copies of inputs (Box-Muller), clipped to [0,1].
pub fn noisy_inputs(inputs: &[Tensor], sigma: f64, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inputs
        .iter()
        .map(|x| {
            let data: Vec<f32> = x
                .data()
                .iter()
                .map(|&v| {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    ((v as f64 + sigma * z).clamp(0.0, 1.0)) as f32
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        })
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// The `== machine ==` block of a report, without the surrounding markers.
pub fn extract_machine_section(report_text: &str) -> Option<String> {
    let start = report_text.find("== machine ==\n")?;
    let body = &report_text[start + "== machine ==\n".len()..];
    let end = body.find("== ").unwrap_or(body.len());
    Some(body[..end].trim_end().to_string() + "\n")
}
