//! The two model-production procedures: backdoor functionality extraction
//! (finetuning on deliberately mislabeled clean samples) and standard clean
//! finetuning for the auxiliary model.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{asr_on_triggered, clean_accuracy, TriggeredSet};
use crate::nn::{
    logit_gradient, logit_gradient_soft, AdamParams, Network, OptimizerState, SgdParams,
};
use crate::poison::{mislabel, MislabelStrategy, Mislabeled};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Configuration for backdoor functionality extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionConfig {
    /// Unlearning rate eta.
    pub eta: f64,
    /// Number of batch updates; None = one epoch over the clean set.
    pub iterations: Option<usize>,
    pub batch_size: usize,
    pub strategy: MislabelStrategy,
    pub seed: u64,
}

impl ExtractionConfig {
    pub fn with_eta(eta: f64) -> Self {
        ExtractionConfig {
            eta,
            iterations: None,
            batch_size: 128,
            strategy: MislabelStrategy::Shift,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta < 0.0 {
            return Err(Error::Config("eta must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    fn iteration_count(&self, set_len: usize) -> usize {
        self.iterations
            .unwrap_or_else(|| set_len.div_ceil(self.batch_size))
    }
}

/// Configuration for clean finetuning of the auxiliary model.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub initial_lr: f64,
    pub epochs: usize,
    /// Multiply the learning rate by 0.1 after every `decay_every` epochs.
    pub decay_every: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Flip/crop augmentation; the disruption it puts on trigger regions is
    /// what lets finetuning diminish the backdoor.
    pub augment: bool,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn with_lr(initial_lr: f64) -> Self {
        FinetuneConfig {
            initial_lr,
            epochs: 10,
            decay_every: 2,
            batch_size: 64,
            momentum: 0.9,
            augment: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("finetuning needs at least 1 epoch".into()));
        }
        if self.initial_lr <= 0.0 {
            return Err(Error::Config("initial_lr must be positive".into()));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config(
                "batch_size and decay_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Produce the backdoor expert B: copy the suspect model and run exactly `m`
/// cross-entropy updates on mislabeled clean batches with a gentle Adam rate.
/// The suspect model itself is never modified.
pub fn extract_backdoor_expert(
    suspect: &Network,
    clean_set: &LabeledDataset,
    cfg: &ExtractionConfig,
) -> Result<Network> {
    cfg.validate()?;
    if clean_set.is_empty() {
        return Err(Error::Config("clean set is empty".into()));
    }
    let mut expert = suspect.clone();
    let total = cfg.iteration_count(clean_set.len());
    if total == 0 {
        return Ok(expert);
    }
    let mut state = OptimizerState::adam(&expert, AdamParams::with_lr(cfg.eta));
    run_mislabeled_updates(&mut expert, &mut state, clean_set, cfg, total, &mut |_, _| {
        Ok(())
    })?;
    Ok(expert)
}

/// Shared update loop: shuffled batches, mislabeled targets, one optimizer
/// step each; `probe` runs after every update.
fn run_mislabeled_updates(
    model: &mut Network,
    state: &mut OptimizerState,
    clean_set: &LabeledDataset,
    cfg: &ExtractionConfig,
    total: usize,
    probe: &mut dyn FnMut(usize, &Network) -> Result<()>,
) -> Result<()> {
    let classes = model.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..clean_set.len()).collect();
    let mut done = 0usize;
    'outer: loop {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if done == total {
                break 'outer;
            }
            let (batch, labels) = clean_set.gather_batch(chunk)?;
            let (logits, trace) = model.forward_trace(&batch)?;
            // derive a fresh seed per update so random relabels differ by batch
            let strategy = match &cfg.strategy {
                MislabelStrategy::RandomOther { seed } => MislabelStrategy::RandomOther {
                    seed: seed.wrapping_add((done as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                },
                s => s.clone(),
            };
            let lg = match mislabel(&labels, &strategy, classes)? {
                Mislabeled::Hard(wrong) => {
                    debug_assert!(wrong.iter().zip(&labels).all(|(a, b)| a != b));
                    logit_gradient(&logits, &wrong, classes)?
                }
                Mislabeled::Soft(rows) => logit_gradient_soft(&logits, &rows, classes)?,
            };
            let (grads, _) = model.backward_from_logits(&trace, &lg)?;
            crate::nn::step(model, &grads, state)?;
            done += 1;
            probe(done, model)?;
        }
        if done == total {
            break;
        }
    }
    Ok(())
}

/// Standard finetuning on correctly labeled clean data (SGD, stepped decay);
/// yields the auxiliary model M'. The suspect model is never modified.
pub fn clean_finetune(
    suspect: &Network,
    clean_set: &LabeledDataset,
    cfg: &FinetuneConfig,
) -> Result<Network> {
    cfg.validate()?;
    if clean_set.is_empty() {
        return Err(Error::Config("clean set is empty".into()));
    }
    let mut model = suspect.clone();
    let mut state = OptimizerState::sgd(
        &model,
        SgdParams {
            lr: cfg.initial_lr,
            momentum: cfg.momentum,
            weight_decay: 0.0,
        },
    );
    let classes = model.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..clean_set.len()).collect();
    for epoch in 0..cfg.epochs {
        state.set_lr(cfg.initial_lr * 0.1f64.powi((epoch / cfg.decay_every) as i32));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (mut batch, labels) = clean_set.gather_batch(chunk)?;
            if cfg.augment {
                crate::nn::augment_batch(&mut batch, &mut rng);
            }
            let (logits, trace) = model.forward_trace(&batch)?;
            let lg = logit_gradient(&logits, &labels, classes)?;
            let (grads, _) = model.backward_from_logits(&trace, &lg)?;
            crate::nn::step(&mut model, &grads, &mut state)?;
        }
    }
    Ok(model)
}

/// One probe point of an unlearning sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub eta: f64,
    pub step: usize,
    pub clean_acc: f64,
    pub asr: f64,
}

/// Trace CA/ASR while extracting with each unlearning rate. Step 0 is probed
/// before any update, so every eta row starts at (CA(M), ASR(M)).
pub fn unlearning_sweep(
    suspect: &Network,
    clean_set: &LabeledDataset,
    etas: &[f64],
    probe_clean: &LabeledDataset,
    probe_triggered: &TriggeredSet,
    cfg: &ExtractionConfig,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::new();
    for &eta in etas {
        let mut sweep_cfg = cfg.clone();
        sweep_cfg.eta = eta;
        sweep_cfg.validate()?;
        if clean_set.is_empty() {
            return Err(Error::Config("clean set is empty".into()));
        }
        let mut model = suspect.clone();
        let total = sweep_cfg.iteration_count(clean_set.len());
        let record = |step: usize, net: &Network, points: &mut Vec<SweepPoint>| -> Result<()> {
            points.push(SweepPoint {
                eta,
                step,
                clean_acc: clean_accuracy(net, probe_clean)?,
                asr: asr_on_triggered(net, probe_triggered)?,
            });
            Ok(())
        };
        record(0, &model, &mut points)?;
        if total == 0 {
            continue;
        }
        let mut state = OptimizerState::adam(&model, AdamParams::with_lr(eta));
        let mut probe = |step: usize, net: &Network| record(step, net, &mut points);
        run_mislabeled_updates(
            &mut model,
            &mut state,
            clean_set,
            &sweep_cfg,
            total,
            &mut probe,
        )?;
    }
    Ok(points)
}

/// CSV rows for a sweep: header `eta,step,clean_acc,asr`.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("eta,step,clean_acc,asr\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            p.eta, p.step, p.clean_acc, p.asr
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_dataset;
    use crate::metrics::build_triggered_set;
    use crate::nn::{train, Architecture, Augmentation, TrainConfig};
    use crate::poison::{TargetMode, TriggerSpec};

    fn trained_net() -> (Network, LabeledDataset) {
        let data = make_synthetic_dataset(3, 30, [1, 8, 8], 40).unwrap();
        let arch = Architecture::mlp(1, 8, 8, &[16], 3).unwrap();
        let net = Network::new(arch, 9).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 16,
            base_lr: 0.1,
            lr_schedule: vec![],
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 2,
            augmentation: Augmentation::None,
        };
        (train(&net, &data, &cfg).unwrap(), data)
    }

    #[test]
    fn eta_zero_returns_bit_identical_expert() {
        let (net, data) = trained_net();
        let expert =
            extract_backdoor_expert(&net, &data, &ExtractionConfig::with_eta(0.0)).unwrap();
        assert_eq!(expert.params(), net.params());
    }

    #[test]
    fn suspect_model_is_never_mutated() {
        let (net, data) = trained_net();
        let before = net.clone();
        let _ = extract_backdoor_expert(&net, &data, &ExtractionConfig::with_eta(1e-3)).unwrap();
        let _ = clean_finetune(&net, &data, &FinetuneConfig::with_lr(0.05)).unwrap();
        assert_eq!(net.params(), before.params());
    }

    #[test]
    fn extraction_is_deterministic() {
        let (net, data) = trained_net();
        let cfg = ExtractionConfig::with_eta(1e-3);
        let a = extract_backdoor_expert(&net, &data, &cfg).unwrap();
        let b = extract_backdoor_expert(&net, &data, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn finetune_is_deterministic_and_rejects_zero_epochs() {
        let (net, data) = trained_net();
        let cfg = FinetuneConfig::with_lr(0.05);
        let a = clean_finetune(&net, &data, &cfg).unwrap();
        let b = clean_finetune(&net, &data, &cfg).unwrap();
        assert_eq!(a.params(), b.params());

        let mut bad = cfg;
        bad.epochs = 0;
        assert!(matches!(
            clean_finetune(&net, &data, &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_clean_set_is_a_config_error() {
        let (net, data) = trained_net();
        let (empty, _) = data.split(0, 1).unwrap();
        assert!(extract_backdoor_expert(&net, &empty, &ExtractionConfig::with_eta(1e-3)).is_err());
        assert!(clean_finetune(&net, &empty, &FinetuneConfig::with_lr(0.1)).is_err());
    }

    #[test]
    fn explicit_iteration_count_is_honored() {
        let (net, data) = trained_net();
        // run long enough that parameters must move
        let mut cfg = ExtractionConfig::with_eta(1e-2);
        cfg.iterations = Some(5);
        cfg.batch_size = 64;
        let expert = extract_backdoor_expert(&net, &data, &cfg).unwrap();
        assert_ne!(expert.params(), net.params());
    }

    #[test]
    fn sweep_zero_eta_row_reproduces_baseline() {
        let (net, data) = trained_net();
        let trigger = TriggerSpec::default_patch([1, 8, 8]).unwrap();
        let target = TargetMode::AllToOne { target: 0 };
        let triggered = build_triggered_set(&data, &trigger, &target).unwrap();
        let ca = clean_accuracy(&net, &data).unwrap();
        let asr = asr_on_triggered(&net, &triggered).unwrap();

        let mut cfg = ExtractionConfig::with_eta(0.0);
        cfg.batch_size = 32;
        let points =
            unlearning_sweep(&net, &data, &[0.0, 1e-3], &data, &triggered, &cfg).unwrap();
        for p in points.iter().filter(|p| p.eta == 0.0) {
            assert_eq!(p.clean_acc, ca);
            assert_eq!(p.asr, asr);
        }
        // step-0 rows exist for every eta and match the baseline
        for p in points.iter().filter(|p| p.step == 0) {
            assert_eq!(p.clean_acc, ca);
            assert_eq!(p.asr, asr);
        }
        let csv = sweep_csv(&points);
        assert!(csv.starts_with("eta,step,clean_acc,asr\n"));
        assert_eq!(csv.lines().count(), points.len() + 1);
    }
}
