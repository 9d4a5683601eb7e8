//! Adaptive attacks against the detector: optimized asymmetric mark/mask
//! triggers and low-opacity inference-time blending.

use crate::data::LabeledDataset;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::metrics::{asr_on_triggered, auroc, build_triggered_set};
use crate::nn::{cross_entropy, softmax_f64, Network};
use crate::poison::{TargetMode, TriggerSpec};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// An optimizable trigger: a full-size mark and a per-pixel opacity mask
/// shared across channels. Both live in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveTrigger {
    /// (c, h, w) trigger mark
    pub mark: Tensor,
    /// (h, w) opacity mask
    pub mask: Tensor,
}

impl AdaptiveTrigger {
    pub fn validate(&self) -> Result<()> {
        if self.mark.shape().len() != 3 || self.mask.shape().len() != 2 {
            return Err(Error::InputShape {
                expected: "(c,h,w) mark and (h,w) mask".into(),
                got: format!("{:?} / {:?}", self.mark.shape(), self.mask.shape()),
            });
        }
        if self.mark.shape()[1..] != *self.mask.shape() {
            return Err(Error::InputShape {
                expected: format!("mask matching mark plane {:?}", &self.mark.shape()[1..]),
                got: format!("{:?}", self.mask.shape()),
            });
        }
        let in_range = |t: &Tensor| t.data().iter().all(|&v| (0.0..=1.0).contains(&v));
        if !in_range(&self.mark) || !in_range(&self.mask) {
            return Err(Error::Numeric("trigger values outside [0,1]".into()));
        }
        Ok(())
    }

    /// Entrywise sum of the mask (the norm reported alongside ASR/AUROC).
    pub fn mask_norm(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum()
    }
}

/// Hyperparameters of the trigger optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveConfig {
    /// weight on the backdoor-expert confidence term
    pub lambda1: f64,
    /// weight on the mask-norm sparsity term
    pub lambda2: f64,
    pub steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl AdaptiveConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        AdaptiveConfig {
            lambda1,
            lambda2,
            steps: 500,
            step_size: 1e-2,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda weights must be nonnegative".into()));
        }
        if self.steps == 0 || self.step_size <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config(
                "steps, step_size and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// x* = (1 - m) .* x + m .* mark, mask broadcast across channels.
pub fn apply_adaptive(x: &Tensor, trigger: &AdaptiveTrigger) -> Result<Tensor> {
    trigger.validate()?;
    if x.shape() != trigger.mark.shape() {
        return Err(Error::InputShape {
            expected: format!("{:?} input", trigger.mark.shape()),
            got: format!("{:?}", x.shape()),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let mut out = vec![0.0f32; c * plane];
    for ch in 0..c {
        for p in 0..plane {
            let m = trigger.mask.data()[p] as f64;
            let xi = x.data()[ch * plane + p] as f64;
            let di = trigger.mark.data()[ch * plane + p] as f64;
            out[ch * plane + p] = (((1.0 - m) * xi + m * di).clamp(0.0, 1.0)) as f32;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// One probe point of the optimization trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub conf_b: f64,
    pub mask_norm: f64,
}

/// Plain Adam over a flat parameter vector, with clamp projection to [0,1]
/// after every step.
struct ProjectedAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl ProjectedAdam {
    fn new(len: usize, lr: f64) -> Self {
        ProjectedAdam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let update = self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + EPS);
            params[i] = (params[i] - update).clamp(0.0, 1.0);
        }
    }
}

struct TriggerObjective<'a> {
    suspect: &'a Network,
    expert: &'a Network,
    target: usize,
    cfg: &'a AdaptiveConfig,
}

impl TriggerObjective<'_> {
    /// Objective value and gradients w.r.t. (mark, mask) on one batch.
    fn eval(
        &self,
        mark: &[f64],
        mask: &[f64],
        batch: &[&Tensor],
        want_grads: bool,
    ) -> Result<(TracePoint, Vec<f64>, Vec<f64>)> {
        let [c, h, w] = self.suspect.input_shape();
        let plane = h * w;
        let n = batch.len();
        let classes = self.suspect.num_classes();

        // assemble x* for the whole batch
        let mut star = vec![0.0f32; n * c * plane];
        for (s, x) in batch.iter().enumerate() {
            for ch in 0..c {
                for p in 0..plane {
                    let m = mask[p];
                    let xi = x.data()[ch * plane + p] as f64;
                    let di = mark[ch * plane + p];
                    star[(s * c + ch) * plane + p] = ((1.0 - m) * xi + m * di) as f32;
                }
            }
        }
        let star = Tensor::new(vec![n, c, h, w], star)?;

        // suspect-model cross-entropy toward the target class
        let labels = vec![self.target; n];
        let (logits_m, trace_m) = self.suspect.forward_trace(&star)?;
        let ce = cross_entropy(&logits_m, &labels, classes)?;

        // expert confidence on the target class
        let (logits_b, trace_b) = self.expert.forward_trace(&star)?;
        let mut conf_sum = 0.0f64;
        let mut probs_b = Vec::with_capacity(n);
        for row in logits_b.data().chunks_exact(classes) {
            let p = softmax_f64(row);
            conf_sum += p[self.target];
            probs_b.push(p);
        }
        let conf_b = conf_sum / n as f64;
        let mask_norm: f64 = mask.iter().sum();
        let total = ce + self.cfg.lambda1 * conf_b + self.cfg.lambda2 * mask_norm;
        let point = TracePoint {
            step: 0,
            total,
            ce,
            conf_b,
            mask_norm,
        };
        if !want_grads {
            return Ok((point, vec![], vec![]));
        }

        // d(ce)/d(logits_m) = (softmax - onehot) / n
        let lg_m = crate::nn::logit_gradient(&logits_m, &labels, classes)?;
        let (_, gx_m) = self.suspect.backward_from_logits(&trace_m, &lg_m)?;

        // d(mean conf_t)/d(logits_b): p_t * (delta_tj - p_j) / n per sample
        let mut lg_b = vec![0.0f32; n * classes];
        for (s, p) in probs_b.iter().enumerate() {
            let pt = p[self.target];
            for j in 0..classes {
                let delta = if j == self.target { 1.0 } else { 0.0 };
                lg_b[s * classes + j] = ((pt * (delta - p[j])) / n as f64) as f32;
            }
        }
        let lg_b = Tensor::new(vec![n, classes], lg_b)?;
        let (_, gx_b) = self.expert.backward_from_logits(&trace_b, &lg_b)?;

        // chain to the trigger parameters
        let mut g_mark = vec![0.0f64; c * plane];
        let mut g_mask = vec![0.0f64; plane];
        for (s, x) in batch.iter().enumerate() {
            for ch in 0..c {
                for p in 0..plane {
                    let idx = (s * c + ch) * plane + p;
                    let g_star =
                        gx_m.data()[idx] as f64 + self.cfg.lambda1 * gx_b.data()[idx] as f64;
                    let xi = x.data()[ch * plane + p] as f64;
                    g_mark[ch * plane + p] += g_star * mask[p];
                    g_mask[p] += g_star * (mark[ch * plane + p] - xi);
                }
            }
        }
        for g in &mut g_mask {
            *g += self.cfg.lambda2;
        }
        Ok((point, g_mark, g_mask))
    }
}

/// Optimize an asymmetric trigger that drives the suspect model toward the
/// target class while keeping the backdoor expert quiet and the mask sparse:
/// projected Adam on `CE(M(x*), t) + lambda1 Conf_B(t|x*) + lambda2 |m|`.
///
/// Returns the trigger with the lowest probe objective and the per-step
/// trace. Neither model is modified.
pub fn optimize_adaptive_trigger(
    suspect: &Network,
    expert: &Network,
    target: usize,
    data: &LabeledDataset,
    cfg: &AdaptiveConfig,
) -> Result<(AdaptiveTrigger, Vec<TracePoint>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("adaptive optimization needs data".into()));
    }
    let classes = suspect.num_classes();
    if target >= classes {
        return Err(Error::Label {
            label: target,
            classes,
        });
    }
    if suspect.input_shape() != expert.input_shape() || expert.num_classes() != classes {
        return Err(Error::Config(
            "suspect and expert models must share input shape and classes".into(),
        ));
    }
    let [c, h, w] = suspect.input_shape();
    let plane = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mark: Vec<f64> = (0..c * plane).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut mask: Vec<f64> = (0..plane).map(|_| rng.gen_range(0.05..0.25)).collect();

    let objective = TriggerObjective {
        suspect,
        expert,
        target,
        cfg,
    };

    // fixed probe batch so the trace is comparable across steps
    let probe: Vec<&Tensor> = data.inputs().iter().take(64.min(data.len())).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle

    let make_trigger = |mark: &[f64], mask: &[f64]| -> Result<AdaptiveTrigger> {
        Ok(AdaptiveTrigger {
            mark: Tensor::new(
                vec![c, h, w],
                mark.iter().map(|&v| v as f32).collect(),
            )?,
            mask: Tensor::new(vec![h, w], mask.iter().map(|&v| v as f32).collect())?,
        })
    };

    let (mut point, _, _) = objective.eval(&mark, &mask, &probe, false)?;
    point.step = 0;
    let mut trace = vec![point];
    let mut best = (point.total, make_trigger(&mark, &mask)?);

    let mut adam = ProjectedAdam::new(mark.len() + mask.len(), cfg.step_size);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data.input(order[cursor]));
            cursor += 1;
        }
        let (_, g_mark, g_mask) = objective.eval(&mark, &mask, &batch, true)?;

        let mut params: Vec<f64> = mark.iter().chain(mask.iter()).cloned().collect();
        let grads: Vec<f64> = g_mark.iter().chain(g_mask.iter()).cloned().collect();
        adam.step(&mut params, &grads);
        let split = mark.len();
        mark.copy_from_slice(&params[..split]);
        mask.copy_from_slice(&params[split..]);

        let (mut point, _, _) = objective.eval(&mark, &mask, &probe, false)?;
        point.step = step;
        trace.push(point);
        if point.total < best.0 {
            best = (point.total, make_trigger(&mark, &mask)?);
        }
    }
    Ok((best.1, trace))
}

/// One row of a low-opacity sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowOpacityRow {
    pub alpha: f64,
    pub asr: f64,
    pub auroc: f64,
}

/// Evaluate a blend-trigger attack with weakened inference-time opacities.
/// The models are untouched; triggers are applied at evaluation only.
pub fn low_opacity_eval(
    detector: &Detector,
    blend: &TriggerSpec,
    alphas: &[f64],
    eval_clean: &LabeledDataset,
    target: &TargetMode,
) -> Result<Vec<LowOpacityRow>> {
    if !matches!(blend, TriggerSpec::Blend { .. }) {
        return Err(Error::Config(
            "low-opacity sweep requires a blend trigger".into(),
        ));
    }
    let clean_scores = detector.score_all(eval_clean.inputs())?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let spec = blend.with_alpha(alpha);
        let triggered = build_triggered_set(eval_clean, &spec, target)?;
        let asr = asr_on_triggered(&detector.suspect, &triggered)?;
        let backdoor_scores = detector.score_all(&triggered.inputs)?;
        rows.push(LowOpacityRow {
            alpha,
            asr,
            auroc: auroc(&clean_scores, &backdoor_scores)?,
        });
    }
    Ok(rows)
}

/// CSV for an adaptive grid: `lambda1,lambda2,mask_norm,asr,auroc`.
pub fn grid_csv(rows: &[(f64, f64, f64, f64, f64)]) -> String {
    let mut out = String::from("lambda1,lambda2,mask_norm,asr,auroc\n");
    for (l1, l2, norm, asr, auroc) in rows {
        out.push_str(&format!(
            "{l1},{l2},{norm:.6},{asr:.6},{auroc:.6}\n"
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_dataset;
    use crate::nn::Architecture;

    fn trigger(mark: f32, mask: f32) -> AdaptiveTrigger {
        AdaptiveTrigger {
            mark: Tensor::filled(vec![1, 4, 4], mark),
            mask: Tensor::filled(vec![4, 4], mask),
        }
    }

    #[test]
    fn empty_mask_is_identity() {
        let x = Tensor::filled(vec![1, 4, 4], 0.37);
        let out = apply_adaptive(&x, &trigger(0.9, 0.0)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn full_mask_is_the_mark() {
        let x = Tensor::filled(vec![1, 4, 4], 0.37);
        let t = trigger(0.9, 1.0);
        let out = apply_adaptive(&x, &t).unwrap();
        assert_eq!(out, t.mark);
    }

    #[test]
    fn scalar_blend_arithmetic() {
        // x=0.4, m=0.25, mark=0.8 -> 0.75*0.4 + 0.25*0.8 = 0.5
        let x = Tensor::filled(vec![1, 4, 4], 0.4);
        let out = apply_adaptive(&x, &trigger(0.8, 0.25)).unwrap();
        for &v in out.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_norm_is_the_entry_sum() {
        let t = trigger(0.5, 0.25);
        assert!((t.mask_norm() - 4.0).abs() < 1e-9);
    }

    fn tiny_models() -> (Network, Network, LabeledDataset) {
        let data = make_synthetic_dataset(3, 20, [1, 8, 8], 50).unwrap();
        let arch = Architecture::mlp(1, 8, 8, &[12], 3).unwrap();
        let net = Network::new(arch.clone(), 4).unwrap();
        let cfg = crate::nn::TrainConfig {
            epochs: 8,
            batch_size: 16,
            base_lr: 0.1,
            lr_schedule: vec![],
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 6,
            augmentation: crate::nn::Augmentation::None,
        };
        let m = crate::nn::train(&net, &data, &cfg).unwrap();
        let b = Network::new(Architecture::mlp(1, 8, 8, &[12], 3).unwrap(), 9).unwrap();
        (m, b, data)
    }

    #[test]
    fn optimization_is_deterministic_and_projected() {
        let (m, b, data) = tiny_models();
        let mut cfg = AdaptiveConfig::new(1.0, 0.05);
        cfg.steps = 20;
        let (t1, trace1) = optimize_adaptive_trigger(&m, &b, 0, &data, &cfg).unwrap();
        let (t2, trace2) = optimize_adaptive_trigger(&m, &b, 0, &data, &cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(trace1, trace2);
        t1.validate().unwrap();
        assert_eq!(trace1.len(), 21, "step 0 plus 20 steps");
    }

    #[test]
    fn models_are_not_mutated() {
        let (m, b, data) = tiny_models();
        let (m0, b0) = (m.clone(), b.clone());
        let mut cfg = AdaptiveConfig::new(1.0, 0.01);
        cfg.steps = 5;
        let _ = optimize_adaptive_trigger(&m, &b, 1, &data, &cfg).unwrap();
        assert_eq!(m.params(), m0.params());
        assert_eq!(b.params(), b0.params());
    }

    #[test]
    fn lambda1_zero_reduces_to_trigger_inversion() {
        let (m, b, data) = tiny_models();
        let mut cfg = AdaptiveConfig::new(0.0, 0.0);
        cfg.steps = 60;
        let (_, trace) = optimize_adaptive_trigger(&m, &b, 2, &data, &cfg).unwrap();
        let first_ce = trace.first().unwrap().ce;
        let last_ce = trace.last().unwrap().ce;
        assert!(
            last_ce < first_ce,
            "targeted inversion must reduce CE: {first_ce} -> {last_ce}"
        );
    }

    #[test]
    fn sparsity_pressure_shrinks_the_mask() {
        let (m, b, data) = tiny_models();
        let mut free = AdaptiveConfig::new(1.0, 0.0);
        free.steps = 40;
        let mut sparse = free.clone();
        sparse.lambda2 = 0.5;
        let (t_free, _) = optimize_adaptive_trigger(&m, &b, 0, &data, &free).unwrap();
        let (t_sparse, _) = optimize_adaptive_trigger(&m, &b, 0, &data, &sparse).unwrap();
        assert!(
            t_sparse.mask_norm() < t_free.mask_norm(),
            "lambda2 {} vs 0: {} !< {}",
            sparse.lambda2,
            t_sparse.mask_norm(),
            t_free.mask_norm()
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (m, b, data) = tiny_models();
        let cfg = AdaptiveConfig::new(-1.0, 0.0);
        assert!(optimize_adaptive_trigger(&m, &b, 0, &data, &cfg).is_err());
        let cfg = AdaptiveConfig::new(1.0, 0.0);
        assert!(optimize_adaptive_trigger(&m, &b, 99, &data, &cfg).is_err());
    }
}
