//! Backdoor input detection rules built on the (M, B, M') model triple, plus
//! threshold calibration.
//!
//! Every soft rule reports a score where LOWER means more suspicious, so a
//! single quantile calibration routine serves all of them. An input is
//! rejected when its score is at or below the threshold alpha.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Denominator clamp used by the ratio rules.
pub const POSITIVE_CLAMP: f64 = 1e-8;

fn clamp_pos(v: f64) -> f64 {
    v.max(POSITIVE_CLAMP)
}

/// Decision rule variants. `SoftB`/`SoftMPrime` carry an optional preset
/// threshold on the raw confidence; when absent, `alpha` must be calibrated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecisionRule {
    /// Reject iff M(x) == B(x).
    Hard,
    /// Reject iff Conf_B(y~|x) >= tau.
    SoftB { tau: Option<f64> },
    /// Reject iff Conf_M'(y~|x) <= tau'.
    SoftMPrime { tau: Option<f64> },
    /// Reject iff Conf_M' / Conf_B <= alpha.
    SimpleRatio,
    /// Two-triangle rule with gamma and positive clamping.
    Modified,
}

impl DecisionRule {
    pub fn name(&self) -> &'static str {
        match self {
            DecisionRule::Hard => "hard",
            DecisionRule::SoftB { .. } => "soft_b",
            DecisionRule::SoftMPrime { .. } => "soft_mprime",
            DecisionRule::SimpleRatio => "simple_ratio",
            DecisionRule::Modified => "modified",
        }
    }
}

/// Confidence pair of the expert and auxiliary models on the suspect's
/// predicted class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfPair {
    pub conf_b: f64,
    pub conf_mprime: f64,
}

/// Per-input scoring record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredInput {
    pub prediction: usize,
    pub conf_b: f64,
    pub conf_mprime: f64,
    pub score: f64,
    pub reject: bool,
}

/// The BaDExpert detector bundle: suspect model M, backdoor expert B,
/// auxiliary model M', rule hyperparameters and the rejection threshold.
#[derive(Debug, Clone)]
pub struct Detector {
    pub suspect: Network,
    pub expert: Network,
    pub auxiliary: Network,
    pub gamma: f64,
    pub rule: DecisionRule,
    pub alpha: Option<f64>,
}

impl Detector {
    pub fn new(
        suspect: Network,
        expert: Network,
        auxiliary: Network,
        rule: DecisionRule,
        gamma: f64,
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {gamma} outside (0,1]")));
        }
        let shape = suspect.input_shape();
        let classes = suspect.num_classes();
        for (name, net) in [("expert", &expert), ("auxiliary", &auxiliary)] {
            if net.input_shape() != shape || net.num_classes() != classes {
                return Err(Error::Config(format!(
                    "{name} model does not match the suspect's input shape / classes"
                )));
            }
        }
        Ok(Detector {
            suspect,
            expert,
            auxiliary,
            gamma,
            rule,
            alpha: None,
        })
    }

    /// Preliminary prediction and the (Conf_B, Conf_M') pair for it.
    pub fn confidences(&self, x: &Tensor) -> Result<(usize, ConfPair)> {
        let prediction = self.suspect.predict(x)?;
        let conf_b = self.expert.confidence(x)?[prediction];
        let conf_mprime = self.auxiliary.confidence(x)?[prediction];
        Ok((
            prediction,
            ConfPair {
                conf_b,
                conf_mprime,
            },
        ))
    }

    /// Rule score from a confidence pair (lower = more suspicious).
    pub fn score_pair(&self, pair: ConfPair) -> f64 {
        match self.rule {
            DecisionRule::Hard => {
                // hard agreement has no graded score; map agree->0, disagree->1
                unreachable!("hard rule is handled in bid()")
            }
            DecisionRule::SoftB { .. } => score_single_b(pair),
            DecisionRule::SoftMPrime { .. } => score_single_mprime(pair),
            DecisionRule::SimpleRatio => score_simple(pair),
            DecisionRule::Modified => score_modified(pair, self.gamma),
        }
    }

    /// Score one input under the configured rule.
    pub fn score(&self, x: &Tensor) -> Result<f64> {
        let (_, pair) = self.confidences(x)?;
        Ok(self.score_pair(pair))
    }

    fn effective_alpha(&self) -> Result<f64> {
        if let Some(alpha) = self.alpha {
            return Ok(alpha);
        }
        match self.rule {
            DecisionRule::SoftB { tau: Some(tau) } => Ok(-tau),
            DecisionRule::SoftMPrime { tau: Some(tau) } => Ok(tau),
            DecisionRule::Hard => Ok(0.0),
            _ => Err(Error::State(format!(
                "rule {:?} requires a calibrated alpha",
                self.rule.name()
            ))),
        }
    }

    /// Backdoor input detector: 1 = reject. Boundary is inclusive
    /// (score == alpha rejects).
    pub fn bid(&self, x: &Tensor) -> Result<bool> {
        if let DecisionRule::Hard = self.rule {
            let m = self.suspect.predict(x)?;
            let b = self.expert.predict(x)?;
            return Ok(m == b);
        }
        let alpha = self.effective_alpha()?;
        Ok(self.score(x)? <= alpha)
    }

    /// Full scoring record for one input.
    pub fn scored_input(&self, x: &Tensor) -> Result<ScoredInput> {
        let (prediction, pair) = self.confidences(x)?;
        let (score, reject) = if let DecisionRule::Hard = self.rule {
            let agree = self.expert.predict(x)? == prediction;
            (if agree { 0.0 } else { 1.0 }, agree)
        } else {
            let s = self.score_pair(pair);
            (s, s <= self.effective_alpha()?)
        };
        Ok(ScoredInput {
            prediction,
            conf_b: pair.conf_b,
            conf_mprime: pair.conf_mprime,
            score,
            reject,
        })
    }

    /// Scores for a list of inputs (parallel, order-preserving).
    pub fn score_all(&self, inputs: &[Tensor]) -> Result<Vec<f64>> {
        crate::parallel::install(|| inputs.par_iter().map(|x| self.score(x)).collect())
    }

    /// Calibrate alpha to the given false-positive budget on clean scores.
    pub fn calibrate(&mut self, clean: &LabeledDataset, target_fpr: f64) -> Result<f64> {
        let scores = self.score_all(clean.inputs())?;
        let alpha = calibrate_threshold(&scores, target_fpr)?;
        self.alpha = Some(alpha);
        Ok(alpha)
    }
}

/// Hard agreement rule on its own: reject iff M(x) == B(x).
pub fn hard_agreement(suspect: &Network, expert: &Network, x: &Tensor) -> Result<bool> {
    Ok(suspect.predict(x)? == expert.predict(x)?)
}

/// Eq-2-style likelihood ratio: Conf_M' / Conf_B, clamped denominator.
pub fn score_simple(pair: ConfPair) -> f64 {
    pair.conf_mprime / clamp_pos(pair.conf_b)
}

/// Two-triangle score: min(Conf_M' / (gamma Conf_B), (1 - Conf_B) / (gamma - Conf_M')),
/// both denominators clamped positive. Lower = more suspicious.
pub fn score_modified(pair: ConfPair, gamma: f64) -> f64 {
    let first = pair.conf_mprime / clamp_pos(gamma * pair.conf_b);
    let second = (1.0 - pair.conf_b) / clamp_pos(gamma - pair.conf_mprime);
    first.min(second)
}

/// B-only rule score: negated confidence so that lower = suspicious.
pub fn score_single_b(pair: ConfPair) -> f64 {
    -pair.conf_b
}

/// M'-only rule score: the confidence itself (low = disagreement = suspicious).
pub fn score_single_mprime(pair: ConfPair) -> f64 {
    pair.conf_mprime
}

/// Threshold for a false-positive budget: the largest score value whose
/// inclusive rejection count stays within `floor(target_fpr * n)`. With
/// distinct scores this is the `floor(target_fpr * n)`-th order statistic;
/// ties push the threshold below the tied value. When no value qualifies the
/// threshold sits just under the minimum, rejecting nothing.
pub fn calibrate_threshold(clean_scores: &[f64], target_fpr: f64) -> Result<f64> {
    if clean_scores.is_empty() {
        return Err(Error::Calibration("no clean scores to calibrate on".into()));
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::Calibration(format!(
            "target FPR {target_fpr} outside (0,1)"
        )));
    }
    if clean_scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite calibration score".into()));
    }
    let mut sorted = clean_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let budget = (target_fpr * n as f64).floor() as usize;

    let mut alpha = None;
    for i in (0..budget.min(n)).rev() {
        let candidate = sorted[i];
        // inclusive rejection count at this candidate
        let count = sorted.partition_point(|&v| v <= candidate);
        if count <= budget {
            alpha = Some(candidate);
            break;
        }
    }
    Ok(alpha.unwrap_or_else(|| below(sorted[0])))
}

/// A value strictly below `v`, used when the budget admits no rejection.
fn below(v: f64) -> f64 {
    let guard = 1e-9f64.max(v.abs() * 1e-9);
    v - guard
}
