//! Evaluation vocabulary: clean accuracy, attack success rate (raw and
//! detector-aware), ROC curves and AUROC.
//!
//! Score convention across the crate: lower score = more suspicious, and the
//! positive class of a ROC sweep is "backdoor".

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::poison::{apply_trigger, TargetMode, TriggerSpec};
use crate::tensor::Tensor;

/// Fraction of correctly classified samples.
pub fn clean_accuracy(net: &Network, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Evaluation("clean accuracy over empty set".into()));
    }
    let predictions = crate::parallel::predict_all(net, dataset.inputs())?;
    let correct = predictions
        .iter()
        .zip(dataset.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// A triggered evaluation set: planted inputs with their original labels and
/// per-sample attack target.
#[derive(Debug, Clone)]
pub struct TriggeredSet {
    pub inputs: Vec<Tensor>,
    pub original_labels: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TriggeredSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Plant the trigger into every eligible sample of a clean set. For
/// all-to-one targets, samples already in the target class are excluded.
pub fn build_triggered_set(
    dataset: &LabeledDataset,
    trigger: &TriggerSpec,
    target: &TargetMode,
) -> Result<TriggeredSet> {
    let classes = dataset.num_classes();
    let mut inputs = Vec::new();
    let mut original_labels = Vec::new();
    let mut targets = Vec::new();
    for i in 0..dataset.len() {
        let y = dataset.label(i);
        if let TargetMode::AllToOne { target: t } = target {
            if y == *t {
                continue;
            }
        }
        inputs.push(apply_trigger(dataset.input(i), trigger)?);
        original_labels.push(y);
        targets.push(target.target_for(y, classes));
    }
    if inputs.is_empty() {
        return Err(Error::Evaluation(
            "no eligible samples for attack evaluation (all carry the target label)".into(),
        ));
    }
    Ok(TriggeredSet {
        inputs,
        original_labels,
        targets,
    })
}

/// Fraction of triggered eligible inputs classified as their attack target.
pub fn attack_success_rate(
    net: &Network,
    dataset: &LabeledDataset,
    trigger: &TriggerSpec,
    target: &TargetMode,
) -> Result<f64> {
    let set = build_triggered_set(dataset, trigger, target)?;
    asr_on_triggered(net, &set)
}

/// ASR over an already-built triggered set.
pub fn asr_on_triggered(net: &Network, set: &TriggeredSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Evaluation("empty triggered set".into()));
    }
    let predictions = crate::parallel::predict_all(net, &set.inputs)?;
    let hits = predictions
        .iter()
        .zip(&set.targets)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / set.len() as f64)
}

/// Detector-aware CA and ASR: a clean sample counts only when correctly
/// classified AND accepted; a triggered sample counts only when it hits its
/// target AND is accepted.
pub fn defended_metrics<F>(
    net: &Network,
    mut bid: F,
    clean: &LabeledDataset,
    triggered: &TriggeredSet,
) -> Result<(f64, f64)>
where
    F: FnMut(&Tensor) -> Result<bool>,
{
    if clean.is_empty() || triggered.is_empty() {
        return Err(Error::Evaluation("empty evaluation set".into()));
    }
    let clean_preds = crate::parallel::predict_all(net, clean.inputs())?;
    let mut ca_hits = 0usize;
    for i in 0..clean.len() {
        if clean_preds[i] == clean.label(i) && !bid(clean.input(i))? {
            ca_hits += 1;
        }
    }
    let trig_preds = crate::parallel::predict_all(net, &triggered.inputs)?;
    let mut asr_hits = 0usize;
    for i in 0..triggered.len() {
        if trig_preds[i] == triggered.targets[i] && !bid(&triggered.inputs[i])? {
            asr_hits += 1;
        }
    }
    Ok((
        ca_hits as f64 / clean.len() as f64,
        asr_hits as f64 / triggered.len() as f64,
    ))
}

/// One point of a ROC sweep. `threshold` is the score at (and below) which
/// inputs are flagged as backdoor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn check_scores(clean: &[f64], backdoor: &[f64]) -> Result<()> {
    if clean.is_empty() || backdoor.is_empty() {
        return Err(Error::Evaluation("AUROC needs nonempty score lists".into()));
    }
    if clean.iter().chain(backdoor).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    Ok(())
}

/// Mann-Whitney AUROC with tie weight 0.5: the probability that a random
/// backdoor score ranks below a random clean score.
pub fn auroc(clean_scores: &[f64], backdoor_scores: &[f64]) -> Result<f64> {
    check_scores(clean_scores, backdoor_scores)?;
    let mut clean = clean_scores.to_vec();
    clean.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n_c = clean.len() as f64;
    let n_b = backdoor_scores.len() as f64;
    let mut won = 0.0f64;
    for &b in backdoor_scores {
        let below = clean.partition_point(|&c| c < b);
        let at_or_below = clean.partition_point(|&c| c <= b);
        let greater = clean.len() - at_or_below;
        let ties = at_or_below - below;
        won += greater as f64 + 0.5 * ties as f64;
    }
    Ok(won / (n_b * n_c))
}

/// ROC curve from a threshold sweep over all distinct scores. Starts at
/// (0,0), ends at (1,1), both coordinates non-decreasing.
pub fn roc_points(clean_scores: &[f64], backdoor_scores: &[f64]) -> Result<Vec<RocPoint>> {
    check_scores(clean_scores, backdoor_scores)?;
    let mut clean = clean_scores.to_vec();
    let mut backdoor = backdoor_scores.to_vec();
    clean.sort_by(|a, b| a.partial_cmp(b).unwrap());
    backdoor.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut thresholds: Vec<f64> = clean.iter().chain(backdoor.iter()).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    for &t in &thresholds {
        let fp = clean.partition_point(|&c| c <= t);
        let tp = backdoor.partition_point(|&b| b <= t);
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / clean.len() as f64,
            tpr: tp as f64 / backdoor.len() as f64,
        });
    }
    Ok(points)
}

/// Trapezoid area under a ROC sweep; equals the Mann-Whitney pair count.
pub fn auroc_trapezoid(points: &[RocPoint]) -> f64 {
    let mut area = 0.0f64;
    for pair in points.windows(2) {
        area += (pair[1].fpr - pair[0].fpr) * (pair[0].tpr + pair[1].tpr) / 2.0;
    }
    area
}

/// The numeric summary of one defended run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub ca_raw: f64,
    pub asr_raw: f64,
    pub ca_defended: f64,
    pub asr_defended: f64,
    pub auroc: f64,
    pub roc: Vec<RocPoint>,
    pub n_clean: usize,
    pub n_backdoor: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_score_multisets_give_half() {
        let s = vec![0.3, 0.5, 0.9];
        assert!((auroc(&s, &s).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_gives_one() {
        let a = auroc(&[0.8, 0.9], &[0.1, 0.2]).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pair_count_example() {
        // 3 of 4 pairs ordered correctly
        let a = auroc(&[0.4, 0.9], &[0.1, 0.7]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_lists_are_errors() {
        assert!(auroc(&[], &[0.1]).is_err());
        assert!(auroc(&[0.1], &[]).is_err());
        assert!(roc_points(&[], &[0.1]).is_err());
    }

    #[test]
    fn roc_endpoints_and_monotonicity() {
        let points = roc_points(&[0.4, 0.9, 0.2], &[0.1, 0.7]).unwrap();
        let first = points.first().unwrap();
        let last = points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for pair in points.windows(2) {
            assert!(pair[1].fpr >= pair[0].fpr);
            assert!(pair[1].tpr >= pair[0].tpr);
        }
    }

    fn score_lists() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        let list = prop::collection::vec((0u32..100).prop_map(|v| v as f64 / 32.0), 1..40);
        (list.clone(), list)
    }

    proptest! {
        #[test]
        fn trapezoid_matches_pair_count((clean, backdoor) in score_lists()) {
            let direct = auroc(&clean, &backdoor).unwrap();
            let sweep = auroc_trapezoid(&roc_points(&clean, &backdoor).unwrap());
            prop_assert!((direct - sweep).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_invariance((clean, backdoor) in score_lists()) {
            let f = |v: f64| (v * 0.7 + 1.0).exp();
            let a = auroc(&clean, &backdoor).unwrap();
            let b = auroc(
                &clean.iter().map(|&v| f(v)).collect::<Vec<_>>(),
                &backdoor.iter().map(|&v| f(v)).collect::<Vec<_>>(),
            ).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn role_swap_complements((clean, backdoor) in score_lists()) {
            let a = auroc(&clean, &backdoor).unwrap();
            let b = auroc(&backdoor, &clean).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}
