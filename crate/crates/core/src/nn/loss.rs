//! Cross-entropy loss over raw logits, with hard labels or label
//! distributions. Loss values accumulate in f64.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_rows(logits: &Tensor, rows: usize, classes: usize) -> Result<()> {
    if logits.shape() != [rows, classes] {
        return Err(Error::InputShape {
            expected: format!("({rows}, {classes}) logits"),
            got: format!("{:?}", logits.shape()),
        });
    }
    Ok(())
}

/// log-sum-exp of one logit row, shifted by the row maximum.
fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&z| ((z as f64) - max).exp()).sum();
    max + sum.ln()
}

/// Mean of `-ln softmax(logits)[label]` over the batch.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], classes: usize) -> Result<f64> {
    check_rows(logits, labels.len(), classes)?;
    if labels.is_empty() {
        return Err(Error::Evaluation("cross_entropy over empty batch".into()));
    }
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        total += log_sum_exp(row) - row[label] as f64;
    }
    Ok(total / labels.len() as f64)
}

/// Cross-entropy against per-sample label distributions:
/// mean of `-sum_y q(y) ln softmax(logits)[y]`.
pub fn cross_entropy_soft(logits: &Tensor, targets: &[Vec<f32>], classes: usize) -> Result<f64> {
    check_rows(logits, targets.len(), classes)?;
    if targets.is_empty() {
        return Err(Error::Evaluation("cross_entropy over empty batch".into()));
    }
    let mut total = 0.0f64;
    for (row, q) in logits.data().chunks_exact(classes).zip(targets) {
        if q.len() != classes {
            return Err(Error::InputShape {
                expected: format!("{classes}-way target row"),
                got: format!("{}", q.len()),
            });
        }
        let lse = log_sum_exp(row);
        for (y, &qy) in q.iter().enumerate() {
            if qy != 0.0 {
                total += qy as f64 * (lse - row[y] as f64);
            }
        }
    }
    Ok(total / targets.len() as f64)
}

/// Gradient of the mean cross-entropy at the logits: `(softmax - onehot) / n`.
pub fn logit_gradient(logits: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    check_rows(logits, labels.len(), classes)?;
    let n = labels.len();
    let scale = 1.0 / n as f64;
    let mut g = vec![0.0f32; n * classes];
    for (s, (row, &label)) in logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .enumerate()
    {
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let p = super::softmax_f64(row);
        for y in 0..classes {
            let delta = if y == label { 1.0 } else { 0.0 };
            g[s * classes + y] = ((p[y] - delta) * scale) as f32;
        }
    }
    Tensor::new(vec![n, classes], g)
}

/// Gradient for distribution targets: `(softmax - q) / n`.
pub fn logit_gradient_soft(
    logits: &Tensor,
    targets: &[Vec<f32>],
    classes: usize,
) -> Result<Tensor> {
    check_rows(logits, targets.len(), classes)?;
    let n = targets.len();
    let scale = 1.0 / n as f64;
    let mut g = vec![0.0f32; n * classes];
    for (s, (row, q)) in logits.data().chunks_exact(classes).zip(targets).enumerate() {
        let p = super::softmax_f64(row);
        for y in 0..classes {
            g[s * classes + y] = ((p[y] - q[y] as f64) * scale) as f32;
        }
    }
    Tensor::new(vec![n, classes], g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::zeros(vec![3, 10]);
        let loss = cross_entropy(&logits, &[0, 5, 9], 10).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_drive_loss_to_zero() {
        let mut data = vec![0.0f32; 4];
        data[2] = 60.0;
        let logits = Tensor::new(vec![1, 4], data).unwrap();
        let loss = cross_entropy(&logits, &[2], 4).unwrap();
        assert!(loss >= 0.0 && loss < 1e-9);
    }

    #[test]
    fn hand_evaluated_example() {
        // logits [1,2,3], label = class index 2
        let logits = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = cross_entropy(&logits, &[2], 3).unwrap();
        let z = [1.0f64, 2.0, 3.0];
        let lse = (z[0].exp() + z[1].exp() + z[2].exp()).ln();
        assert!((loss - (lse - 3.0)).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[3], 3),
            Err(crate::error::Error::Label { .. })
        ));
    }

    #[test]
    fn soft_targets_match_hard_labels_on_one_hot() {
        let logits = Tensor::new(vec![2, 3], vec![0.3, -1.0, 0.5, 2.0, 0.0, 1.0]).unwrap();
        let hard = cross_entropy(&logits, &[2, 0], 3).unwrap();
        let soft = cross_entropy_soft(
            &logits,
            &[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]],
            3,
        )
        .unwrap();
        assert!((hard - soft).abs() < 1e-12);
    }

    #[test]
    fn logit_gradient_rows_sum_to_zero() {
        let logits = Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let g = logit_gradient(&logits, &[1], 4).unwrap();
        let sum: f32 = g.data().iter().sum();
        assert!(sum.abs() < 1e-7, "softmax-minus-onehot rows sum to zero");
    }
}
