use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient with respect to the logits.
///
/// Logits are shifted by their row maximum before exponentiation.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[n, classes] = logits.dims() else {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: logits.dims().to_vec(),
            right: vec![labels.len()],
        });
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: logits.dims().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            num_classes: classes,
        });
    }

    let mut grad = Tensor::zeros(logits.shape().clone());
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, (row, g)) in logits
        .data()
        .chunks_exact(classes)
        .zip(grad.data_mut().chunks_exact_mut(classes))
        .enumerate()
    {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - max).exp();
            denom += *gj;
        }
        let label = labels[i];
        total += denom.ln() - (row[label] - max);
        for gj in g.iter_mut() {
            *gj = *gj / denom * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Index of the largest logit per row; ties and NaNs resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = *logits.dims().last().unwrap_or(&1);
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape;

    #[test]
    fn uniform_two_class_loss_is_ln2() {
        let logits = Tensor::zeros(shape![3, 2]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn large_logits_stay_finite() {
        let logits = Tensor::from_vec(shape![1, 2], vec![1000.0, -1000.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - 2000.0).abs() < 1e-9);
        assert!(grad.all_finite());
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor::zeros(shape![2, 2]);
        let err = softmax_cross_entropy(&logits, &[0, 2]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { index: 1, label: 2, .. }));
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Tensor::from_vec(shape![2, 3], vec![0.3, -1.2, 2.0, 0.0, 0.5, 0.1]).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        for row in g.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_prefers_first_on_ties_and_skips_nan() {
        let t = Tensor::from_vec(shape![3, 2], vec![1.0, 1.0, f64::NAN, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 0, 1]);
    }
}
