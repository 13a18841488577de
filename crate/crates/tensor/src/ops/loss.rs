use crate::error::{Result, TensorError};
use crate::Tensor;

/// Weighted mean cross-entropy over rows of `logits[N, K]`.
///
/// Returns the loss and the row softmax used by the backward pass. With no
/// weights every row counts once.
pub fn softmax_ce_weighted(
    logits: &Tensor,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_ce",
            detail: format!("logits {s:?} vs {} labels", labels.len()),
        });
    }
    if let Some(w) = weights {
        if w.len() != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_ce",
                detail: format!("{} weights for {} labels", w.len(), labels.len()),
            });
        }
    }
    let k = s[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::LabelOutOfRange { label, classes: k });
    }
    let mut probs = logits.data().to_vec();
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for (i, row) in probs.chunks_mut(k).enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        let log_z = z.ln() + m;
        let w = weights.map_or(1.0, |w| w[i]);
        total += w * (log_z - logits.data()[i * k + labels[i]]);
        weight_sum += w;
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    let loss = if weight_sum > 0.0 { total / weight_sum } else { 0.0 };
    Ok((loss, probs))
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn softmax_ce(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    softmax_ce_weighted(logits, labels, None).map(|(l, _)| l)
}

/// `sum(w * bce(sigmoid(z), t)) / norm`, computed from logits stably.
pub fn bce_with_logits(logits: &[f64], targets: &[f64], weights: &[f64], norm: f64) -> f64 {
    logits
        .iter()
        .zip(targets)
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|((&z, &t), &w)| w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
        .sum::<f64>()
        / norm
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let x = Tensor::zeros(&[3, 4]);
        let l = softmax_ce(&x, &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_is_near_zero() {
        let x = Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
        assert!(softmax_ce(&x, &[0]).unwrap() < 1e-8);
    }

    #[test]
    fn three_class_value() {
        // -ln(e^3 / (e^1 + e^2 + e^3)) evaluated independently
        let expect = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let l = softmax_ce(&x, &[2]).unwrap();
        assert!((l - expect).abs() < 1e-15);
        assert!((l - 0.407_605_964_444_380_4).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            softmax_ce(&x, &[3]),
            Err(TensorError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn bce_matches_naive() {
        let z = [-3.0, -0.2, 0.0, 1.5, 12.0];
        let t = [0.0, 1.0, 1.0, 0.0, 1.0];
        let w = [1.0; 5];
        let naive: f64 = z
            .iter()
            .zip(&t)
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z as f64).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        assert!((bce_with_logits(&z, &t, &w, 1.0) - naive).abs() < 1e-9);
    }
}
