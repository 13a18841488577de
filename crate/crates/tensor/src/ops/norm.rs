use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Result, TensorError};
use crate::Tensor;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Per-channel statistics used by one forward evaluation.
#[derive(Clone, Debug, Default)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Vec<f64>,
}

pub(crate) fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            detail: format!("need [N, C, ...], got {shape:?}"),
        });
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

fn check_affine(channels: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.numel() != channels || beta.numel() != channels {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            detail: format!(
                "{channels} channels vs gamma {:?} / beta {:?}",
                gamma.shape(),
                beta.shape()
            ),
        });
    }
    Ok(())
}

/// Batch statistics (mean, biased variance) per channel.
pub(crate) fn batch_stats(input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, inner) = layout(input.shape())?;
    let m = (n * inner) as f64;
    let x = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..n {
            v += x[(b * c + ch) * inner..(b * c + ch + 1) * inner]
                .iter()
                .map(|&t| (t - mu) * (t - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    Ok((mean, var))
}

/// Normalizes with the given per-channel mean/variance and applies the affine map.
pub(crate) fn normalize(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<(Tensor, BnCache)> {
    let (n, c, inner) = layout(input.shape())?;
    check_affine(c, gamma, beta)?;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let x = input.data();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let (g, bt, mu, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                let h = (x[i] - mu) * is;
                xhat[i] = h;
                out[i] = g * h + bt;
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BnCache {
            mean: mean.to_vec(),
            inv_std,
            xhat,
        },
    ))
}

/// Batch normalization over axis 1.
///
/// Train mode normalizes with biased batch statistics and folds them into
/// `state` (running variance uses the unbiased estimate). Infer mode reads
/// `state` only.
pub fn batchnorm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: Mode,
    config: BatchNormConfig,
    state: &mut BatchNormState,
) -> Result<Tensor> {
    let (n, c, inner) = layout(input.shape())?;
    if state.running_mean.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            detail: format!("state has {} channels, input {c}", state.running_mean.len()),
        });
    }
    match mode {
        Mode::Train => {
            let m = n * inner;
            if n < 2 {
                return Err(TensorError::DegenerateBatch(n));
            }
            let (mean, var) = batch_stats(input)?;
            let (out, _) = normalize(input, gamma, beta, &mean, &var, config.eps)?;
            update_running(state, &mean, &var, m, config.momentum);
            Ok(out)
        }
        Mode::Infer => {
            let (out, _) = normalize(
                input,
                gamma,
                beta,
                &state.running_mean.clone(),
                &state.running_var.clone(),
                config.eps,
            )?;
            Ok(out)
        }
    }
}

pub(crate) fn update_running(
    state: &mut BatchNormState,
    mean: &[f64],
    var: &[f64],
    count: usize,
    momentum: f64,
) {
    let unbias = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    for ch in 0..mean.len() {
        state.running_mean[ch] = (1.0 - momentum) * state.running_mean[ch] + momentum * mean[ch];
        state.running_var[ch] =
            (1.0 - momentum) * state.running_var[ch] + momentum * var[ch] * unbias;
    }
}

/// Backward of the normalization. `batch_stats` selects the train-mode
/// formula (statistics depend on the input) versus the frozen one.
pub(crate) fn batchnorm_backward(
    shape: &[usize],
    gamma: &[f64],
    cache: &BnCache,
    grad_out: &[f64],
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, inner) = layout(shape).expect("validated at forward");
    let m = (n * inner) as f64;
    let mut dx = vec![0.0; grad_out.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                sum_dy += grad_out[i];
                sum_dy_xhat += grad_out[i] * cache.xhat[i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch];
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                dx[i] = if batch_stats {
                    scale * (grad_out[i] - sum_dy / m - cache.xhat[i] * sum_dy_xhat / m)
                } else {
                    scale * grad_out[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use rand::Rng;

    fn channel_moments(t: &Tensor) -> Vec<(f64, f64)> {
        let (mean, var) = batch_stats(t).unwrap();
        mean.into_iter().zip(var).collect()
    }

    #[test]
    fn train_mode_output_is_standardized() {
        let mut rng = SeedStream::new(3).rng("bn");
        let x = Tensor::from_fn(&[4, 3, 5, 5], |_| rng.random::<f64>() * 7.0 - 2.0);
        let mut state = BatchNormState::new(3);
        let cfg = BatchNormConfig {
            eps: 1e-10,
            momentum: 0.1,
        };
        let y = batchnorm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), Mode::Train, cfg, &mut state)
            .unwrap();
        for (mean, var) in channel_moments(&y) {
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
        assert_ne!(state.running_mean, vec![0.0; 3]);
    }

    #[test]
    fn already_normalized_input_passes_through() {
        // per-channel mean 0, biased variance 1
        let x = Tensor::new(vec![2, 1, 1, 1], vec![-1.0, 1.0]).unwrap();
        let mut state = BatchNormState::new(1);
        let y = batchnorm(
            &x,
            &Tensor::ones(&[1]),
            &Tensor::zeros(&[1]),
            Mode::Train,
            BatchNormConfig::default(),
            &mut state,
        )
        .unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| i as f64);
        let beta = Tensor::new(vec![2], vec![0.25, -3.0]).unwrap();
        let mut state = BatchNormState::new(2);
        let y = batchnorm(&x, &Tensor::zeros(&[2]), &beta, Mode::Train, BatchNormConfig::default(), &mut state)
            .unwrap();
        for b in 0..3 {
            for i in 0..4 {
                assert_eq!(y.data()[(b * 2) * 4 + i], 0.25);
                assert_eq!(y.data()[(b * 2 + 1) * 4 + i], -3.0);
            }
        }
    }

    #[test]
    fn single_sample_train_is_degenerate() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let mut state = BatchNormState::new(2);
        let r = batchnorm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), Mode::Train, BatchNormConfig::default(), &mut state);
        assert!(matches!(r, Err(TensorError::DegenerateBatch(_))));
    }

    #[test]
    fn infer_mode_uses_running_statistics() {
        let x = Tensor::full(&[1, 1, 2, 2], 3.0);
        let mut state = BatchNormState {
            running_mean: vec![1.0],
            running_var: vec![4.0],
        };
        let cfg = BatchNormConfig {
            eps: 0.0,
            momentum: 0.1,
        };
        let y = batchnorm(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), Mode::Infer, cfg, &mut state)
            .unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert_eq!(state.running_mean, vec![1.0]);
    }
}
