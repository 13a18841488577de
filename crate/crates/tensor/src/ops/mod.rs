//! Pure tensor kernels. The [`crate::Graph`] records calls to these and adds
//! the matching backward passes.

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod roi;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::rng::SeedStream;
use crate::Tensor;

pub use conv::conv2d;
pub use loss::softmax_ce;
pub use norm::{batchnorm, BatchNormConfig, BatchNormState};
pub use pool::{maxpool, maxpool2d, PoolSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Infer,
}

/// Multiplicative dropout mask: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = SeedStream::new(seed).rng("dropout");
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn dropout(input: &Tensor, rate: f64, mode: Mode, seed: u64) -> Result<Tensor> {
    check_rate(rate)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.numel(), rate, seed);
    let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Tensor::new(input.shape().to_vec(), data)
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Affine map `input[N,F] @ weight[F,G] + bias[G]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, f, g) = dense_dims(input.shape(), weight.shape(), bias.shape())?;
    let mut out = Vec::with_capacity(n * g);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    linalg::gemm(
        1.0,
        linalg::MatRef::row_major(input.data(), n, f),
        linalg::MatRef::row_major(weight.data(), f, g),
        1.0,
        &mut out,
    );
    Tensor::new(vec![n, g], out)
}

pub(crate) fn dense_dims(x: &[usize], w: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if x.len() != 2 || w.len() != 2 || x[1] != w[0] || b.iter().product::<usize>() != w[1] {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            detail: format!("input {x:?}, weight {w:?}, bias {b:?}"),
        });
    }
    Ok((x[0], x[1], w[1]))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 || factor == 0 {
        return Err(TensorError::InvalidArgument(format!(
            "upsample needs rank-4 input and factor >= 1, got {s:?} x{factor}"
        )));
    }
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = vec![0.0; nc * oh * ow];
    for p in 0..nc {
        for oy in 0..oh {
            let src = &x[(p * h + oy / factor) * w..(p * h + oy / factor + 1) * w];
            let dst = &mut out[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / factor];
            }
        }
    }
    Tensor::new(vec![s[0], s[1], oh, ow], out)
}

pub(crate) fn upsample_backward(shape: &[usize], factor: usize, grad_out: &[f64]) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![0.0; nc * h * w];
    for p in 0..nc {
        for oy in 0..oh {
            let row = &grad_out[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
            let dst = &mut dx[(p * h + oy / factor) * w..(p * h + oy / factor + 1) * w];
            for (ox, g) in row.iter().enumerate() {
                dst[ox / factor] += g;
            }
        }
    }
    dx
}

/// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
    let s0 = first.shape();
    if s0.len() < 2 {
        return Err(TensorError::InvalidArgument("concat needs rank >= 2".into()));
    }
    let n = s0[0];
    let inner: usize = s0[2..].iter().product();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if s.len() != s0.len() || s[0] != n || s[2..] != s0[2..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: format!("{s0:?} vs {s:?}"),
            });
        }
        channels += s[1];
    }
    let mut out = Vec::with_capacity(n * channels * inner);
    for b in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[b * c * inner..(b + 1) * c * inner]);
        }
    }
    let mut shape = s0.to_vec();
    shape[1] = channels;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_hand_arithmetic() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn dense_identity_and_empty_batch() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 - 5.0);
        let eye = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[4])).unwrap(), x);
        let empty = Tensor::new(vec![0, 4], vec![]).unwrap();
        let y = dense(&empty, &eye, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(y.shape(), &[0, 4]);
    }

    #[test]
    fn dense_rejects_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(dense(&x, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::from_fn(&[10, 10], |i| i as f64);
        assert_eq!(dropout(&x, 0.0, Mode::Train, 1).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, Mode::Infer, 1).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, Mode::Infer, 1).unwrap(), x);
        assert!(dropout(&x, 1.0, Mode::Train, 1).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let x = Tensor::ones(&[1_000_000]);
        let y = dropout(&x, 0.5, Mode::Train, 2024).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((survivors - 0.5).abs() < 0.002, "survivors {survivors}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert_eq!(y, dropout(&x, 0.5, Mode::Train, 2024).unwrap());
    }

    #[test]
    fn upsample_and_concat_shapes() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let up = upsample_nearest(&x, 2).unwrap();
        assert_eq!(up.shape(), &[1, 2, 4, 4]);
        assert_eq!(up.get(&[0, 1, 3, 2]), x.get(&[0, 1, 1, 1]));
        let cat = concat_channels(&[&up, &up]).unwrap();
        assert_eq!(cat.shape(), &[1, 4, 4, 4]);
        assert_eq!(cat.get(&[0, 3, 0, 0]), up.get(&[0, 1, 0, 0]));
    }
}
