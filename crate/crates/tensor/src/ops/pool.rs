//! Max pooling over (depth, height, width) with first-occurrence argmax.
//!
//! Tensors are `[N*D, C, H, W]`: the depth axis `D` is folded into the
//! leading axis, sample-major. Plain 2D pooling is the `D = 1` case.

use crate::error::{Result, TensorError};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub depth: usize,
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl PoolSpec {
    pub fn planar(window: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self {
            depth: 1,
            window: [1, window.0, window.1],
            stride: [1, stride.0, stride.1],
            pad: [0, pad.0, pad.1],
        }
    }

    /// Output extents `(batch, depth, channels, h, w)` for a folded input shape.
    pub fn output_dims(&self, shape: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool",
                detail: format!("expected rank-4 input, got {shape:?}"),
            });
        }
        if self.depth == 0 || shape[0] % self.depth != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool",
                detail: format!("leading extent {} not divisible by depth {}", shape[0], self.depth),
            });
        }
        if self.stride.contains(&0) || self.window.contains(&0) {
            return Err(TensorError::InvalidArgument("pool window and stride must be >= 1".into()));
        }
        let dims = [self.depth, shape[2], shape[3]];
        let mut out = [0usize; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.pad[a];
            if self.window[a] > padded {
                return Err(TensorError::Extent {
                    op: "maxpool",
                    detail: format!("window {:?} does not fit input {:?}", self.window, dims),
                });
            }
            out[a] = (padded - self.window[a]) / self.stride[a] + 1;
        }
        Ok((shape[0] / self.depth, out[0], shape[1], out[1], out[2]))
    }
}

/// Returns pooled values and, per output cell, the flat input index of its max.
pub fn maxpool(input: &Tensor, spec: &PoolSpec) -> Result<(Tensor, Vec<usize>)> {
    let (batch, od, ch, oh, ow) = spec.output_dims(input.shape())?;
    let (d, h, w) = (spec.depth, input.shape()[2], input.shape()[3]);
    let x = input.data();
    let mut out = Vec::with_capacity(batch * od * ch * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for n in 0..batch {
        for z in 0..od {
            for c in 0..ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for kz in 0..spec.window[0] {
                            let iz = (z * spec.stride[0] + kz) as isize - spec.pad[0] as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for ky in 0..spec.window[1] {
                                let iy = (oy * spec.stride[1] + ky) as isize - spec.pad[1] as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..spec.window[2] {
                                    let ix =
                                        (ox * spec.stride[2] + kx) as isize - spec.pad[2] as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = (((n * d + iz as usize) * ch + c) * h + iy as usize)
                                        * w
                                        + ix as usize;
                                    if best_idx == usize::MAX || x[idx] > best {
                                        best = x[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        if best_idx == usize::MAX {
                            return Err(TensorError::Extent {
                                op: "maxpool",
                                detail: "window covers only padding".into(),
                            });
                        }
                        out.push(best);
                        arg.push(best_idx);
                    }
                }
            }
        }
    }
    let t = Tensor::new(vec![batch * od, ch, oh, ow], out)?;
    Ok((t, arg))
}

/// 2D max pooling of `[N, C, H, W]`.
pub fn maxpool2d(
    input: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor> {
    maxpool(input, &PoolSpec::planar(window, stride, pad)).map(|(t, _)| t)
}

pub fn maxpool_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_window() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool2d(&x, (2, 2), (2, 2), (0, 0)).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::full(&[2, 3, 5, 5], 7.5);
        let y = maxpool2d(&x, (3, 3), (2, 2), (1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn pool1_extent_224_to_112() {
        let spec = PoolSpec::planar((3, 3), (2, 2), (1, 1));
        let (_, _, _, oh, ow) = spec.output_dims(&[1, 1, 224, 224]).unwrap();
        assert_eq!((oh, ow), (112, 112));
    }

    #[test]
    fn ties_route_to_first_occurrence() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0);
        let (_, arg) = maxpool(&x, &PoolSpec::planar((2, 2), (2, 2), (0, 0))).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn depth_pooling_halves_depth() {
        // 2 samples, depth 8, 1 channel, 1x1
        let x = Tensor::from_fn(&[16, 1, 1, 1], |i| i as f64);
        let spec = PoolSpec {
            depth: 8,
            window: [3, 1, 1],
            stride: [2, 1, 1],
            pad: [1, 0, 0],
        };
        let (y, _) = maxpool(&x, &spec).unwrap();
        assert_eq!(y.shape(), &[8, 1, 1, 1]);
        assert_eq!(y.data(), &[1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0]);
    }

    #[test]
    fn oversized_window_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            maxpool2d(&x, (3, 3), (1, 1), (0, 0)),
            Err(TensorError::Extent { .. })
        ));
    }
}
