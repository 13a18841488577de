//! 2D cross-correlation via im2col + gemm.

use super::linalg::{gemm, MatRef};
use crate::error::{Result, TensorError};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn infer(
        input: &[usize],
        weight: &[usize],
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("expected rank-4 input and weight, got {input:?} and {weight:?}"),
            });
        }
        if input[1] != weight[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {} vs weight channels {}", input[1], weight[1]),
            });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (kh, kw) = (weight[2], weight[3]);
        let (ph, pw) = (input[2] + 2 * pad.0, input[3] + 2 * pad.1);
        if kh > ph || kw > pw {
            return Err(TensorError::Extent {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
            });
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: weight[0],
            in_h: input[2],
            in_w: input[3],
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride.0 + 1,
            out_w: (pw - kw) / stride.1 + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h, g.out_w);
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.pad.0 as isize, g.pad.1 as isize);
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * sh) as isize - ph + i as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * sw) as isize - pw + j as isize;
                        *out = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h, g.out_w);
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.pad.0 as isize, g.pad.1 as isize);
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * sh) as isize - ph + i as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * sw) as isize - pw + j as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of the zero-padded input with `weight` (no kernel flip).
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor> {
    let g = ConvGeometry::infer(input.shape(), weight.shape(), stride, pad)?;
    let mut out = vec![0.0; g.batch * g.out_channels * g.out_pixels()];
    let in_size = g.in_channels * g.in_h * g.in_w;
    let out_size = g.out_channels * g.out_pixels();
    let w = MatRef::row_major(weight.data(), g.out_channels, g.col_rows());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * g.out_pixels()]
    };
    for n in 0..g.batch {
        let x = &input.data()[n * in_size..(n + 1) * in_size];
        let y = &mut out[n * out_size..(n + 1) * out_size];
        if g.is_pointwise() {
            gemm(1.0, w, MatRef::row_major(x, g.in_channels, g.out_pixels()), 0.0, y);
        } else {
            im2col(&g, x, &mut cols);
            gemm(1.0, w, MatRef::row_major(&cols, g.col_rows(), g.out_pixels()), 0.0, y);
        }
    }
    Tensor::new(g.output_shape().to_vec(), out)
}

/// Gradients of `conv2d` w.r.t. input (optional) and weight.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let g = ConvGeometry::infer(input.shape(), weight.shape(), stride, pad)?;
    let in_size = g.in_channels * g.in_h * g.in_w;
    let out_size = g.out_channels * g.out_pixels();
    let mut dw = vec![0.0; weight.numel()];
    let mut dx = need_input_grad.then(|| vec![0.0; input.numel()]);
    let w = MatRef::row_major(weight.data(), g.out_channels, g.col_rows());
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * g.out_pixels()]
    };
    let mut dcols = if pointwise || !need_input_grad {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * g.out_pixels()]
    };
    for n in 0..g.batch {
        let x = &input.data()[n * in_size..(n + 1) * in_size];
        let dy = MatRef::row_major(
            &grad_out.data()[n * out_size..(n + 1) * out_size],
            g.out_channels,
            g.out_pixels(),
        );
        let cols_ref = if pointwise {
            MatRef::row_major(x, g.in_channels, g.out_pixels())
        } else {
            im2col(&g, x, &mut cols);
            MatRef::row_major(&cols, g.col_rows(), g.out_pixels())
        };
        gemm(1.0, dy, cols_ref.t(), 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_size..(n + 1) * in_size];
            if pointwise {
                gemm(1.0, w.t(), dy, 1.0, dxn);
            } else {
                gemm(1.0, w.t(), dy, 0.0, &mut dcols);
                col2im(&g, &dcols, dxn);
            }
        }
    }
    let dx = dx
        .map(|d| Tensor::new(input.shape().to_vec(), d))
        .transpose()?;
    Ok((dx, Tensor::new(weight.shape().to_vec(), dw)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(input: &Tensor, weight: &Tensor, stride: (usize, usize), pad: (usize, usize)) -> Tensor {
        let g = ConvGeometry::infer(input.shape(), weight.shape(), stride, pad).unwrap();
        let mut out = Tensor::zeros(&g.output_shape());
        for n in 0..g.batch {
            for k in 0..g.out_channels {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut s = 0.0;
                        for c in 0..g.in_channels {
                            for i in 0..g.kh {
                                for j in 0..g.kw {
                                    let iy = (oy * stride.0 + i) as isize - pad.0 as isize;
                                    let ix = (ox * stride.1 + j) as isize - pad.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                        s += input.get(&[n, c, iy as usize, ix as usize])
                                            * weight.get(&[k, c, i, j]);
                                    }
                                }
                            }
                        }
                        out.set(&[n, k, oy, ox], s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &w, (1, 1), (0, 0)).unwrap(), x);
    }

    #[test]
    fn two_by_two_box_sum() {
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &w, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
        assert_eq!(y, naive(&x, &w, (1, 1), (0, 0)));
    }

    #[test]
    fn strided_padded_matches_naive() {
        let x = Tensor::from_fn(&[2, 3, 7, 6], |i| ((i * 37 % 11) as f64) - 5.0);
        let w = Tensor::from_fn(&[4, 3, 3, 2], |i| ((i * 13 % 7) as f64) * 0.25 - 0.7);
        for (s, p) in [((1, 1), (0, 0)), ((2, 2), (1, 1)), ((2, 1), (1, 0))] {
            let fast = conv2d(&x, &w, s, p).unwrap();
            assert!(fast.max_abs_diff(&naive(&x, &w, s, p)) < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, (1, 1), (0, 0)),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn oversized_kernel_is_an_extent_error() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&x, &w, (1, 1), (1, 1)), Err(TensorError::Extent { .. })));
    }

    #[test]
    fn conv1_extent_on_448_input() {
        let g = ConvGeometry::infer(&[1, 3, 448, 448], &[64, 3, 7, 7], (2, 2), (3, 3)).unwrap();
        assert_eq!((g.out_h, g.out_w), (224, 224));
    }
}
