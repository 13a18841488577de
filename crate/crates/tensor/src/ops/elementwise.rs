//! Broadcasting binary ops, batched matmul, last-axis softmax and reductions.

use super::linalg::{gemm, MatRef};
use crate::error::{Result, TensorError};
use crate::Tensor;

/// Output shape for same-rank broadcasting where each extent pair is equal or 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "broadcast",
            detail: format!("rank {a:?} vs {b:?}"),
        });
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(TensorError::ShapeMismatch {
                op: "broadcast",
                detail: format!("{a:?} vs {b:?}"),
            }),
        })
        .collect()
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every output index with the matching flat offsets into `a` and `b`.
pub(crate) fn for_each_broadcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = strides_for(a, out);
    let sb = strides_for(b, out);
    let total: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let mut data = vec![0.0; out.iter().product()];
    let (av, bv) = (a.data(), b.data());
    for_each_broadcast(a.shape(), b.shape(), &out, |o, ia, ib| data[o] = f(av[ia], bv[ib]));
    Tensor::new(out, data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |x, y| x * y)
}

/// Sums a full-size gradient down to a broadcast operand's shape.
pub(crate) fn reduce_to(shape: &[usize], out: &[usize], grad: &[f64]) -> Vec<f64> {
    if shape == out {
        return grad.to_vec();
    }
    let mut r = vec![0.0; shape.iter().product()];
    for_each_broadcast(shape, shape, out, |o, i, _| r[i] += grad[o]);
    r
}

/// Batch/matrix extents of a rank-2 or rank-3 operand.
fn mat_dims(s: &[usize]) -> Result<(Option<usize>, usize, usize)> {
    match s.len() {
        2 => Ok((None, s[0], s[1])),
        3 => Ok((Some(s[0]), s[1], s[2])),
        _ => Err(TensorError::ShapeMismatch {
            op: "matmul",
            detail: format!("need rank 2 or 3, got {s:?}"),
        }),
    }
}

pub(crate) struct MatmulDims {
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let (ba, m, k) = mat_dims(a)?;
    let (bb, k2, n) = mat_dims(b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            detail: format!("{a:?} @ {b:?}"),
        });
    }
    let batch = match (ba, bb) {
        (Some(x), Some(y)) if x != y => {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("batch {x} vs {y}"),
            })
        }
        (Some(x), _) | (_, Some(x)) => x,
        (None, None) => 0,
    };
    Ok(MatmulDims {
        batch,
        a_batched: ba.is_some(),
        b_batched: bb.is_some(),
        m,
        k,
        n,
    })
}

/// `[B?, m, k] @ [B?, k, n]`; a rank-2 operand is shared across the batch.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(a.shape(), b.shape())?;
    if d.batch == 0 {
        let mut out = vec![0.0; d.m * d.n];
        gemm(
            1.0,
            MatRef::row_major(a.data(), d.m, d.k),
            MatRef::row_major(b.data(), d.k, d.n),
            0.0,
            &mut out,
        );
        return Tensor::new(vec![d.m, d.n], out);
    }
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for i in 0..d.batch {
        let ao = if d.a_batched { i * d.m * d.k } else { 0 };
        let bo = if d.b_batched { i * d.k * d.n } else { 0 };
        gemm(
            1.0,
            MatRef::row_major(&a.data()[ao..ao + d.m * d.k], d.m, d.k),
            MatRef::row_major(&b.data()[bo..bo + d.k * d.n], d.k, d.n),
            0.0,
            &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
        );
    }
    Tensor::new(vec![d.batch, d.m, d.n], out)
}

/// Returns `(dA, dB)` for `C = A @ B`.
pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    grad: &[f64],
    need: (bool, bool),
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let batches = d.batch.max(1);
    let mut da = need.0.then(|| vec![0.0; a.numel()]);
    let mut db = need.1.then(|| vec![0.0; b.numel()]);
    for i in 0..batches {
        let ao = if d.a_batched { i * d.m * d.k } else { 0 };
        let bo = if d.b_batched { i * d.k * d.n } else { 0 };
        let g = MatRef::row_major(&grad[i * d.m * d.n..(i + 1) * d.m * d.n], d.m, d.n);
        let am = MatRef::row_major(&a.data()[ao..ao + d.m * d.k], d.m, d.k);
        let bm = MatRef::row_major(&b.data()[bo..bo + d.k * d.n], d.k, d.n);
        if let Some(da) = da.as_mut() {
            gemm(1.0, g, bm.t(), 1.0, &mut da[ao..ao + d.m * d.k]);
        }
        if let Some(db) = db.as_mut() {
            gemm(1.0, am.t(), g, 1.0, &mut db[bo..bo + d.k * d.n]);
        }
    }
    Ok((da, db))
}

/// Swaps the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(TensorError::InvalidArgument("transpose needs rank >= 2".into()));
    }
    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = x.numel() / (m * n).max(1);
    let mut out = vec![0.0; x.numel()];
    for b in 0..batch {
        let src = &x.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape.swap(r - 1, r - 2);
    Tensor::new(shape, out)
}

/// Max-shifted softmax along the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn softmax_last_backward(y: &Tensor, grad: &[f64]) -> Vec<f64> {
    let n = *y.shape().last().expect("rank >= 1");
    let mut dx = vec![0.0; grad.len()];
    for ((yr, gr), dr) in y.data().chunks(n).zip(grad.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..n {
            dr[i] = yr[i] * (gr[i] - dot);
        }
    }
    dx
}

/// Sum over one axis, keeping it with extent 1.
pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let s = x.shape();
    if axis >= s.len() {
        return Err(TensorError::InvalidArgument(format!("axis {axis} for shape {s:?}")));
    }
    let outer: usize = s[..axis].iter().product();
    let len = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    let mut shape = s.to_vec();
    shape[axis] = 1;
    Tensor::new(shape, out)
}
