//! Max-pool ROI pooling onto a fixed grid.

use crate::error::{Result, TensorError};
use crate::Tensor;

/// ROI in feature-map cells: half-open `[y0, y1) x [x0, x1)` on sample `batch`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiCells {
    pub batch: usize,
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

fn bin(start: usize, len: usize, i: usize, pool: usize) -> (usize, usize) {
    let lo = start + (i * len) / pool;
    let hi = start + ((i + 1) * len).div_ceil(pool);
    (lo, hi.max(lo + 1))
}

/// Pools each ROI of `input[N, C, H, W]` to `[R, C, pool, pool]`; returns argmax indices.
pub fn roi_max_pool(input: &Tensor, rois: &[RoiCells], pool: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 4 || pool == 0 {
        return Err(TensorError::InvalidArgument(format!(
            "roi pool needs rank-4 input and pool >= 1, got {s:?}"
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let x = input.data();
    let mut out = Vec::with_capacity(rois.len() * c * pool * pool);
    let mut arg = Vec::with_capacity(out.capacity());
    for r in rois {
        if r.batch >= n || r.y1 > h || r.x1 > w || r.y0 >= r.y1 || r.x0 >= r.x1 {
            return Err(TensorError::Extent {
                op: "roi_max_pool",
                detail: format!("roi {r:?} on feature map {s:?}"),
            });
        }
        for ch in 0..c {
            let plane = (r.batch * c + ch) * h * w;
            for by in 0..pool {
                let (ylo, yhi) = bin(r.y0, r.y1 - r.y0, by, pool);
                for bx in 0..pool {
                    let (xlo, xhi) = bin(r.x0, r.x1 - r.x0, bx, pool);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for yy in ylo..yhi.min(h) {
                        for xx in xlo..xhi.min(w) {
                            let idx = plane + yy * w + xx;
                            if best_idx == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::new(vec![rois.len(), c, pool, pool], out)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_quadrants() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let roi = RoiCells {
            batch: 0,
            y0: 0,
            x0: 0,
            y1: 4,
            x1: 4,
        };
        let (y, _) = roi_max_pool(&x, &[roi], 2).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn single_cell_roi_fills_every_bin() {
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64);
        let roi = RoiCells {
            batch: 0,
            y0: 1,
            x0: 2,
            y1: 2,
            x1: 3,
        };
        let (y, _) = roi_max_pool(&x, &[roi], 3).unwrap();
        assert!(y.data()[..9].iter().all(|&v| v == 5.0));
        assert!(y.data()[9..].iter().all(|&v| v == 14.0));
    }

    #[test]
    fn empty_roi_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let roi = RoiCells {
            batch: 0,
            y0: 2,
            x0: 1,
            y1: 2,
            x1: 3,
        };
        assert!(roi_max_pool(&x, &[roi], 2).is_err());
    }
}
