//! Hand-crafted texture descriptors and the logistic normal/abnormal gate.

use hepadet_tensor::ops::loss::sigmoid;
use hepadet_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::boxes::RoiBox;
use crate::error::{CoreError, Result};
use crate::params::Store;
use crate::preprocess::Slab;

pub const HIST_BINS: usize = 16;
pub const FEATURE_DIM: usize = HIST_BINS + 2;
/// Floor on feature scales; features live on `[0, 1]` images.
pub const MIN_SCALE: f64 = 0.01;
pub const Z_CLAMP: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureFeatures {
    pub histogram: [f64; HIST_BINS],
    pub mean_gradient: f64,
    pub local_variance: f64,
}

impl TextureFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.histogram.to_vec();
        v.push(self.mean_gradient);
        v.push(self.local_variance);
        v
    }
}

/// Integer pixel window `[r0, r1) x [c0, c1)` covered by `roi`.
pub fn crop_window(roi: &RoiBox, size: (usize, usize)) -> Result<(usize, usize, usize, usize)> {
    let (h, w) = (size.0 as f64, size.1 as f64);
    let eps = 1e-9;
    if !roi.is_valid() || roi.x0 < -eps || roi.y0 < -eps || roi.x1 > w + eps || roi.y1 > h + eps {
        return Err(CoreError::Shape(format!(
            "roi ({:.2},{:.2},{:.2},{:.2}) outside a {}x{} slab",
            roi.x0, roi.y0, roi.x1, roi.y1, size.0, size.1
        )));
    }
    let c0 = roi.x0.max(0.0).floor() as usize;
    let r0 = roi.y0.max(0.0).floor() as usize;
    let c1 = (roi.x1.min(w).ceil() as usize).max(c0 + 1).min(size.1);
    let r1 = (roi.y1.min(h).ceil() as usize).max(r0 + 1).min(size.0);
    Ok((r0, r1, c0, c1))
}

/// Features of a row-major `h x w` crop with values in `[0, 1]`.
pub fn features_of(crop: &[f64], h: usize, w: usize) -> TextureFeatures {
    debug_assert_eq!(crop.len(), h * w);
    let n = crop.len() as f64;
    let mut histogram = [0.0; HIST_BINS];
    for &v in crop {
        let b = ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        histogram[b] += 1.0;
    }
    for b in &mut histogram {
        *b /= n;
    }
    let at = |r: usize, c: usize| crop[r * w + c];
    let mut grad = 0.0;
    let mut var = 0.0;
    for r in 0..h {
        for c in 0..w {
            let gx = if c + 1 < w { at(r, c + 1) - at(r, c) } else { 0.0 };
            let gy = if r + 1 < h { at(r + 1, c) - at(r, c) } else { 0.0 };
            grad += (gx * gx + gy * gy).sqrt();
            let (mut s, mut s2, mut k) = (0.0, 0.0, 0.0);
            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for cc in c.saturating_sub(1)..(c + 2).min(w) {
                    let v = at(rr, cc);
                    s += v;
                    s2 += v * v;
                    k += 1.0;
                }
            }
            let m = s / k;
            var += (s2 / k - m * m).max(0.0);
        }
    }
    TextureFeatures {
        histogram,
        mean_gradient: grad / n,
        local_variance: var / n,
    }
}

/// Features of the centre-channel crop under `roi`.
pub fn texture_features(slab: &Slab, roi: &RoiBox) -> Result<TextureFeatures> {
    let size = slab.size();
    let (r0, r1, c0, c1) = crop_window(roi, size)?;
    let plane = slab.center_channel();
    let mut crop = Vec::with_capacity((r1 - r0) * (c1 - c0));
    for r in r0..r1 {
        crop.extend_from_slice(&plane[r * size.1 + c0..r * size.1 + c1]);
    }
    Ok(features_of(&crop, r1 - r0, c1 - c0))
}

/// Logistic model over standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateLabel {
    Normal,
    Abnormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateVerdict {
    pub label: GateLabel,
    /// Probability that the region is abnormal.
    pub confidence: f64,
}

impl GateModel {
    pub fn zeros() -> Self {
        Self {
            weights: vec![0.0; FEATURE_DIM],
            bias: 0.0,
            mean: vec![0.0; FEATURE_DIM],
            scale: vec![1.0; FEATURE_DIM],
        }
    }

    /// Standardized features, clamped to `[-Z_CLAMP, Z_CLAMP]`.
    pub fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| ((v - m) / s).clamp(-Z_CLAMP, Z_CLAMP))
            .collect()
    }

    pub fn logit(&self, f: &[f64]) -> f64 {
        self.bias
            + self
                .standardize(f)
                .iter()
                .zip(&self.weights)
                .map(|(z, w)| w * z)
                .sum::<f64>()
    }

    pub fn confidence(&self, f: &TextureFeatures) -> f64 {
        sigmoid(self.logit(&f.to_vec()))
    }

    /// Full-batch gradient descent on the L2-regularized logistic loss.
    pub fn fit(samples: &[(TextureFeatures, bool)], epochs: usize, lr: f64, l2: f64) -> Result<Self> {
        if !samples.iter().any(|s| s.1) || !samples.iter().any(|s| !s.1) {
            return Err(CoreError::Dataset("gate training needs both normal and abnormal crops".into()));
        }
        let xs: Vec<Vec<f64>> = samples.iter().map(|(f, _)| f.to_vec()).collect();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; FEATURE_DIM];
        for x in &xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; FEATURE_DIM];
        for x in &xs {
            for ((s, v), m) in scale.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut scale {
            *s = s.sqrt().max(MIN_SCALE);
        }
        let mut model = GateModel {
            weights: vec![0.0; FEATURE_DIM],
            bias: 0.0,
            mean,
            scale,
        };
        let z: Vec<Vec<f64>> = xs.iter().map(|x| model.standardize(x)).collect();
        for _ in 0..epochs {
            let mut gw = vec![0.0; FEATURE_DIM];
            let mut gb = 0.0;
            for (zi, (_, y)) in z.iter().zip(samples) {
                let p = sigmoid(model.bias + zi.iter().zip(&model.weights).map(|(a, b)| a * b).sum::<f64>());
                let e = p - if *y { 1.0 } else { 0.0 };
                for (g, v) in gw.iter_mut().zip(zi) {
                    *g += e * v / n;
                }
                gb += e / n;
            }
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= lr * (g + l2 * *w);
            }
            model.bias -= lr * gb;
        }
        Ok(model)
    }

    pub fn write_to(&self, store: &mut Store) {
        let v = |d: &[f64]| Tensor::new(vec![d.len()], d.to_vec()).expect("vector");
        store
            .params
            .insert("gate.w".into(), Tensor::new(vec![FEATURE_DIM, 1], self.weights.clone()).expect("column"));
        store.params.insert("gate.b".into(), Tensor::new(vec![1], vec![self.bias]).expect("scalar"));
        store.params.insert("gate.mu".into(), v(&self.mean));
        store.params.insert("gate.sd".into(), v(&self.scale));
    }

    pub fn read_from(store: &Store) -> Result<Self> {
        let get = |k: &str, n: usize| -> Result<Vec<f64>> {
            let t = store.params.get(k).ok_or_else(|| CoreError::MissingParam(k.into()))?;
            if t.numel() != n {
                return Err(CoreError::Shape(format!("{k} has {} values, expected {n}", t.numel())));
            }
            Ok(t.data().to_vec())
        };
        Ok(GateModel {
            weights: get("gate.w", FEATURE_DIM)?,
            bias: get("gate.b", 1)?[0],
            mean: get("gate.mu", FEATURE_DIM)?,
            scale: get("gate.sd", FEATURE_DIM)?,
        })
    }
}

/// Abnormal when the gate confidence reaches `threshold`.
pub fn texture_gate(slab: &Slab, roi: &RoiBox, gate: &GateModel, threshold: f64) -> Result<GateVerdict> {
    let confidence = gate.confidence(&texture_features(slab, roi)?);
    Ok(GateVerdict {
        label: if confidence >= threshold { GateLabel::Abnormal } else { GateLabel::Normal },
        confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_crop_features() {
        let f = features_of(&[0.4; 20], 4, 5);
        assert_eq!(f.mean_gradient, 0.0);
        assert!(f.local_variance.abs() < 1e-15);
        assert_eq!(f.histogram.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(f.histogram[6], 1.0);
    }

    #[test]
    fn histogram_normalized() {
        let crop: Vec<f64> = (0..49).map(|i| i as f64 / 48.0).collect();
        let f = features_of(&crop, 7, 7);
        assert!((f.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(f.mean_gradient > 0.0);
    }

    #[test]
    fn zero_gate_is_half() {
        let f = features_of(&[0.1, 0.9, 0.3, 0.2], 2, 2);
        assert_eq!(GateModel::zeros().confidence(&f), 0.5);
    }

    #[test]
    fn crop_bounds() {
        assert_eq!(crop_window(&RoiBox::new(1.5, 2.0, 4.2, 6.0), (8, 8)).unwrap(), (2, 6, 1, 5));
        assert!(crop_window(&RoiBox::new(-3.0, 0.0, 4.0, 4.0), (8, 8)).is_err());
    }
}
