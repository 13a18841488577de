use serde::{Deserialize, Serialize};

use crate::boxes::{iou, RoiBox};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// Anchor side lengths in pixels (square-equivalent).
    pub scales: Vec<f64>,
    /// Height / width ratios.
    pub ratios: Vec<f64>,
    /// Pixel stride of each pyramid level.
    pub strides: Vec<usize>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            scales: vec![8.0, 16.0, 32.0, 64.0],
            ratios: vec![0.5, 1.0, 2.0],
            strides: vec![4, 8, 16, 32],
        }
    }
}

impl AnchorSpec {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(CoreError::Config("anchor scales and ratios must be non-empty".into()));
        }
        if self.scales.iter().chain(&self.ratios).any(|v| !(*v > 0.0)) {
            return Err(CoreError::Config("anchor scales and ratios must be > 0".into()));
        }
        if self.strides.contains(&0) {
            return Err(CoreError::Config("anchor strides must be >= 1".into()));
        }
        Ok(())
    }

    /// Checks that every level's stride times its extent covers the image.
    pub fn check_levels(&self, level_shapes: &[(usize, usize)], image: (usize, usize)) -> Result<()> {
        if level_shapes.len() != self.strides.len() {
            return Err(CoreError::Config(format!(
                "{} anchor strides for {} pyramid levels",
                self.strides.len(),
                level_shapes.len()
            )));
        }
        for (&(h, w), &s) in level_shapes.iter().zip(&self.strides) {
            if h * s != image.0 || w * s != image.1 {
                return Err(CoreError::Config(format!(
                    "level {h}x{w} with stride {s} does not cover image {image:?}"
                )));
            }
        }
        Ok(())
    }
}

/// One anchor per (level, cell, scale, ratio), in that nesting order, with
/// cells in row-major order.
pub fn gen_anchors(level_shapes: &[(usize, usize)], spec: &AnchorSpec) -> Vec<RoiBox> {
    let count: usize = level_shapes.iter().map(|(h, w)| h * w).sum::<usize>() * spec.per_cell();
    let mut out = Vec::with_capacity(count);
    for (&(h, w), &stride) in level_shapes.iter().zip(&spec.strides) {
        let s = stride as f64;
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                for &scale in &spec.scales {
                    for &ratio in &spec.ratios {
                        let bw = scale / ratio.sqrt();
                        let bh = scale * ratio.sqrt();
                        out.push(RoiBox::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0));
                    }
                }
            }
        }
    }
    out
}

/// Objectness target per anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Positive at IoU >= `pos`, or the best anchor of some gt; negative below `neg`.
pub fn label_anchors(anchors: &[RoiBox], gts: &[RoiBox], pos: f64, neg: f64) -> Vec<AnchorLabel> {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    let mut best = vec![(0.0f64, usize::MAX); gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        let mut top = 0.0f64;
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            top = top.max(v);
            if v > best[j].0 {
                best[j] = (v, i);
            }
        }
        labels[i] = if top >= pos {
            AnchorLabel::Positive
        } else if top >= neg {
            AnchorLabel::Ignore
        } else {
            AnchorLabel::Negative
        };
    }
    for &(v, i) in &best {
        if v > 0.0 {
            labels[i] = AnchorLabel::Positive;
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_anchor() {
        let spec = AnchorSpec {
            scales: vec![32.0],
            ratios: vec![1.0],
            strides: vec![16],
        };
        let a = gen_anchors(&[(1, 1)], &spec);
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].x0, a[0].y0, a[0].x1, a[0].y1), (-8.0, -8.0, 24.0, 24.0));
        assert_eq!(a[0].center(), (8.0, 8.0));
    }

    #[test]
    fn counting_and_squares() {
        let spec = AnchorSpec {
            scales: vec![8.0, 16.0],
            ratios: vec![0.5, 1.0, 2.0],
            strides: vec![4],
        };
        let a = gen_anchors(&[(4, 4)], &spec);
        assert_eq!(a.len(), 96);
        for (i, b) in a.iter().enumerate() {
            if i % 3 == 1 {
                assert_eq!(b.width(), b.height());
            }
        }
    }

    #[test]
    fn best_anchor_is_positive() {
        let anchors = vec![RoiBox::new(0.0, 0.0, 10.0, 10.0), RoiBox::new(20.0, 20.0, 30.0, 30.0)];
        let gts = vec![RoiBox::new(5.0, 5.0, 16.0, 16.0)];
        let l = label_anchors(&anchors, &gts, 0.5, 0.3);
        assert_eq!(l, vec![AnchorLabel::Positive, AnchorLabel::Negative]);
    }
}
