//! ROI classification head and final detection selection.

use hepadet_tensor::ops::roi::RoiCells;
use hepadet_tensor::{Mode, NodeId, SeedStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::boxes::{iou, RoiBox};
use crate::classes::{LesionClass, BACKGROUND, NUM_CLASSES};
use crate::error::{CoreError, Result};
use crate::params::{Ctx, Store};
use crate::volume::Phase;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub pool_size: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Loss weight of background ROIs relative to lesion ROIs.
    pub background_weight: f64,
    /// Pyramid level the ROIs are pooled from.
    pub level: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            pool_size: 3,
            hidden: 64,
            dropout: 0.25,
            background_weight: 1.0,
            level: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 || self.hidden == 0 {
            return Err(CoreError::Config("head pool_size and hidden must be >= 1".into()));
        }
        if !(self.background_weight > 0.0) {
            return Err(CoreError::Config("head background_weight must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config("head dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub roi: RoiBox,
    /// Probabilities of cyst, hemangioma, hcc, background.
    pub class_probs: [f64; NUM_CLASSES],
    pub source_phase: Phase,
}

impl Detection {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if self.class_probs[k] > self.class_probs[best] {
                best = k;
            }
        }
        best
    }

    /// Predicted lesion class, `None` for background.
    pub fn class(&self) -> Option<LesionClass> {
        LesionClass::from_index(self.argmax())
    }

    /// Probability of the predicted class.
    pub fn score(&self) -> f64 {
        self.class_probs[self.argmax()]
    }
}

/// Maps a pixel box to feature cells at `stride`, covering every touched cell.
pub fn roi_cells(b: &RoiBox, batch: usize, stride: usize, size: (usize, usize)) -> Result<RoiCells> {
    let s = stride as f64;
    let (h, w) = size;
    let x0 = (b.x0 / s).floor().max(0.0) as usize;
    let y0 = (b.y0 / s).floor().max(0.0) as usize;
    let x1 = ((b.x1 / s).ceil().max(0.0) as usize).min(w);
    let y1 = ((b.y1 / s).ceil().max(0.0) as usize).min(h);
    if !b.is_valid() || x0 >= x1 || y0 >= y1 {
        return Err(CoreError::Shape(format!(
            "roi ({:.1},{:.1},{:.1},{:.1}) is empty on a {h}x{w} map at stride {stride}",
            b.x0, b.y0, b.x1, b.y1
        )));
    }
    Ok(RoiCells { batch, y0, x0, y1, x1 })
}

/// Class logits `[R, 4]` for ROIs pooled from `level`.
pub fn head_logits(ctx: &mut Ctx<'_>, level: NodeId, rois: &[RoiCells], cfg: &HeadConfig) -> Result<NodeId> {
    let pooled = ctx.g.roi_max_pool(level, rois, cfg.pool_size)?;
    let s = ctx.g.shape(pooled).to_vec();
    let flat = ctx.g.reshape(pooled, &[s[0], s[1] * s[2] * s[3]])?;
    let h = ctx.dense("head.fc1", flat, cfg.hidden, 0.0)?;
    let h = ctx.g.relu(h);
    let h = ctx.dropout(h, cfg.dropout)?;
    ctx.dense("head.cls", h, NUM_CLASSES, 0.0)
}

fn softmax_rows(logits: &Tensor) -> Vec<[f64; NUM_CLASSES]> {
    logits
        .data()
        .chunks(NUM_CLASSES)
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let mut p = [0.0; NUM_CLASSES];
            for (o, v) in p.iter_mut().zip(&e) {
                *o = v / s;
            }
            p
        })
        .collect()
}

/// Infer-mode classification of `(batch index, box)` pairs against a fused pyramid.
pub fn classify_rois(
    store: &mut Store,
    fused: &FeaturePyramid,
    rois: &[(usize, RoiBox)],
    stride: usize,
    cfg: &HeadConfig,
    phase: Phase,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    if rois.is_empty() {
        return Ok(Vec::new());
    }
    let (_, level) = fused
        .levels
        .get(cfg.level)
        .ok_or_else(|| CoreError::Config(format!("head level {} not in pyramid", cfg.level)))?;
    let size = (level.shape()[2], level.shape()[3]);
    let cells = rois
        .iter()
        .map(|(n, b)| roi_cells(b, *n, stride, size))
        .collect::<Result<Vec<_>>>()?;
    let mut ctx = Ctx::new(store, Mode::Infer, SeedStream::new(0));
    let x = ctx.g.input(level.clone());
    let logits = head_logits(&mut ctx, x, &cells, cfg)?;
    let boxes: Vec<RoiBox> = rois.iter().map(|(_, b)| *b).collect();
    Ok(detections_from_logits(ctx.g.value(logits), &boxes, phase))
}

/// Softmax of `[R, 4]` head logits paired with their boxes.
pub fn detections_from_logits(logits: &Tensor, boxes: &[RoiBox], phase: Phase) -> Vec<Detection> {
    softmax_rows(logits)
        .into_iter()
        .zip(boxes)
        .map(|(class_probs, b)| Detection {
            roi: *b,
            class_probs,
            source_phase: phase,
        })
        .collect()
}

fn by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score().total_cmp(&a.score()));
}

/// Drops background, runs per-class NMS, and with `per_lesion` keeps only the
/// most probable detection of every overlapping group across classes.
pub fn select_top(detections: &[Detection], nms_iou: f64, per_lesion: bool) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for class in LesionClass::ALL {
        let mut group: Vec<Detection> = detections
            .iter()
            .filter(|d| d.argmax() != BACKGROUND && d.argmax() == class.index())
            .cloned()
            .collect();
        by_score(&mut group);
        let mut survivors: Vec<Detection> = Vec::new();
        for d in group {
            if survivors.iter().all(|s| iou(&s.roi, &d.roi) <= nms_iou) {
                survivors.push(d);
            }
        }
        kept.extend(survivors);
    }
    by_score(&mut kept);
    if !per_lesion {
        return kept;
    }
    let mut out: Vec<Detection> = Vec::new();
    for d in kept {
        if out.iter().all(|s| iou(&s.roi, &d.roi) <= nms_iou) {
            out.push(d);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: RoiBox, probs: [f64; 4]) -> Detection {
        Detection {
            roi: b,
            class_probs: probs,
            source_phase: Phase::Arterial,
        }
    }

    #[test]
    fn empty_in_empty_out() {
        assert!(select_top(&[], 0.5, true).is_empty());
    }

    #[test]
    fn overlapping_same_class_keeps_best() {
        let a = det(RoiBox::new(0.0, 0.0, 10.0, 10.0), [0.8, 0.1, 0.05, 0.05]);
        let b = det(RoiBox::new(0.0, 0.0, 10.0, 9.0), [0.7, 0.1, 0.1, 0.1]);
        assert!(iou(&a.roi, &b.roi) >= 0.9);
        let out = select_top(&[b, a.clone()], 0.5, false);
        assert_eq!(out, vec![a]);
    }

    #[test]
    fn background_is_dropped() {
        let a = det(RoiBox::new(0.0, 0.0, 10.0, 10.0), [0.1, 0.1, 0.1, 0.7]);
        assert!(select_top(&[a], 0.5, false).is_empty());
    }

    #[test]
    fn per_lesion_keeps_one_per_cluster() {
        let a = det(RoiBox::new(0.0, 0.0, 10.0, 10.0), [0.6, 0.2, 0.1, 0.1]);
        let b = det(RoiBox::new(1.0, 0.0, 11.0, 10.0), [0.1, 0.7, 0.1, 0.1]);
        assert_eq!(select_top(&[a.clone(), b.clone()], 0.5, false).len(), 2);
        assert_eq!(select_top(&[a, b.clone()], 0.5, true), vec![b]);
    }

    #[test]
    fn cell_mapping() {
        let c = roi_cells(&RoiBox::new(5.0, 3.0, 13.0, 8.0), 1, 4, (16, 16)).unwrap();
        assert_eq!((c.batch, c.y0, c.x0, c.y1, c.x1), (1, 0, 1, 2, 4));
        assert!(roi_cells(&RoiBox::new(70.0, 0.0, 80.0, 4.0), 0, 4, (16, 16)).is_err());
    }
}
