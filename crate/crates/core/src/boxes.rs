use serde::{Deserialize, Serialize};

/// Axis-aligned box in continuous pixel-edge coordinates: pixel `(r, c)`
/// covers `[c, c+1) x [r, r+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub slice_index: usize,
    pub score: f64,
}

impl RoiBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x0,
            y0,
            x1,
            y1,
            slice_index: 0,
            score: 0.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn on_slice(mut self, slice_index: usize) -> Self {
        self.slice_index = slice_index;
        self
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && (0.0..=1.0).contains(&self.score)
    }

    /// Intersection with `[0, width] x [0, height]`; `None` when less than
    /// `min_side` remains on either axis.
    pub fn clipped_min(&self, width: f64, height: f64, min_side: f64) -> Option<RoiBox> {
        let b = RoiBox {
            x0: self.x0.clamp(0.0, width),
            x1: self.x1.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            y1: self.y1.clamp(0.0, height),
            ..*self
        };
        (b.width() >= min_side && b.height() >= min_side && b.width() > 0.0 && b.height() > 0.0)
            .then_some(b)
    }

    pub fn clipped(&self, width: f64, height: f64) -> Option<RoiBox> {
        self.clipped_min(width, height, 0.0)
    }
}

pub fn iou(a: &RoiBox, b: &RoiBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Indices ordered by descending score, ties broken by lower index.
pub fn score_order(boxes: &[RoiBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score).then(i.cmp(&j)));
    order
}

/// Greedy NMS; returns kept indices in descending score order.
///
/// A box is suppressed when its IoU with any already kept box exceeds
/// `threshold`.
pub fn nms_indices(boxes: &[RoiBox], threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(boxes) {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(boxes: &[RoiBox], threshold: f64) -> Vec<RoiBox> {
    nms_indices(boxes, threshold).into_iter().map(|i| boxes[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_spot_values() {
        let a = RoiBox::new(0.0, 0.0, 10.0, 10.0);
        let b = RoiBox::new(5.0, 5.0, 15.0, 15.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &RoiBox::new(20.0, 0.0, 30.0, 10.0)), 0.0);
        assert_eq!(iou(&a, &RoiBox::new(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn nms_keeps_best_of_duplicates() {
        let a = RoiBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.8);
        let b = a.with_score(0.9);
        let kept = nms(&[a, b], 0.5);
        assert_eq!(kept, vec![b]);
        assert_eq!(nms(&[a], 0.5), vec![a]);
    }

    #[test]
    fn score_ties_prefer_lower_index() {
        let a = RoiBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.5);
        let b = RoiBox::new(1.0, 0.0, 11.0, 10.0).with_score(0.5);
        assert_eq!(nms_indices(&[a, b], 0.5), vec![0]);
        assert_eq!(nms_indices(&[b, a], 0.5), vec![0]);
    }

    #[test]
    fn clipping() {
        let b = RoiBox::new(-5.0, 2.0, 3.0, 70.0);
        let c = b.clipped(64.0, 64.0).unwrap();
        assert_eq!((c.x0, c.y0, c.x1, c.y1), (0.0, 2.0, 3.0, 64.0));
        assert!(RoiBox::new(70.0, 0.0, 80.0, 5.0).clipped(64.0, 64.0).is_none());
    }
}
