//! Lesion matching and per-class accuracy tables.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, RoiBox};
use crate::classes::LesionClass;
use crate::detect::Detection;

/// Stated in every report, since "accuracy" admits several readings.
pub const MATCHING_RULE: &str = "lesion-level recall: predictions sorted by descending class probability \
are matched greedily and one-to-one to unmatched ground-truth lesions of the predicted class with IoU >= threshold; \
accuracy = matched lesions / ground-truth lesions of the class";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(rename = "box")]
    pub roi: RoiBox,
    pub class: LesionClass,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub total: usize,
    /// Matched with the correct class.
    pub correct: usize,
    /// Overlapped at the threshold by some prediction of any class.
    pub localized: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub per_class: [ClassCounts; 3],
    pub predictions: usize,
    pub false_positives: usize,
}

impl AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        for (a, b) in self.per_class.iter_mut().zip(o.per_class) {
            a.total += b.total;
            a.correct += b.correct;
            a.localized += b.localized;
        }
        self.predictions += o.predictions;
        self.false_positives += o.false_positives;
    }
}

impl MatchCounts {
    /// Accuracy percentage per class; `None` where the class has no lesions.
    pub fn accuracy(&self) -> [Option<f64>; 3] {
        self.per_class
            .map(|c| (c.total > 0).then(|| 100.0 * c.correct as f64 / c.total as f64))
    }

    pub fn recall(&self) -> f64 {
        let t: usize = self.per_class.iter().map(|c| c.total).sum();
        let c: usize = self.per_class.iter().map(|c| c.correct).sum();
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    }
}

fn total_order(a: &Detection, b: &Detection) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then(a.argmax().cmp(&b.argmax()))
        .then(a.roi.x0.total_cmp(&b.roi.x0))
        .then(a.roi.y0.total_cmp(&b.roi.y0))
        .then(a.roi.x1.total_cmp(&b.roi.x1))
        .then(a.roi.y1.total_cmp(&b.roi.y1))
}

/// Matches the predictions of one image against its ground truth.
pub fn match_and_score(preds: &[Detection], gts: &[GtBox], iou_threshold: f64) -> MatchCounts {
    let mut counts = MatchCounts {
        predictions: preds.len(),
        ..MatchCounts::default()
    };
    for g in gts {
        counts.per_class[g.class.index()].total += 1;
        if preds.iter().any(|p| iou(&p.roi, &g.roi) >= iou_threshold) {
            counts.per_class[g.class.index()].localized += 1;
        }
    }
    let mut order: Vec<&Detection> = preds.iter().collect();
    order.sort_by(|a, b| total_order(a, b));
    let mut taken = vec![false; gts.len()];
    for p in order {
        let Some(class) = p.class() else {
            counts.false_positives += 1;
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class != class {
                continue;
            }
            let v = iou(&p.roi, &g.roi);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                taken[j] = true;
                counts.per_class[class.index()].correct += 1;
            }
            None => counts.false_positives += 1,
        }
    }
    counts
}

/// Two-decimal percentage, as in published accuracy tables.
pub fn format_pct(v: f64) -> String {
    format!("{v:.2}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    /// Cyst, hemangioma, HCC.
    pub accuracy: [Option<f64>; 3],
    pub counts: MatchCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl EvalRow {
    pub fn from_counts(label: impl Into<String>, counts: MatchCounts) -> Self {
        Self {
            label: label.into(),
            accuracy: counts.accuracy(),
            counts,
            failure: None,
        }
    }

    pub fn failed(label: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            accuracy: [None; 3],
            counts: MatchCounts::default(),
            failure: Some(reason.into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub header: Vec<String>,
    pub iou_threshold: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn new(iou_threshold: f64, mut header: Vec<String>) -> Self {
        header.push(format!("Matching: {MATCHING_RULE} (threshold {iou_threshold})."));
        Self {
            header,
            iou_threshold,
            rows: Vec::new(),
        }
    }

    /// Aligned plain-text rendering with one row per framework.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for h in &self.header {
            let _ = writeln!(s, "# {h}");
        }
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("Framework".len());
        let titles = LesionClass::ALL.map(|c| c.title());
        let _ = writeln!(s, "{:<width$}  {:>10}  {:>10}  {:>10}", "Framework", titles[0], titles[1], titles[2]);
        for r in &self.rows {
            let cells: Vec<String> = match &r.failure {
                Some(_) => vec!["failed".into(); 3],
                None => r.accuracy.iter().map(|a| a.map_or("-".into(), format_pct)).collect(),
            };
            let _ = write!(s, "{:<width$}  {:>10}  {:>10}  {:>10}", r.label, cells[0], cells[1], cells[2]);
            if let Some(f) = &r.failure {
                let _ = write!(s, "  ({f})");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Phase;

    fn pred(b: RoiBox, class: usize, p: f64) -> Detection {
        let mut probs = [(1.0 - p) / 3.0; 4];
        probs[class] = p;
        Detection {
            roi: b,
            class_probs: probs,
            source_phase: Phase::Arterial,
        }
    }

    #[test]
    fn two_of_three() {
        let gts: Vec<GtBox> = (0..3)
            .map(|i| GtBox {
                roi: RoiBox::new(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0),
                class: LesionClass::Hcc,
            })
            .collect();
        let preds = vec![pred(gts[0].roi, 2, 0.9), pred(gts[2].roi, 2, 0.8)];
        let c = match_and_score(&preds, &gts, 0.3);
        assert_eq!(format_pct(c.accuracy()[2].unwrap()), "66.67");
        assert_eq!(c.accuracy()[0], None);
        assert_eq!(c.false_positives, 0);
    }

    #[test]
    fn wrong_class_is_localized_not_correct() {
        let g = GtBox {
            roi: RoiBox::new(0.0, 0.0, 10.0, 10.0),
            class: LesionClass::Cyst,
        };
        let c = match_and_score(&[pred(g.roi, 1, 0.9)], &[g], 0.3);
        assert_eq!(c.per_class[0], ClassCounts { total: 1, correct: 0, localized: 1 });
        assert_eq!(c.false_positives, 1);
    }

    #[test]
    fn text_layout() {
        let mut t = EvalTable::new(0.3, vec!["synthetic".into()]);
        let mut counts = MatchCounts::default();
        counts.per_class[0] = ClassCounts { total: 13, correct: 9, localized: 10 };
        t.rows.push(EvalRow::from_counts("R-50", counts));
        t.rows.push(EvalRow::failed("R-101", "loss diverged"));
        let text = t.to_text();
        assert!(text.contains("69.23"));
        assert!(text.lines().any(|l| l.starts_with("R-101") && l.contains("failed")));
    }
}
