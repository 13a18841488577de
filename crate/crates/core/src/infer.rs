//! Batched inference over subjects and lesion-level evaluation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Subject;
use crate::detect::Detection;
use crate::error::Result;
use crate::eval::{match_and_score, GtBox, MatchCounts};
use crate::model::{detect, eval_sample, Sample};
use crate::params::Store;
use crate::parallel::map_indexed;

const BATCH: usize = 8;

/// Slices an evaluation visits: the center slice of every lesion.
pub fn eval_slices(subject: &Subject) -> Vec<usize> {
    subject
        .lesions
        .iter()
        .map(|l| l.center_slice())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// One processed image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub subject_id: String,
    pub slice: usize,
    pub proposals: usize,
    pub gated: usize,
    pub detections: Vec<Detection>,
    pub gts: Vec<GtBox>,
    pub counts: MatchCounts,
}

fn run_samples(store: &mut Store, cfg: &RunConfig, samples: Vec<Sample>) -> Result<Vec<(Sample, ImageResult)>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut rest = samples;
    while !rest.is_empty() {
        let tail = rest.split_off(rest.len().min(BATCH));
        let outputs = detect(store, cfg, &rest)?;
        for (s, o) in rest.into_iter().zip(outputs) {
            let counts = match_and_score(&o.detections, &s.gts, cfg.thresholds.eval_iou);
            let r = ImageResult {
                subject_id: s.subject_id.clone(),
                slice: s.slice,
                proposals: o.proposals,
                gated: o.gated,
                detections: o.detections,
                gts: s.gts.clone(),
                counts,
            };
            out.push((s, r));
        }
        rest = tail;
    }
    Ok(out)
}

/// Runs the detector on the given slices of one subject; ground truth on each
/// image is the set of lesions centered on it.
pub fn run_subject(
    store: &mut Store,
    cfg: &RunConfig,
    subject: &Subject,
    slices: &[usize],
) -> Result<Vec<(Sample, ImageResult)>> {
    let samples = slices
        .iter()
        .map(|&z| eval_sample(subject, z, cfg))
        .collect::<Result<Vec<_>>>()?;
    run_samples(store, cfg, samples)
}

/// Lesion-level evaluation at the center slices of every subject.
pub fn evaluate(store: &Store, cfg: &RunConfig, subjects: &[Subject], threads: usize) -> Result<(MatchCounts, Vec<ImageResult>)> {
    let per_subject = map_indexed(subjects.len(), threads, |i| {
        let mut local = store.clone();
        let s = &subjects[i];
        Ok(run_subject(&mut local, cfg, s, &eval_slices(s))?
            .into_iter()
            .map(|(_, r)| r)
            .collect::<Vec<_>>())
    })?;
    let mut total = MatchCounts::default();
    let mut images = Vec::new();
    for r in per_subject.into_iter().flatten() {
        total += r.counts;
        images.push(r);
    }
    Ok((total, images))
}

/// Mean probability assigned to the true class by the detections matched to
/// ground truth at the evaluation IoU (any predicted class).
pub fn true_class_mass(images: &[ImageResult], iou_threshold: f64) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for im in images {
        for g in &im.gts {
            let best = im
                .detections
                .iter()
                .filter(|d| crate::boxes::iou(&d.roi, &g.roi) >= iou_threshold)
                .max_by(|a, b| a.score().total_cmp(&b.score()));
            if let Some(d) = best {
                sum += d.class_probs[g.class.index()];
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}
