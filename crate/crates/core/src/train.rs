//! SGD training of the full detector on phantom subjects.

use hepadet_tensor::{sgd_step, Mode, MomentumState, SeedStream};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, RoiBox};
use crate::config::RunConfig;
use crate::dataset::Subject;
use crate::error::{CoreError, Result};
use crate::model::{init_model, training_loss, training_sample, LossParts, Sample};
use crate::params::{Ctx, Store};
use crate::preprocess::AugmentPlan;
use crate::texture::{texture_features, GateModel, TextureFeatures};

/// A training image: subject position in the training list and slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainItem {
    pub subject: usize,
    pub slice: usize,
}

/// Every slice carrying a usable lesion box, plus a seeded fraction of
/// lesion-free slices.
pub fn training_items(subjects: &[Subject], cfg: &RunConfig) -> Vec<TrainItem> {
    let min = cfg.data.min_box_side;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        for z in 0..s.volumes[0].depth() {
            let boxes: Vec<&RoiBox> = s.lesions.iter().filter_map(|l| l.box_on(z)).collect();
            if boxes.is_empty() {
                negatives.push(TrainItem { subject: i, slice: z });
            } else if boxes.iter().any(|b| b.width().min(b.height()) >= min) {
                positives.push(TrainItem { subject: i, slice: z });
            }
        }
    }
    let want = (cfg.optimizer.negative_fraction * positives.len() as f64).round() as usize;
    negatives.shuffle(&mut SeedStream::new(cfg.seed).rng("negatives"));
    negatives.truncate(want);
    positives.extend(negatives);
    positives.sort_by_key(|t| (t.subject, t.slice));
    positives
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss: f64,
    pub rpn: f64,
    pub head: f64,
    pub gate: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub store: Store,
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub final_loss: f64,
}

fn lr_at(cfg: &RunConfig, step: usize, total: usize) -> f64 {
    let o = &cfg.optimizer;
    let warm = if o.warmup_steps > 0 {
        ((step + 1) as f64 / o.warmup_steps as f64).min(1.0)
    } else {
        1.0
    };
    let late = if 3 * step >= 2 * total { o.final_lr_factor } else { 1.0 };
    o.lr * warm * late
}

/// Random square crops overlapping no lesion, on the reference phase of `s`.
fn background_crops(s: &Sample, reference: usize, count: usize, rng: &mut impl Rng) -> Vec<TextureFeatures> {
    let (h, w) = s.slabs[reference].size();
    let mut out = Vec::new();
    for _ in 0..count * 4 {
        if out.len() == count {
            break;
        }
        let side = rng.random_range(4.0..14.0);
        let x0 = rng.random_range(0.0..w as f64 - side);
        let y0 = rng.random_range(0.0..h as f64 - side);
        let b = RoiBox::new(x0, y0, x0 + side, y0 + side);
        if s.gts.iter().any(|g| iou(&g.roi, &b) > 0.0) {
            continue;
        }
        if let Ok(f) = texture_features(&s.slabs[reference], &b) {
            out.push(f);
        }
    }
    out
}

/// Standalone logistic fit of the texture gate on lesion and background crops.
pub fn fit_gate(subjects: &[Subject], items: &[TrainItem], cfg: &RunConfig) -> Result<GateModel> {
    let reference = cfg
        .phases()
        .iter()
        .position(|&p| p == cfg.reference_phase())
        .unwrap_or(0);
    let mut rng = SeedStream::new(cfg.seed).rng("gate");
    let mut samples = Vec::new();
    for it in items {
        let s = training_sample(&subjects[it.subject], it.slice, cfg, None)?;
        for g in &s.gts {
            if let Ok(f) = texture_features(&s.slabs[reference], &g.roi) {
                samples.push((f, true));
            }
        }
        for f in background_crops(&s, reference, 2, &mut rng) {
            samples.push((f, false));
        }
    }
    GateModel::fit(&samples, 400, 0.5, 1e-3)
}

/// Trains a fresh model; `on_epoch` sees each epoch summary as it completes.
pub fn train(cfg: &RunConfig, subjects: &[Subject], mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let mut store = init_model(cfg)?;
    let items = training_items(subjects, cfg);
    if items.is_empty() {
        return Err(CoreError::Dataset("no training slices with lesions".into()));
    }
    if cfg.gate.enabled {
        fit_gate(subjects, &items, cfg)?.write_to(&mut store);
    }
    let seeds = SeedStream::new(cfg.seed);
    let o = &cfg.optimizer;
    let per_epoch = items.len().div_ceil(o.batch_size);
    let total = per_epoch * o.epochs;
    let mut momentum = MomentumState::default();
    let mut epochs = Vec::with_capacity(o.epochs);
    let mut step = 0;
    let mut final_loss = f64::NAN;
    for epoch in 0..o.epochs {
        let mut order = items.clone();
        order.shuffle(&mut seeds.child_index("epoch", epoch as u64).rng("order"));
        let mut sums = LossParts::default();
        let mut norm_sum = 0.0;
        let mut lr = o.lr;
        for chunk in order.chunks(o.batch_size) {
            let batch = chunk
                .iter()
                .enumerate()
                .map(|(i, it)| {
                    let k = (step * o.batch_size + i) as u64;
                    let plan = AugmentPlan::draw(&cfg.augment, seeds.child_index("augment", k).seed());
                    training_sample(&subjects[it.subject], it.slice, cfg, Some(&plan))
                })
                .collect::<Result<Vec<_>>>()?;
            let step_seeds = seeds.child_index("step", step as u64);
            let mut rng = step_seeds.rng("rois");
            let (mut grads, parts) = {
                let mut ctx = Ctx::new(&mut store, Mode::Train, step_seeds);
                let (loss, parts) = training_loss(&mut ctx, cfg, &batch, &mut rng)?;
                if !parts.total.is_finite() {
                    return Err(CoreError::Diverged(format!(
                        "loss {} at epoch {epoch} step {step} (rpn {}, head {}, gate {})",
                        parts.total, parts.rpn, parts.head, parts.gate
                    )));
                }
                (ctx.g.backward(loss)?, parts)
            };
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(CoreError::Diverged(format!("gradient norm {norm} at epoch {epoch} step {step}")));
            }
            if o.clip_norm > 0.0 && norm > o.clip_norm {
                grads.scale(o.clip_norm / norm);
            }
            lr = lr_at(cfg, step, total);
            sgd_step(&mut store.params, &grads, lr, o.momentum, o.weight_decay, &mut momentum)?;
            sums.total += parts.total;
            sums.rpn += parts.rpn;
            sums.head += parts.head;
            sums.gate += parts.gate;
            norm_sum += norm;
            final_loss = parts.total;
            step += 1;
        }
        let n = per_epoch as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            steps: step,
            lr,
            loss: sums.total / n,
            rpn: sums.rpn / n,
            head: sums.head / n,
            gate: sums.gate / n,
            grad_norm: norm_sum / n,
        };
        on_epoch(&log);
        epochs.push(log);
    }
    Ok(TrainOutcome {
        store,
        epochs,
        steps: step,
        final_loss,
    })
}
