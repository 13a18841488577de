//! The full detector graph: stacked phases through the shared backbone, phase
//! relation, pyramid fusion, objectness, texture gate and ROI classification.

use hepadet_tensor::{Mode, NodeId, SeedStream, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::anchors::{gen_anchors, label_anchors};
use crate::backbone;
use crate::boxes::{iou, RoiBox};
use crate::classes::BACKGROUND;
use crate::config::RunConfig;
use crate::dataset::Subject;
use crate::detect::{detections_from_logits, head_logits, roi_cells, select_top, Detection};
use crate::error::{CoreError, Result};
use crate::eval::GtBox;
use crate::fusion::fuse;
use crate::params::{Ctx, Store};
use crate::preprocess::{apply_plan, assemble_slab, AugmentPlan, Slab, SLAB_HALF};
use crate::relation::register_nodes;
use crate::rpn::{self, anchor_order_logits, level_targets, sample_anchors, select_proposals};
use crate::texture::{texture_features, GateModel, FEATURE_DIM};

/// One training or evaluation image: a slab per input phase plus its lesions.
#[derive(Clone, Debug)]
pub struct Sample {
    pub subject_id: String,
    pub slice: usize,
    /// In [`RunConfig::phases`] order.
    pub slabs: Vec<Slab>,
    /// In slab pixel coordinates.
    pub gts: Vec<GtBox>,
}

impl Sample {
    fn size(&self) -> (usize, usize) {
        self.slabs[0].size()
    }
}

fn to_slab(b: &RoiBox, sy: f64, sx: f64) -> RoiBox {
    RoiBox {
        x0: b.x0 * sx,
        x1: b.x1 * sx,
        y0: b.y0 * sy,
        y1: b.y1 * sy,
        ..*b
    }
}

fn sample_at(
    subject: &Subject,
    z: usize,
    cfg: &RunConfig,
    keep: impl Fn(&RoiBox, usize) -> bool,
    plan: Option<&AugmentPlan>,
) -> Result<Sample> {
    let s = cfg.data.slab_size;
    let (_, h, w) = subject.volumes[0].dims();
    let (sy, sx) = (s as f64 / h as f64, s as f64 / w as f64);
    let mut slabs = Vec::new();
    for p in cfg.phases() {
        let slab = assemble_slab(subject.volume(p), z, &cfg.window, (s, s))?;
        slabs.push(match plan {
            Some(plan) => apply_plan(&slab, &[], plan)?.0,
            None => slab,
        });
    }
    let mut gts = Vec::new();
    for l in &subject.lesions {
        let Some(b) = l.box_on(z) else { continue };
        let b = to_slab(b, sy, sx);
        let b = match plan {
            Some(plan) => match plan.transform_box(&b, (s, s)) {
                Some(b) => b,
                None => continue,
            },
            None => b,
        };
        if keep(&b, l.center_slice()) {
            gts.push(GtBox { roi: b, class: l.class });
        }
    }
    Ok(Sample {
        subject_id: subject.id.clone(),
        slice: z,
        slabs,
        gts,
    })
}

/// Training image at slice `z`; lesion boxes shorter than the configured
/// minimum side are left unlabelled.
pub fn training_sample(subject: &Subject, z: usize, cfg: &RunConfig, plan: Option<&AugmentPlan>) -> Result<Sample> {
    let min = cfg.data.min_box_side;
    sample_at(subject, z, cfg, |b, _| b.width().min(b.height()) >= min, plan)
}

/// Evaluation image at slice `z`; its ground truth is every lesion centered there.
pub fn eval_sample(subject: &Subject, z: usize, cfg: &RunConfig) -> Result<Sample> {
    sample_at(subject, z, cfg, |_, center| center == z, None)
}

/// Backbone input `[P * B, D, S, S]`, phase-major.
pub fn stack_inputs(samples: &[Sample], cfg: &RunConfig) -> Result<Tensor> {
    let Some(first) = samples.first() else {
        return Err(CoreError::Shape("empty batch".into()));
    };
    let (h, w) = first.size();
    let d = cfg.net.input_depth;
    let phases = cfg.phases().len();
    let mut data = Vec::with_capacity(phases * samples.len() * d * h * w);
    for p in 0..phases {
        for s in samples {
            let slab = s.slabs.get(p).ok_or_else(|| CoreError::Shape("sample lacks a phase slab".into()))?;
            if slab.size() != (h, w) {
                return Err(CoreError::Shape(format!("slab {:?} in a {h}x{w} batch", slab.size())));
            }
            if d == 1 {
                data.extend_from_slice(slab.channel(SLAB_HALF));
            } else {
                data.extend_from_slice(slab.channels.data());
            }
        }
    }
    Ok(Tensor::new(vec![phases * samples.len(), d, h, w], data)?)
}

pub struct Trunk {
    pub fused: Vec<NodeId>,
    /// Objectness logits per level, `[B, A, H, W]`.
    pub rpn: Vec<NodeId>,
}

/// Backbone over all phases at once, per-phase relation and fusion, objectness.
pub fn trunk(ctx: &mut Ctx<'_>, cfg: &RunConfig, input: NodeId, batch: usize) -> Result<Trunk> {
    let nodes = backbone::forward(ctx, &cfg.net, input)?;
    let phases = cfg.phases();
    let levels = if phases.len() > 1 {
        let mut per_phase = Vec::with_capacity(phases.len());
        for (k, &p) in phases.iter().enumerate() {
            let mut lv = Vec::with_capacity(nodes.levels.len());
            for &l in &nodes.levels {
                lv.push(ctx.g.narrow(l, k * batch, batch)?);
            }
            per_phase.push((p, lv));
        }
        register_nodes(ctx, &per_phase, &cfg.relation)?
    } else {
        nodes.levels
    };
    let fused = fuse(ctx, &levels, cfg.model.fusion_channels, cfg.model.top_down)?;
    let rpn = rpn::head(ctx, &fused, cfg.anchors.per_cell())?;
    Ok(Trunk { fused, rpn })
}

/// Fresh weights for every layer of the configured detector.
pub fn init_model(cfg: &RunConfig) -> Result<Store> {
    cfg.validate()?;
    let mut store = Store::default();
    GateModel::zeros().write_to(&mut store);
    let mut ctx = Ctx::initializing(&mut store, SeedStream::new(cfg.seed).child("init"));
    let s = cfg.net.input_size;
    let x = ctx.g.input(Tensor::zeros(&[cfg.phases().len(), cfg.net.input_depth, s, s]));
    let t = trunk(&mut ctx, cfg, x, 1)?;
    let cell = hepadet_tensor::ops::roi::RoiCells { batch: 0, y0: 0, x0: 0, y1: 1, x1: 1 };
    head_logits(&mut ctx, t.fused[cfg.head.level], &[cell], &cfg.head)?;
    Ok(store)
}

fn proposals(ctx: &Ctx<'_>, t: &Trunk, anchors: &[RoiBox], cfg: &RunConfig, batch: usize) -> Vec<Vec<RoiBox>> {
    let tensors: Vec<&Tensor> = t.rpn.iter().map(|&id| ctx.g.value(id)).collect();
    let s = cfg.net.input_size;
    (0..batch)
        .map(|b| select_proposals(&anchor_order_logits(&tensors, b), anchors, (s, s), &cfg.proposal))
        .collect()
}

fn level_sizes(ctx: &Ctx<'_>, t: &Trunk) -> Vec<(usize, usize)> {
    t.fused.iter().map(|&f| (ctx.g.shape(f)[2], ctx.g.shape(f)[3])).collect()
}

/// Standardized gate inputs `[R, FEATURE_DIM]`.
fn gate_inputs(gate: &GateModel, feats: &[Vec<f64>]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(feats.len() * FEATURE_DIM);
    for f in feats {
        data.extend(gate.standardize(f));
    }
    Ok(Tensor::new(vec![feats.len(), FEATURE_DIM], data)?)
}

/// ROI label: class index at `fg_iou` or above, background below `bg_iou`.
fn roi_label(b: &RoiBox, gts: &[GtBox], cfg: &RunConfig) -> Option<usize> {
    let mut best = (0.0, BACKGROUND);
    for g in gts {
        let v = iou(b, &g.roi);
        if v > best.0 {
            best = (v, g.class.index());
        }
    }
    if best.0 >= cfg.thresholds.fg_iou {
        Some(best.1)
    } else if best.0 < cfg.thresholds.bg_iou {
        Some(BACKGROUND)
    } else {
        None
    }
}

/// Head training ROIs for one image: ground truth, jittered ground truth,
/// current proposals and random boxes, at most half foreground.
pub fn sample_rois(
    gts: &[GtBox],
    proposals: &[RoiBox],
    size: (usize, usize),
    cfg: &RunConfig,
    rng: &mut impl Rng,
) -> Vec<(RoiBox, usize)> {
    let (h, w) = (size.0 as f64, size.1 as f64);
    let mut candidates: Vec<RoiBox> = Vec::new();
    for g in gts {
        candidates.push(g.roi);
        for _ in 0..4 {
            let (bw, bh) = (g.roi.width(), g.roi.height());
            let (cx, cy) = g.roi.center();
            let cx = cx + bw * rng.random_range(-0.15..0.15);
            let cy = cy + bh * rng.random_range(-0.15..0.15);
            let bw = bw * rng.random_range(0.85..1.2);
            let bh = bh * rng.random_range(0.85..1.2);
            candidates.push(RoiBox::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0));
        }
    }
    candidates.extend(proposals.iter().map(|p| p.with_score(0.0)));
    for _ in 0..8 {
        let side = rng.random_range(4.0..16.0);
        let x0 = rng.random_range(0.0..w - side);
        let y0 = rng.random_range(0.0..h - side);
        candidates.push(RoiBox::new(x0, y0, x0 + side, y0 + side));
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for c in candidates {
        let Some(c) = c.with_score(0.0).clipped_min(w, h, 2.0) else { continue };
        match roi_label(&c, gts, cfg) {
            Some(BACKGROUND) => bg.push((c, BACKGROUND)),
            Some(k) => fg.push((c, k)),
            None => {}
        }
    }
    let budget = cfg.optimizer.rois_per_image.max(2);
    fg.shuffle(rng);
    bg.shuffle(rng);
    fg.truncate(budget / 2);
    bg.truncate(budget - fg.len());
    fg.extend(bg);
    fg
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub rpn: f64,
    pub head: f64,
    pub gate: f64,
}

/// Builds the training loss of one batch; the returned node is the scalar total.
pub fn training_loss(
    ctx: &mut Ctx<'_>,
    cfg: &RunConfig,
    samples: &[Sample],
    rng: &mut impl Rng,
) -> Result<(NodeId, LossParts)> {
    let batch = samples.len();
    let input = ctx.g.input(stack_inputs(samples, cfg)?);
    let t = trunk(ctx, cfg, input, batch)?;
    let sizes = level_sizes(ctx, &t);
    let anchors = gen_anchors(&sizes, &cfg.anchors);
    let image = samples[0].size();

    let p = &cfg.proposal;
    let mut per_sample = Vec::with_capacity(batch);
    for s in samples {
        let gts: Vec<RoiBox> = s.gts.iter().map(|g| g.roi).collect();
        let labels = label_anchors(&anchors, &gts, p.pos_iou, p.neg_iou);
        per_sample.push(sample_anchors(&labels, p.max_positive, p.anchors_per_image, rng));
    }
    let norm = per_sample.iter().flatten().filter(|v| v.is_some()).count().max(1) as f64;
    let shapes: Vec<Vec<usize>> = t.rpn.iter().map(|&id| ctx.g.shape(id).to_vec()).collect();
    let mut rpn_loss: Option<NodeId> = None;
    for (&logits, (targets, weights)) in t.rpn.iter().zip(level_targets(&shapes, &per_sample)) {
        let l = ctx.g.bce_with_logits(logits, targets, weights, norm)?;
        rpn_loss = Some(match rpn_loss {
            Some(acc) => ctx.g.add(acc, l)?,
            None => l,
        });
    }
    let rpn_loss = rpn_loss.expect("at least one level");

    let props = proposals(ctx, &t, &anchors, cfg, batch);
    let level = t.fused[cfg.head.level];
    let stride = cfg.anchors.strides[cfg.head.level];
    let fsize = sizes[cfg.head.level];
    let reference = reference_index(cfg);
    let mut cells = Vec::new();
    let mut labels = Vec::new();
    let mut feats = Vec::new();
    for (b, s) in samples.iter().enumerate() {
        for (roi, label) in sample_rois(&s.gts, &props[b], image, cfg, rng) {
            let Ok(c) = roi_cells(&roi, b, stride, fsize) else { continue };
            let Ok(f) = texture_features(&s.slabs[reference], &roi) else { continue };
            cells.push(c);
            labels.push(label);
            feats.push(f.to_vec());
        }
    }
    if cells.is_empty() {
        return Err(CoreError::Degenerate("batch produced no head ROIs".into()));
    }
    let logits = head_logits(ctx, level, &cells, &cfg.head)?;
    let head_loss = {
        let w: Vec<f64> = labels
            .iter()
            .map(|&l| if l == BACKGROUND { cfg.head.background_weight } else { 1.0 })
            .collect();
        ctx.g.softmax_ce_weighted(logits, &labels, &w)?
    };
    let mut total = ctx.g.add(rpn_loss, head_loss)?;

    let mut gate_value = 0.0;
    if cfg.gate.enabled && cfg.gate.loss_weight > 0.0 {
        let gate = GateModel::read_from(ctx.store)?;
        let z = ctx.g.input(gate_inputs(&gate, &feats)?);
        let g = ctx.dense("gate", z, 1, 0.0)?;
        let targets: Vec<f64> = labels.iter().map(|&l| if l == BACKGROUND { 0.0 } else { 1.0 }).collect();
        let n = targets.len();
        let gate_loss = ctx.g.bce_with_logits(g, targets, vec![1.0; n], n as f64)?;
        gate_value = ctx.g.value(gate_loss).data()[0];
        let weighted = ctx.g.scale(gate_loss, cfg.gate.loss_weight);
        total = ctx.g.add(total, weighted)?;
    }
    let parts = LossParts {
        total: ctx.g.value(total).data()[0],
        rpn: ctx.g.value(rpn_loss).data()[0],
        head: ctx.g.value(head_loss).data()[0],
        gate: gate_value,
    };
    Ok((total, parts))
}

fn reference_index(cfg: &RunConfig) -> usize {
    let r = cfg.reference_phase();
    cfg.phases().iter().position(|&p| p == r).unwrap_or(0)
}

/// Detector output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDetections {
    pub proposals: usize,
    /// Proposals that passed the texture gate.
    pub gated: usize,
    pub detections: Vec<Detection>,
}

/// Proposals, gate, classification and final selection for a batch of images.
pub fn detect(store: &mut Store, cfg: &RunConfig, samples: &[Sample]) -> Result<Vec<ImageDetections>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let gate = if cfg.gate.enabled { Some(GateModel::read_from(store)?) } else { None };
    let mut ctx = Ctx::new(store, Mode::Infer, SeedStream::new(0));
    let batch = samples.len();
    let input = ctx.g.input(stack_inputs(samples, cfg)?);
    let t = trunk(&mut ctx, cfg, input, batch)?;
    let sizes = level_sizes(&ctx, &t);
    let anchors = gen_anchors(&sizes, &cfg.anchors);
    let props = proposals(&ctx, &t, &anchors, cfg, batch);
    let stride = cfg.anchors.strides[cfg.head.level];
    let fsize = sizes[cfg.head.level];
    let reference = reference_index(cfg);

    let mut cells = Vec::new();
    let mut owners = Vec::new();
    let mut boxes = Vec::new();
    let mut gated = vec![0; batch];
    for (b, s) in samples.iter().enumerate() {
        for p in &props[b] {
            if let Some(gate) = &gate {
                let Ok(f) = texture_features(&s.slabs[reference], p) else { continue };
                if gate.confidence(&f) < cfg.gate.threshold {
                    continue;
                }
            }
            let Ok(c) = roi_cells(p, b, stride, fsize) else { continue };
            gated[b] += 1;
            cells.push(c);
            owners.push(b);
            boxes.push(*p);
        }
    }
    let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); batch];
    if !cells.is_empty() {
        let logits = head_logits(&mut ctx, t.fused[cfg.head.level], &cells, &cfg.head)?;
        let dets = detections_from_logits(ctx.g.value(logits), &boxes, cfg.reference_phase());
        for (d, b) in dets.into_iter().zip(owners) {
            per_image[b].push(d);
        }
    }
    let th = &cfg.thresholds;
    Ok(per_image
        .into_iter()
        .enumerate()
        .map(|(b, dets)| ImageDetections {
            proposals: props[b].len(),
            gated: gated[b],
            detections: select_top(&dets, th.detect_nms, th.per_lesion)
                .into_iter()
                .filter(|d| d.score() >= th.min_score)
                .collect(),
        })
        .collect())
}
