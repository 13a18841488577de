//! Objectness head over the fused pyramid and proposal selection.

use hepadet_tensor::ops::loss::sigmoid;
use hepadet_tensor::{Mode, NodeId, SeedStream, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{gen_anchors, AnchorLabel, AnchorSpec};
use crate::backbone::FeaturePyramid;
use crate::boxes::{nms_indices, score_order, RoiBox};
use crate::error::{CoreError, Result};
use crate::params::{Ctx, Store};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub max_positive: usize,
    pub anchors_per_image: usize,
    pub pre_nms: usize,
    pub nms_iou: f64,
    pub top_k: usize,
    /// Proposals narrower than this many pixels after clipping are dropped.
    pub min_side: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.5,
            neg_iou: 0.3,
            max_positive: 32,
            anchors_per_image: 128,
            pre_nms: 300,
            nms_iou: 0.7,
            top_k: 32,
            min_side: 2.0,
        }
    }
}

/// Shared 3x3 conv + ReLU + 1x1 objectness logits per level, `[N, A, H, W]`.
pub fn head(ctx: &mut Ctx<'_>, fused: &[NodeId], per_cell: usize) -> Result<Vec<NodeId>> {
    let channels = ctx.g.shape(fused[0])[1];
    let mut out = Vec::with_capacity(fused.len());
    for &f in fused {
        if ctx.g.shape(f)[1] != channels {
            return Err(CoreError::Shape(format!(
                "rpn head expects {channels} channels on every level, got {:?}",
                ctx.g.shape(f)
            )));
        }
        let h = ctx.conv_biased("rpn.conv", f, channels, (3, 3), (1, 1), 0.0)?;
        let h = ctx.g.relu(h);
        out.push(ctx.conv_biased("rpn.cls", h, per_cell, (1, 1), (0, 0), 0.0)?);
    }
    Ok(out)
}

/// Logits of sample `n` reordered to anchor order (level, row, column, anchor).
pub fn anchor_order_logits(levels: &[&Tensor], n: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for t in levels {
        let s = t.shape();
        let (a, h, w) = (s[1], s[2], s[3]);
        let base = n * a * h * w;
        for y in 0..h {
            for x in 0..w {
                for k in 0..a {
                    out.push(t.data()[base + (k * h + y) * w + x]);
                }
            }
        }
    }
    out
}

/// BCE targets and weights laid out like each level's logits tensor.
///
/// `per_sample[n][i]` is the label of anchor `i` (anchor order) in sample `n`;
/// `None` marks an anchor that is not part of the sampled minibatch.
pub fn level_targets(
    shapes: &[Vec<usize>],
    per_sample: &[Vec<Option<bool>>],
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out: Vec<(Vec<f64>, Vec<f64>)> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (vec![0.0; n], vec![0.0; n])
        })
        .collect();
    for (n, labels) in per_sample.iter().enumerate() {
        let mut i = 0;
        for (l, s) in shapes.iter().enumerate() {
            let (a, h, w) = (s[1], s[2], s[3]);
            let base = n * a * h * w;
            for y in 0..h {
                for x in 0..w {
                    for k in 0..a {
                        if let Some(pos) = labels[i] {
                            let off = base + (k * h + y) * w + x;
                            out[l].0[off] = if pos { 1.0 } else { 0.0 };
                            out[l].1[off] = 1.0;
                        }
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

/// Picks at most `max_positive` positives and fills up to `total` with negatives.
pub fn sample_anchors(
    labels: &[AnchorLabel],
    max_positive: usize,
    total: usize,
    rng: &mut impl Rng,
) -> Vec<Option<bool>> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Positive).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(max_positive);
    neg.truncate(total.saturating_sub(pos.len()));
    let mut out = vec![None; labels.len()];
    for i in pos {
        out[i] = Some(true);
    }
    for i in neg {
        out[i] = Some(false);
    }
    out
}

/// Sigmoid scores, clipping, NMS and the top-k cut.
pub fn select_proposals(
    logits: &[f64],
    anchors: &[RoiBox],
    image: (usize, usize),
    cfg: &ProposalConfig,
) -> Vec<RoiBox> {
    let scored: Vec<RoiBox> = anchors
        .iter()
        .zip(logits)
        .map(|(a, &z)| a.with_score(sigmoid(z)))
        .collect();
    let mut candidates = Vec::with_capacity(cfg.pre_nms);
    for i in score_order(&scored) {
        if candidates.len() >= cfg.pre_nms {
            break;
        }
        if let Some(b) = scored[i].clipped_min(image.1 as f64, image.0 as f64, cfg.min_side) {
            candidates.push(b);
        }
    }
    let mut kept: Vec<RoiBox> = nms_indices(&candidates, cfg.nms_iou)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    kept.truncate(cfg.top_k);
    kept
}

/// Infer-mode proposals for every sample of a fused pyramid.
pub fn propose(
    store: &mut Store,
    fused: &FeaturePyramid,
    spec: &AnchorSpec,
    cfg: &ProposalConfig,
    image: (usize, usize),
) -> Result<Vec<Vec<RoiBox>>> {
    let shapes: Vec<(usize, usize)> = fused
        .levels
        .iter()
        .map(|(_, t)| (t.shape()[2], t.shape()[3]))
        .collect();
    spec.check_levels(&shapes, image)?;
    let anchors = gen_anchors(&shapes, spec);
    let mut ctx = Ctx::new(store, Mode::Infer, SeedStream::new(0));
    let ids: Vec<NodeId> = fused.levels.iter().map(|(_, t)| ctx.g.input(t.clone())).collect();
    let logits = head(&mut ctx, &ids, spec.per_cell())?;
    let tensors: Vec<&Tensor> = logits.iter().map(|&id| ctx.g.value(id)).collect();
    let n = tensors[0].shape()[0];
    Ok((0..n)
        .map(|i| select_proposals(&anchor_order_logits(&tensors, i), &anchors, image, cfg))
        .collect())
}
