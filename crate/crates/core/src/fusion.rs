//! Top-down fusion of deep and shallow pyramid levels.

use hepadet_tensor::{Mode, NodeId, SeedStream};

use crate::backbone::FeaturePyramid;
use crate::error::{CoreError, Result};
use crate::params::{Ctx, Store};

/// Lateral 1x1 projections to `channels`, then (with `top_down`) each level
/// adds the nearest-upsampled fused map of the next deeper level.
pub fn fuse(ctx: &mut Ctx<'_>, levels: &[NodeId], channels: usize, top_down: bool) -> Result<Vec<NodeId>> {
    if levels.len() < 2 {
        return Err(CoreError::Shape(format!("fusion needs >= 2 levels, got {}", levels.len())));
    }
    for pair in levels.windows(2) {
        let (a, b) = (ctx.g.shape(pair[0])[2], ctx.g.shape(pair[1])[2]);
        if b >= a || a % b != 0 {
            return Err(CoreError::Shape(format!(
                "levels must shrink by integer factors from shallow to deep, got {a} then {b}"
            )));
        }
    }
    let mut laterals = Vec::with_capacity(levels.len());
    for (i, &l) in levels.iter().enumerate() {
        laterals.push(ctx.conv_biased(&format!("fpn.lateral{i}"), l, channels, (1, 1), (0, 0), 0.0)?);
    }
    if !top_down {
        return Ok(laterals);
    }
    let mut fused = laterals.clone();
    for i in (0..levels.len() - 1).rev() {
        let factor = ctx.g.shape(fused[i])[2] / ctx.g.shape(fused[i + 1])[2];
        let up = ctx.g.upsample_nearest(fused[i + 1], factor)?;
        fused[i] = ctx.g.add(laterals[i], up)?;
    }
    Ok(fused)
}

/// Infer-mode fusion of a materialized pyramid with the `fpn.*` weights in `store`.
pub fn fuse_pyramid(
    store: &mut Store,
    pyramid: &FeaturePyramid,
    channels: usize,
    top_down: bool,
) -> Result<FeaturePyramid> {
    let mut ctx = Ctx::new(store, Mode::Infer, SeedStream::new(0));
    let ids: Vec<NodeId> = pyramid.levels.iter().map(|(_, t)| ctx.g.input(t.clone())).collect();
    let fused = fuse(&mut ctx, &ids, channels, top_down)?;
    Ok(FeaturePyramid {
        levels: pyramid
            .levels
            .iter()
            .zip(fused)
            .map(|((name, _), id)| (name.clone(), ctx.g.value(id).clone()))
            .collect(),
    })
}
