//! Cross-phase relation operator: affinity-weighted aggregation of one
//! phase's features at every position of another phase.

use hepadet_tensor::{Mode, NodeId, SeedStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{CoreError, Result};
use crate::params::{Ctx, Init, Store};
use crate::volume::Phase;

/// Largest spatial position count accepted by the brute-force reference.
pub const BRUTEFORCE_MAX_POSITIONS: usize = 4096;

/// Embeddings start small so attention starts near uniform over the window.
const EMBED_GAIN: f64 = 0.1;

/// Score added outside the search window; its exponential underflows to zero.
const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Affinity {
    /// `exp(theta_x . phi_y)`
    EmbeddedDot,
    /// `exp(-|theta_x - phi_y|^2)`
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Value transform applied to the reference position; collapses to `g(x)`.
    PaperLiteralGx,
    /// Value transform applied to the aggregated position.
    NonlocalGy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelationSpec {
    pub f_kind: Affinity,
    pub g_kind: ValueKind,
    pub variant: Variant,
    /// Embedding width, capped at the level's channel count.
    pub embed_channels: usize,
    /// Chebyshev radius, in cells, of the neighbourhood each position of `x`
    /// searches in `y`. `None` relates every pair.
    #[serde(default)]
    pub window: Option<usize>,
    pub reference: Phase,
}

impl Default for RelationSpec {
    fn default() -> Self {
        Self {
            f_kind: Affinity::EmbeddedDot,
            g_kind: ValueKind::Linear,
            variant: Variant::NonlocalGy,
            embed_channels: 16,
            window: None,
            reference: Phase::Arterial,
        }
    }
}

impl RelationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embed_channels == 0 {
            return Err(CoreError::Config("relation embed_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether positions `i` and `j` of a `w`-wide map may relate.
    pub fn in_window(&self, i: usize, j: usize, w: usize) -> bool {
        match self.window {
            None => true,
            Some(r) => (i / w).abs_diff(j / w) <= r && (i % w).abs_diff(j % w) <= r,
        }
    }

    pub fn embed_for(&self, channels: usize) -> usize {
        self.embed_channels.min(channels).max(1)
    }
}

/// Linear maps of one relation: `theta`, `phi` are `[E, C]`, `g` is `[C, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationWeights {
    pub theta: Tensor,
    pub phi: Tensor,
    pub g: Tensor,
}

impl RelationWeights {
    fn check(&self, c: usize) -> Result<usize> {
        let e = self.theta.shape()[0];
        if self.theta.shape() != [e, c] || self.phi.shape() != [e, c] || self.g.shape() != [c, c] {
            return Err(CoreError::Shape(format!(
                "relation weights theta {:?} phi {:?} g {:?} for {c} channels",
                self.theta.shape(),
                self.phi.shape(),
                self.g.shape()
            )));
        }
        Ok(e)
    }
}

/// Relation of `x` `[N, C, H, W]` against `y` of the same shape, with weight
/// nodes already in the graph.
pub fn relate_nodes(
    ctx: &mut Ctx<'_>,
    x: NodeId,
    y: NodeId,
    spec: &RelationSpec,
    w: (NodeId, NodeId, NodeId),
) -> Result<NodeId> {
    let shape = ctx.g.shape(x).to_vec();
    if ctx.g.shape(y) != shape.as_slice() || shape.len() != 4 {
        return Err(CoreError::Shape(format!(
            "relate needs equal [N,C,H,W] inputs, got {:?} and {:?}",
            shape,
            ctx.g.shape(y)
        )));
    }
    let (n, c, p) = (shape[0], shape[1], shape[2] * shape[3]);
    let g = &mut ctx.g;
    let xr = g.reshape(x, &[n, c, p])?;
    let yr = g.reshape(y, &[n, c, p])?;
    let theta = g.matmul(w.0, xr)?;
    let phi = g.matmul(w.1, yr)?;
    let theta_t = g.transpose(theta)?;
    let mut s = g.matmul(theta_t, phi)?;
    if spec.f_kind == Affinity::Gaussian {
        s = g.scale(s, 2.0);
        let tt = g.mul(theta, theta)?;
        let tn = g.sum_axis(tt, 1)?;
        let tn = g.reshape(tn, &[n, p, 1])?;
        let pp = g.mul(phi, phi)?;
        let pn = g.sum_axis(pp, 1)?;
        let tn = g.scale(tn, -1.0);
        let pn = g.scale(pn, -1.0);
        s = g.add(s, tn)?;
        s = g.add(s, pn)?;
    }
    if spec.window.is_some() {
        let w = shape[3];
        let mask = Tensor::from_fn(&[1, p, p], |k| if spec.in_window(k / p, k % p, w) { 0.0 } else { MASKED });
        let m = g.input(mask);
        s = g.add(s, m)?;
    }
    let a = g.softmax_last(s);
    let out = match spec.variant {
        Variant::NonlocalGy => {
            let gy = g.matmul(w.2, yr)?;
            let at = g.transpose(a)?;
            g.matmul(gy, at)?
        }
        Variant::PaperLiteralGx => {
            let gx = g.matmul(w.2, xr)?;
            let norm = g.sum_axis(a, 2)?;
            let norm = g.reshape(norm, &[n, 1, p])?;
            g.mul(gx, norm)?
        }
    };
    Ok(g.reshape(out, &shape)?)
}

/// Weight nodes for relation `prefix`, created on first use.
pub fn relation_params(
    ctx: &mut Ctx<'_>,
    prefix: &str,
    channels: usize,
    spec: &RelationSpec,
) -> Result<(NodeId, NodeId, NodeId)> {
    let e = spec.embed_for(channels);
    Ok((
        ctx.param(&format!("{prefix}.theta"), &[e, channels], Init::ScaledFanIn(channels, EMBED_GAIN))?,
        ctx.param(&format!("{prefix}.phi"), &[e, channels], Init::ScaledFanIn(channels, EMBED_GAIN))?,
        ctx.param(&format!("{prefix}.g"), &[channels, channels], Init::Identity)?,
    ))
}

fn single(t: &Tensor, what: &str) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(CoreError::Shape(format!("{what} must be [C,H,W], got {s:?}")));
    }
    Ok(t.clone().reshape(&[1, s[0], s[1], s[2]])?)
}

/// Relation of single feature maps `[C, H, W]`.
pub fn relate(x: &Tensor, y: &Tensor, spec: &RelationSpec, weights: &RelationWeights) -> Result<Tensor> {
    spec.validate()?;
    if x.shape() != y.shape() {
        return Err(CoreError::Shape(format!("relate inputs {:?} vs {:?}", x.shape(), y.shape())));
    }
    let (xb, yb) = (single(x, "x")?, single(y, "y")?);
    weights.check(x.shape()[0])?;
    let mut store = Store::default();
    let mut ctx = Ctx::new(&mut store, Mode::Infer, SeedStream::new(0));
    let xn = ctx.g.input(xb);
    let yn = ctx.g.input(yb);
    let w = (
        ctx.g.input(weights.theta.clone()),
        ctx.g.input(weights.phi.clone()),
        ctx.g.input(weights.g.clone()),
    );
    let out = relate_nodes(&mut ctx, xn, yn, spec, w)?;
    Ok(ctx.g.value(out).clone().reshape(x.shape())?)
}

/// Reference double loop over all position pairs, with unshifted exponentials.
pub fn relate_bruteforce(
    x: &Tensor,
    y: &Tensor,
    spec: &RelationSpec,
    weights: &RelationWeights,
) -> Result<Tensor> {
    if x.shape() != y.shape() || x.shape().len() != 3 {
        return Err(CoreError::Shape(format!("relate inputs {:?} vs {:?}", x.shape(), y.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let p = h * w;
    if p > BRUTEFORCE_MAX_POSITIONS {
        return Err(CoreError::Config(format!(
            "brute-force relation limited to {BRUTEFORCE_MAX_POSITIONS} positions, got {p}"
        )));
    }
    let e = weights.check(c)?;
    let (xd, yd) = (x.data(), y.data());
    let (wt, wp, wg) = (weights.theta.data(), weights.phi.data(), weights.g.data());
    let embed = |m: &[f64], feat: &[f64], rows: usize, pos: usize| -> Vec<f64> {
        (0..rows)
            .map(|r| (0..c).map(|k| m[r * c + k] * feat[k * p + pos]).sum())
            .collect()
    };
    let mut out = vec![0.0; c * p];
    for i in 0..p {
        let th = embed(wt, xd, e, i);
        let gx = embed(wg, xd, c, i);
        let mut norm = 0.0;
        let mut acc = vec![0.0; c];
        for j in 0..p {
            if !spec.in_window(i, j, w) {
                continue;
            }
            let ph = embed(wp, yd, e, j);
            let f = match spec.f_kind {
                Affinity::EmbeddedDot => th.iter().zip(&ph).map(|(a, b)| a * b).sum::<f64>().exp(),
                Affinity::Gaussian => (-th.iter().zip(&ph).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).exp(),
            };
            let val = match spec.variant {
                Variant::NonlocalGy => embed(wg, yd, c, j),
                Variant::PaperLiteralGx => gx.clone(),
            };
            for (a, v) in acc.iter_mut().zip(&val) {
                *a += f * v;
            }
            norm += f;
        }
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(CoreError::Degenerate(format!("normalizer {norm} at position {i}")));
        }
        for k in 0..c {
            out[k * p + i] = acc[k] / norm;
        }
    }
    Ok(Tensor::new(vec![c, h, w], out)?)
}

/// Mean of the reference phase's levels and their relations to every other
/// phase. `phases[k]` holds one node per pyramid level.
pub fn register_nodes(
    ctx: &mut Ctx<'_>,
    phases: &[(Phase, Vec<NodeId>)],
    spec: &RelationSpec,
) -> Result<Vec<NodeId>> {
    if phases.len() < 2 {
        return Err(CoreError::Config(format!("registration needs >= 2 phases, got {}", phases.len())));
    }
    let r = phases
        .iter()
        .position(|(p, _)| *p == spec.reference)
        .ok_or_else(|| CoreError::Config(format!("reference phase {} not present", spec.reference)))?;
    let levels = phases[r].1.len();
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        let x = phases[r].1[l];
        let c = ctx.g.shape(x)[1];
        let w = relation_params(ctx, &format!("relation.l{l}"), c, spec)?;
        let mut terms = vec![x];
        for (k, (_, lv)) in phases.iter().enumerate() {
            if k == r {
                continue;
            }
            let y = *lv.get(l).ok_or_else(|| CoreError::Shape("phase pyramids differ in depth".into()))?;
            terms.push(relate_nodes(ctx, x, y, spec, w)?);
        }
        out.push(ctx.g.mean_of(&terms)?);
    }
    Ok(out)
}

/// Per-phase pyramids of identical shape.
#[derive(Clone, Debug)]
pub struct PhaseFeatureSet {
    pub phases: Vec<(Phase, FeaturePyramid)>,
}

impl PhaseFeatureSet {
    pub fn validate(&self) -> Result<()> {
        let Some((_, first)) = self.phases.first() else {
            return Err(CoreError::Config("empty phase feature set".into()));
        };
        for (p, pyr) in &self.phases[1..] {
            let same = pyr.levels.len() == first.levels.len()
                && pyr.levels.iter().zip(&first.levels).all(|(a, b)| a.1.shape() == b.1.shape());
            if !same {
                return Err(CoreError::Shape(format!("{p} pyramid shape differs from {}", self.phases[0].0)));
            }
        }
        Ok(())
    }
}

/// Infer-mode registration using the `relation.*` weights in `store`.
pub fn register_phases(set: &PhaseFeatureSet, spec: &RelationSpec, store: &mut Store) -> Result<FeaturePyramid> {
    spec.validate()?;
    set.validate()?;
    let reference = set
        .phases
        .iter()
        .find(|(p, _)| *p == spec.reference)
        .map(|(_, pyr)| pyr)
        .ok_or_else(|| CoreError::Config(format!("reference phase {} not present", spec.reference)))?;
    let mut ctx = Ctx::new(store, Mode::Infer, SeedStream::new(0));
    let nodes: Vec<(Phase, Vec<NodeId>)> = set
        .phases
        .iter()
        .map(|(p, pyr)| (*p, pyr.levels.iter().map(|(_, t)| ctx.g.input(t.clone())).collect()))
        .collect();
    let out = register_nodes(&mut ctx, &nodes, spec)?;
    Ok(FeaturePyramid {
        levels: reference
            .levels
            .iter()
            .zip(out)
            .map(|((name, _), id)| (name.clone(), ctx.g.value(id).clone()))
            .collect(),
    })
}

/// L2 norm of `t` `[C, H, W]` after removing each channel's spatial mean.
pub fn relation_energy(t: &Tensor) -> f64 {
    let c = t.shape()[0];
    let p = t.numel() / c;
    let mut e = 0.0;
    for ch in t.data().chunks(p) {
        let m = ch.iter().sum::<f64>() / p as f64;
        e += ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    e.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(c: usize) -> Tensor {
        Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 })
    }

    #[test]
    fn constant_affinity_averages_values() {
        // zero embeddings make every affinity exp(0) = 1
        let spec = RelationSpec::default();
        let w = RelationWeights {
            theta: Tensor::zeros(&[1, 2]),
            phi: Tensor::zeros(&[1, 2]),
            g: eye(2),
        };
        let x = Tensor::from_fn(&[2, 2, 3], |i| i as f64);
        let y = Tensor::from_fn(&[2, 2, 3], |i| (i * i) as f64 * 0.1);
        let out = relate(&x, &y, &spec, &w).unwrap();
        for ch in 0..2 {
            let m: f64 = y.data()[ch * 6..ch * 6 + 6].iter().sum::<f64>() / 6.0;
            for v in &out.data()[ch * 6..ch * 6 + 6] {
                assert!((v - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bruteforce_size_guard() {
        let spec = RelationSpec::default();
        let w = RelationWeights {
            theta: Tensor::zeros(&[1, 1]),
            phi: Tensor::zeros(&[1, 1]),
            g: eye(1),
        };
        let x = Tensor::zeros(&[1, 65, 64]);
        assert!(relate_bruteforce(&x, &x, &spec, &w).is_err());
    }

    #[test]
    fn energy_of_constant_is_zero() {
        assert_eq!(relation_energy(&Tensor::full(&[3, 4, 4], 2.5)), 0.0);
    }
}
