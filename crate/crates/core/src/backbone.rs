//! Pseudo-3D bottleneck residual backbones (50 and 101 layers).
//!
//! The depth axis is carried in the batch dimension: after Conv1 the tensor
//! is `[N * D, C, H, W]`, every block convolution is 2D with weights shared
//! across depth, and only Conv1, Pool1 and Pool2 change the depth extent.
//! Conv1 maps the input slices to `D * C` channels which are then unfolded
//! into the depth axis.

use std::fmt;

use hepadet_tensor::{Mode, NodeId, PoolSpec, SeedStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::{Ctx, Store};

pub const CANONICAL_INPUT: usize = 448;
pub const CANONICAL_CONV1_DEPTH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub depth: u32,
    pub width_scale: f64,
    #[serde(default = "default_input_depth")]
    pub input_depth: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_conv1_depth")]
    pub conv1_depth: usize,
    #[serde(default)]
    pub concat_head: bool,
}

fn default_input_depth() -> usize {
    9
}

fn default_input_size() -> usize {
    CANONICAL_INPUT
}

fn default_conv1_depth() -> usize {
    CANONICAL_CONV1_DEPTH
}

impl NetConfig {
    pub fn canonical(depth: u32) -> Self {
        Self {
            depth,
            width_scale: 1.0,
            input_depth: 9,
            input_size: CANONICAL_INPUT,
            conv1_depth: CANONICAL_CONV1_DEPTH,
            concat_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth != 50 && self.depth != 101 {
            return Err(CoreError::Config(format!("depth must be 50 or 101, got {}", self.depth)));
        }
        let c = 64.0 * self.width_scale;
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) || (c - c.round()).abs() > 1e-9 {
            return Err(CoreError::Config(format!(
                "width_scale * 64 must be a positive integer, got {}",
                self.width_scale
            )));
        }
        if self.input_depth == 0 || self.conv1_depth == 0 {
            return Err(CoreError::Config("input_depth and conv1_depth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stage_repeats(&self) -> [usize; 4] {
        if self.depth == 101 {
            [6, 8, 12, 6]
        } else {
            [3, 4, 6, 3]
        }
    }

    /// Conv1 channels per depth position.
    pub fn base_width(&self) -> usize {
        (64.0 * self.width_scale).round() as usize
    }

    /// Bottleneck inner widths of Block1..Block4.
    pub fn mid_widths(&self) -> [usize; 4] {
        let b = self.base_width();
        [b, 2 * b, 4 * b, 8 * b]
    }

    /// Expand (output) widths of Block1..Block4.
    pub fn out_widths(&self) -> [usize; 4] {
        self.mid_widths().map(|m| 4 * m)
    }

    /// Conv1 + three per bottleneck + the classification dense layer.
    pub fn weighted_layers(&self) -> usize {
        1 + 3 * self.stage_repeats().iter().sum::<usize>() + 1
    }

    /// Depth extents after Conv1, Pool1 and Pool2.
    pub fn depth_extents(&self) -> [usize; 3] {
        let d1 = self.conv1_depth;
        let d2 = pool_extent(d1, 3, 2, 1);
        [d1, d2, pool_extent(d2, 3, 2, 1)]
    }

    /// Channels of each pyramid level (depth folded into channels).
    pub fn level_channels(&self) -> [usize; 4] {
        let [_, d2, d3] = self.depth_extents();
        let o = self.out_widths();
        [d2 * o[0], d3 * o[1], d3 * o[2], d3 * o[3]]
    }
}

fn pool_extent(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p).saturating_sub(k) / s + 1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    pub name: String,
    pub depth: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for StageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.depth, self.height, self.width)
    }
}

fn conv_extent(n: usize, k: usize, s: usize, p: usize, row: &str) -> Result<usize> {
    if n + 2 * p < k {
        return Err(CoreError::Shape(format!(
            "{row}: extent {n} with pad {p} is smaller than kernel {k}"
        )));
    }
    Ok((n + 2 * p - k) / s + 1)
}

/// Stage shapes after every table row, from arithmetic alone.
///
/// `input` is `(slices, height, width)`.
pub fn shape_trace(cfg: &NetConfig, input: (usize, usize, usize)) -> Result<Vec<StageShape>> {
    cfg.validate()?;
    let (c, h, w) = input;
    if c != cfg.input_depth {
        return Err(CoreError::Shape(format!(
            "input has {c} slices, config expects {}",
            cfg.input_depth
        )));
    }
    let row = |name: &str, depth, channels, height, width| StageShape {
        name: name.to_string(),
        depth,
        channels,
        height,
        width,
    };
    let [d1, d2, d3] = cfg.depth_extents();
    let outs = cfg.out_widths();
    let c1 = cfg.base_width();
    let (h1, w1) = (conv_extent(h, 7, 2, 3, "Conv1")?, conv_extent(w, 7, 2, 3, "Conv1")?);
    let (h2, w2) = (conv_extent(h1, 3, 2, 1, "Pool1")?, conv_extent(w1, 3, 2, 1, "Pool1")?);
    let b2 = (conv_extent(h2, 3, 2, 1, "Block2")?, conv_extent(w2, 3, 2, 1, "Block2")?);
    let b3 = (conv_extent(b2.0, 3, 2, 1, "Block3")?, conv_extent(b2.1, 3, 2, 1, "Block3")?);
    let b4 = (conv_extent(b3.0, 3, 2, 1, "Block4")?, conv_extent(b3.1, 3, 2, 1, "Block4")?);
    Ok(vec![
        row("Conv1", d1, c1, h1, w1),
        row("Pool1", d2, c1, h2, w2),
        row("Block1", d2, outs[0], h2, w2),
        row("Pool2", d3, outs[0], h2, w2),
        row("Block2", d3, outs[1], b2.0, b2.1),
        row("Block3", d3, outs[2], b3.0, b3.1),
        row("Block4", d3, outs[3], b4.0, b4.1),
        row("Concat", d3, outs.iter().sum(), h1, w1),
    ])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractRow {
    pub name: String,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

/// Expected stage extents, compared row by row against a trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contract {
    pub rows: Vec<ContractRow>,
}

const PAPER_ROWS: [(&str, usize, usize); 8] = [
    ("Conv1", 16, 224),
    ("Pool1", 8, 112),
    ("Block1", 8, 112),
    ("Pool2", 4, 112),
    ("Block2", 4, 56),
    ("Block3", 4, 28),
    ("Block4", 4, 14),
    ("Concat", 4, 224),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowDiff {
    pub row: String,
    pub expected: String,
    pub actual: String,
}

impl fmt::Display for RowDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: expected {}, got {}", self.row, self.expected, self.actual)
    }
}

impl Contract {
    /// The feature-size table for the canonical 448x448 input (identical for 50 and 101).
    pub fn paper() -> Self {
        Self {
            rows: PAPER_ROWS
                .iter()
                .map(|&(name, depth, s)| ContractRow {
                    name: name.to_string(),
                    depth,
                    height: s,
                    width: s,
                })
                .collect(),
        }
    }

    /// The paper table scaled to a config's input size and Conv1 depth.
    pub fn for_config(cfg: &NetConfig) -> Result<Self> {
        let scale = |v: usize, num: usize, den: usize, what: &str| -> Result<usize> {
            if (v * num) % den != 0 {
                return Err(CoreError::Config(format!(
                    "{what} {v} does not scale by {num}/{den} to an integer"
                )));
            }
            Ok(v * num / den)
        };
        let mut rows = Vec::with_capacity(PAPER_ROWS.len());
        for r in Self::paper().rows {
            rows.push(ContractRow {
                depth: scale(r.depth, cfg.conv1_depth, CANONICAL_CONV1_DEPTH, &r.name)?,
                height: scale(r.height, cfg.input_size, CANONICAL_INPUT, &r.name)?,
                width: scale(r.width, cfg.input_size, CANONICAL_INPUT, &r.name)?,
                name: r.name,
            });
        }
        Ok(Self { rows })
    }

    pub fn diff(&self, trace: &[StageShape]) -> Vec<RowDiff> {
        let mut diffs = Vec::new();
        let n = self.rows.len().max(trace.len());
        for i in 0..n {
            match (self.rows.get(i), trace.get(i)) {
                (Some(c), Some(t)) => {
                    if c.name != t.name || (c.depth, c.height, c.width) != (t.depth, t.height, t.width) {
                        diffs.push(RowDiff {
                            row: c.name.clone(),
                            expected: format!("{} {}x{}x{}", c.name, c.depth, c.height, c.width),
                            actual: format!("{} {t}", t.name),
                        });
                    }
                }
                (Some(c), None) => diffs.push(RowDiff {
                    row: c.name.clone(),
                    expected: format!("{}x{}x{}", c.depth, c.height, c.width),
                    actual: "missing".into(),
                }),
                (None, Some(t)) => diffs.push(RowDiff {
                    row: t.name.clone(),
                    expected: "no row".into(),
                    actual: t.to_string(),
                }),
                (None, None) => {}
            }
        }
        diffs
    }
}

/// Aligned text table in the paper's row order.
pub fn format_trace(cfg: &NetConfig, trace: &[StageShape]) -> String {
    let mut s = format!(
        "depth {} (repeats {:?}, {} weighted layers), width_scale {}\n",
        cfg.depth,
        cfg.stage_repeats(),
        cfg.weighted_layers(),
        cfg.width_scale
    );
    if cfg.depth == 101 && cfg.weighted_layers() != 101 {
        s.push_str(&format!(
            "note: repeats {:?} give {} weighted layers, not 101\n",
            cfg.stage_repeats(),
            cfg.weighted_layers()
        ));
    }
    s.push_str(&format!("{:<8} {:>14} {:>9}\n", "row", "feature size", "channels"));
    for r in trace {
        s.push_str(&format!("{:<8} {:>14} {:>9}\n", r.name, r.to_string(), r.channels));
    }
    s
}

/// Multi-scale maps from shallowest to deepest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<(String, Tensor)>,
}

impl FeaturePyramid {
    pub fn validate(&self) -> Result<()> {
        for pair in self.levels.windows(2) {
            let (a, b) = (pair[0].1.shape(), pair[1].1.shape());
            if b[2] > a[2] || b[3] > a[3] {
                return Err(CoreError::Shape(format!(
                    "level {} ({a:?}) is smaller than deeper level {} ({b:?})",
                    pair[0].0, pair[1].0
                )));
            }
        }
        Ok(())
    }
}

pub const LEVEL_NAMES: [&str; 4] = ["Block1", "Block2", "Block3", "Block4"];

/// Graph nodes of one backbone evaluation.
#[derive(Clone, Debug)]
pub struct BackboneNodes {
    /// Block outputs as `[N, D * C, H, W]`, shallowest first.
    pub levels: Vec<NodeId>,
    pub concat: Option<NodeId>,
}

/// One bottleneck unit on a depth-folded `[N * D, C, H, W]` node.
pub fn bottleneck(
    ctx: &mut Ctx<'_>,
    name: &str,
    x: NodeId,
    mid: usize,
    out: usize,
    stride: usize,
) -> Result<NodeId> {
    let c_in = ctx.g.shape(x)[1];
    let a = ctx.conv_bn_relu(&format!("{name}.reduce"), x, mid, (1, 1), (1, 1), (0, 0))?;
    let b = ctx.conv_bn_relu(&format!("{name}.conv"), a, mid, (3, 3), (stride, stride), (1, 1))?;
    // zero scale on the last norm: every unit starts as its shortcut
    let c = ctx.conv(&format!("{name}.expand"), b, out, (1, 1), (1, 1), (0, 0))?;
    let c = ctx.bn_scaled(&format!("{name}.expand.bn"), c, 0.0)?;
    let shortcut = if c_in != out || stride != 1 {
        ctx.conv_bn(&format!("{name}.proj"), x, out, (1, 1), (stride, stride), (0, 0))?
    } else {
        x
    };
    let sum = ctx.g.add(c, shortcut)?;
    Ok(ctx.g.relu(sum))
}

fn block(
    ctx: &mut Ctx<'_>,
    index: usize,
    x: NodeId,
    repeats: usize,
    mid: usize,
    out: usize,
    stride: usize,
) -> Result<NodeId> {
    let mut h = x;
    for u in 0..repeats {
        let s = if u == 0 { stride } else { 1 };
        h = bottleneck(ctx, &format!("backbone.block{}.{u}", index + 1), h, mid, out, s)?;
    }
    Ok(h)
}

fn fold_to_channels(ctx: &mut Ctx<'_>, x: NodeId, n: usize) -> Result<NodeId> {
    let s = ctx.g.shape(x).to_vec();
    let depth = s[0] / n;
    Ok(ctx.g.reshape(x, &[n, depth * s[1], s[2], s[3]])?)
}

/// Runs the backbone on `x` `[N, input_depth, S, S]`.
pub fn forward(ctx: &mut Ctx<'_>, cfg: &NetConfig, x: NodeId) -> Result<BackboneNodes> {
    let s = ctx.g.shape(x).to_vec();
    if s.len() != 4 || s[1] != cfg.input_depth {
        return Err(CoreError::Shape(format!(
            "backbone input {s:?}, expected [N, {}, H, W]",
            cfg.input_depth
        )));
    }
    let n = s[0];
    let [d1, d2, d3] = cfg.depth_extents();
    let c1 = cfg.base_width();
    let conv1 = ctx.conv("backbone.conv1", x, d1 * c1, (7, 7), (2, 2), (3, 3))?;
    let cs = ctx.g.shape(conv1).to_vec();
    let unfolded = ctx.g.reshape(conv1, &[n * d1, c1, cs[2], cs[3]])?;
    let bn1 = ctx.bn("backbone.conv1.bn", unfolded)?;
    let r1 = ctx.g.relu(bn1);
    let pool1 = ctx.g.maxpool(
        r1,
        PoolSpec {
            depth: d1,
            window: [3, 3, 3],
            stride: [2, 2, 2],
            pad: [1, 1, 1],
        },
    )?;
    let repeats = cfg.stage_repeats();
    let mids = cfg.mid_widths();
    let outs = cfg.out_widths();
    let b1 = block(ctx, 0, pool1, repeats[0], mids[0], outs[0], 1)?;
    let pool2 = ctx.g.maxpool(
        b1,
        PoolSpec {
            depth: d2,
            window: [3, 1, 1],
            stride: [2, 1, 1],
            pad: [1, 0, 0],
        },
    )?;
    let b2 = block(ctx, 1, pool2, repeats[1], mids[1], outs[1], 2)?;
    let b3 = block(ctx, 2, b2, repeats[2], mids[2], outs[2], 2)?;
    let b4 = block(ctx, 3, b3, repeats[3], mids[3], outs[3], 2)?;
    let mut levels = Vec::with_capacity(4);
    for node in [b1, b2, b3, b4] {
        levels.push(fold_to_channels(ctx, node, n)?);
    }
    let concat = if cfg.concat_head {
        let target = cs[2];
        let mut parts = Vec::with_capacity(4);
        for node in [pool2, b2, b3, b4] {
            let h = ctx.g.shape(node)[2];
            if target % h != 0 {
                return Err(CoreError::Shape(format!("cannot upsample {h} to {target}")));
            }
            parts.push(ctx.g.upsample_nearest(node, target / h)?);
        }
        let cat = ctx.g.concat_channels(&parts)?;
        debug_assert_eq!(ctx.g.shape(cat)[0], n * d3);
        Some(cat)
    } else {
        None
    };
    Ok(BackboneNodes { levels, concat })
}

/// Creates every backbone parameter by running one infer-mode pass on zeros.
pub fn init_params(store: &mut Store, cfg: &NetConfig, seeds: SeedStream) -> Result<()> {
    cfg.validate()?;
    let mut ctx = Ctx::initializing(store, seeds);
    let x = ctx
        .g
        .input(Tensor::zeros(&[1, cfg.input_depth, cfg.input_size, cfg.input_size]));
    forward(&mut ctx, cfg, x)?;
    Ok(())
}

/// Closed-form trainable parameter count of a backbone.
pub fn param_count(cfg: &NetConfig) -> usize {
    let [d1, ..] = cfg.depth_extents();
    let c1 = cfg.base_width();
    let mut total = d1 * c1 * cfg.input_depth * 49 + 2 * c1;
    let mut c_in = c1;
    for (b, &r) in cfg.stage_repeats().iter().enumerate() {
        let (mid, out) = (cfg.mid_widths()[b], cfg.out_widths()[b]);
        for u in 0..r {
            let stride = if u == 0 && b > 0 { 2 } else { 1 };
            total += c_in * mid + 9 * mid * mid + mid * out + 2 * (2 * mid + out);
            if c_in != out || stride != 1 {
                total += c_in * out + 2 * out;
            }
            c_in = out;
        }
    }
    total
}

/// Infer-mode pyramid for a batch `[N, input_depth, S, S]`.
pub fn extract_features(store: &mut Store, cfg: &NetConfig, batch: &Tensor) -> Result<FeaturePyramid> {
    let mut ctx = Ctx::new(store, Mode::Infer, SeedStream::new(0));
    let x = ctx.g.input(batch.clone());
    let nodes = forward(&mut ctx, cfg, x)?;
    let levels = nodes
        .levels
        .iter()
        .zip(LEVEL_NAMES)
        .map(|(&id, name)| (name.to_string(), ctx.g.value(id).clone()))
        .collect();
    let p = FeaturePyramid { levels };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeats_and_widths() {
        let mut c = NetConfig::canonical(50);
        assert_eq!(c.stage_repeats(), [3, 4, 6, 3]);
        assert_eq!(c.weighted_layers(), 50);
        c.width_scale = 0.125;
        assert_eq!(c.out_widths()[0], 32);
        c.depth = 101;
        assert_eq!(c.stage_repeats(), [6, 8, 12, 6]);
        assert_eq!(3 * c.stage_repeats().iter().sum::<usize>(), 96);
        c.width_scale = 0.1;
        assert!(c.validate().is_err());
        c.width_scale = 0.125;
        c.depth = 34;
        assert!(c.validate().is_err());
    }

    #[test]
    fn trace_rejects_tiny_input() {
        assert!(shape_trace(&NetConfig::canonical(50), (9, 0, 0)).is_err());
        assert!(shape_trace(&NetConfig::canonical(50), (3, 448, 448)).is_err());
    }
}
