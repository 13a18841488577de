//! Windowing, resampling, 2.5D slab assembly, augmentation and PGM export.

use std::fs;
use std::io::Write;
use std::path::Path;

use hepadet_tensor::{SeedStream, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::RoiBox;
use crate::error::{io_err, CoreError, Result};
use crate::volume::{Phase, Volume};

/// Slices per slab: the center slice and four neighbours on each side.
pub const SLAB_DEPTH: usize = 9;
pub const SLAB_HALF: usize = SLAB_DEPTH / 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub width: f64,
    pub level: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            width: 80.0,
            level: 150.0,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.level.is_finite() {
            return Err(CoreError::Config(format!("window width must be > 0, got {self:?}")));
        }
        Ok(())
    }

    pub fn lower(&self) -> f64 {
        self.level - self.width / 2.0
    }
}

/// Display value of one HU sample (rounding half away from zero).
pub fn window_value(hu: f64, spec: &WindowSpec) -> u8 {
    ((hu - spec.lower()) * 255.0 / spec.width).round().clamp(0.0, 255.0) as u8
}

pub fn window_to_u8(slice: &[f64], spec: &WindowSpec) -> Vec<u8> {
    slice.iter().map(|&hu| window_value(hu, spec)).collect()
}

/// Row-major 2D grid of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoreError::Shape(format!(
                "{} values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel-center coordinates, clamped to the grid.
    fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
        let bottom = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Corner-aligned source coordinate for output index `i` of `n` over a source of `m`.
fn corner_aligned(i: usize, n: usize, m: usize) -> f64 {
    if n == 1 {
        (m - 1) as f64 / 2.0
    } else {
        i as f64 * (m - 1) as f64 / (n - 1) as f64
    }
}

/// Bilinear resampling with corners mapped onto corners.
pub fn resample_slice(slice: &Grid, target: (usize, usize)) -> Result<Grid> {
    if slice.height < 2 || slice.width < 2 {
        return Err(CoreError::Degenerate(format!(
            "resample needs at least 2x2, got {}x{}",
            slice.height, slice.width
        )));
    }
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(CoreError::Degenerate(format!("target {target:?}")));
    }
    if (th, tw) == (slice.height, slice.width) {
        return Ok(slice.clone());
    }
    let mut data = Vec::with_capacity(th * tw);
    for i in 0..th {
        let y = corner_aligned(i, th, slice.height);
        for j in 0..tw {
            data.push(slice.sample(y, corner_aligned(j, tw, slice.width)));
        }
    }
    Grid::new(th, tw, data)
}

/// Maps a pixel-edge coordinate through corner-aligned resampling from `m` to `n` samples.
pub fn resample_coord(v: f64, m: usize, n: usize) -> f64 {
    if m < 2 || n < 2 {
        return v * n as f64 / m as f64;
    }
    (v - 0.5) * (n - 1) as f64 / (m - 1) as f64 + 0.5
}

/// Nine windowed slices around `center_index`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slab {
    /// `[9, S, S]`.
    pub channels: Tensor,
    pub center_index: usize,
    pub subject_id: String,
    pub phase: Phase,
}

impl Slab {
    pub fn size(&self) -> (usize, usize) {
        let s = self.channels.shape();
        (s[1], s[2])
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let (h, w) = self.size();
        &self.channels.data()[c * h * w..(c + 1) * h * w]
    }

    pub fn center_channel(&self) -> &[f64] {
        self.channel(SLAB_HALF)
    }
}

/// Slice indices feeding a slab, with edge replication at the volume ends.
pub fn slab_indices(center: usize, depth: usize) -> [usize; SLAB_DEPTH] {
    let mut out = [0; SLAB_DEPTH];
    for (k, o) in out.iter_mut().enumerate() {
        let z = center as i64 + k as i64 - SLAB_HALF as i64;
        *o = z.clamp(0, depth as i64 - 1) as usize;
    }
    out
}

/// One slice windowed to `[0, 1]` (via the 8-bit mapping) and resampled to `target`.
pub fn prepare_slice(
    volume: &Volume,
    z: usize,
    window: &WindowSpec,
    target: (usize, usize),
) -> Result<Vec<f64>> {
    let (_, h, w) = volume.dims();
    let hu = volume.slice(z)?;
    let unit: Vec<f64> = window_to_u8(&hu, window)
        .into_iter()
        .map(|v| f64::from(v) / 255.0)
        .collect();
    if (h, w) == target {
        return Ok(unit);
    }
    Ok(resample_slice(&Grid::new(h, w, unit)?, target)?.data)
}

pub fn assemble_slab(
    volume: &Volume,
    center: usize,
    window: &WindowSpec,
    target: (usize, usize),
) -> Result<Slab> {
    window.validate()?;
    let d = volume.depth();
    if center >= d {
        return Err(CoreError::OutOfRange {
            what: "slab center",
            index: center,
            len: d,
        });
    }
    let mut data = Vec::with_capacity(SLAB_DEPTH * target.0 * target.1);
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; d];
    for z in slab_indices(center, d) {
        if cache[z].is_none() {
            cache[z] = Some(prepare_slice(volume, z, window, target)?);
        }
        data.extend_from_slice(cache[z].as_ref().expect("filled above"));
    }
    Ok(Slab {
        channels: Tensor::new(vec![SLAB_DEPTH, target.0, target.1], data)?,
        center_index: center,
        subject_id: volume.subject_id().to_string(),
        phase: volume.phase(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub flip_prob: f64,
    pub scale_prob: f64,
    pub scale_range: (f64, f64),
    pub shift_prob: f64,
    pub max_shift: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_prob: 0.5,
            scale_range: (0.8, 1.2),
            shift_prob: 0.5,
            max_shift: 0.05,
        }
    }
}

/// The concrete transforms drawn for one augmentation call.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentPlan {
    pub flip: bool,
    pub scale: Option<f64>,
    pub shift: Option<f64>,
}

impl AugmentPlan {
    pub fn draw(spec: &AugmentSpec, seed: u64) -> Self {
        let mut rng = SeedStream::new(seed).rng("augment");
        let flip = rng.random::<f64>() < spec.flip_prob;
        let scale_u: f64 = rng.random();
        let scale_v: f64 = rng.random();
        let shift_u: f64 = rng.random();
        let shift_v: f64 = rng.random();
        let (lo, hi) = spec.scale_range;
        Self {
            flip,
            scale: (scale_u < spec.scale_prob).then(|| lo + (hi - lo) * scale_v),
            shift: (shift_u < spec.shift_prob).then(|| spec.max_shift * (2.0 * shift_v - 1.0)),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.scale.is_none() && self.shift.is_none()
    }

    /// Geometry of the plan applied to one box on a `size` slab; `None` when
    /// the box leaves the slab.
    pub fn transform_box(&self, b: &RoiBox, size: (usize, usize)) -> Option<RoiBox> {
        let mut out = *b;
        if self.flip {
            out = flip_box(&out, size.1 as f64);
        }
        match self.scale {
            Some(s) => scale_box(&out, s, size).clipped(size.1 as f64, size.0 as f64),
            None => Some(out),
        }
    }
}

pub fn flip_box(b: &RoiBox, width: f64) -> RoiBox {
    RoiBox {
        x0: width - b.x1,
        x1: width - b.x0,
        ..*b
    }
}

/// Isotropic scaling about the image center, in pixel-edge coordinates.
pub fn scale_box(b: &RoiBox, factor: f64, size: (usize, usize)) -> RoiBox {
    let (ch, cw) = (size.0 as f64 / 2.0, size.1 as f64 / 2.0);
    RoiBox {
        x0: cw + (b.x0 - cw) * factor,
        x1: cw + (b.x1 - cw) * factor,
        y0: ch + (b.y0 - ch) * factor,
        y1: ch + (b.y1 - ch) * factor,
        ..*b
    }
}

fn scale_plane(plane: &Grid, factor: f64) -> Vec<f64> {
    let (ch, cw) = (plane.height as f64 / 2.0, plane.width as f64 / 2.0);
    let mut out = Vec::with_capacity(plane.data.len());
    for i in 0..plane.height {
        let y = ch + (i as f64 + 0.5 - ch) / factor - 0.5;
        for j in 0..plane.width {
            let x = cw + (j as f64 + 0.5 - cw) / factor - 0.5;
            out.push(plane.sample(y, x));
        }
    }
    out
}

/// Applies a drawn plan to a slab and its boxes. Boxes are clipped to the slab
/// and dropped when nothing of them remains.
pub fn apply_plan(slab: &Slab, boxes: &[RoiBox], plan: &AugmentPlan) -> Result<(Slab, Vec<RoiBox>)> {
    if plan.is_identity() {
        return Ok((slab.clone(), boxes.to_vec()));
    }
    let (h, w) = slab.size();
    let c = slab.channels.shape()[0];
    let mut data = slab.channels.data().to_vec();
    let out_boxes = boxes.iter().filter_map(|b| plan.transform_box(b, (h, w))).collect();
    if plan.flip {
        for plane in data.chunks_mut(h * w) {
            for row in plane.chunks_mut(w) {
                row.reverse();
            }
        }
    }
    if let Some(s) = plan.scale {
        let mut scaled = Vec::with_capacity(data.len());
        for plane in data.chunks(h * w) {
            scaled.extend(scale_plane(&Grid::new(h, w, plane.to_vec())?, s));
        }
        data = scaled;
    }
    if let Some(delta) = plan.shift {
        for v in &mut data {
            *v = (*v + delta).clamp(0.0, 1.0);
        }
    }
    Ok((
        Slab {
            channels: Tensor::new(vec![c, h, w], data)?,
            ..slab.clone()
        },
        out_boxes,
    ))
}

pub fn augment(
    slab: &Slab,
    boxes: &[RoiBox],
    spec: &AugmentSpec,
    seed: u64,
) -> Result<(Slab, Vec<RoiBox>)> {
    apply_plan(slab, boxes, &AugmentPlan::draw(spec, seed))
}

/// Binary PGM (P5), 8-bit.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(CoreError::Shape(format!(
            "{} pixels for {width}x{height}",
            pixels.len()
        )));
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    write!(f, "P5\n{width} {height}\n255\n").map_err(io_err(path))?;
    f.write_all(pixels).map_err(io_err(path))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CoreError::Dataset(format!("{}: truncated PGM header", path.display())));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    let bad = || CoreError::Dataset(format!("{}: not an 8-bit P5 file", path.display()));
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(bad)?.to_vec();
    Ok((w, h, pixels))
}

/// A `[0, 1]` plane as 8-bit pixels.
pub fn unit_to_u8(plane: &[f64]) -> Vec<u8> {
    plane
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}
