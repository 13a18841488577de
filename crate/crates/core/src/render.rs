//! 8-bit overlays: slices with burned-in boxes and class labels.

use std::path::Path;

use crate::boxes::RoiBox;
use crate::detect::Detection;
use crate::error::Result;
use crate::eval::GtBox;
use crate::preprocess::{unit_to_u8, write_pgm, Slab};

const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;

/// 3x5 bitmaps, one row per entry, most significant of the low 3 bits leftmost.
fn glyph(c: char) -> [u8; GLYPH_H] {
    match c {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b110, 0b001, 0b010, 0b001, 0b110],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b110],
        _ => [0; GLYPH_H],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    scale: usize,
}

impl Overlay {
    /// A `[0, 1]` plane, nearest-upscaled by `scale`.
    pub fn from_plane(plane: &[f64], height: usize, width: usize, scale: usize) -> Self {
        let scale = scale.max(1);
        let src = unit_to_u8(plane);
        let (w, h) = (width * scale, height * scale);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                pixels.push(src[(y / scale) * width + x / scale]);
            }
        }
        Self {
            width: w,
            height: h,
            pixels,
            scale,
        }
    }

    fn put(&mut self, x: i64, y: i64, v: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = v;
        }
    }

    /// Outline of a box given in source pixel coordinates.
    pub fn draw_box(&mut self, b: &RoiBox, value: u8, dashed: bool) {
        let s = self.scale as f64;
        let (x0, y0) = ((b.x0 * s).round() as i64, (b.y0 * s).round() as i64);
        let (x1, y1) = ((b.x1 * s).round() as i64 - 1, (b.y1 * s).round() as i64 - 1);
        for x in x0..=x1 {
            if !dashed || (x - x0) % 4 < 2 {
                self.put(x, y0, value);
                self.put(x, y1, value);
            }
        }
        for y in y0..=y1 {
            if !dashed || (y - y0) % 4 < 2 {
                self.put(x0, y, value);
                self.put(x1, y, value);
            }
        }
    }

    /// White text on a black strip, top-left at output pixel `(x, y)`.
    pub fn draw_text(&mut self, x: i64, y: i64, text: &str) {
        let n = text.chars().count() as i64;
        for yy in y - 1..y + GLYPH_H as i64 + 1 {
            for xx in x - 1..x + n * (GLYPH_W as i64 + 1) {
                self.put(xx, yy, 0);
            }
        }
        for (i, c) in text.chars().enumerate() {
            let rows = glyph(c.to_ascii_uppercase());
            let ox = x + i as i64 * (GLYPH_W as i64 + 1);
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                        self.put(ox + col as i64, y + r as i64, 255);
                    }
                }
            }
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_pgm(path, self.width, self.height, &self.pixels)
    }
}

/// Label burned next to a detection, e.g. `HCC 87`.
pub fn detection_label(d: &Detection) -> String {
    let name = d.class().map_or("BG".to_string(), |c| c.title().to_uppercase());
    format!("{name} {:.0}", 100.0 * d.score())
}

/// Center slice of `slab` with ground truth dashed and detections solid.
pub fn render_detections(slab: &Slab, detections: &[Detection], gts: &[GtBox], scale: usize) -> Overlay {
    let (h, w) = slab.size();
    let mut o = Overlay::from_plane(slab.center_channel(), h, w, scale);
    for g in gts {
        o.draw_box(&g.roi, 255, true);
    }
    for d in detections {
        o.draw_box(&d.roi, 255, false);
        let s = o.scale as f64;
        let ty = ((d.roi.y0 * s).round() as i64 - GLYPH_H as i64 - 2).max(1);
        o.draw_text((d.roi.x0 * s).round() as i64 + 1, ty, &detection_label(d));
    }
    o
}
