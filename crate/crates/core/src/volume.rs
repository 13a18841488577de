//! HU volumes and their on-disk form (`<name>.vol.json` + `<name>.vol.raw`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    NonContrast,
    Arterial,
    Delayed,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::NonContrast, Phase::Arterial, Phase::Delayed];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::NonContrast => "non_contrast",
            Phase::Arterial => "arterial",
            Phase::Delayed => "delayed",
        }
    }

    /// Nominal acquisition time after injection, seconds.
    pub fn time_s(self) -> f64 {
        match self {
            Phase::NonContrast => 0.0,
            Phase::Arterial => 25.0,
            Phase::Delayed => 115.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown phase {s:?}")))
    }
}

/// Grid extents `(depth, height, width)`.
pub type Dims = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    /// `(sz, sy, sx)` in millimetres.
    spacing: (f64, f64, f64),
    phase: Phase,
    subject_id: String,
    voxels: Vec<i16>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    phase: Phase,
    subject_id: String,
    dtype: String,
}

impl Volume {
    pub fn new(
        dims: Dims,
        spacing: (f64, f64, f64),
        phase: Phase,
        subject_id: impl Into<String>,
        voxels: Vec<i16>,
    ) -> Result<Self> {
        let (d, h, w) = dims;
        if d == 0 || h == 0 || w == 0 {
            return Err(CoreError::Volume(format!("dims must be >= 1, got {dims:?}")));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(CoreError::Volume(format!("spacing must be > 0, got {spacing:?}")));
        }
        if voxels.len() != d * h * w {
            return Err(CoreError::Volume(format!(
                "{} voxels for dims {dims:?}",
                voxels.len()
            )));
        }
        if let Some(v) = voxels.iter().find(|v| !(HU_MIN..=HU_MAX).contains(*v)) {
            return Err(CoreError::Volume(format!("HU value {v} outside [{HU_MIN}, {HU_MAX}]")));
        }
        Ok(Self {
            dims,
            spacing,
            phase,
            subject_id: subject_id.into(),
            voxels,
        })
    }

    /// Builds a volume from real-valued HU, rounding and clamping to the valid range.
    pub fn from_hu(
        dims: Dims,
        spacing: (f64, f64, f64),
        phase: Phase,
        subject_id: impl Into<String>,
        hu: &[f64],
    ) -> Result<Self> {
        let voxels = hu
            .iter()
            .map(|v| v.round().clamp(f64::from(HU_MIN), f64::from(HU_MAX)) as i16)
            .collect();
        Self::new(dims, spacing, phase, subject_id, voxels)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims.0
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> i16 {
        let (_, h, w) = self.dims;
        self.voxels[(z * h + y) * w + x]
    }

    /// One axial slice as HU values, row-major.
    pub fn slice(&self, z: usize) -> Result<Vec<f64>> {
        let (d, h, w) = self.dims;
        if z >= d {
            return Err(CoreError::OutOfRange {
                what: "slice",
                index: z,
                len: d,
            });
        }
        Ok(self.voxels[z * h * w..(z + 1) * h * w]
            .iter()
            .map(|&v| f64::from(v))
            .collect())
    }

    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.subject_id, self.phase)
    }

    /// Writes `<dir>/<stem>.vol.json` and `<dir>/<stem>.vol.raw`; returns the sidecar path.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let json = dir.join(format!("{stem}.vol.json"));
        let raw = dir.join(format!("{stem}.vol.raw"));
        let (d, h, w) = self.dims;
        let meta = Sidecar {
            dims: [d, h, w],
            spacing: [self.spacing.0, self.spacing.1, self.spacing.2],
            phase: self.phase,
            subject_id: self.subject_id.clone(),
            dtype: "i16le".into(),
        };
        let bytes: Vec<u8> = self.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&raw, bytes).map_err(io_err(&raw))?;
        fs::write(&json, serde_json::to_string_pretty(&meta)? + "\n").map_err(io_err(&json))?;
        Ok(json)
    }

    /// Reads a volume from its `.vol.json` sidecar path.
    pub fn read(json: &Path) -> Result<Self> {
        let text = fs::read_to_string(json).map_err(io_err(json))?;
        let meta: Sidecar = serde_json::from_str(&text)?;
        if meta.dtype != "i16le" {
            return Err(CoreError::Volume(format!("unsupported dtype {}", meta.dtype)));
        }
        let name = json
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".vol.json"))
            .ok_or_else(|| CoreError::Volume(format!("{} is not a .vol.json file", json.display())))?;
        let raw = json.with_file_name(format!("{name}.vol.raw"));
        let bytes = fs::read(&raw).map_err(io_err(&raw))?;
        if bytes.len() % 2 != 0 {
            return Err(CoreError::Volume(format!("{} has odd length", raw.display())));
        }
        let voxels = bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect();
        let [d, h, w] = meta.dims;
        let [sz, sy, sx] = meta.spacing;
        Self::new((d, h, w), (sz, sy, sx), meta.phase, meta.subject_id, voxels)
    }
}
