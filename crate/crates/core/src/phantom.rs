//! Seeded synthetic multi-phase abdominal volumes with labelled lesions.

use hepadet_tensor::SeedStream;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::RoiBox;
use crate::classes::LesionClass;
use crate::error::{CoreError, Result};
use crate::volume::{Dims, Phase, Volume};

const AIR_HU: f64 = -1000.0;
const PLACEMENT_ATTEMPTS: usize = 1000;

/// HU offsets relative to parenchyma at the non-contrast, arterial and delayed phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhancementCurve {
    pub offsets: [f64; 3],
    /// Offsets of the outer shell, when it enhances differently from the core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rim_offsets: Option<[f64; 3]>,
    /// Shell thickness as a fraction of the radius.
    #[serde(default)]
    pub rim_fraction: f64,
    /// Amplitude of smooth internal HU variation.
    #[serde(default)]
    pub heterogeneity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub radius_mm: (f64, f64),
    pub curve: EnhancementCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// `(sz, sy, sx)` in millimetres.
    pub spacing: (f64, f64, f64),
    pub lesions: (usize, usize),
    pub noise_sigma: f64,
    /// Acquisition time of each phase in seconds.
    pub phase_times: [f64; 3],
    pub parenchyma_hu: f64,
    pub texture_amplitude: f64,
    pub body_hu: f64,
    /// Radial deformation amplitude as a fraction of the radius.
    pub deformation: f64,
    pub cyst: ClassProfile,
    pub hemangioma: ClassProfile,
    pub hcc: ClassProfile,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: (24, 64, 64),
            spacing: (2.0, 1.0, 1.0),
            lesions: (1, 3),
            noise_sigma: 6.0,
            phase_times: [0.0, 25.0, 115.0],
            parenchyma_hu: 60.0,
            texture_amplitude: 6.0,
            body_hu: -80.0,
            deformation: 0.15,
            cyst: ClassProfile {
                radius_mm: (3.5, 6.5),
                curve: EnhancementCurve {
                    offsets: [-45.0, -45.0, -45.0],
                    rim_offsets: None,
                    rim_fraction: 0.0,
                    heterogeneity: 0.0,
                },
            },
            hemangioma: ClassProfile {
                radius_mm: (4.0, 7.0),
                curve: EnhancementCurve {
                    offsets: [-10.0, -10.0, 25.0],
                    rim_offsets: Some([-10.0, 70.0, 25.0]),
                    rim_fraction: 0.35,
                    heterogeneity: 0.0,
                },
            },
            hcc: ClassProfile {
                radius_mm: (4.0, 7.0),
                curve: EnhancementCurve {
                    offsets: [-10.0, 40.0, -20.0],
                    rim_offsets: None,
                    rim_fraction: 0.0,
                    heterogeneity: 8.0,
                },
            },
        }
    }
}

impl PhantomSpec {
    pub fn profile(&self, class: LesionClass) -> &ClassProfile {
        match class {
            LesionClass::Cyst => &self.cyst,
            LesionClass::Hemangioma => &self.hemangioma,
            LesionClass::Hcc => &self.hcc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.dims;
        if d == 0 || h < 8 || w < 8 {
            return Err(CoreError::Config(format!("phantom dims {:?} too small", self.dims)));
        }
        if !(self.spacing.0 > 0.0 && self.spacing.1 > 0.0 && self.spacing.2 > 0.0) {
            return Err(CoreError::Config("phantom spacing must be > 0".into()));
        }
        if self.lesions.0 > self.lesions.1 {
            return Err(CoreError::Config("lesion count range is inverted".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(CoreError::Config("noise sigma must be >= 0".into()));
        }
        if !(self.phase_times[0] < self.phase_times[1] && self.phase_times[1] < self.phase_times[2]) {
            return Err(CoreError::Config(format!(
                "phase times {:?} must increase non-contrast < arterial < delayed",
                self.phase_times
            )));
        }
        for c in LesionClass::ALL {
            let p = self.profile(c);
            if !(p.radius_mm.0 > 0.0 && p.radius_mm.0 <= p.radius_mm.1) {
                return Err(CoreError::Config(format!("radius range of {c} must be positive and ordered")));
            }
            if !(0.0..1.0).contains(&p.curve.rim_fraction) {
                return Err(CoreError::Config(format!("rim fraction of {c} must be in [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLesion {
    pub id: usize,
    pub class: LesionClass,
    /// `(z, y, x)` in voxel coordinates.
    pub center: [f64; 3],
    pub radius_mm: f64,
    /// One tight box per slice the lesion occupies, in slice order.
    pub boxes: Vec<RoiBox>,
}

impl GroundTruthLesion {
    /// Slice with the largest box area (ties: the lower slice).
    pub fn center_slice(&self) -> usize {
        let mut best = &self.boxes[0];
        for b in &self.boxes[1..] {
            if b.area() > best.area() {
                best = b;
            }
        }
        best.slice_index
    }

    pub fn box_on(&self, z: usize) -> Option<&RoiBox> {
        self.boxes.iter().find(|b| b.slice_index == z)
    }
}

/// Aligned phase volumes of one subject with its lesions.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseVolumeSet {
    pub subject_id: String,
    /// Indexed by [`Phase::index`].
    pub volumes: [Volume; 3],
    pub lesions: Vec<GroundTruthLesion>,
    /// Voxel labels: 0 outside lesions, `id + 1` inside lesion `id`.
    pub label_map: Vec<u8>,
}

impl PhaseVolumeSet {
    pub fn volume(&self, p: Phase) -> &Volume {
        &self.volumes[p.index()]
    }
}

/// Smooth field built from a few random plane waves, roughly in `[-1, 1]`.
struct Waves {
    terms: Vec<([f64; 3], f64)>,
}

impl Waves {
    fn new(rng: &mut impl Rng, count: usize, freq: (f64, f64)) -> Self {
        let terms = (0..count)
            .map(|_| {
                let dir = unit_vector(rng);
                let f = rng.random_range(freq.0..freq.1);
                ([dir[0] * f, dir[1] * f, dir[2] * f], rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { terms }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let n = self.terms.len().max(1) as f64;
        self.terms
            .iter()
            .map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin())
            .sum::<f64>()
            / n.sqrt()
    }
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0f64..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

struct LesionShape {
    class: LesionClass,
    /// Centre in millimetres.
    center: [f64; 3],
    radius: f64,
    deform: Waves,
    inner: Waves,
    amplitude: f64,
}

impl LesionShape {
    /// Normalized radial coordinate of millimetre point `p` (< 1 inside).
    fn rho(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if r == 0.0 {
            return 0.0;
        }
        let u = [d[0] / r, d[1] / r, d[2] / r];
        r / (self.radius * (1.0 + self.amplitude * self.deform.at(u)))
    }

    fn bound(&self) -> f64 {
        bound(self.radius, self.amplitude)
    }
}

/// Largest extent of a deformed sphere; the wave field never exceeds sqrt(3) for three terms.
fn bound(radius: f64, amplitude: f64) -> f64 {
    radius * (1.0 + amplitude * 3f64.sqrt())
}

/// Class of lesion `j` of subject `subject`: cycles through the classes so
/// that a dataset is balanced.
pub fn cycled_class(subject: usize, j: usize) -> LesionClass {
    LesionClass::ALL[(subject + j) % 3]
}

pub fn subject_name(index: usize) -> String {
    format!("subj{index:03}")
}

/// One subject; `index` names it and picks its lesion classes.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64, index: usize) -> Result<PhaseVolumeSet> {
    spec.validate()?;
    let seeds = SeedStream::new(seed).child_index("subject", index as u64);
    let mut rng = seeds.rng("anatomy");
    let (d, h, w) = spec.dims;
    let (sz, sy, sx) = spec.spacing;
    let subject_id = subject_name(index);
    let ext = [d as f64 * sz, h as f64 * sy, w as f64 * sx];
    let mm = |z: usize, y: usize, x: usize| [(z as f64 + 0.5) * sz, (y as f64 + 0.5) * sy, (x as f64 + 0.5) * sx];

    let body_center = [ext[0] / 2.0, ext[1] / 2.0, ext[2] / 2.0];
    let body_axes = [ext[1] * rng.random_range(0.44..0.48), ext[2] * rng.random_range(0.44..0.48)];
    let liver_center = [
        ext[0] * rng.random_range(0.47..0.53),
        ext[1] * rng.random_range(0.45..0.55),
        ext[2] * rng.random_range(0.45..0.55),
    ];
    let liver_axes = [
        ext[0] * rng.random_range(0.55..0.65),
        ext[1] * rng.random_range(0.33..0.38),
        ext[2] * rng.random_range(0.35..0.40),
    ];
    let texture = Waves::new(&mut rng, 6, (0.15, 0.45));
    let liver_rho = |p: [f64; 3]| {
        (0..3)
            .map(|a| ((p[a] - liver_center[a]) / liver_axes[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    };

    let count = rng.random_range(spec.lesions.0..=spec.lesions.1);
    let mut shapes: Vec<LesionShape> = Vec::with_capacity(count);
    for j in 0..count {
        let class = cycled_class(index, j);
        let prof = spec.profile(class);
        let radius = rng.random_range(prof.radius_mm.0..=prof.radius_mm.1);
        let deform = Waves::new(&mut rng, 3, (1.5, 3.0));
        let inner = Waves::new(&mut rng, 4, (0.4, 0.9));
        let b = bound(radius, spec.deformation);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = [
                rng.random_range(0.0..ext[0]),
                rng.random_range(0.0..ext[1]),
                rng.random_range(0.0..ext[2]),
            ];
            // whole lesion inside the liver and away from the volume faces
            let inside_liver = (0..3).all(|a| liver_axes[a] > b) && {
                let shrunk = (0..3)
                    .map(|a| ((c[a] - liver_center[a]) / (liver_axes[a] - b)).powi(2))
                    .sum::<f64>();
                shrunk <= 1.0
            };
            let inside_volume = (0..3).all(|a| c[a] - b >= 0.0 && c[a] + b <= ext[a]);
            let apart = shapes.iter().all(|o| {
                let dd = (0..3).map(|a| (o.center[a] - c[a]).powi(2)).sum::<f64>().sqrt();
                dd > o.bound() + b + 2.0
            });
            if inside_liver && inside_volume && apart {
                placed = Some(c);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            CoreError::Placement(format!(
                "lesion {j} ({class}, radius {radius:.1} mm) of {subject_id} not placed after {PLACEMENT_ATTEMPTS} attempts"
            ))
        })?;
        shapes.push(LesionShape {
            class,
            center,
            radius,
            deform,
            inner,
            amplitude: spec.deformation,
        });
    }

    let n = d * h * w;
    let mut label_map = vec![0u8; n];
    let mut base = vec![AIR_HU; n];
    // per voxel: (lesion index, normalized radius, internal pattern)
    let mut lesion_at: Vec<Option<(usize, f64, f64)>> = vec![None; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let p = mm(z, y, x);
                let by = (p[1] - body_center[1]) / body_axes[0];
                let bx = (p[2] - body_center[2]) / body_axes[1];
                if by * by + bx * bx > 1.0 {
                    continue;
                }
                base[i] = spec.body_hu;
                if liver_rho(p) > 1.0 {
                    continue;
                }
                base[i] = spec.parenchyma_hu + spec.texture_amplitude * texture.at(p);
                for (k, s) in shapes.iter().enumerate() {
                    let rho = s.rho(p);
                    if rho < 1.0 {
                        label_map[i] = (k + 1) as u8;
                        lesion_at[i] = Some((k, rho, s.inner.at(p)));
                        break;
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| CoreError::Config(e.to_string()))?;
    let volumes = Phase::ALL.map(|phase| {
        let mut rng = seeds.rng(&format!("noise.{}", phase.as_str()));
        let pi = phase.index();
        let hu: Vec<f64> = (0..n)
            .map(|i| {
                let mut v = base[i];
                if let Some((k, rho, pattern)) = lesion_at[i] {
                    let curve = &spec.profile(shapes[k].class).curve;
                    let off = match curve.rim_offsets {
                        Some(rim) if rho >= 1.0 - curve.rim_fraction => rim[pi],
                        _ => curve.offsets[pi],
                    };
                    v += off + curve.heterogeneity * pattern;
                }
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                v
            })
            .collect();
        Volume::from_hu(spec.dims, spec.spacing, phase, subject_id.clone(), &hu)
    });
    let [a, b, c] = volumes;
    let volumes = [a?, b?, c?];

    let lesions = shapes
        .iter()
        .enumerate()
        .map(|(k, s)| GroundTruthLesion {
            id: k,
            class: s.class,
            center: [s.center[0] / sz - 0.5, s.center[1] / sy - 0.5, s.center[2] / sx - 0.5],
            radius_mm: s.radius,
            boxes: tight_boxes(&label_map, spec.dims, (k + 1) as u8),
        })
        .collect::<Vec<_>>();
    if let Some(l) = lesions.iter().find(|l| l.boxes.is_empty()) {
        return Err(CoreError::Placement(format!("lesion {} of {subject_id} rendered no voxels", l.id)));
    }
    Ok(PhaseVolumeSet {
        subject_id,
        volumes,
        lesions,
        label_map,
    })
}

/// Tight per-slice boxes around voxels carrying `label`.
pub fn tight_boxes(labels: &[u8], dims: Dims, label: u8) -> Vec<RoiBox> {
    let (d, h, w) = dims;
    let mut out = Vec::new();
    for z in 0..d {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..h {
            for x in 0..w {
                if labels[(z * h + y) * w + x] == label {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        if let Some((x0, y0, x1, y1)) = bb {
            out.push(RoiBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64).on_slice(z));
        }
    }
    out
}
