//! Relation energy on phantoms: how strongly the cross-phase relation output
//! departs from its spatial mean inside a lesion.

use hepadet_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::classes::LesionClass;
use crate::error::{CoreError, Result};
use crate::phantom::{generate_phantom, PhantomSpec, PhaseVolumeSet};
use crate::preprocess::{prepare_slice, WindowSpec};
use crate::relation::{relate, RelationSpec, RelationWeights};
use crate::volume::Phase;

/// Side of the square patch around a lesion the relation runs on.
pub const PATCH: usize = 24;
/// Subject index whose cycled classes are HCC then cyst.
const HCC_CYST_SUBJECT: usize = 2;

/// Squared distance of every position of a `[C, H, W]` map from the map's
/// spatial mean, summed over channels.
pub fn energy_map(out: &Tensor) -> Result<Vec<f64>> {
    let s = out.shape();
    if s.len() != 3 {
        return Err(CoreError::Shape(format!("energy map needs [C,H,W], got {s:?}")));
    }
    let p = s[1] * s[2];
    let mut e = vec![0.0; p];
    for ch in out.data().chunks(p) {
        let mean = ch.iter().sum::<f64>() / p as f64;
        for (a, v) in e.iter_mut().zip(ch) {
            *a += (v - mean) * (v - mean);
        }
    }
    Ok(e)
}

/// Contrast enhancement of each phase over non-contrast on one slice.
fn enhancement(set: &PhaseVolumeSet, z: usize, window: &WindowSpec, phase: Phase) -> Result<Vec<f64>> {
    let (_, h, w) = set.volumes[0].dims();
    let base = prepare_slice(set.volume(Phase::NonContrast), z, window, (h, w))?;
    let v = prepare_slice(set.volume(phase), z, window, (h, w))?;
    Ok(v.iter().zip(&base).map(|(a, b)| a - b).collect())
}

fn crop(plane: &[f64], w: usize, y0: usize, x0: usize) -> Tensor {
    Tensor::from_fn(&[1, PATCH, PATCH], |i| plane[(y0 + i / PATCH) * w + x0 + i % PATCH])
}

/// Energy map of one lesion's patch: arterial enhancement relates to delayed
/// enhancement with unit weights. Also returns the patch mask of the lesion.
pub fn lesion_energy(set: &PhaseVolumeSet, lesion: usize, window: &WindowSpec, spec: &RelationSpec) -> Result<(Vec<f64>, Vec<bool>)> {
    let l = set.lesions.get(lesion).ok_or(CoreError::OutOfRange {
        what: "lesion",
        index: lesion,
        len: set.lesions.len(),
    })?;
    let (_, h, w) = set.volumes[0].dims();
    if h < PATCH || w < PATCH {
        return Err(CoreError::Config(format!("slices {h}x{w} smaller than the {PATCH} patch")));
    }
    let z = l.center_slice();
    let corner = |c: f64, n: usize| (c.round() as i64 - PATCH as i64 / 2).clamp(0, (n - PATCH) as i64) as usize;
    let (y0, x0) = (corner(l.center[1], h), corner(l.center[2], w));
    let x = crop(&enhancement(set, z, window, Phase::Arterial)?, w, y0, x0);
    let y = crop(&enhancement(set, z, window, Phase::Delayed)?, w, y0, x0);
    let one = Tensor::ones(&[1, 1]);
    let weights = RelationWeights {
        theta: one.clone(),
        phi: one.clone(),
        g: one,
    };
    let e = energy_map(&relate(&x, &y, spec, &weights)?)?;
    let label = (l.id + 1) as u8;
    let mask = (0..PATCH * PATCH)
        .map(|i| set.label_map[(z * h + y0 + i / PATCH) * w + x0 + i % PATCH] == label)
        .collect();
    Ok((e, mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrial {
    pub seed: u64,
    /// Mean energy over the HCC lesion.
    pub hcc: f64,
    /// Mean energy over the cyst lesion.
    pub cyst: f64,
}

fn region_mean(e: &[f64], mask: &[bool]) -> Result<f64> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(CoreError::Degenerate("lesion has no pixels in its patch".into()));
    }
    Ok(e.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() / n as f64)
}

/// A phantom from `spec` carrying exactly one HCC and one cyst lesion.
pub fn hcc_cyst_phantom(spec: &PhantomSpec, seed: u64) -> Result<PhaseVolumeSet> {
    let mut s = spec.clone();
    s.lesions = (2, 2);
    generate_phantom(&s, seed, HCC_CYST_SUBJECT)
}

/// Mean relation energy over the HCC and the cyst lesion of one phantom.
pub fn energy_trial(spec: &PhantomSpec, window: &WindowSpec, relation: &RelationSpec, seed: u64) -> Result<EnergyTrial> {
    let set = hcc_cyst_phantom(spec, seed)?;
    let find = |c: LesionClass| {
        set.lesions
            .iter()
            .position(|l| l.class == c)
            .ok_or_else(|| CoreError::Placement(format!("phantom has no {c} lesion")))
    };
    let mean = |k: usize| -> Result<f64> {
        let (e, mask) = lesion_energy(&set, k, window, relation)?;
        region_mean(&e, &mask)
    };
    Ok(EnergyTrial {
        seed,
        hcc: mean(find(LesionClass::Hcc)?)?,
        cyst: mean(find(LesionClass::Cyst)?)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrend {
    pub trials: Vec<EnergyTrial>,
}

impl EnergyTrend {
    pub fn hcc_higher(&self) -> usize {
        self.trials.iter().filter(|t| t.hcc > t.cyst).count()
    }

    pub fn fraction(&self) -> f64 {
        self.hcc_higher() as f64 / self.trials.len().max(1) as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "Relation energy is higher on the HCC lesion than on the cyst in {}/{} phantoms.",
            self.hcc_higher(),
            self.trials.len()
        )
    }
}

pub fn energy_trend(
    spec: &PhantomSpec,
    window: &WindowSpec,
    relation: &RelationSpec,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<EnergyTrend> {
    let trials = seeds
        .into_iter()
        .map(|s| energy_trial(spec, window, relation, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnergyTrend { trials })
}
