//! Phantom datasets on disk and subject-level splits.

use std::fs;
use std::path::{Path, PathBuf};

use hepadet_tensor::SeedStream;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::phantom::{generate_phantom, GroundTruthLesion, PhantomSpec, PhaseVolumeSet};
use crate::volume::{Dims, Phase, Volume};

pub const MANIFEST_FORMAT: &str = "hepadet-dataset-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub index: usize,
    /// Volume sidecars, in phase order.
    pub volumes: Vec<String>,
    pub gt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub spec: PhantomSpec,
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub subject_id: String,
    pub dims: Dims,
    pub spacing: (f64, f64, f64),
    pub lesions: Vec<GroundTruthLesion>,
}

/// One subject loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub index: usize,
    pub volumes: [Volume; 3],
    pub lesions: Vec<GroundTruthLesion>,
}

impl Subject {
    pub fn volume(&self, p: Phase) -> &Volume {
        &self.volumes[p.index()]
    }

    pub fn from_phantom(set: PhaseVolumeSet, index: usize) -> Self {
        Self {
            id: set.subject_id,
            index,
            volumes: set.volumes,
            lesions: set.lesions,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes one subject's phase volumes and ground truth into `dir`.
pub fn write_subject(dir: &Path, set: &PhaseVolumeSet, index: usize) -> Result<SubjectEntry> {
    let mut volumes = Vec::with_capacity(3);
    for v in &set.volumes {
        let path = v.write(dir, &v.file_stem())?;
        volumes.push(file_name(&path));
    }
    let gt = format!("{}.gt.json", set.subject_id);
    let v0 = &set.volumes[0];
    write_json(
        &dir.join(&gt),
        &GroundTruthFile {
            subject_id: set.subject_id.clone(),
            dims: v0.dims(),
            spacing: v0.spacing(),
            lesions: set.lesions.clone(),
        },
    )?;
    Ok(SubjectEntry {
        id: set.subject_id.clone(),
        index,
        volumes,
        gt,
    })
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Generates `count` subjects into `dir` and writes the manifest.
pub fn write_dataset(dir: &Path, spec: &PhantomSpec, count: usize, seed: u64, threads: usize) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let entries = crate::parallel::map_indexed(count, threads, |i| {
        let set = generate_phantom(spec, seed, i)?;
        write_subject(dir, &set, i)
    })?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        seed,
        spec: spec.clone(),
        subjects: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let m: Manifest = read_json(&path)?;
    if m.format != MANIFEST_FORMAT {
        return Err(CoreError::Dataset(format!(
            "{} has format {:?}, expected {MANIFEST_FORMAT:?}",
            path.display(),
            m.format
        )));
    }
    Ok(m)
}

pub fn read_subject(dir: &Path, entry: &SubjectEntry) -> Result<Subject> {
    if entry.volumes.len() != 3 {
        return Err(CoreError::Dataset(format!("{} lists {} volumes, expected 3", entry.id, entry.volumes.len())));
    }
    let read = |name: &String| Volume::read(&dir.join(name));
    let volumes = [read(&entry.volumes[0])?, read(&entry.volumes[1])?, read(&entry.volumes[2])?];
    for (v, p) in volumes.iter().zip(Phase::ALL) {
        if v.phase() != p || v.subject_id() != entry.id || v.dims() != volumes[0].dims() {
            return Err(CoreError::Dataset(format!(
                "{}: volume {} is not the aligned {p} phase",
                entry.id,
                v.file_stem()
            )));
        }
    }
    let gt: GroundTruthFile = read_json(&dir.join(&entry.gt))?;
    if gt.subject_id != entry.id {
        return Err(CoreError::Dataset(format!("{} names subject {}", entry.gt, gt.subject_id)));
    }
    Ok(Subject {
        id: entry.id.clone(),
        index: entry.index,
        volumes,
        lesions: gt.lesions,
    })
}

/// Loads every subject listed in the manifest of `dir`.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Subject>)> {
    let m = read_manifest(dir)?;
    let subjects = m.subjects.iter().map(|e| read_subject(dir, e)).collect::<Result<Vec<_>>>()?;
    Ok((m, subjects))
}

/// Subject-level split; the train side gets `round(fraction * n)` subjects.
pub fn split_dataset<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CoreError::Config(format!("train fraction {train_fraction} must be in (0, 1)")));
    }
    let n = items.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(CoreError::Dataset(format!(
            "{n} subjects cannot be split at {train_fraction} with both sides non-empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStream::new(seed).rng("split"));
    let (a, b) = order.split_at(n_train);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| items[i].clone()).collect::<Vec<_>>()
    };
    Ok((pick(a), pick(b)))
}

/// Files a dataset directory is expected to contain.
pub fn dataset_files(dir: &Path, m: &Manifest) -> Vec<PathBuf> {
    let mut out = vec![dir.join(MANIFEST_FILE)];
    for e in &m.subjects {
        for v in &e.volumes {
            out.push(dir.join(v));
            out.push(dir.join(v.replace(".vol.json", ".vol.raw")));
        }
        out.push(dir.join(&e.gt));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_disjoint() {
        let ids: Vec<usize> = (0..10).collect();
        let (a, b) = split_dataset(&ids, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(split_dataset(&ids, 0.5, 3).unwrap(), (a, b));
        assert!(split_dataset(&ids[..1], 0.5, 3).is_err());
        assert!(split_dataset(&ids, 1.0, 3).is_err());
    }
}
