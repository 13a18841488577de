use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hepadet_core::ablation::{paper_variants, run_ablation, variant_label};
use hepadet_core::backbone::{format_trace, shape_trace, Contract};
use hepadet_core::boxes::{iou, RoiBox};
use hepadet_core::config::RunConfig;
use hepadet_core::dataset::{read_dataset, read_json, split_dataset, write_dataset, Subject};
use hepadet_core::energy::{energy_trend, hcc_cyst_phantom, lesion_energy, PATCH};
use hepadet_core::eval::{EvalRow, EvalTable};
use hepadet_core::infer::{eval_slices, evaluate, run_subject, ImageResult};
use hepadet_core::parallel::{map_indexed, thread_count};
use hepadet_core::params::Store;
use hepadet_core::phantom::{generate_phantom, PhantomSpec};
use hepadet_core::preprocess::{assemble_slab, slab_indices, Slab, SLAB_DEPTH};
use hepadet_core::render::{detection_label, render_detections, Overlay};
use hepadet_core::train::train as fit;
use hepadet_core::volume::Phase;
use hepadet_tensor::checkpoint;
use serde::Serialize;

use crate::{create_out, require_out, set_dataset, write_snapshot, write_text, CliError, CliResult, Split};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn json_line<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string(v).map_err(runtime)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(runtime)?;
    text.push('\n');
    write_text(path, &text)
}

fn make_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
}

fn load_subjects(dir: &Path) -> CliResult<Vec<Subject>> {
    let (_, subjects) = read_dataset(dir).map_err(|e| CliError::Runtime(format!("dataset {}: {e}", dir.display())))?;
    Ok(subjects)
}

fn pick_split(cfg: &RunConfig, subjects: Vec<Subject>, split: Split) -> CliResult<Vec<Subject>> {
    if split == Split::All {
        return Ok(subjects);
    }
    let (train, test) = split_dataset(&subjects, cfg.data.train_fraction(), cfg.seed)?;
    Ok(if split == Split::Train { train } else { test })
}

fn load_store(path: &Path) -> CliResult<Store> {
    if !path.is_file() {
        return Err(CliError::Runtime(format!("missing checkpoint {}", path.display())));
    }
    let tensors = checkpoint::load(path).map_err(|e| CliError::Runtime(format!("checkpoint {}: {e}", path.display())))?;
    Ok(Store::from_tensors(tensors)?)
}

fn reference_index(cfg: &RunConfig) -> usize {
    let r = cfg.reference_phase();
    cfg.phases().iter().position(|&p| p == r).unwrap_or(0)
}

pub fn phantom(mut cfg: RunConfig, spec: Option<&Path>, count: Option<usize>) -> CliResult<()> {
    let out = require_out(&cfg)?;
    if let Some(p) = spec {
        cfg.phantom = read_json::<PhantomSpec>(p).map_err(|e| CliError::Validation(format!("phantom spec {}: {e}", p.display())))?;
    }
    cfg.validate()?;
    let count = count.unwrap_or_else(|| cfg.data.total());
    let m = write_dataset(&out, &cfg.phantom, count, cfg.seed, thread_count())?;
    write_snapshot(&out, &cfg)?;
    println!("wrote {} subjects to {}", m.subjects.len(), out.display());
    Ok(())
}

/// The nine slab channels tiled three by three.
fn montage(slab: &Slab) -> (usize, usize, Vec<u8>) {
    let (h, w) = slab.size();
    let side = (SLAB_DEPTH as f64).sqrt() as usize;
    let (mh, mw) = (h * side, w * side);
    let mut px = vec![0u8; mh * mw];
    for c in 0..SLAB_DEPTH {
        let (ty, tx) = (c / side, c % side);
        for (i, v) in slab.channel(c).iter().enumerate() {
            let (y, x) = (ty * h + i / w, tx * w + i % w);
            px[y * mw + x] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    (mw, mh, px)
}

#[derive(Serialize)]
struct SlabRecord {
    subject: String,
    phase: Phase,
    center: usize,
    slices: [usize; SLAB_DEPTH],
    file: String,
}

pub fn preprocess(mut cfg: RunConfig, dataset: &Option<PathBuf>, subject: Option<&str>) -> CliResult<()> {
    let dir = set_dataset(&mut cfg, dataset)?;
    let out = require_out(&cfg)?;
    cfg.validate()?;
    let subjects = load_subjects(&dir)?;
    let chosen: Vec<&Subject> = subjects.iter().filter(|s| subject.is_none_or(|id| s.id == id)).collect();
    if chosen.is_empty() {
        return Err(CliError::Usage(format!("no subject {:?} in {}", subject.unwrap_or(""), dir.display())));
    }
    let target = (cfg.data.slab_size, cfg.data.slab_size);
    let mut records = Vec::new();
    for s in chosen {
        let depth = s.volumes[0].depth();
        let mut slices = eval_slices(s);
        if slices.is_empty() {
            slices.push(depth / 2);
        }
        for z in slices {
            for p in Phase::ALL {
                let slab = assemble_slab(s.volume(p), z, &cfg.window, target)?;
                let (w, h, px) = montage(&slab);
                let file = format!("{}_z{z:03}_{}.pgm", s.id, p.as_str());
                hepadet_core::preprocess::write_pgm(&out.join(&file), w, h, &px)?;
                records.push(SlabRecord {
                    subject: s.id.clone(),
                    phase: p,
                    center: z,
                    slices: slab_indices(z, depth),
                    file,
                });
            }
        }
    }
    write_json(&out.join("slabs.json"), &records)?;
    write_snapshot(&out, &cfg)?;
    println!("wrote {} slab montages to {}", records.len(), out.display());
    Ok(())
}

pub fn trace(mut cfg: RunConfig, contract: Option<&Path>, depth: Option<u32>) -> CliResult<()> {
    if let Some(d) = depth {
        cfg.net.depth = d;
    }
    cfg.net.validate()?;
    let n = cfg.net.input_size;
    let rows = shape_trace(&cfg.net, (cfg.net.input_depth, n, n))?;
    print!("{}", format_trace(&cfg.net, &rows));
    let expected = match contract {
        Some(p) => read_json::<Contract>(p).map_err(|e| CliError::Validation(format!("contract {}: {e}", p.display())))?,
        None => Contract::for_config(&cfg.net)?,
    };
    if let Some(out) = create_out(&cfg)? {
        write_json(&out.join("trace.json"), &rows)?;
        write_snapshot(&out, &cfg)?;
    }
    let diffs = expected.diff(&rows);
    if diffs.is_empty() {
        println!("contract: {} rows match", expected.rows.len());
        return Ok(());
    }
    let mut msg = format!("{} row(s) differ from the contract", diffs.len());
    for d in &diffs {
        let _ = write!(msg, "\n  {d}");
    }
    Err(CliError::Validation(msg))
}

pub fn train(mut cfg: RunConfig, dataset: &Option<PathBuf>, epochs: Option<usize>, deterministic: bool) -> CliResult<()> {
    if let Some(e) = epochs {
        cfg.optimizer.epochs = e;
    }
    let dir = set_dataset(&mut cfg, dataset)?;
    let out = require_out(&cfg)?;
    cfg.validate()?;
    let subjects = pick_split(&cfg, load_subjects(&dir)?, Split::Train)?;
    write_snapshot(&out, &cfg)?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;
    let start = Instant::now();
    let mut log_err = None;
    let outcome = fit(&cfg, &subjects, |e| {
        let mut v = serde_json::to_value(e).expect("epoch log serializes");
        if !deterministic {
            v["elapsed_s"] = serde_json::json!(start.elapsed().as_secs_f64());
        }
        let line = v.to_string();
        println!("{line}");
        if let Err(err) = writeln!(log, "{line}") {
            log_err.get_or_insert(err);
        }
    })
    .map_err(|e| CliError::Runtime(format!("training aborted: {e}")))?;
    if let Some(e) = log_err {
        return Err(CliError::Runtime(format!("{}: {e}", log_path.display())));
    }
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &outcome.store.to_tensors()).map_err(runtime)?;
    println!(
        "trained {} steps on {} subjects, final loss {}; checkpoint {}",
        outcome.steps,
        subjects.len(),
        outcome.final_loss,
        ckpt.display()
    );
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
        Split::All => "all",
    }
}

#[derive(Serialize)]
struct EvalReport<'a> {
    split: &'static str,
    subjects: usize,
    table: &'a EvalTable,
}

pub fn eval(mut cfg: RunConfig, dataset: &Option<PathBuf>, ckpt: &Path, split: Split) -> CliResult<()> {
    let dir = set_dataset(&mut cfg, dataset)?;
    let out = create_out(&cfg)?;
    cfg.validate()?;
    let subjects = pick_split(&cfg, load_subjects(&dir)?, split)?;
    let store = load_store(ckpt)?;
    let (counts, _) = evaluate(&store, &cfg, &subjects, thread_count())?;
    let mut table = EvalTable::new(
        cfg.thresholds.eval_iou,
        vec![format!("Split: {} ({} subjects).", split_name(split), subjects.len())],
    );
    table.rows.push(EvalRow::from_counts(variant_label(&cfg), counts));
    let text = table.to_text();
    print!("{text}");
    println!("recall {:.4}", counts.recall());
    if let Some(out) = out {
        write_text(&out.join("eval.txt"), &text)?;
        write_json(
            &out.join("eval.json"),
            &EvalReport {
                split: split_name(split),
                subjects: subjects.len(),
                table: &table,
            },
        )?;
        write_snapshot(&out, &cfg)?;
    }
    Ok(())
}

/// Detections that overlap no ground truth of their own class at `threshold`.
pub fn false_positives(r: &ImageResult, threshold: f64) -> Vec<usize> {
    (0..r.detections.len())
        .filter(|&k| {
            let d = &r.detections[k];
            !r.gts.iter().any(|g| Some(g.class) == d.class() && iou(&d.roi, &g.roi) >= threshold)
        })
        .collect()
}

fn crop_overlay(slab: &Slab, b: &RoiBox, scale: usize) -> Overlay {
    let (h, w) = slab.size();
    let margin = 4.0;
    let x0 = (b.x0 - margin).floor().max(0.0) as usize;
    let y0 = (b.y0 - margin).floor().max(0.0) as usize;
    let x1 = ((b.x1 + margin).ceil() as usize).clamp(x0 + 1, w);
    let y1 = ((b.y1 + margin).ceil() as usize).clamp(y0 + 1, h);
    let plane = slab.center_channel();
    let mut crop = Vec::with_capacity((x1 - x0) * (y1 - y0));
    for y in y0..y1 {
        crop.extend_from_slice(&plane[y * w + x0..y * w + x1]);
    }
    let mut o = Overlay::from_plane(&crop, y1 - y0, x1 - x0, scale);
    let local = RoiBox::new(b.x0 - x0 as f64, b.y0 - y0 as f64, b.x1 - x0 as f64, b.y1 - y0 as f64);
    o.draw_box(&local, 255, false);
    o
}

pub fn infer(
    mut cfg: RunConfig,
    dataset: &Option<PathBuf>,
    ckpt: &Path,
    split: Split,
    min_score: Option<f64>,
    scale: usize,
) -> CliResult<()> {
    if let Some(m) = min_score {
        cfg.thresholds.min_score = m;
    }
    let dir = set_dataset(&mut cfg, dataset)?;
    let out = require_out(&cfg)?;
    cfg.validate()?;
    let subjects = pick_split(&cfg, load_subjects(&dir)?, split)?;
    let mut store = load_store(ckpt)?;
    let overlays = out.join("overlays");
    let gallery = out.join("false_positives");
    make_dir(&overlays)?;
    make_dir(&gallery)?;
    let reference = reference_index(&cfg);
    let mut lines = String::new();
    let (mut images, mut detections, mut fps) = (0, 0, 0);
    for s in &subjects {
        let mut slices = eval_slices(s);
        if slices.is_empty() {
            slices.push(s.volumes[0].depth() / 2);
        }
        for (sample, r) in run_subject(&mut store, &cfg, s, &slices)? {
            lines.push_str(&json_line(&r)?);
            lines.push('\n');
            let slab = &sample.slabs[reference];
            let stem = format!("{}_z{:03}", r.subject_id, r.slice);
            render_detections(slab, &r.detections, &r.gts, scale).write(&overlays.join(format!("{stem}.pgm")))?;
            for k in false_positives(&r, cfg.thresholds.eval_iou) {
                let d = &r.detections[k];
                let mut o = crop_overlay(slab, &d.roi, scale);
                o.draw_text(2, 2, &detection_label(d));
                o.write(&gallery.join(format!("{stem}_d{k}.pgm")))?;
                fps += 1;
            }
            images += 1;
            detections += r.detections.len();
        }
    }
    write_text(&out.join("detections.jsonl"), &lines)?;
    write_snapshot(&out, &cfg)?;
    println!("images {images} detections {detections} false positives {fps}");
    Ok(())
}

fn energy_pgm(path: &Path, map: &[f64], scale: usize) -> CliResult<()> {
    let max = map.iter().copied().fold(0.0, f64::max);
    let unit: Vec<f64> = map.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
    Ok(Overlay::from_plane(&unit, PATCH, PATCH, scale).write(path)?)
}

#[derive(Serialize)]
struct AblationReport<'a> {
    table: &'a EvalTable,
    energy: &'a hepadet_core::energy::EnergyTrend,
}

pub fn ablation(
    mut cfg: RunConfig,
    dataset: &Option<PathBuf>,
    epochs: Option<usize>,
    trend_seeds: u64,
    deterministic: bool,
) -> CliResult<()> {
    if let Some(e) = epochs {
        cfg.optimizer.epochs = e;
    }
    if dataset.is_some() {
        set_dataset(&mut cfg, dataset)?;
    }
    let out = require_out(&cfg)?;
    cfg.validate()?;
    let subjects = match &cfg.paths.dataset {
        Some(dir) => load_subjects(dir)?,
        None => map_indexed(cfg.data.total(), thread_count(), |i| {
            Ok(Subject::from_phantom(generate_phantom(&cfg.phantom, cfg.seed, i)?, i))
        })?,
    };
    let (train_set, test_set) = split_dataset(&subjects, cfg.data.train_fraction(), cfg.seed)?;
    write_snapshot(&out, &cfg)?;
    let variants = paper_variants(&cfg);
    let start = Instant::now();
    let mut table = run_ablation(&variants, &train_set, &test_set, thread_count(), |row| {
        let mut line = format!("{}: recall {:.3}", row.label, row.counts.recall());
        if let Some(f) = &row.failure {
            line = format!("{}: failed ({f})", row.label);
        }
        if !deterministic {
            let _ = write!(line, " [{:.0}s]", start.elapsed().as_secs_f64());
        }
        eprintln!("{line}");
    });
    let trend = energy_trend(&cfg.phantom, &cfg.window, &cfg.relation, 0..trend_seeds)?;
    table.header.push(trend.summary());
    let text = table.to_text();
    print!("{text}");
    write_text(&out.join("ablation.txt"), &text)?;
    write_json(&out.join("ablation.json"), &AblationReport { table: &table, energy: &trend })?;

    let energy_dir = out.join("energy");
    make_dir(&energy_dir)?;
    let set = hcc_cyst_phantom(&cfg.phantom, 0)?;
    for (k, l) in set.lesions.iter().enumerate() {
        let (map, _) = lesion_energy(&set, k, &cfg.window, &cfg.relation)?;
        energy_pgm(&energy_dir.join(format!("{}_{}.pgm", l.class.title().to_lowercase(), k)), &map, 8)?;
    }
    Ok(())
}
