//! The six-variant framework comparison on a phantom split.

use crate::config::RunConfig;
use crate::dataset::Subject;
use crate::eval::{EvalRow, EvalTable};
use crate::infer::evaluate;
use crate::train::train;

pub const ROW_LABELS: [&str; 6] = [
    "R-50",
    "R-101",
    "R-50-2.5D",
    "R-101 region fusion",
    "R-50 multi-modal",
    "R-101 multi-modal",
];

pub const NOT_REPRODUCIBLE: &str = "Numbers below come from synthetic phantoms. The published accuracies were \
measured on a private clinical dataset that is not distributed, so they are not reproducible here and these \
rows are not comparable to them.";

/// Table label of a config: depth, then the most specific of multi-modal,
/// region fusion or 2.5D input.
pub fn variant_label(cfg: &RunConfig) -> String {
    let d = cfg.net.depth;
    if cfg.model.multi_modal {
        format!("R-{d} multi-modal")
    } else if cfg.model.top_down {
        format!("R-{d} region fusion")
    } else if cfg.net.input_depth == crate::preprocess::SLAB_DEPTH {
        format!("R-{d}-2.5D")
    } else {
        format!("R-{d}")
    }
}

/// The six variants derived from `base`: backbone depth, single slice vs
/// nine-slice slab, top-down fusion, and relation over three phases.
pub fn paper_variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let make = |depth: u32, slab: bool, top_down: bool, multi: bool| {
        let mut c = base.clone();
        c.net.depth = depth;
        c.net.input_depth = if slab { crate::preprocess::SLAB_DEPTH } else { 1 };
        c.model.top_down = top_down;
        c.model.multi_modal = multi;
        c
    };
    let rows = [
        make(50, false, false, false),
        make(101, false, false, false),
        make(50, true, false, false),
        make(101, true, true, false),
        make(50, true, true, true),
        make(101, true, true, true),
    ];
    ROW_LABELS.iter().map(|l| l.to_string()).zip(rows).collect()
}

/// Trains and evaluates every variant in order; a failing variant yields a
/// failed row and the run continues.
pub fn run_ablation(
    variants: &[(String, RunConfig)],
    train_set: &[Subject],
    test_set: &[Subject],
    threads: usize,
    mut on_row: impl FnMut(&EvalRow),
) -> EvalTable {
    let iou = variants.first().map_or(0.3, |(_, c)| c.thresholds.eval_iou);
    let mut table = EvalTable::new(
        iou,
        vec![
            NOT_REPRODUCIBLE.to_string(),
            format!("Phantom split: {} train / {} test subjects.", train_set.len(), test_set.len()),
        ],
    );
    for (label, cfg) in variants {
        let row = match train(cfg, train_set, |_| {}).and_then(|out| evaluate(&out.store, cfg, test_set, threads)) {
            Ok((counts, _)) => EvalRow::from_counts(label.clone(), counts),
            Err(e) => EvalRow::failed(label.clone(), e.to_string()),
        };
        on_row(&row);
        table.rows.push(row);
    }
    table
}
