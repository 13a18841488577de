use hepadet_core::ablation::{paper_variants, variant_label, ROW_LABELS};
use hepadet_core::boxes::{iou, RoiBox};
use hepadet_core::classes::LesionClass;
use hepadet_core::config::RunConfig;
use hepadet_core::detect::{select_top, Detection};
use hepadet_core::eval::{match_and_score, GtBox};
use hepadet_core::volume::Phase;
use proptest::prelude::*;

fn det(roi: RoiBox, probs: [f64; 4]) -> Detection {
    Detection {
        roi,
        class_probs: probs,
        source_phase: Phase::Arterial,
    }
}

fn one_hot(k: usize) -> [f64; 4] {
    let mut p = [0.02; 4];
    p[k] = 0.94;
    p
}

fn arb_roi() -> impl Strategy<Value = RoiBox> {
    (0.0..60.0f64, 0.0..60.0f64, 2.0..20.0f64, 2.0..20.0f64).prop_map(|(x, y, w, h)| RoiBox::new(x, y, x + w, y + h))
}

fn arb_det() -> impl Strategy<Value = Detection> {
    (arb_roi(), prop::array::uniform4(0.01..1.0f64)).prop_map(|(b, raw)| {
        let s: f64 = raw.iter().sum();
        det(b, raw.map(|v| v / s))
    })
}

fn arb_gt() -> impl Strategy<Value = GtBox> {
    (arb_roi(), 0usize..3).prop_map(|(roi, k)| GtBox {
        roi,
        class: LesionClass::ALL[k],
    })
}

#[test]
fn exact_predictions_recall_everything() {
    let gts: Vec<GtBox> = (0..6)
        .map(|i| GtBox {
            roi: RoiBox::new(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0),
            class: LesionClass::ALL[i % 3],
        })
        .collect();
    let preds: Vec<Detection> = gts.iter().map(|g| det(g.roi, one_hot(g.class.index()))).collect();
    let c = match_and_score(&preds, &gts, 0.5);
    assert_eq!(c.recall(), 1.0);
    assert_eq!(c.false_positives, 0);
    assert_eq!(c.accuracy(), [Some(100.0); 3]);

    let wrong: Vec<Detection> = gts.iter().map(|g| det(g.roi, one_hot((g.class.index() + 1) % 3))).collect();
    let c = match_and_score(&wrong, &gts, 0.5);
    assert_eq!(c.recall(), 0.0);
    assert!(c.per_class.iter().all(|k| k.localized == k.total));
    assert_eq!(c.false_positives, 6);
}

#[test]
fn one_prediction_matches_one_lesion() {
    let g = GtBox {
        roi: RoiBox::new(0.0, 0.0, 10.0, 10.0),
        class: LesionClass::Hcc,
    };
    let p = det(g.roi, one_hot(2));
    let c = match_and_score(&[p], &[g, g], 0.5);
    assert_eq!(c.per_class[2].correct, 1);
    assert_eq!(c.per_class[2].total, 2);
}

#[test]
fn labels_name_the_variants() {
    for (label, cfg) in paper_variants(&RunConfig::desk(0)) {
        assert_eq!(variant_label(&cfg), label);
    }
    let labels: Vec<String> = paper_variants(&RunConfig::desk(0)).into_iter().map(|(l, _)| l).collect();
    assert_eq!(labels, ROW_LABELS);
}

proptest! {
    #[test]
    fn counts_are_consistent(preds in prop::collection::vec(arb_det(), 0..12),
                             gts in prop::collection::vec(arb_gt(), 0..6),
                             t in 0.1..0.9f64) {
        let c = match_and_score(&preds, &gts, t);
        let correct: usize = c.per_class.iter().map(|k| k.correct).sum();
        prop_assert_eq!(correct + c.false_positives, preds.len());
        prop_assert_eq!(c.per_class.iter().map(|k| k.total).sum::<usize>(), gts.len());
        for k in &c.per_class {
            prop_assert!(k.correct <= k.localized && k.localized <= k.total);
        }
        let mut rev = preds.clone();
        rev.reverse();
        prop_assert_eq!(match_and_score(&rev, &gts, t), c);
    }

    #[test]
    fn selection_drops_background_and_overlap(dets in prop::collection::vec(arb_det(), 0..30), t in 0.1..0.9f64) {
        let kept = select_top(&dets, t, true);
        prop_assert!(kept.iter().all(|d| d.class().is_some()));
        prop_assert!(kept.iter().all(|d| dets.contains(d)));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.roi, &b.roi) <= t);
                prop_assert!(a.score() >= b.score());
            }
        }
        let all = select_top(&dets, t, false);
        prop_assert!(kept.len() <= all.len());
    }
}
