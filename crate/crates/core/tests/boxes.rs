use hepadet_core::boxes::{iou, nms, nms_indices, score_order, RoiBox};
use hepadet_tensor::SeedStream;
use proptest::prelude::*;
use rand::Rng;

fn random_boxes(n: usize, rng: &mut impl Rng) -> Vec<RoiBox> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
            let (w, h) = (rng.random_range(1.0..40.0), rng.random_range(1.0..40.0));
            // coarse scores so ties occur
            let s = f64::from(rng.random_range(0..50u32)) / 49.0;
            RoiBox::new(x, y, x + w, y + h).with_score(s)
        })
        .collect()
}

fn overlap(a: &RoiBox, b: &RoiBox) -> f64 {
    let w = a.x1.min(b.x1) - a.x0.max(b.x0);
    let h = a.y1.min(b.y1) - a.y0.max(b.y0);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let i = w * h;
    i / ((a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - i)
}

/// Repeatedly takes the best remaining box and deletes everything it overlaps.
fn nms_oracle(boxes: &[RoiBox], t: f64) -> Vec<usize> {
    let n = boxes.len();
    let m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| overlap(&boxes[i], &boxes[j])).collect()).collect();
    let mut alive = vec![true; n];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if alive[i] && best.is_none_or(|b| boxes[i].score > boxes[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        for j in 0..n {
            if m[b][j] > t {
                alive[j] = false;
            }
        }
        alive[b] = false;
    }
    kept
}

#[test]
fn nms_matches_oracle() {
    let seeds = SeedStream::new(41);
    for s in 0..100 {
        let mut rng = seeds.rng(&format!("nms{s}"));
        let boxes = random_boxes(1000, &mut rng);
        let t = [0.3, 0.5, 0.7][s % 3];
        assert_eq!(nms_indices(&boxes, t), nms_oracle(&boxes, t), "seed {s}");
    }
}

#[test]
fn half_shifted_squares() {
    let a = RoiBox::new(0.0, 0.0, 10.0, 10.0);
    let b = RoiBox::new(5.0, 5.0, 15.0, 15.0);
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
}

#[test]
fn empty_and_singleton() {
    assert!(nms(&[], 0.5).is_empty());
    let one = [RoiBox::new(1.0, 1.0, 2.0, 2.0).with_score(0.4)];
    assert_eq!(nms(&one, 0.5), one.to_vec());
}

#[test]
fn ties_keep_the_lower_index() {
    let b = RoiBox::new(0.0, 0.0, 4.0, 4.0).with_score(0.5);
    assert_eq!(nms_indices(&[b, b, b], 0.5), vec![0]);
    assert_eq!(score_order(&[b, b.with_score(0.9), b]), vec![1, 0, 2]);
}

fn arb_box() -> impl Strategy<Value = RoiBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64, 0.0..=1.0f64)
        .prop_map(|(x, y, w, h, s)| RoiBox::new(x, y, x + w, y + h).with_score(s))
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - iou(&b, &a)).abs() < 1e-12);
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kept_boxes_do_not_overlap(boxes in prop::collection::vec(arb_box(), 0..60), t in 0.05..0.95f64) {
        let kept = nms(&boxes, t);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(a, b) <= t);
                prop_assert!(a.score >= b.score);
            }
        }
        // idempotent
        prop_assert_eq!(nms(&kept, t), kept.clone());
    }

    #[test]
    fn translation_does_not_change_iou(a in arb_box(), b in arb_box(), dx in -20.0..20.0f64, dy in -20.0..20.0f64) {
        let mv = |r: &RoiBox| RoiBox::new(r.x0 + dx, r.y0 + dy, r.x1 + dx, r.y1 + dy);
        prop_assert!((iou(&a, &b) - iou(&mv(&a), &mv(&b))).abs() < 1e-9);
    }
}
