use hepadet_core::anchors::{gen_anchors, label_anchors, AnchorLabel, AnchorSpec};
use hepadet_core::backbone::FeaturePyramid;
use hepadet_core::boxes::{iou, RoiBox};
use hepadet_core::fusion::{fuse, fuse_pyramid};
use hepadet_core::params::{Ctx, Store};
use hepadet_core::rpn::{select_proposals, ProposalConfig};
use hepadet_tensor::{SeedStream, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn pyramid(sides: &[usize], c: usize, seed: u64) -> FeaturePyramid {
    let mut rng = SeedStream::new(seed).rng("pyr");
    FeaturePyramid {
        levels: sides
            .iter()
            .enumerate()
            .map(|(i, &s)| (format!("L{i}"), Tensor::from_fn(&[2, c, s, s], |_| rng.random_range(-1.0..1.0))))
            .collect(),
    }
}

fn upsample(t: &Tensor, f: usize) -> Vec<f64> {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(n * c * h * w * f * f);
    for plane in t.data().chunks(h * w) {
        for y in 0..h * f {
            for x in 0..w * f {
                out.push(plane[(y / f) * w + x / f]);
            }
        }
    }
    let _ = (n, c);
    out
}

#[test]
fn fusion_keeps_extents_and_adds_the_deeper_level() {
    let p = pyramid(&[16, 8, 4, 2], 3, 7);
    let mut store = Store::default();
    {
        let mut ctx = Ctx::initializing(&mut store, SeedStream::new(3));
        let ids: Vec<_> = p.levels.iter().map(|(_, t)| ctx.g.input(t.clone())).collect();
        fuse(&mut ctx, &ids, 5, true).unwrap();
    }
    let lateral = fuse_pyramid(&mut store, &p, 5, false).unwrap();
    let fused = fuse_pyramid(&mut store, &p, 5, true).unwrap();
    for ((_, l), (_, src)) in fused.levels.iter().zip(&p.levels) {
        let s = src.shape();
        assert_eq!(l.shape(), &[s[0], 5, s[2], s[3]]);
    }
    let last = p.levels.len() - 1;
    assert_eq!(fused.levels[last].1, lateral.levels[last].1);
    for i in 0..last {
        let up = upsample(&fused.levels[i + 1].1, 2);
        for ((f, l), u) in fused.levels[i].1.data().iter().zip(lateral.levels[i].1.data()).zip(&up) {
            assert!((f - (l + u)).abs() < 1e-12);
        }
    }
}

#[test]
fn fusion_rejects_non_shrinking_levels() {
    let mut store = Store::default();
    assert!(fuse_pyramid(&mut store, &pyramid(&[8, 8], 2, 1), 4, true).is_err());
    assert!(fuse_pyramid(&mut store, &pyramid(&[9, 4], 2, 1), 4, true).is_err());
    assert!(fuse_pyramid(&mut store, &pyramid(&[8], 2, 1), 4, true).is_err());
}

#[test]
fn each_gt_gets_a_positive_anchor() {
    let spec = AnchorSpec::default();
    let anchors = gen_anchors(&[(16, 16), (8, 8), (4, 4), (2, 2)], &spec);
    let gts = [RoiBox::new(10.0, 20.0, 17.0, 26.0), RoiBox::new(40.0, 3.0, 44.0, 9.0)];
    let labels = label_anchors(&anchors, &gts, 0.5, 0.3);
    for g in &gts {
        let best = anchors
            .iter()
            .zip(&labels)
            .max_by(|a, b| iou(a.0, g).total_cmp(&iou(b.0, g)))
            .unwrap();
        assert_eq!(*best.1, AnchorLabel::Positive);
    }
    for (a, l) in anchors.iter().zip(&labels) {
        let top = gts.iter().map(|g| iou(a, g)).fold(0.0, f64::max);
        if top < 0.3 && *l != AnchorLabel::Positive {
            assert_eq!(*l, AnchorLabel::Negative);
        }
    }
}

proptest! {
    #[test]
    fn anchor_count_and_geometry(levels in prop::collection::vec((1usize..6, 1usize..6), 1..4),
                                 scales in prop::collection::vec(2.0..40.0f64, 1..4),
                                 ratios in prop::collection::vec(0.25..4.0f64, 1..4)) {
        let spec = AnchorSpec { scales: scales.clone(), ratios: ratios.clone(), strides: (0..levels.len()).map(|i| 4 << i).collect() };
        let a = gen_anchors(&levels, &spec);
        let cells: usize = levels.iter().map(|(h, w)| h * w).sum();
        prop_assert_eq!(a.len(), cells * scales.len() * ratios.len());
        // the first cell of level 0 holds every (scale, ratio) pair in order
        for (k, b) in a.iter().take(spec.per_cell()).enumerate() {
            let (s, r) = (scales[k / ratios.len()], ratios[k % ratios.len()]);
            prop_assert!((b.area() - s * s).abs() < 1e-9 * s * s);
            prop_assert!((b.height() / b.width() - r).abs() < 1e-9 * r);
            prop_assert!((b.center().0 - 2.0).abs() < 1e-12 && (b.center().1 - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn proposals_ignore_a_logit_shift(seed in 0u64..1000, shift in -3.0..3.0f64) {
        let spec = AnchorSpec { scales: vec![6.0, 12.0], ratios: vec![0.5, 1.0, 2.0], strides: vec![4, 8] };
        let anchors = gen_anchors(&[(8, 8), (4, 4)], &spec);
        let mut rng = SeedStream::new(seed).rng("logits");
        let logits: Vec<f64> = anchors.iter().map(|_| rng.random_range(-4.0..4.0)).collect();
        let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        let cfg = ProposalConfig { pre_nms: 100, top_k: 20, ..ProposalConfig::default() };
        let coords = |v: Vec<RoiBox>| v.into_iter().map(|b| (b.x0, b.y0, b.x1, b.y1)).collect::<Vec<_>>();
        let a = select_proposals(&logits, &anchors, (32, 32), &cfg);
        prop_assert!(a.len() <= 20);
        prop_assert!(a.iter().all(|b| b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 32.0 && b.y1 <= 32.0));
        prop_assert_eq!(coords(a), coords(select_proposals(&shifted, &anchors, (32, 32), &cfg)));
    }
}
