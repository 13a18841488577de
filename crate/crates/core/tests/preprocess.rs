use hepadet_core::preprocess::{
    assemble_slab, resample_slice, slab_indices, window_to_u8, window_value, Grid, WindowSpec, SLAB_DEPTH,
};
use hepadet_core::volume::{Phase, Volume};
use proptest::prelude::*;

/// Volume whose slice `z` is constant at `110 + 4z` HU.
fn ramp_volume(depth: usize, side: usize) -> Volume {
    let hu: Vec<f64> = (0..depth * side * side).map(|i| 110.0 + 4.0 * (i / (side * side)) as f64).collect();
    Volume::from_hu((depth, side, side), (1.0, 1.0, 1.0), Phase::Arterial, "ramp", &hu).unwrap()
}

#[test]
fn paper_window_anchor_values() {
    let w = WindowSpec::default();
    assert_eq!(window_to_u8(&[110.0, 150.0, 190.0], &w), vec![0, 128, 255]);
    assert_eq!(window_value(-1000.0, &w), 0);
    assert_eq!(window_value(3000.0, &w), 255);
}

#[test]
fn window_is_monotone_over_every_hu() {
    let w = WindowSpec::default();
    let hu: Vec<f64> = (-1024..=3071).map(f64::from).collect();
    let v = window_to_u8(&hu, &w);
    assert!(v.windows(2).all(|p| p[0] <= p[1]));
    for (h, &u) in hu.iter().zip(&v) {
        // oracle: linear ramp over [level - width/2, level + width/2]
        let exact = (h - 110.0) / 80.0 * 255.0;
        let want = exact.clamp(0.0, 255.0);
        assert!((f64::from(u) - want).abs() <= 0.5 + 1e-9, "{h} HU -> {u}");
    }
}

#[test]
fn slab_replicates_at_both_ends() {
    for depth in [1usize, 2, 20] {
        let vol = ramp_volume(depth, 8);
        for center in [0, depth - 1] {
            let slab = assemble_slab(&vol, center, &WindowSpec::default(), (8, 8)).unwrap();
            assert_eq!(slab.channels.shape(), &[SLAB_DEPTH, 8, 8]);
            assert!(slab.channels.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for k in 0..SLAB_DEPTH {
                let z = (center as i64 + k as i64 - 4).clamp(0, depth as i64 - 1) as f64;
                let want = f64::from(window_value(110.0 + 4.0 * z, &WindowSpec::default())) / 255.0;
                assert!(slab.channel(k).iter().all(|&v| v == want), "depth {depth} center {center} k {k}");
            }
        }
    }
}

#[test]
fn slab_center_out_of_range() {
    assert!(assemble_slab(&ramp_volume(3, 4), 3, &WindowSpec::default(), (4, 4)).is_err());
}

proptest! {
    #[test]
    fn slab_indices_are_clamped_neighbours(depth in 1usize..40, c in 0usize..40) {
        let center = c % depth;
        let idx = slab_indices(center, depth);
        prop_assert_eq!(idx[SLAB_DEPTH / 2], center);
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1] && p[1] - p[0] <= 1));
        prop_assert!(idx.iter().all(|&z| z < depth));
    }

    #[test]
    fn resample_keeps_constants_and_range(h in 2usize..12, w in 2usize..12, th in 1usize..20, tw in 1usize..20,
                                          vals in prop::collection::vec(0.0..1.0f64, 144)) {
        let g = Grid::new(h, w, vals[..h * w].to_vec()).unwrap();
        let r = resample_slice(&g, (th, tw)).unwrap();
        let (lo, hi) = g.data.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!(r.data.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        let flat = resample_slice(&Grid::new(h, w, vec![0.25; h * w]).unwrap(), (th, tw)).unwrap();
        prop_assert!(flat.data.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        if th > 1 && tw > 1 {
            prop_assert_eq!(r.at(0, 0), g.at(0, 0));
            prop_assert!((r.at(th - 1, tw - 1) - g.at(h - 1, w - 1)).abs() < 1e-12);
        }
    }
}
