//! Dilation footprint, mask metrics against brute-force set oracles, and
//! bbox expansion.

use std::collections::HashSet;

use mvinpaint::inpaint::expand_bbox;
use mvinpaint::segmentation::{dilate, erode, evaluate_masks, mask_metrics};
use mvinpaint::Mask;
use proptest::prelude::*;

fn point(w: usize, h: usize, x: usize, y: usize) -> Mask {
    Mask::from_fn(w, h, |i, j| i == x && j == y)
}

#[test]
fn point_dilates_to_21_block() {
    let d = dilate(&point(41, 41, 20, 20), 5, 5);
    assert_eq!(d.count(), 21 * 21);
    assert_eq!(d.bbox(), Some((10, 10, 30, 30)));
}

#[test]
fn dilation_clips_at_the_border() {
    let d = dilate(&point(15, 15, 0, 0), 5, 5);
    assert_eq!(d.count(), 11 * 11);
    assert_eq!(d.bbox(), Some((0, 0, 10, 10)));
}

#[test]
fn bbox_side_of_100_grows_to_120() {
    let (x0, y0, x1, y1) = expand_bbox((50, 50, 149, 149), 400, 400, 0.1);
    assert_eq!((x1 - x0 + 1, y1 - y0 + 1), (120, 120));
    assert_eq!((x0, y0), (40, 40));
    assert_eq!(expand_bbox((0, 0, 99, 9), 100, 10, 0.1), (0, 0, 99, 9));
}

fn set(m: &Mask) -> HashSet<(usize, usize)> {
    (0..m.height)
        .flat_map(|y| (0..m.width).map(move |x| (x, y)))
        .filter(|&(x, y)| m.get(x, y))
        .collect()
}

fn mask_strategy(w: usize, h: usize) -> impl Strategy<Value = Mask> {
    proptest::collection::vec(any::<bool>(), w * h).prop_map(move |data| Mask { width: w, height: h, data })
}

proptest! {
    #[test]
    fn metrics_match_set_oracle(a in mask_strategy(9, 7), b in mask_strategy(9, 7)) {
        let m = mask_metrics(&a, &b).unwrap();
        let (sa, sb) = (set(&a), set(&b));
        let inter = sa.intersection(&sb).count();
        let union = sa.union(&sb).count();
        let iou = if union == 0 { 100.0 } else { 100.0 * inter as f64 / union as f64 };
        let sym = sa.symmetric_difference(&sb).count();
        let acc = 100.0 * (63 - sym) as f64 / 63.0;
        prop_assert_eq!(m.iou, iou);
        prop_assert_eq!(m.accuracy, acc);
    }

    #[test]
    fn dilation_matches_brute_force(a in mask_strategy(12, 10), k in prop::sample::select(vec![1usize, 3, 5]), it in 0usize..3) {
        let r = (k / 2) * it;
        let src = set(&a);
        let want: HashSet<(usize, usize)> = (0..10)
            .flat_map(|y| (0..12).map(move |x| (x, y)))
            .filter(|&(x, y)| src.iter().any(|&(sx, sy)| sx.abs_diff(x) <= r && sy.abs_diff(y) <= r))
            .collect();
        let d = dilate(&a, k, it);
        prop_assert_eq!(set(&d), want);
        prop_assert!(a.is_subset_of(&d));
        prop_assert!(erode(&d, k, it).is_subset_of(&d));
    }

    #[test]
    fn mean_metrics_average_views(a in mask_strategy(6, 6), b in mask_strategy(6, 6), c in mask_strategy(6, 6)) {
        let m = evaluate_masks(&[a.clone(), c.clone()], &[b.clone(), b.clone()]).unwrap();
        let (x, y) = (mask_metrics(&a, &b).unwrap(), mask_metrics(&c, &b).unwrap());
        prop_assert!((m.mean_iou - (x.iou + y.iou) / 2.0).abs() < 1e-12);
        prop_assert!((m.mean_accuracy - (x.accuracy + y.accuracy) / 2.0).abs() < 1e-12);
    }
}

/// Every check above, for the acceptance runner.
#[allow(dead_code)]
pub const CHECKS: &[(&str, fn())] = &[
    ("point_dilates_to_21_block", point_dilates_to_21_block),
    ("dilation_clips_at_the_border", dilation_clips_at_the_border),
    ("bbox_side_of_100_grows_to_120", bbox_side_of_100_grows_to_120),
    ("metrics_match_set_oracle", metrics_match_set_oracle),
    ("dilation_matches_brute_force", dilation_matches_brute_force),
    ("mean_metrics_average_views", mean_metrics_average_views),
];
