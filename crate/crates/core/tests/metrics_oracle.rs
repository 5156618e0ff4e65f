use proptest::prelude::*;
use refseg_core::metrics::{iou, overall_iou, precision_at, IoUStat, MetricsReport};
use refseg_core::BinaryMask;

/// Counts by scanning pixel coordinates, independent of the mask layout.
fn scan(pred: &BinaryMask, gt: &BinaryMask) -> (u64, u64) {
    let (mut inter, mut union) = (0, 0);
    for y in 0..gt.height {
        for x in 0..gt.width {
            let (p, g) = (pred.get(y, x), gt.get(y, x));
            inter += u64::from(p && g);
            union += u64::from(p || g);
        }
    }
    (inter, union)
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0u8..2, h * w),
            prop::collection::vec(0u8..2, h * w),
        )
            .prop_filter("ground truth needs a pixel", |(_, g)| g.contains(&1))
            .prop_map(move |(p, g)| {
                (
                    BinaryMask::new(h, w, p).unwrap(),
                    BinaryMask::new(h, w, g).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn counts_match_pixel_scan((pred, gt) in mask_pair()) {
        let (stat, value) = iou(&pred, &gt).unwrap();
        let (i, u) = scan(&pred, &gt);
        prop_assert_eq!((stat.intersection, stat.union), (i, u));
        prop_assert_eq!(value, i as f64 / u as f64);
        prop_assert!(stat.intersection <= stat.union);
    }

    #[test]
    fn report_matches_definitions(pairs in prop::collection::vec(mask_pair(), 1..20)) {
        let counts: Vec<(u64, u64)> = pairs.iter().map(|(p, g)| scan(p, g)).collect();
        let stats: Vec<IoUStat> = pairs.iter().map(|(p, g)| iou(p, g).unwrap().0).collect();
        let report = MetricsReport::from_stats(&stats).unwrap();
        let ious: Vec<f64> = counts.iter().map(|&(i, u)| i as f64 / u as f64).collect();
        for (theta, got) in [0.5, 0.6, 0.7, 0.8, 0.9].into_iter().zip(report.values()) {
            let hits = ious.iter().filter(|&&v| v > theta).count();
            prop_assert_eq!(got, hits as f64 / ious.len() as f64);
        }
        let (si, su) = counts.iter().fold((0, 0), |(a, b), &(i, u)| (a + i, b + u));
        prop_assert_eq!(report.overall_iou, si as f64 / su as f64);
        prop_assert_eq!(report.n, pairs.len());
    }

    #[test]
    fn precision_is_monotone_in_threshold(ious in prop::collection::vec(0.0f64..=1.0, 1..50)) {
        let p: Vec<f64> = [0.5, 0.6, 0.7, 0.8, 0.9]
            .iter()
            .map(|&t| precision_at(&ious, t).unwrap())
            .collect();
        prop_assert!(p.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn cumulative_iou_is_not_the_mean() {
    let stats = [
        IoUStat {
            intersection: 2,
            union: 6,
        },
        IoUStat {
            intersection: 3,
            union: 3,
        },
    ];
    assert_eq!(overall_iou(&stats).unwrap(), 5.0 / 9.0);
    let mean = stats.iter().map(IoUStat::value).sum::<f64>() / 2.0;
    assert!((mean - 2.0 / 3.0).abs() < 1e-15);
}
