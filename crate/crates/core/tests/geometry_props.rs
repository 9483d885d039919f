use csrfcn::geometry::{
    assign_anchor_labels, decode_delta, encode_delta, flip_box, iou, nms, AnchorAssignment, BBox,
};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn iou_bounds_and_symmetry(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delta_round_trip(a in arb_box(), g in arb_box()) {
        let back = decode_delta(&a, &encode_delta(&a, &g));
        for (x, y) in back.to_array().iter().zip(g.to_array()) {
            prop_assert!((x - y).abs() < 1e-9, "{:?} vs {:?}", back, g);
        }
    }

    #[test]
    fn flip_is_an_involution(a in arb_box()) {
        let w = 96.0;
        let f = flip_box(&a, w);
        let back = flip_box(&f, w);
        for (x, y) in back.to_array().iter().zip(a.to_array()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((f.width() - a.width()).abs() < 1e-12);
    }

    #[test]
    fn nms_output_is_sparse_and_sorted(
        boxes in prop::collection::vec((arb_box(), 0.0f64..1.0), 0..25),
        thresh in 0.1f64..0.9,
    ) {
        let kept = nms(&boxes, thresh);
        for w in kept.windows(2) {
            prop_assert!(boxes[w[0]].1 >= boxes[w[1]].1);
        }
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(iou(&boxes[a].0, &boxes[b].0) <= thresh);
            }
        }
        // Every suppressed box overlaps a kept box with at least its score.
        for (i, (bx, s)) in boxes.iter().enumerate() {
            if !kept.contains(&i) {
                prop_assert!(kept.iter().any(|&k| boxes[k].1 >= *s && iou(&boxes[k].0, bx) > thresh));
            }
        }
    }

    #[test]
    fn anchor_labels_follow_thresholds(
        anchors in prop::collection::vec(arb_box(), 1..30),
        gts in prop::collection::vec(arb_box(), 0..4),
    ) {
        let labels = assign_anchor_labels(&anchors, &gts, 0.7, 0.3);
        prop_assert_eq!(labels.len(), anchors.len());
        for (a, l) in anchors.iter().zip(&labels) {
            let best = gts.iter().map(|g| iou(a, g)).fold(0.0, f64::max);
            match l {
                AnchorAssignment::Positive { matched_gt, .. } => {
                    prop_assert!(iou(a, &gts[*matched_gt]) > 0.0);
                }
                AnchorAssignment::Negative => prop_assert!(best <= 0.3),
                AnchorAssignment::Ignore => prop_assert!(best > 0.3 && best < 0.7),
            }
            if best >= 0.7 {
                prop_assert!(l.is_positive());
            }
        }
        // Each ground truth box that any anchor touches gets a positive anchor.
        for (g, gt) in gts.iter().enumerate() {
            if anchors.iter().any(|a| iou(a, gt) > 0.0) {
                let covered = labels.iter().zip(&anchors).any(|(l, a)| {
                    l.is_positive() && iou(a, gt) > 0.0 && (l.matched_gt() == Some(g) || iou(a, gt) <= iou(a, &gts[l.matched_gt().unwrap()]))
                });
                prop_assert!(covered);
            }
        }
    }
}
