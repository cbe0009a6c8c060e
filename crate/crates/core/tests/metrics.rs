mod common;

use m2f_core::eval::{ap, ar_at_k, miou, pq, Instance, InstanceOutput, PanopticOutput, PanopticSegment};
use m2f_core::scene::{GroundTruthScene, Mask, Segment, VOID};

#[test]
fn library_metrics_agree_with_set_arithmetic() {
    let gap = common::checks::metric_oracle_gap(50, 21);
    assert!(gap <= 1e-9, "gap {gap:e}");
}

#[test]
fn hand_cases() {
    let h = common::checks::metric_hand_cases();
    assert!((h.pq - 0.4).abs() < 1e-12, "{h:?}");
    assert!((h.miou - 1.0 / 3.0).abs() < 1e-12, "{h:?}");
    assert!((h.ap - 0.5).abs() < 1e-12, "{h:?}");
    assert_eq!(h.ap, h.ap_brute_force);
}

fn two_region_scene() -> GroundTruthScene {
    GroundTruthScene::new(
        2,
        4,
        vec![
            Segment { mask: Mask::from_fn(2, 4, |_, x| x < 2), class: 0, is_thing: true },
            Segment { mask: Mask::from_fn(2, 4, |_, x| x >= 2), class: 1, is_thing: false },
        ],
    )
    .unwrap()
}

#[test]
fn perfect_and_empty_predictions() {
    let gt = two_region_scene();
    let perfect = PanopticOutput {
        height: 2,
        width: 4,
        ids: (0..8).map(|p| if p % 4 < 2 { 1 } else { 2 }).collect(),
        segments: vec![
            PanopticSegment { id: 1, class: 0, is_thing: true },
            PanopticSegment { id: 2, class: 1, is_thing: false },
        ],
    };
    assert_eq!(pq(&perfect, &gt, 2, |c| c == 0).pq, 1.0);
    assert_eq!(pq(&PanopticOutput::empty(2, 4), &gt, 2, |c| c == 0).pq, 0.0);
    assert_eq!(miou(&gt.label_map(), &gt.label_map(), 2), 1.0);
    assert_eq!(miou(&[1; 8], &[0; 8], 2), 0.0);

    let things = gt.instance_view();
    let det = InstanceOutput {
        instances: vec![Instance { mask: things.segments[0].mask.clone(), class: 0, score: 0.9, query: 0 }],
    };
    assert_eq!(ap(&[(&det, &things)], 2, &m2f_core::eval::COCO_IOU_THRESHOLDS), 1.0);
    assert_eq!(ap(&[(&InstanceOutput::default(), &things)], 2, &[0.5]), 0.0);
}

#[test]
fn void_prediction_counts_as_no_class() {
    // The void prediction lowers class 0's IoU but adds no class.
    assert_eq!(miou(&[0, VOID], &[0, 0], 2), 0.5);
}

#[test]
fn average_recall_counts_covered_segments() {
    let strip = |f: fn(usize) -> bool| Mask::from_fn(1, 20, |_, x| f(x));
    let gt = GroundTruthScene::new(
        1,
        20,
        vec![
            Segment { mask: strip(|x| x < 10), class: 0, is_thing: true },
            Segment { mask: strip(|x| x >= 10), class: 1, is_thing: true },
        ],
    )
    .unwrap();
    let proposal = strip(|x| (10..17).contains(&x));
    assert!((proposal.iou(&gt.segments[1].mask) - 0.7).abs() < 1e-12);
    let props = [proposal];
    assert_eq!(ar_at_k(&[(&props[..], &gt)], 100), 0.5);
    assert_eq!(ar_at_k(&[(&props[..], &gt)], 0), 0.0);
    let all = [gt.segments[0].mask.clone(), gt.segments[1].mask.clone()];
    assert_eq!(ar_at_k(&[(&all[..], &gt)], 100), 1.0);
}
