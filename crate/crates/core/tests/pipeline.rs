use nalgebra::Vector3;
use proptest::prelude::*;

use topoloc::geometry::{translation_distance, Pose};
use topoloc::pipeline::{
    evaluate, jump_filter, lower_median, JumpFilter, JumpFilterParams, LocalizationResult, Status,
};

fn at(x: f64) -> Pose {
    Pose::from_translation(Vector3::new(x, 0.0, 0.0))
}

fn result(id: usize, pose: Option<Pose>, node: Option<u32>) -> LocalizationResult {
    LocalizationResult {
        frame_id: id,
        node_id: node,
        pose,
        inliers: if pose.is_some() { 20 } else { 0 },
        matched: 30,
        jump_rejected: false,
        status: match (pose, node) {
            (Some(_), _) => Status::Localized,
            (None, Some(_)) => Status::CoarseOnly,
            (None, None) => Status::Failed,
        },
    }
}

proptest! {
    #[test]
    fn lower_median_is_the_middle_of_the_sorted_values(values in prop::collection::vec(-1e6..1e6f64, 1..60)) {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(lower_median(&values), Some(sorted[(sorted.len() - 1) / 2]));
    }

    /// Consecutive emitted poses never differ by more than `max_step`.
    #[test]
    fn filtered_stream_has_bounded_steps(
        xs in prop::collection::vec(prop::option::weighted(0.9, -50.0..50.0f64), 1..80),
        max_step in 0.5..5.0f64,
    ) {
        let mut filter = JumpFilter::new(JumpFilterParams { max_step });
        let mut prev: Option<Pose> = None;
        for x in xs {
            let (out, rejected) = filter.apply(x.map(at));
            if let (Some(p), Some(o)) = (prev, out) {
                prop_assert!(translation_distance(&p, &o) <= max_step);
                prop_assert_eq!(rejected, translation_distance(&p, &at(x.unwrap())) > max_step);
            }
            if rejected {
                prop_assert_eq!(out, prev);
            }
            prev = out;
        }
    }
}

#[test]
fn jump_threshold_is_strict() {
    let p = JumpFilterParams { max_step: 2.0 };
    assert_eq!(jump_filter(&at(0.0), &at(2.0), &p), (at(2.0), false));
    assert_eq!(jump_filter(&at(0.0), &at(2.0 + 1e-9), &p), (at(0.0), true));
}

#[test]
fn a_gap_resets_the_filter() {
    let mut f = JumpFilter::new(JumpFilterParams { max_step: 1.0 });
    assert_eq!(f.apply(Some(at(0.0))), (Some(at(0.0)), false));
    assert_eq!(f.apply(None), (None, false));
    assert_eq!(f.apply(Some(at(10.0))), (Some(at(10.0)), false));
    assert_eq!(f.apply(Some(at(20.0))), (Some(at(10.0)), true));
}

#[test]
fn evaluation_counts_each_status() {
    let truth: Vec<(Pose, u32)> = (0..5).map(|i| (at(i as f64), (i / 2) as u32)).collect();
    let results = vec![
        result(0, Some(at(0.1)), Some(0)),
        result(1, Some(at(1.3)), Some(0)),
        result(2, None, Some(1)),
        result(3, None, Some(0)),
        result(4, None, None),
    ];
    let m = evaluate(&results, &truth);
    assert_eq!(m.frames, 5);
    assert_eq!(m.localized, 2);
    assert!((m.median_translation_error.unwrap() - 0.1).abs() < 1e-12);
    assert_eq!(m.median_translation_error_all, None);
    assert!((m.topological_accuracy - 0.6).abs() < 1e-12);
    assert!((m.localization_rate - 0.4).abs() < 1e-12);
}
