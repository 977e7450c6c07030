use proptest::prelude::*;

use ovg_core::metrics::{beta, o_map, o_recall, offline_metrics, temporal_iou, DecayConfig, QueryEval};
use ovg_core::streaming::EmittedPrediction;

fn interval() -> impl Strategy<Value = (f64, f64)> {
    (0.0..50.0f64, 0.5..15.0f64).prop_map(|(s, len)| (s, s + len))
}

fn prediction() -> impl Strategy<Value = EmittedPrediction> {
    (interval(), 0.0..1.0f64, -3.0..10.0f64)
        .prop_map(|((s, e), score, lag)| EmittedPrediction { s, e, score, emit_time: (e + lag).max(0.0) })
}

fn query() -> impl Strategy<Value = QueryEval> {
    (prop::collection::vec(interval(), 1..4), prop::collection::vec(prediction(), 0..7))
        .prop_map(|(moments, predictions)| QueryEval { query_id: "q".into(), predictions, moments })
}

proptest! {
    #[test]
    fn beta_is_a_bounded_non_increasing_ramp(end in 0.0..50.0f64, t_s in 0.1..6.0f64, a in -5.0..20.0f64, d in 0.0..5.0f64) {
        let (x, y) = (beta(end + a, end, t_s), beta(end + a + d, end, t_s));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!(y <= x);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in interval(), b in interval()) {
        let x = temporal_iou(a, b).unwrap();
        prop_assert_eq!(x, temporal_iou(b, a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(temporal_iou(a, a).unwrap(), 1.0);
    }

    #[test]
    fn online_values_are_bounded_by_offline_ones(set in prop::collection::vec(query(), 1..5), m in 0.1..0.9f64) {
        let decay = DecayConfig::default();
        let (r1, ap) = offline_metrics(&set, 1, m).unwrap();
        let (r5, _) = offline_metrics(&set, 5, m).unwrap();
        let or1 = o_recall(&set, 1, m, &decay).unwrap();
        let or5 = o_recall(&set, 5, m, &decay).unwrap();
        let omap = o_map(&set, m, &decay).unwrap();
        prop_assert!(r1 <= r5);
        for i in 0..decay.thresholds.len() {
            prop_assert!(or1.per_threshold[i] <= r1);
            prop_assert!(or1.per_threshold[i] <= or5.per_threshold[i]);
            prop_assert!(omap.per_threshold[i] <= ap + 1e-15);
            prop_assert!((0.0..=1.0).contains(&omap.per_threshold[i]));
        }
    }
}
