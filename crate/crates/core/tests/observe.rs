mod common;

use citycoord_core::dynamics::EnvState;
use citycoord_core::observe::*;
use proptest::prelude::*;

use common::*;

fn congested_midpeak() -> EnvState {
    let mut s = scenario_state(&congested());
    let b = s.classic_bundle();
    s.run_horizon(&b, 1800.0, 1.0).unwrap();
    s
}

#[test]
fn hotspots_match_a_lane_by_lane_scan() {
    let s = congested_midpeak();
    let net = s.network().clone();
    for (q_thr, s_thr) in [(1.0, 0.5), (5.0, 2.0), (20.0, 0.1), (1e6, 1e-6)] {
        let got = identify_congestion_hotspots(&s, q_thr, s_thr).unwrap();
        let mut expected: Vec<(u32, String, f64)> = net
            .lanes
            .iter()
            .map(|lane| {
                let o = lane_observation(&s, lane.id.as_str()).unwrap();
                (o.queue_length, lane.id.to_string(), o.average_speed)
            })
            .filter(|(q, _, v)| f64::from(*q) >= q_thr || *v <= s_thr)
            .collect();
        expected.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let got: Vec<(u32, String, f64)> = got
            .into_iter()
            .map(|h| (h.queue_length, h.lane.to_string(), h.average_speed))
            .collect();
        assert_eq!(got, expected, "thresholds ({q_thr}, {s_thr})");
    }
    assert_eq!(
        identify_congestion_hotspots(&s, 0.0, 1.0),
        Err(ObserveError::BadThreshold)
    );
    let busy = identify_congestion_hotspots(&s, 1.0, 0.5).unwrap();
    assert!(!busy.is_empty(), "the congested peak should queue somewhere");
}

#[test]
fn zone_aggregates_add_up_to_the_network() {
    let s = congested_midpeak();
    let net = s.network().clone();
    let whole = calculate_network_metrics(&s, 0.0).unwrap();
    let (_, inside, _) = s.vehicle_counts();
    assert_eq!(whole.global.total_vehicles, inside as f64);
    assert_eq!(whole.global.lane_count as usize, net.lanes.len());
    let by_zone: f64 = net
        .zones
        .iter()
        .map(|z| analyze_zone_traffic(&s, z.id.as_str(), 0.0).unwrap().total_vehicles)
        .sum();
    assert_eq!(by_zone, whole.global.total_vehicles);
    assert_eq!(whole.congestion_index, whole.global.congestion_level);
    assert!((0.0..=1.0).contains(&whole.congestion_index));

    // The window mean lies between the extremes of its samples.
    let window = calculate_network_metrics(&s, 600.0).unwrap();
    let samples = window_samples(&s, 600.0).unwrap();
    let totals: Vec<f64> = samples
        .iter()
        .map(|snap| snap.lanes.iter().map(|l| f64::from(l.queue + l.moving)).sum())
        .collect();
    let lo = totals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(window.global.total_vehicles >= lo - 1e-9 && window.global.total_vehicles <= hi + 1e-9);
    let mean = totals.iter().sum::<f64>() / totals.len() as f64;
    assert!((window.global.total_vehicles - mean).abs() < 1e-9);
}

#[test]
fn lane_windows_follow_history() {
    let s = congested_midpeak();
    let ids = vec!["J0_J1".to_string(), "J1_J2".to_string()];
    let w = read_lane_traffic_states(&s, &ids, 300.0).unwrap();
    assert_eq!(w.len(), 2);
    for obs in &w {
        assert!(obs.samples.windows(2).all(|p| p[0].0 < p[1].0));
        assert_eq!(obs.samples.last().unwrap().0, s.clock);
        assert!(obs.samples.first().unwrap().0 >= s.clock - 300.0 - 1e-9);
        let q = obs.series("queue_length").unwrap();
        assert_eq!(q.len(), obs.samples.len());
        assert!(obs.series("no_such_field").is_err());
    }
    assert!(matches!(
        read_lane_traffic_states(&s, &["nope".into()], 60.0),
        Err(ObserveError::UnknownLane(_))
    ));
    assert!(matches!(
        read_lane_traffic_states(&s, &ids, 7200.0),
        Err(ObserveError::WindowExceedsHistory { .. })
    ));
    let live = lane_observation(&s, "J0_J1").unwrap();
    assert_eq!(live.vehicle_details.len() as u32, live.vehicle_count);
}

proptest! {
    #[test]
    fn ar1_recovered(a in 1.1f64..2.5, c in -5.0f64..5.0, y0 in 1.0f64..10.0, len in 8usize..14) {
        let mut y = vec![y0];
        while y.len() < len {
            let last = *y.last().unwrap();
            y.push(c + a * last);
        }
        let f = predict_arima(&y, 3, 1, 0).unwrap();
        prop_assert!(!f.fallback);
        let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!((f.coefficients[1] - a).abs() < 1e-6);
        prop_assert!((f.coefficients[0] - c).abs() < 1e-6 * scale);
        let mut next = *y.last().unwrap();
        for v in &f.values {
            next = c + a * next;
            prop_assert!((v - next).abs() < 1e-6 * next.abs().max(1.0));
        }
    }

    #[test]
    fn ramps_continue_under_differencing(start in -100.0f64..100.0, slope in -10.0f64..10.0, len in 4usize..20) {
        let y: Vec<f64> = (0..len).map(|k| start + slope * k as f64).collect();
        let f = predict_arima(&y, 5, 0, 1).unwrap();
        for (h, v) in f.values.iter().enumerate() {
            let expect = start + slope * (len + h) as f64;
            prop_assert!((v - expect).abs() < 1e-6);
        }
    }
}

#[test]
fn doubling_series_has_coefficient_two() {
    let y: Vec<f64> = (0..10).map(|k| 2f64.powi(k)).collect();
    let f = predict_arima(&y, 2, 1, 0).unwrap();
    assert!((f.coefficients[1] - 2.0).abs() < 1e-6);
    assert!(f.coefficients[0].abs() < 1e-6);
    assert!((f.values[0] - 1024.0).abs() < 1e-6);
    assert!((f.values[1] - 2048.0).abs() < 1e-6);
}

#[test]
fn forecast_argument_errors() {
    let y = [1.0, 2.0, 3.0];
    assert!(matches!(predict_arima(&y, 1, 4, 0), Err(ObserveError::BadOrder { .. })));
    assert!(matches!(predict_arima(&y, 1, 1, 2), Err(ObserveError::BadOrder { .. })));
    assert!(matches!(predict_arima(&y, 0, 1, 0), Err(ObserveError::BadHorizon)));
    assert!(matches!(
        predict_arima(&y, 1, 2, 1),
        Err(ObserveError::SeriesTooShort { needed: 5, .. })
    ));
    let flat = predict_arima(&[4.0; 8], 3, 1, 0).unwrap();
    assert_eq!(flat.values, vec![4.0; 3]);
}

#[test]
fn idle_taxis_ranked_by_distance() {
    let s = scenario_state(&corridor());
    let fleet = s.taxi_snapshots();
    let target = s.network().zones[0].centroid;
    let ranked = rank_idle_taxis_by_distance(&fleet, target);
    assert_eq!(ranked.len(), fleet.iter().filter(|t| t.available).count());
    let d: Vec<f64> = ranked
        .iter()
        .map(|id| fleet.iter().find(|t| &t.id == id).unwrap().position.distance(&target))
        .collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
}
