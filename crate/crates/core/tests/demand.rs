mod common;

use std::collections::BTreeMap;

use citycoord_core::demand::*;
use proptest::prelude::*;

use common::*;

fn profile(q: &[f64]) -> ActivityProfile {
    ActivityProfile {
        zones: (0..q.len()).map(|k| format!("Z{k}").into()).collect(),
        intensity: q.to_vec(),
    }
}

/// Straight evaluation of the normalized gravity formula, pair by pair.
fn brute_force(q: &[f64], e: &[Vec<f64>], total: f64) -> Vec<Vec<f64>> {
    let n = q.len();
    let mut denom = 0.0;
    for k in 0..n {
        for l in 0..n {
            denom += q[k] * q[l] / e[k][l];
        }
    }
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = total * (q[i] * q[j] / e[i][j]) / denom;
        }
    }
    out
}

fn shares_row() -> impl Strategy<Value = [f64; 5]> {
    prop::array::uniform5(0.0f64..1.0).prop_filter_map("nonzero row", |a| {
        let s: f64 = a.iter().sum();
        (s > 1e-3).then(|| a.map(|p| p / s))
    })
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, f64)> {
    (
        prop::collection::vec(0.01f64..5.0, 4),
        prop::collection::vec(prop::collection::vec(30.0f64..3000.0, 4), 4),
        1.0f64..1e6,
    )
}

proptest! {
    #[test]
    fn gravity_matches_brute_force((q, e, total) in instance()) {
        let od = gravity_demand(&profile(&q), &e, total).unwrap();
        let oracle = brute_force(&q, &e, total);
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!((od.total[i][j] - oracle[i][j]).abs() <= 1e-9 * total.max(1.0));
            }
        }
        prop_assert!((od.grand_total() - total).abs() <= 1e-6 * total.max(1.0));
    }

    #[test]
    fn gravity_is_scale_invariant((q, e, total) in instance(), k in 0.01f64..100.0) {
        let a = gravity_demand(&profile(&q), &e, total).unwrap();
        let scaled: Vec<f64> = q.iter().map(|x| x * k).collect();
        let b = gravity_demand(&profile(&scaled), &e, total).unwrap();
        for (ra, rb) in a.total.iter().zip(&b.total) {
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x - y).abs() <= 1e-9 * total);
            }
        }
    }

    #[test]
    fn larger_impedance_lowers_the_pair_weight(
        qi in 0.01f64..10.0, qj in 0.01f64..10.0, e in 1.0f64..1e4, extra in 1e-3f64..1e4,
    ) {
        prop_assert!(gravity_weight(qi, qj, e + extra) < gravity_weight(qi, qj, e));
    }

    #[test]
    fn mode_split_keeps_pair_marginals(
        (q, e, total) in instance(),
        rows in prop::collection::vec(shares_row(), 3),
        pick in prop::collection::vec(0usize..3, 16),
    ) {
        let table = ModeSplitTable::new(
            rows.iter()
                .enumerate()
                .map(|(k, a)| {
                    (format!("c{k}"), ModeShares { walk: a[0], vehicle: a[1], bus: a[2], subway: a[3], taxi: a[4] })
                })
                .collect(),
        )
        .unwrap();
        let od = gravity_demand(&profile(&q), &e, total).unwrap();
        let split = apply_mode_split(&od, &table, |i, j| format!("c{}", pick[i * 4 + j])).unwrap();
        let by_mode = split.by_mode.as_ref().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let s: f64 = by_mode[i][j].iter().sum();
                prop_assert!((s - od.total[i][j]).abs() <= 1e-9);
                prop_assert_eq!(&split.categories.as_ref().unwrap()[i][j], &format!("c{}", pick[i * 4 + j]));
            }
        }
    }
}

#[test]
fn toy_activity_is_min_max_normalized() {
    // Z0 has the higher population and POI count, so it normalizes to (1, 1)
    // and Z1 to (0, 0).
    let net = toy_net();
    let a = compute_activity(&net, 0.7, 0.3).unwrap();
    assert_eq!(a.intensity.len(), 2);
    assert!((a.intensity[0] - 1.0).abs() < 1e-12);
    assert_eq!(a.intensity[1], 0.0);
    assert!(matches!(
        compute_activity(&net, 0.0, 0.0),
        Err(DemandError::BadWeights { .. })
    ));
    assert!(matches!(
        compute_activity(&net, -1.0, 1.0),
        Err(DemandError::BadWeights { .. })
    ));
}

#[test]
fn gravity_rejects_bad_inputs() {
    let p = profile(&[1.0, 1.0]);
    let ok = vec![vec![60.0, 100.0], vec![100.0, 60.0]];
    assert!(matches!(gravity_demand(&p, &ok, 0.0), Err(DemandError::BadTotal(_))));
    let zero = vec![vec![60.0, 0.0], vec![100.0, 60.0]];
    assert!(matches!(
        gravity_demand(&p, &zero, 10.0),
        Err(DemandError::BadImpedance { .. })
    ));
    assert!(matches!(
        gravity_demand(&p, &[vec![1.0]], 10.0),
        Err(DemandError::ImpedanceShape { .. })
    ));
    assert!(matches!(
        gravity_demand(&profile(&[0.0, 0.0]), &ok, 10.0),
        Err(DemandError::DegenerateActivity)
    ));
}

#[test]
fn corridor_pipeline_covers_every_category() {
    let net = corridor_net();
    let activity = compute_activity(&net, 0.5, 0.5).unwrap();
    let e = net.impedance_matrix().unwrap();
    let od = gravity_demand(&activity, &e, 30_000.0).unwrap();
    let cat = PairCategorizer::default();
    let split = apply_mode_split(&od, &ModeSplitTable::default_survey(), |i, j| {
        cat.categorize(&net, i, j)
    })
    .unwrap();
    let by_mode = split.by_mode.unwrap();
    for (row, totals) in by_mode.iter().zip(&od.total) {
        for (cell, d) in row.iter().zip(totals) {
            assert!((cell.iter().sum::<f64>() - d).abs() <= 1e-9);
        }
    }
    let sum_modes: f64 = Mode::ALL.iter().map(|&m| split_total(&by_mode, m)).sum();
    assert!((sum_modes - 30_000.0).abs() < 1e-6);
}

fn split_total(by_mode: &[Vec<[f64; 5]>], m: Mode) -> f64 {
    by_mode.iter().flatten().map(|c| c[m.index()]).sum()
}

fn single_pair(mode: Mode, daily: f64) -> OdMatrix {
    let mut cell = [0.0; 5];
    cell[mode.index()] = daily;
    OdMatrix {
        zones: vec!["A".into(), "B".into()],
        total: vec![vec![0.0, daily], vec![0.0, 0.0]],
        by_mode: Some(vec![vec![[0.0; 5], cell], vec![[0.0; 5], [0.0; 5]]]),
        categories: None,
    }
}

#[test]
fn sampling_is_reproducible_and_sorted() {
    let od = single_pair(Mode::Taxi, 500.0);
    let a = sample_trips(&od, &TemporalProfile::rush_hours(), 42).unwrap();
    let b = sample_trips(&od, &TemporalProfile::rush_hours(), 42).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.windows(2).all(|w| w[0].departure_time <= w[1].departure_time));
    assert!(a.iter().enumerate().all(|(k, t)| t.id == k as u64));
    assert!(a.iter().all(|t| (0.0..86_400.0).contains(&t.departure_time)));
}

#[test]
fn hourly_mean_matches_the_daily_rate() {
    // 240 trips/day spread uniformly: 10 per hour on average.
    let od = single_pair(Mode::Taxi, 240.0);
    let seeds = 200;
    let mut per_hour = [0u64; 24];
    for seed in 0..seeds {
        for t in sample_trips(&od, &TemporalProfile::uniform(), seed).unwrap() {
            per_hour[(t.departure_time / 3600.0) as usize] += 1;
        }
    }
    for (h, &count) in per_hour.iter().enumerate() {
        let mean = count as f64 / seeds as f64;
        assert!((mean - 10.0).abs() <= 1.0, "hour {h}: mean {mean}");
    }
}

#[test]
fn single_hour_profile_confines_departures() {
    let od = single_pair(Mode::Vehicle, 1000.0);
    let trips = sample_trips(&od, &TemporalProfile::single_hour(8), 3).unwrap();
    assert!(!trips.is_empty());
    assert!(trips.iter().all(|t| (28_800.0..32_400.0).contains(&t.departure_time)));
    assert!(matches!(
        sample_trips(&od, &TemporalProfile([0.0; 24]), 3),
        Err(DemandError::ZeroProfile)
    ));
    let mut no_split = od.clone();
    no_split.by_mode = None;
    assert!(matches!(
        sample_trips(&no_split, &TemporalProfile::uniform(), 3),
        Err(DemandError::MissingModeSplit)
    ));
}

#[test]
fn stats_recount_trips_by_mode() {
    let mut od = single_pair(Mode::Walk, 300.0);
    let by_mode = od.by_mode.as_mut().unwrap();
    by_mode[0][1] = [300.0, 200.0, 100.0, 50.0, 80.0];
    by_mode[1][0] = [0.0, 10.0, 20.0, 30.0, 40.0];
    let trips = sample_trips(&od, &TemporalProfile::rush_hours(), 8).unwrap();
    let stats = DemandStats::from_trips("test", &trips);
    let mut recount: BTreeMap<Mode, u64> = BTreeMap::new();
    for t in &trips {
        *recount.entry(t.mode).or_default() += 1;
    }
    let n = |m| recount.get(&m).copied().unwrap_or(0);
    assert_eq!(stats.taxi, n(Mode::Taxi));
    assert_eq!(stats.walk, n(Mode::Walk));
    assert_eq!(stats.public_transit, n(Mode::Bus) + n(Mode::Subway));
    assert_eq!(stats.total, trips.len() as u64);
    assert_eq!(
        stats.vehicle + stats.bus + stats.subway + stats.taxi + stats.walk,
        stats.total
    );
    let csv = stats.to_csv();
    assert!(csv.starts_with("Region,Taxi,Public Transit,Walk,"));
    assert!(csv.lines().next().unwrap().ends_with(",Total"));
}
