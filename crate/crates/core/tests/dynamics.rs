mod common;

use citycoord_core::controllers::SignalPlan;
use citycoord_core::dynamics::{ActionBundle, DynamicsError};
use citycoord_core::network::LaneKind;
use proptest::prelude::*;

use common::*;

fn hold() -> ActionBundle {
    ActionBundle::default()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn conservation_and_storage_hold_every_tick(
        n in 0usize..400,
        taxi_share in 0.0f64..0.5,
        fleet in 0usize..4,
        dt in prop::sample::select(vec![0.5, 1.0, 2.0]),
        seed in any::<u64>(),
    ) {
        let trips = toy_trips(n, 1800.0, taxi_share, seed);
        let mut s = toy_state(&trips, fleet, seed);
        let steps = (2400.0 / dt) as usize;
        for _ in 0..steps {
            s.step(&hold(), dt).unwrap();
            let (entered, inside, exited) = s.vehicle_counts();
            prop_assert_eq!(entered, inside + exited);
            for (l, lane) in s.network().lanes.iter().enumerate() {
                prop_assert!(s.lanes[l].vehicle_count() <= lane.storage_capacity());
            }
        }
    }
}

#[test]
fn same_seed_same_trajectory() {
    let trips = toy_trips(500, 3600.0, 0.2, 5);
    let mut a = toy_state(&trips, 2, 5);
    let mut b = toy_state(&trips, 2, 5);
    let oa = a.run_horizon(&hold(), 3600.0, 1.0).unwrap();
    let ob = b.run_horizon(&hold(), 3600.0, 1.0).unwrap();
    assert_eq!(a.state_hash(), b.state_hash());
    assert_eq!(oa, ob);
}

#[test]
fn horizons_compose() {
    let trips = toy_trips(300, 1800.0, 0.0, 9);
    let mut whole = toy_state(&trips, 0, 9);
    let mut halves = whole.clone();
    whole.run_horizon(&hold(), 1800.0, 1.0).unwrap();
    halves.run_horizon(&hold(), 900.0, 1.0).unwrap();
    halves.run_horizon(&hold(), 900.0, 1.0).unwrap();
    assert_eq!(whole.state_hash(), halves.state_hash());
}

#[test]
fn running_a_clone_leaves_the_original_alone() {
    let trips = toy_trips(300, 1800.0, 0.1, 2);
    let mut live = toy_state(&trips, 1, 2);
    live.run_horizon(&hold(), 600.0, 1.0).unwrap();
    let before = live.state_hash();
    let mut fork = live.clone();
    fork.run_horizon(&live.classic_bundle(), 1200.0, 1.0).unwrap();
    assert_eq!(live.state_hash(), before);
    assert_ne!(fork.state_hash(), before);
}

#[test]
fn bad_dt_and_horizon_are_rejected() {
    let mut s = toy_state(&[], 0, 0);
    assert!(matches!(s.step(&hold(), 0.0), Err(DynamicsError::BadDt(_))));
    assert!(matches!(
        s.run_horizon(&hold(), 10.5, 1.0),
        Err(DynamicsError::HorizonNotMultiple { .. })
    ));
}

#[test]
fn invalid_bundle_is_rejected_without_advancing() {
    let mut s = toy_state(&toy_trips(50, 600.0, 0.0, 1), 0, 1);
    let mut bundle = hold();
    bundle.signals.insert(
        "J0".into(),
        SignalPlan {
            junction: "J0".into(),
            cycle_time: 60.0,
            greens: vec![100.0, 100.0],
            lost_time: 8.0,
        },
    );
    let clock = s.clock;
    assert!(matches!(s.step(&bundle, 1.0), Err(DynamicsError::InvalidAction(_))));
    assert_eq!(s.clock, clock);
}

#[test]
fn red_signals_hold_vehicles_at_the_stop_line() {
    // A plan that never serves phase 1 at J0 keeps J1_J0 traffic waiting.
    let net = toy_net();
    let trips = toy_trips(200, 600.0, 0.0, 4);
    let mut s = toy_state(&trips, 0, 4);
    let mut starve = hold();
    for j in &net.junctions {
        if !j.signalized {
            continue;
        }
        let n = j.phases.len();
        let mut greens = vec![j.phases[1].min_green; n];
        greens[0] = 60.0 - 4.0 * n as f64 - j.phases[1].min_green * (n - 1) as f64;
        starve.signals.insert(
            j.id.clone(),
            SignalPlan {
                junction: j.id.clone(),
                cycle_time: 60.0,
                greens,
                lost_time: 4.0 * n as f64,
            },
        );
    }
    let mut fair = s.clone();
    let o_starve = s.run_horizon(&starve, 1800.0, 1.0).unwrap();
    let o_fair = fair.run_horizon(&fair.classic_bundle(), 1800.0, 1.0).unwrap();
    assert!(o_starve.global.avg_waiting_time >= o_fair.global.avg_waiting_time);
}

#[test]
fn corridor_runs_every_subsystem() {
    let mut s = scenario_state(&corridor());
    let bundle = s.classic_bundle();
    s.run_horizon(&bundle, 1800.0, 1.0).unwrap();
    let c = &s.counters;
    assert!(c.transit_departures > 0, "no transit departures");
    assert!(c.passengers > 0, "no transit passengers");
    assert!(c.reservations > 0, "no taxi reservations");
    assert!(c.dropoffs > 0, "no taxi dropoffs");
    assert!(c.highway_distance_m > 0.0, "no highway traffic");
    assert!(c.ramp_lane_s > 0.0 || c.ramp_queue_vehicle_s >= 0.0);
    assert!(c.bus_fuel_g > 0.0 && c.subway_wh > 0.0);
    let (entered, inside, exited) = s.vehicle_counts();
    assert_eq!(entered, inside + exited);
    let net = s.network().clone();
    for l in net.lanes_of_kind(LaneKind::HighwaySegment) {
        assert!(s.lanes[l].vehicle_count() <= net.lanes[l].storage_capacity());
    }
}
