#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use citycoord_core::demand::{Mode, Trip};
use citycoord_core::dynamics::{init_state, EnvState, SimConfig};
use citycoord_core::harness::{initial_state, ScenarioFile};
use citycoord_core::network::{load_network, TrafficNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn toy_net() -> Arc<TrafficNetwork> {
    Arc::new(load_network(scenarios().join("toy_grid/network.json")).unwrap())
}

pub fn corridor_net() -> Arc<TrafficNetwork> {
    Arc::new(load_network(scenarios().join("corridor/network.json")).unwrap())
}

pub fn congested() -> PathBuf {
    scenarios().join("toy_grid/congested.json")
}

pub fn corridor() -> PathBuf {
    scenarios().join("corridor/corridor.json")
}

pub fn scenario_state(path: &PathBuf) -> EnvState {
    let file = ScenarioFile::load(path).unwrap();
    initial_state(&file, file.scenario.seed).unwrap()
}

/// `n` trips between the toy zones, uniform over `[0, span)`, sorted.
pub fn toy_trips(n: usize, span: f64, taxi_share: f64, seed: u64) -> Vec<Trip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zones = ["Z0", "Z1"];
    let mut trips: Vec<Trip> = (0..n)
        .map(|_| {
            let o = rng.random_range(0..2);
            let d = rng.random_range(0..2);
            let mode = if rng.random::<f64>() < taxi_share {
                Mode::Taxi
            } else {
                Mode::Vehicle
            };
            Trip {
                id: 0,
                origin: zones[o].into(),
                destination: zones[d].into(),
                mode,
                departure_time: rng.random_range(0.0..span),
            }
        })
        .collect();
    trips.sort_by(|a, b| a.departure_time.total_cmp(&b.departure_time));
    for (k, t) in trips.iter_mut().enumerate() {
        t.id = k as u64;
    }
    trips
}

pub fn toy_state(trips: &[Trip], fleet: usize, seed: u64) -> EnvState {
    let config = SimConfig {
        record_events: false,
        ..SimConfig::default()
    };
    init_state(toy_net(), trips, fleet, seed, config).unwrap()
}
