//! Observation bundles, windowed history reads, aggregation and forecasting.
//!
//! Every feature is derived from the raw per-entity samples that the
//! simulator keeps every `history_interval_s` seconds, plus the live state
//! for the current tick. `docs/features.md` tabulates the definitions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::TaxiSnapshot;
use crate::dynamics::{EnvState, LaneSample, RouteSample, Snapshot, TaxiStatus};
use crate::ids::{LaneId, RouteId, TaxiId};
use crate::network::{Lane, LaneKind, Point, TrafficNetwork, TransitMode};

/// Seconds of history retained by default.
pub const MAX_WINDOW_S: f64 = 3600.0;

#[derive(Debug, Error, PartialEq)]
pub enum ObserveError {
    #[error("unknown lane \"{0}\"")]
    UnknownLane(String),
    #[error("unknown {kind} \"{id}\"")]
    UnknownEntity { kind: &'static str, id: String },
    #[error("\"{id}\" is not a {expected}")]
    WrongKind { id: String, expected: &'static str },
    #[error("unknown zone \"{0}\"")]
    UnknownZone(String),
    #[error("window {window} s exceeds retained history of {span} s")]
    WindowExceedsHistory { window: f64, span: f64 },
    #[error("thresholds must be > 0")]
    BadThreshold,
    #[error("series of length {len} is too short for order (p={p}, d={d}); need at least {needed}")]
    SeriesTooShort {
        len: usize,
        p: usize,
        d: usize,
        needed: usize,
    },
    #[error("order must satisfy p ≤ 3 and d ∈ {{0, 1}} (got p={p}, d={d})")]
    BadOrder { p: usize, d: usize },
    #[error("forecast horizon must be ≥ 1")]
    BadHorizon,
    #[error("feature \"{0}\" is not a numeric field of this observation")]
    UnknownFeature(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleDetail {
    pub id: u64,
    pub speed: f64,
    /// Meters from the lane start.
    pub position: f64,
    pub waiting_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneObservation {
    pub queue_length: u32,
    pub queue_density: f64,
    pub moving_vehicles: u32,
    pub average_speed: f64,
    pub average_waiting_time: f64,
    pub cell_occupancy: f64,
    pub lane_density: f64,
    pub throughput_potential: f64,
    pub occupancy: f64,
    pub halting_number: u32,
    pub max_speed: f64,
    pub arrival_rate: f64,
    pub entering_vehicles: u32,
    pub vehicle_count: u32,
    /// Present for the current tick only.
    pub vehicle_details: Vec<VehicleDetail>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighwayObservation {
    pub segment_speed: f64,
    pub segment_density: f64,
    pub segment_occupancy: f64,
    pub segment_speed_limit: f64,
    pub segment_default_speed_limit: f64,
    pub segment_congestion_ratio: f64,
    pub segment_speed_ratio: f64,
    pub segment_speed_pressure: f64,
    pub road_speed: f64,
    pub road_density: f64,
    pub road_occupancy: f64,
    pub current_speed_limits: BTreeMap<LaneId, f64>,
    pub default_speed_limits: BTreeMap<LaneId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampObservation {
    pub vehicle_count: u32,
    pub queue_length: u32,
    pub queue_density: f64,
    pub moving_vehicles: u32,
    pub average_speed: f64,
    pub average_waiting_time: f64,
    pub cell_occupancy: f64,
    pub lane_density: f64,
    pub occupancy: f64,
    pub halting_number: u32,
    pub max_speed: f64,
    pub arrival_rate: f64,
    pub lane_length: f64,
    pub road_id: String,
    pub direction: String,
    pub start_intersection: String,
    pub end_intersection: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitVehicleObservation {
    pub id: String,
    pub departure_time: f64,
    pub travel_time: f64,
    pub current_edge: String,
    pub speed: f64,
    pub passenger_count: u32,
    pub load_ratio: f64,
    pub next_station: Option<String>,
    pub next_station_dwell_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WaitingDistribution {
    #[serde(rename = "0-60s")]
    pub under_60: u32,
    #[serde(rename = "60-180s")]
    pub from_60_to_180: u32,
    #[serde(rename = "180-300s")]
    pub from_180_to_300: u32,
    #[serde(rename = ">300s")]
    pub over_300: u32,
}

impl WaitingDistribution {
    pub fn from_waits(waits: &[f64]) -> Self {
        let mut d = Self::default();
        for &w in waits {
            match w {
                w if w < 60.0 => d.under_60 += 1,
                w if w < 180.0 => d.from_60_to_180 += 1,
                w if w < 300.0 => d.from_180_to_300 += 1,
                _ => d.over_300 += 1,
            }
        }
        d
    }
}

/// Route-level transit features; per-vehicle fields are listed under `vehicles`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitObservation {
    /// Serialized as `active_buses` or `active_trains` by mode.
    pub active_vehicles: u32,
    pub headway: f64,
    pub station_count: u32,
    pub capacity: u32,
    pub vehicles: Vec<TransitVehicleObservation>,
    pub waiting_count: u32,
    pub avg_waiting_time: f64,
    pub max_waiting_time: f64,
    pub waiting_time_distribution: WaitingDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxiObservation {
    pub id: TaxiId,
    pub taxi_state: TaxiStatus,
    pub customers: u32,
    pub current_edge: Option<String>,
    pub current_taz: Option<String>,
    pub position: Point,
    pub speed: f64,
    pub cumulative_income: f64,
    pub recent_order_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetObservation {
    pub fleet_size: u32,
    pub idle_count: u32,
    pub pickup_count: u32,
    pub occupied_count: u32,
    pub utilization_rate: f64,
    pub pending_reservations: u32,
    pub taxis: Vec<TaxiObservation>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GlobalObservation {
    pub total_vehicles: f64,
    pub avg_queue_length: f64,
    pub avg_speed: f64,
    pub avg_waiting_time: f64,
    pub congestion_level: f64,
    pub intersection_count: u32,
    pub lane_count: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NetworkMetrics {
    #[serde(flatten)]
    pub global: GlobalObservation,
    pub congestion_index: f64,
    pub throughput_potential: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow<T> {
    pub entity: String,
    /// `(timestamp, observation)` in increasing time.
    pub samples: Vec<(f64, T)>,
}

impl<T: Serialize> ObservationWindow<T> {
    /// Numeric series of one top-level field.
    pub fn series(&self, feature: &str) -> Result<Vec<f64>, ObserveError> {
        self.samples
            .iter()
            .map(|(_, o)| {
                serde_json::to_value(o)
                    .ok()
                    .and_then(|v| v.get(feature).and_then(serde_json::Value::as_f64))
                    .ok_or_else(|| ObserveError::UnknownFeature(feature.to_owned()))
            })
            .collect()
    }
}

/// Samples covering `[now − window, now]`: retained history plus the live
/// state when it is newer than the last retained sample.
pub fn window_samples(state: &EnvState, window: f64) -> Result<Vec<Snapshot>, ObserveError> {
    let span = state.config.history_span_s;
    if !(window >= 0.0) || window > span {
        return Err(ObserveError::WindowExceedsHistory { window, span });
    }
    let from = state.clock - window - 1e-9;
    let mut out: Vec<Snapshot> = state.history.iter().filter(|s| s.time >= from).cloned().collect();
    if out.last().is_none_or(|s| s.time < state.clock) {
        out.push(state.snapshot());
    }
    Ok(out)
}

fn lane_fields(lane: &Lane, s: &LaneSample, interval: f64) -> LaneObservation {
    let storage = lane.storage_capacity() as f64;
    let count = s.queue + s.moving;
    LaneObservation {
        queue_length: s.queue,
        queue_density: f64::from(s.queue) / lane.length,
        moving_vehicles: s.moving,
        average_speed: s.mean_speed,
        average_waiting_time: s.mean_waiting,
        cell_occupancy: (f64::from(s.queue) / storage).min(1.0),
        lane_density: f64::from(count) / lane.length,
        throughput_potential: lane.saturation_flow * s.green_fraction,
        occupancy: (f64::from(count) / storage).min(1.0),
        halting_number: s.queue,
        max_speed: s.effective_speed_limit,
        arrival_rate: f64::from(s.entering) / interval,
        entering_vehicles: s.entering,
        vehicle_count: count,
        vehicle_details: Vec::new(),
    }
}

fn lane_index(net: &TrafficNetwork, id: &str) -> Result<usize, ObserveError> {
    net.lane_idx(id).ok_or_else(|| ObserveError::UnknownLane(id.to_owned()))
}

fn vehicle_details(state: &EnvState, l: usize) -> Vec<VehicleDetail> {
    let lane = &state.lanes[l];
    let moving = lane
        .traversing
        .iter()
        .map(|tr| (tr.vehicle, state.vehicle_speed(l, tr)));
    let halted = lane.queue.iter().map(|&v| (v, 0.0));
    moving
        .chain(halted)
        .map(|(v, speed)| VehicleDetail {
            id: v,
            speed,
            position: state.vehicle_position(l, v),
            waiting_time: state.vehicles[&v].waiting,
        })
        .collect()
}

/// Lane features of the live state, with vehicle details.
pub fn lane_observation(state: &EnvState, lane: &str) -> Result<LaneObservation, ObserveError> {
    let net = state.network();
    let l = lane_index(net, lane)?;
    let mut o = lane_fields(&net.lanes[l], &state.lane_sample(l), state.config.history_interval_s);
    o.vehicle_details = vehicle_details(state, l);
    Ok(o)
}

fn windowed<T>(
    state: &EnvState,
    ids: &[String],
    window: f64,
    resolve: impl Fn(&str) -> Result<usize, ObserveError>,
    build: impl Fn(usize, &Snapshot, bool) -> T,
) -> Result<Vec<ObservationWindow<T>>, ObserveError> {
    let idx = ids.iter().map(|id| resolve(id)).collect::<Result<Vec<_>, _>>()?;
    let samples = window_samples(state, window)?;
    Ok(ids
        .iter()
        .zip(idx)
        .map(|(id, k)| ObservationWindow {
            entity: id.clone(),
            samples: samples
                .iter()
                .enumerate()
                .map(|(n, s)| (s.time, build(k, s, n + 1 == samples.len() && s.time == state.clock)))
                .collect(),
        })
        .collect())
}

pub fn read_lane_traffic_states(
    state: &EnvState,
    lanes: &[String],
    window: f64,
) -> Result<Vec<ObservationWindow<LaneObservation>>, ObserveError> {
    let net = state.network();
    let interval = state.config.history_interval_s;
    windowed(
        state,
        lanes,
        window,
        |id| lane_index(net, id),
        |l, s, live| {
            let mut o = lane_fields(&net.lanes[l], &s.lanes[l], interval);
            if live {
                o.vehicle_details = vehicle_details(state, l);
            }
            o
        },
    )
}

fn kind_index(net: &TrafficNetwork, id: &str, kind: LaneKind, expected: &'static str) -> Result<usize, ObserveError> {
    let l = lane_index(net, id)?;
    if net.lanes[l].kind != kind {
        return Err(ObserveError::WrongKind {
            id: id.to_owned(),
            expected,
        });
    }
    Ok(l)
}

fn highway_fields(net: &TrafficNetwork, l: usize, s: &Snapshot) -> HighwayObservation {
    let lane = &net.lanes[l];
    let sample = &s.lanes[l];
    let count = f64::from(sample.queue + sample.moving);
    let occupancy = (count / lane.storage_capacity() as f64).min(1.0);
    let limit = sample.effective_speed_limit;
    let ratio = sample.mean_speed / limit;
    let road: Vec<usize> = net
        .lanes
        .iter()
        .enumerate()
        .filter(|(_, x)| x.road_id() == lane.road_id())
        .map(|(k, _)| k)
        .collect();
    let road_vehicles: f64 = road
        .iter()
        .map(|&k| f64::from(s.lanes[k].queue + s.lanes[k].moving))
        .sum();
    let road_length: f64 = road.iter().map(|&k| net.lanes[k].length).sum();
    let road_storage: f64 = road.iter().map(|&k| net.lanes[k].storage_capacity() as f64).sum();
    let road_speed = if road_vehicles > 0.0 {
        road.iter()
            .map(|&k| s.lanes[k].mean_speed * f64::from(s.lanes[k].queue + s.lanes[k].moving))
            .sum::<f64>()
            / road_vehicles
    } else {
        road.iter().map(|&k| s.lanes[k].mean_speed).sum::<f64>() / road.len() as f64
    };
    HighwayObservation {
        segment_speed: sample.mean_speed,
        segment_density: count / lane.length,
        segment_occupancy: occupancy,
        segment_speed_limit: limit,
        segment_default_speed_limit: lane.speed_limit,
        segment_congestion_ratio: (1.0 - ratio).clamp(0.0, 1.0),
        segment_speed_ratio: ratio,
        segment_speed_pressure: occupancy * (1.0 - ratio.min(1.0)),
        road_speed,
        road_density: road_vehicles / road_length,
        road_occupancy: (road_vehicles / road_storage).min(1.0),
        current_speed_limits: road
            .iter()
            .map(|&k| (net.lanes[k].id.clone(), s.lanes[k].effective_speed_limit))
            .collect(),
        default_speed_limits: road
            .iter()
            .map(|&k| (net.lanes[k].id.clone(), net.lanes[k].speed_limit))
            .collect(),
    }
}

pub fn read_highway_traffic_states(
    state: &EnvState,
    segments: &[String],
    window: f64,
) -> Result<Vec<ObservationWindow<HighwayObservation>>, ObserveError> {
    let net = state.network();
    windowed(
        state,
        segments,
        window,
        |id| kind_index(net, id, LaneKind::HighwaySegment, "highway segment"),
        |l, s, _| highway_fields(net, l, s),
    )
}

/// Eight-point compass heading of the lane from its upstream junction.
pub fn compass_direction(from: Point, to: Point) -> &'static str {
    const NAMES: [&str; 8] = ["E", "NE", "N", "NW", "W", "SW", "S", "SE"];
    let angle = (to.1 - from.1).atan2(to.0 - from.0).to_degrees().rem_euclid(360.0);
    NAMES[(((angle + 22.5) / 45.0) as usize) % 8]
}

pub fn read_ramp_lane_traffic_states(
    state: &EnvState,
    ramps: &[String],
    window: f64,
) -> Result<Vec<ObservationWindow<RampObservation>>, ObserveError> {
    let net = state.network();
    let interval = state.config.history_interval_s;
    windowed(
        state,
        ramps,
        window,
        |id| kind_index(net, id, LaneKind::Ramp, "ramp"),
        |l, s, _| {
            let lane = &net.lanes[l];
            let o = lane_fields(lane, &s.lanes[l], interval);
            let (a, b) = (net.upstream_idx(l), net.downstream_idx(l));
            RampObservation {
                vehicle_count: o.vehicle_count,
                queue_length: o.queue_length,
                queue_density: o.queue_density,
                moving_vehicles: o.moving_vehicles,
                average_speed: o.average_speed,
                average_waiting_time: o.average_waiting_time,
                cell_occupancy: o.cell_occupancy,
                lane_density: o.lane_density,
                occupancy: o.occupancy,
                halting_number: o.halting_number,
                max_speed: o.max_speed,
                arrival_rate: o.arrival_rate,
                lane_length: lane.length,
                road_id: lane.road_id().to_owned(),
                direction: compass_direction(net.junctions[a].position, net.junctions[b].position).to_owned(),
                start_intersection: lane.upstream.to_string(),
                end_intersection: lane.downstream.to_string(),
            }
        },
    )
}

fn transit_fields(state: &EnvState, r: usize, s: &RouteSample, now: f64) -> TransitObservation {
    let net = state.network();
    let route = &net.routes[r];
    let cap = route.vehicle_capacity;
    let vehicles = s
        .vehicles
        .iter()
        .map(|v| TransitVehicleObservation {
            id: v.id.clone(),
            departure_time: v.departure_time,
            travel_time: now - v.departure_time,
            current_edge: route
                .edge_sequence
                .get(v.edge)
                .map_or_else(|| route.station_sequence[v.edge].to_string(), ToString::to_string),
            speed: v.speed,
            passenger_count: v.passengers,
            load_ratio: if cap > 0 {
                f64::from(v.passengers) / f64::from(cap)
            } else {
                0.0
            },
            next_station: v
                .next_station
                .and_then(|k| route.station_sequence.get(k))
                .map(ToString::to_string),
            next_station_dwell_time: if v.dwell_remaining > 0.0 {
                v.dwell_remaining
            } else {
                s.next_dwell
            },
        })
        .collect::<Vec<_>>();
    let waits = &s.waiting;
    TransitObservation {
        active_vehicles: vehicles.len() as u32,
        headway: s.headway,
        station_count: route.station_sequence.len() as u32,
        capacity: cap,
        vehicles,
        waiting_count: waits.len() as u32,
        avg_waiting_time: if waits.is_empty() {
            0.0
        } else {
            waits.iter().sum::<f64>() / waits.len() as f64
        },
        max_waiting_time: waits.iter().copied().fold(0.0, f64::max),
        waiting_time_distribution: WaitingDistribution::from_waits(waits),
    }
}

/// Wire form of a transit observation, with the mode-specific count name.
pub fn transit_to_json(mode: TransitMode, o: &TransitObservation) -> serde_json::Value {
    let mut v = serde_json::to_value(o).expect("serializable");
    let obj = v.as_object_mut().expect("object");
    let count = obj.remove("active_vehicles").expect("field present");
    let key = match mode {
        TransitMode::Bus => "active_buses",
        TransitMode::Subway => "active_trains",
    };
    obj.insert(key.to_owned(), count);
    v
}

fn read_transit(
    state: &EnvState,
    routes: &[String],
    window: f64,
    mode: TransitMode,
) -> Result<Vec<ObservationWindow<TransitObservation>>, ObserveError> {
    let net = state.network();
    windowed(
        state,
        routes,
        window,
        |id| {
            let r = net.route_idx(id).ok_or_else(|| ObserveError::UnknownEntity {
                kind: "route",
                id: id.to_owned(),
            })?;
            if net.routes[r].mode != mode {
                return Err(ObserveError::WrongKind {
                    id: id.to_owned(),
                    expected: if mode == TransitMode::Bus {
                        "bus route"
                    } else {
                        "subway route"
                    },
                });
            }
            Ok(r)
        },
        |r, s, _| transit_fields(state, r, &s.routes[r], s.time),
    )
}

pub fn read_bus_states(
    state: &EnvState,
    routes: &[String],
    window: f64,
) -> Result<Vec<ObservationWindow<TransitObservation>>, ObserveError> {
    read_transit(state, routes, window, TransitMode::Bus)
}

pub fn read_subway_states(
    state: &EnvState,
    routes: &[String],
    window: f64,
) -> Result<Vec<ObservationWindow<TransitObservation>>, ObserveError> {
    read_transit(state, routes, window, TransitMode::Subway)
}

/// All routes of a mode, by id.
pub fn routes_of_mode(net: &TrafficNetwork, mode: TransitMode) -> Vec<RouteId> {
    net.routes
        .iter()
        .filter(|r| r.mode == mode)
        .map(|r| r.id.clone())
        .collect()
}

fn fleet_fields(net: &TrafficNetwork, s: &Snapshot) -> FleetObservation {
    let taxis = &s.fleet.taxis;
    let count = |st: TaxiStatus| taxis.iter().filter(|t| t.status == st).count() as u32;
    let fleet_size = taxis.len() as u32;
    let idle = count(TaxiStatus::Idle);
    FleetObservation {
        fleet_size,
        idle_count: idle,
        pickup_count: count(TaxiStatus::Pickup),
        occupied_count: count(TaxiStatus::Occupied),
        utilization_rate: if fleet_size > 0 {
            f64::from(fleet_size - idle) / f64::from(fleet_size)
        } else {
            0.0
        },
        pending_reservations: s.fleet.pending,
        taxis: taxis
            .iter()
            .map(|t| TaxiObservation {
                id: t.id.clone(),
                taxi_state: t.status,
                customers: t.customers,
                current_edge: t.edge.map(|l| net.lanes[l].id.to_string()),
                current_taz: t.zone.map(|z| net.zones[z].id.to_string()),
                position: t.position,
                speed: t.speed,
                cumulative_income: t.income,
                recent_order_count: t.recent_orders,
            })
            .collect(),
    }
}

/// Fleet features; `ids` empty means the whole fleet.
pub fn read_taxi_traffic_states(
    state: &EnvState,
    ids: &[String],
    window: f64,
) -> Result<ObservationWindow<FleetObservation>, ObserveError> {
    let net = state.network();
    for id in ids {
        if !state.fleet.taxis.iter().any(|t| t.id.as_str() == id) {
            return Err(ObserveError::UnknownEntity {
                kind: "taxi",
                id: id.clone(),
            });
        }
    }
    let samples = window_samples(state, window)?;
    Ok(ObservationWindow {
        entity: "fleet".into(),
        samples: samples
            .iter()
            .map(|s| {
                let mut o = fleet_fields(net, s);
                if !ids.is_empty() {
                    o.taxis.retain(|t| ids.iter().any(|i| i == t.id.as_str()));
                }
                (s.time, o)
            })
            .collect(),
    })
}

/// Aggregate over a set of lanes in one sample.
fn aggregate(net: &TrafficNetwork, lanes: &[usize], s: &Snapshot, junctions: u32) -> GlobalObservation {
    let n = lanes.len();
    if n == 0 {
        return GlobalObservation {
            intersection_count: junctions,
            ..Default::default()
        };
    }
    let mean = |f: &dyn Fn(usize) -> f64| lanes.iter().map(|&l| f(l)).sum::<f64>() / n as f64;
    GlobalObservation {
        total_vehicles: lanes
            .iter()
            .map(|&l| f64::from(s.lanes[l].queue + s.lanes[l].moving))
            .sum(),
        avg_queue_length: mean(&|l| f64::from(s.lanes[l].queue)),
        avg_speed: mean(&|l| s.lanes[l].mean_speed),
        avg_waiting_time: mean(&|l| s.lanes[l].mean_waiting),
        congestion_level: mean(&|l| {
            (f64::from(s.lanes[l].queue + s.lanes[l].moving) / net.lanes[l].storage_capacity() as f64).min(1.0)
        }),
        intersection_count: junctions,
        lane_count: n as u32,
    }
}

fn average_over_samples(samples: &[GlobalObservation]) -> GlobalObservation {
    let k = samples.len().max(1) as f64;
    let first = samples.first().cloned().unwrap_or_default();
    GlobalObservation {
        total_vehicles: samples.iter().map(|g| g.total_vehicles).sum::<f64>() / k,
        avg_queue_length: samples.iter().map(|g| g.avg_queue_length).sum::<f64>() / k,
        avg_speed: samples.iter().map(|g| g.avg_speed).sum::<f64>() / k,
        avg_waiting_time: samples.iter().map(|g| g.avg_waiting_time).sum::<f64>() / k,
        congestion_level: samples.iter().map(|g| g.congestion_level).sum::<f64>() / k,
        intersection_count: first.intersection_count,
        lane_count: first.lane_count,
    }
}

/// Zone aggregate, averaged over the samples of the window.
pub fn analyze_zone_traffic(state: &EnvState, zone: &str, window: f64) -> Result<GlobalObservation, ObserveError> {
    let net = state.network();
    let z = net
        .zone_idx(zone)
        .ok_or_else(|| ObserveError::UnknownZone(zone.to_owned()))?;
    let lanes = net.zone_lane_indices(z);
    let junctions = net.zones[z].infrastructure.junctions.len() as u32;
    let samples = window_samples(state, window)?;
    let per: Vec<_> = samples.iter().map(|s| aggregate(net, &lanes, s, junctions)).collect();
    Ok(average_over_samples(&per))
}

pub fn calculate_network_metrics(state: &EnvState, window: f64) -> Result<NetworkMetrics, ObserveError> {
    let net = state.network();
    let lanes: Vec<usize> = (0..net.lanes.len()).collect();
    let samples = window_samples(state, window)?;
    let per: Vec<_> = samples
        .iter()
        .map(|s| aggregate(net, &lanes, s, net.junctions.len() as u32))
        .collect();
    let global = average_over_samples(&per);
    let tp = samples
        .iter()
        .map(|s| {
            lanes
                .iter()
                .map(|&l| net.lanes[l].saturation_flow * s.lanes[l].green_fraction)
                .sum::<f64>()
        })
        .sum::<f64>()
        / samples.len().max(1) as f64;
    Ok(NetworkMetrics {
        congestion_index: global.congestion_level,
        global,
        throughput_potential: tp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub lane: LaneId,
    pub queue_length: u32,
    pub average_speed: f64,
}

/// Lanes with `queue ≥ queue_threshold` or `average_speed ≤ speed_threshold`,
/// longest queue first, then by lane id.
pub fn identify_congestion_hotspots(
    state: &EnvState,
    queue_threshold: f64,
    speed_threshold: f64,
) -> Result<Vec<Hotspot>, ObserveError> {
    if !(queue_threshold > 0.0 && speed_threshold > 0.0) {
        return Err(ObserveError::BadThreshold);
    }
    let net = state.network();
    let mut out: Vec<Hotspot> = (0..net.lanes.len())
        .map(|l| (l, state.lane_sample(l)))
        .filter(|(_, s)| f64::from(s.queue) >= queue_threshold || s.mean_speed <= speed_threshold)
        .map(|(l, s)| Hotspot {
            lane: net.lanes[l].id.clone(),
            queue_length: s.queue,
            average_speed: s.mean_speed,
        })
        .collect();
    out.sort_by(|a, b| b.queue_length.cmp(&a.queue_length).then_with(|| a.lane.cmp(&b.lane)));
    Ok(out)
}

/// Available taxis by Euclidean distance to `target`, ties by id.
pub fn rank_idle_taxis_by_distance(fleet: &[TaxiSnapshot], target: Point) -> Vec<TaxiId> {
    let mut idle: Vec<&TaxiSnapshot> = fleet.iter().filter(|t| t.available).collect();
    idle.sort_by(|a, b| {
        a.position
            .distance(&target)
            .total_cmp(&b.position.distance(&target))
            .then_with(|| a.id.cmp(&b.id))
    });
    idle.into_iter().map(|t| t.id.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub entity: String,
    pub feature: String,
    pub horizon: usize,
    pub values: Vec<f64>,
    pub p: usize,
    pub d: usize,
    /// Intercept followed by lag coefficients; empty on fallback.
    pub coefficients: Vec<f64>,
    /// Regression was singular and the last value was carried forward.
    pub fallback: bool,
}

/// AR(p) with intercept fitted by least squares on the d-times differenced
/// series, forecast recursively and integrated back.
pub fn predict_arima(series: &[f64], horizon: usize, p: usize, d: usize) -> Result<Forecast, ObserveError> {
    if p > 3 || d > 1 {
        return Err(ObserveError::BadOrder { p, d });
    }
    if horizon == 0 {
        return Err(ObserveError::BadHorizon);
    }
    let needed = p + d + 2;
    if series.len() < needed {
        return Err(ObserveError::SeriesTooShort {
            len: series.len(),
            p,
            d,
            needed,
        });
    }
    let y: Vec<f64> = if d == 1 {
        series.windows(2).map(|w| w[1] - w[0]).collect()
    } else {
        series.to_vec()
    };
    let rows = y.len() - p;
    let x = DMatrix::from_fn(rows, p + 1, |i, j| if j == 0 { 1.0 } else { y[p + i - j] });
    let b = DVector::from_fn(rows, |i, _| y[p + i]);
    let svd = x.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * (rows.max(p + 1) as f64) * f64::EPSILON * 16.0;
    let rank = svd.rank(tol.max(1e-300));

    let (coefficients, diffs, fallback) = if rank < p + 1 {
        let last = *y.last().expect("non-empty");
        (Vec::new(), vec![last; horizon], true)
    } else {
        let beta = svd.solve(&b, tol).expect("u and v were computed");
        let coef: Vec<f64> = beta.iter().copied().collect();
        let mut hist = y.clone();
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let n = hist.len();
            let next = coef[0] + (1..=p).map(|k| coef[k] * hist[n - k]).sum::<f64>();
            hist.push(next);
            out.push(next);
        }
        (coef, out, false)
    };
    let values = if d == 1 {
        let mut level = *series.last().expect("non-empty");
        diffs
            .iter()
            .map(|dx| {
                level += dx;
                level
            })
            .collect()
    } else {
        diffs
    };
    Ok(Forecast {
        entity: String::new(),
        feature: String::new(),
        horizon,
        values,
        p,
        d,
        coefficients,
        fallback,
    })
}

/// Forecast one numeric feature of an observation window.
pub fn predict_window<T: Serialize>(
    window: &ObservationWindow<T>,
    feature: &str,
    horizon: usize,
    p: usize,
    d: usize,
) -> Result<Forecast, ObserveError> {
    let series = window.series(feature)?;
    let mut f = predict_arima(&series, horizon, p, d)?;
    f.entity = window.entity.clone();
    f.feature = feature.to_owned();
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar1_doubling_recovered() {
        let s: Vec<f64> = (0..10).map(|k| 2f64.powi(k)).collect();
        let f = predict_arima(&s, 3, 1, 0).unwrap();
        assert!(!f.fallback);
        assert!((f.coefficients[1] - 2.0).abs() < 1e-6);
        assert!(f.coefficients[0].abs() < 1e-6);
        for (k, v) in f.values.iter().enumerate() {
            let exact = 2f64.powi(10 + k as i32);
            assert!((v - exact).abs() < 1e-6 * exact);
        }
    }

    #[test]
    fn ramp_continues_with_differencing() {
        let s: Vec<f64> = (0..8).map(|k| 3.0 + 0.5 * k as f64).collect();
        let f = predict_arima(&s, 4, 1, 1).unwrap();
        for (k, v) in f.values.iter().enumerate() {
            assert!((v - (3.0 + 0.5 * (8 + k) as f64)).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_series_is_fixed_point() {
        let f = predict_arima(&[4.0; 6], 5, 2, 0).unwrap();
        assert!(f.values.iter().all(|v| (v - 4.0).abs() < 1e-9));
    }

    #[test]
    fn order_and_length_checks() {
        assert!(matches!(
            predict_arima(&[1.0; 10], 1, 4, 0),
            Err(ObserveError::BadOrder { .. })
        ));
        assert!(matches!(
            predict_arima(&[1.0, 2.0, 3.0], 1, 1, 1),
            Err(ObserveError::SeriesTooShort { needed: 4, .. })
        ));
    }

    #[test]
    fn taxi_ranking() {
        let t = |id: &str, x: f64, available: bool| TaxiSnapshot {
            id: id.into(),
            available,
            position: Point(x, 0.0),
        };
        let fleet = [
            t("c", 3.0, true),
            t("a", 1.0, true),
            t("b", 2.0, true),
            t("z", 0.0, false),
        ];
        let ids: Vec<String> = rank_idle_taxis_by_distance(&fleet, Point(0.0, 0.0))
            .into_iter()
            .map(|i| i.0)
            .collect();
        assert_eq!(ids, ["a", "b", "c"]);
        let tie = [t("q", 1.0, true), t("p", -1.0, true)];
        assert_eq!(rank_idle_taxis_by_distance(&tie, Point(0.0, 0.0))[0].as_str(), "p");
        assert!(rank_idle_taxis_by_distance(&[], Point(0.0, 0.0)).is_empty());
    }

    #[test]
    fn waiting_buckets() {
        let d = WaitingDistribution::from_waits(&[0.0, 59.9, 60.0, 200.0, 300.0]);
        assert_eq!(
            (d.under_60, d.from_60_to_180, d.from_180_to_300, d.over_300),
            (2, 1, 1, 1)
        );
    }

    #[test]
    fn compass() {
        assert_eq!(compass_direction(Point(0.0, 0.0), Point(1.0, 0.0)), "E");
        assert_eq!(compass_direction(Point(0.0, 0.0), Point(0.0, 1.0)), "N");
        assert_eq!(compass_direction(Point(0.0, 0.0), Point(-1.0, -1.0)), "SW");
    }
}
