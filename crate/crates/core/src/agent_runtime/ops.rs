//! Whitelisted analysis operations, static resources and module
//! capability sheets.

use std::collections::{BTreeMap, BTreeSet};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::controllers::{
    greedy_dispatch, Reposition, DEFAULT_ALINEA_GAIN, DEFAULT_ALINEA_TARGET, MAX_CYCLE_S, METER_CYCLE_S, MIN_CYCLE_S,
    MIN_HEADWAY_S, SPEED_LIMIT_BOUNDS,
};
use crate::dynamics::EnvState;
use crate::ids::{TaxiId, ZoneId};
use crate::memory::{CacheKey, ContextCache};
use crate::network::{LaneKind, Point, TrafficNetwork, TransitMode};
use crate::observe::{self, compass_direction, routes_of_mode};
use crate::tasks::TaskId;

use super::protocol::{Dependencies, ErrorCode, ErrorReply};

/// Operations a DATA_ANALYSIS turn or an `observe` message may name.
pub const WHITELIST: [&str; 19] = [
    "read_lane_traffic_states",
    "read_highway_traffic_states",
    "read_ramp_lane_traffic_states",
    "read_bus_states",
    "read_subway_states",
    "read_taxi_traffic_states",
    "analyze_zone_traffic",
    "calculate_network_metrics",
    "identify_congestion_hotspots",
    "predict_arima",
    "rank_idle_taxis_by_distance",
    "dispatch_taxi",
    "reposition_taxi",
    "get_zone_infrastructure",
    "get_zones_by_infrastructure",
    "get_static_resource",
    "save_cache",
    "load_cache",
    "list_cache",
];

pub const STATIC_RESOURCES: [&str; 20] = [
    "zone_dict",
    "lane_dict",
    "lane_inter_graph",
    "highway_segment_graph",
    "highway_segment_dict",
    "ramp_lane_graph",
    "transit_graph",
    "zone_graph",
    "network_graphs",
    "network_dicts",
    "bus_route_info",
    "current_signal_config",
    "current_highway_speed_limit_config",
    "current_ramp_metering_config",
    "current_bus_schedule",
    "current_subway_schedule",
    "current_taxi_config",
    "taxi_fleet_state",
    "pending_reservations",
    "taz_stats",
];

pub const DEFAULT_WINDOW_S: f64 = 300.0;

fn bad_args(op: &str, e: impl std::fmt::Display) -> ErrorReply {
    ErrorReply::new(ErrorCode::BadArguments, format!("{op}: {e}")).debuggable()
}

fn args<T: DeserializeOwned>(op: &str, v: &Value) -> Result<T, ErrorReply> {
    let v = if v.is_null() { json!({}) } else { v.clone() };
    serde_json::from_value(v).map_err(|e| bad_args(op, e))
}

fn to_value<T: serde::Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

pub fn unknown_operation(op: &str) -> ErrorReply {
    ErrorReply {
        whitelist: Some(WHITELIST.iter().map(|s| (*s).to_owned()).collect()),
        ..ErrorReply::new(
            ErrorCode::UnknownOperation,
            format!("operation \"{op}\" is not available; see the whitelist"),
        )
        .debuggable()
    }
}

#[derive(Deserialize)]
struct WindowArgs {
    #[serde(default)]
    ids: Option<Vec<String>>,
    #[serde(default)]
    lanes: Option<Vec<String>>,
    #[serde(default)]
    segments: Option<Vec<String>>,
    #[serde(default)]
    ramps: Option<Vec<String>>,
    #[serde(default)]
    routes: Option<Vec<String>>,
    #[serde(default)]
    taxis: Option<Vec<String>>,
    #[serde(default = "default_window")]
    window: f64,
}

impl WindowArgs {
    fn ids(&self) -> Option<Vec<String>> {
        [
            &self.ids,
            &self.lanes,
            &self.segments,
            &self.ramps,
            &self.routes,
            &self.taxis,
        ]
        .into_iter()
        .find_map(Clone::clone)
    }
}

fn default_window() -> f64 {
    DEFAULT_WINDOW_S
}

#[derive(Deserialize)]
struct ZoneArgs {
    zone: String,
    #[serde(default = "default_window")]
    window: f64,
}

#[derive(Deserialize)]
struct HotspotArgs {
    #[serde(default = "default_queue_threshold")]
    queue_threshold: f64,
    #[serde(default = "default_speed_threshold")]
    speed_threshold: f64,
}

fn default_queue_threshold() -> f64 {
    20.0
}

fn default_speed_threshold() -> f64 {
    2.0
}

#[derive(Deserialize)]
struct ArimaArgs {
    #[serde(default)]
    series: Option<Vec<f64>>,
    #[serde(default)]
    lane: Option<String>,
    #[serde(default)]
    feature: Option<String>,
    #[serde(default = "default_window")]
    window: f64,
    #[serde(default = "default_horizon")]
    horizon: usize,
    #[serde(default = "default_p")]
    p: usize,
    #[serde(default)]
    d: usize,
}

fn default_horizon() -> usize {
    6
}

fn default_p() -> usize {
    1
}

#[derive(Deserialize)]
struct PointArgs {
    position: Point,
}

#[derive(Deserialize)]
struct RepositionArgs {
    taxi: String,
    zone: String,
}

#[derive(Deserialize)]
struct KindArgs {
    kind: String,
}

#[derive(Deserialize)]
struct NameArgs {
    name: String,
}

#[derive(Deserialize)]
struct SaveArgs {
    label: String,
    value: Value,
    #[serde(default)]
    kind: Option<String>,
    #[serde(default)]
    task: Option<TaskId>,
    #[serde(default)]
    zones: BTreeSet<ZoneId>,
    #[serde(default)]
    window: Option<(f64, f64)>,
}

#[derive(Deserialize)]
struct LabelArgs {
    label: String,
}

fn observe_err(op: &str, e: impl std::fmt::Display) -> ErrorReply {
    bad_args(op, e)
}

fn ids_or(ids: Option<Vec<String>>, all: impl FnOnce() -> Vec<String>) -> Vec<String> {
    ids.unwrap_or_else(all)
}

fn lanes_of(net: &TrafficNetwork, kind: LaneKind) -> Vec<String> {
    net.lanes_of_kind(kind).map(|l| net.lanes[l].id.to_string()).collect()
}

/// Runs one whitelisted operation. With a `save` label in `raw_args`, the
/// result is also stored in the episode cache.
pub fn execute(state: &EnvState, escc: &mut ContextCache, op: &str, raw_args: &Value) -> Result<Value, ErrorReply> {
    let net = state.network();
    let result = match op {
        "read_lane_traffic_states" => {
            let a: WindowArgs = args(op, raw_args)?;
            let ids = ids_or(a.ids(), || lanes_of(net, LaneKind::Urban));
            to_value(observe::read_lane_traffic_states(state, &ids, a.window).map_err(|e| observe_err(op, e))?)
        }
        "read_highway_traffic_states" => {
            let a: WindowArgs = args(op, raw_args)?;
            let ids = ids_or(a.ids(), || lanes_of(net, LaneKind::HighwaySegment));
            to_value(observe::read_highway_traffic_states(state, &ids, a.window).map_err(|e| observe_err(op, e))?)
        }
        "read_ramp_lane_traffic_states" => {
            let a: WindowArgs = args(op, raw_args)?;
            let ids = ids_or(a.ids(), || lanes_of(net, LaneKind::Ramp));
            to_value(observe::read_ramp_lane_traffic_states(state, &ids, a.window).map_err(|e| observe_err(op, e))?)
        }
        "read_bus_states" | "read_subway_states" => {
            let a: WindowArgs = args(op, raw_args)?;
            let mode = if op == "read_bus_states" {
                TransitMode::Bus
            } else {
                TransitMode::Subway
            };
            let ids = ids_or(a.ids(), || {
                routes_of_mode(net, mode).iter().map(|r| r.to_string()).collect()
            });
            let windows = if mode == TransitMode::Bus {
                observe::read_bus_states(state, &ids, a.window)
            } else {
                observe::read_subway_states(state, &ids, a.window)
            }
            .map_err(|e| observe_err(op, e))?;
            Value::Array(
                windows
                    .iter()
                    .map(|w| {
                        json!({
                            "entity": w.entity,
                            "samples": w.samples.iter()
                                .map(|(t, o)| json!([t, observe::transit_to_json(mode, o)]))
                                .collect::<Vec<_>>(),
                        })
                    })
                    .collect(),
            )
        }
        "read_taxi_traffic_states" => {
            let a: WindowArgs = args(op, raw_args)?;
            let ids = a.ids().unwrap_or_default();
            to_value(observe::read_taxi_traffic_states(state, &ids, a.window).map_err(|e| observe_err(op, e))?)
        }
        "analyze_zone_traffic" => {
            let a: ZoneArgs = args(op, raw_args)?;
            to_value(observe::analyze_zone_traffic(state, &a.zone, a.window).map_err(|e| observe_err(op, e))?)
        }
        "calculate_network_metrics" => {
            let a: WindowArgs = args(op, raw_args)?;
            to_value(observe::calculate_network_metrics(state, a.window).map_err(|e| observe_err(op, e))?)
        }
        "identify_congestion_hotspots" => {
            let a: HotspotArgs = args(op, raw_args)?;
            to_value(
                observe::identify_congestion_hotspots(state, a.queue_threshold, a.speed_threshold)
                    .map_err(|e| observe_err(op, e))?,
            )
        }
        "predict_arima" => {
            let a: ArimaArgs = args(op, raw_args)?;
            let forecast = match (a.series, a.lane) {
                (Some(series), _) => observe::predict_arima(&series, a.horizon, a.p, a.d),
                (None, Some(lane)) => {
                    let feature = a.feature.as_deref().unwrap_or("queue_length");
                    let w =
                        observe::read_lane_traffic_states(state, &[lane], a.window).map_err(|e| observe_err(op, e))?;
                    observe::predict_window(&w[0], feature, a.horizon, a.p, a.d)
                }
                (None, None) => return Err(bad_args(op, "give either `series` or `lane`")),
            };
            to_value(forecast.map_err(|e| observe_err(op, e))?)
        }
        "rank_idle_taxis_by_distance" => {
            let a: PointArgs = args(op, raw_args)?;
            to_value(observe::rank_idle_taxis_by_distance(
                &state.taxi_snapshots(),
                a.position,
            ))
        }
        "dispatch_taxi" => to_value(greedy_dispatch(&state.taxi_snapshots(), &state.reservation_snapshots())),
        "reposition_taxi" => {
            let a: RepositionArgs = args(op, raw_args)?;
            if !state.fleet.taxis.iter().any(|t| t.id.as_str() == a.taxi) {
                return Err(bad_args(op, format!("unknown taxi {}", a.taxi)));
            }
            if net.zone_idx(&a.zone).is_none() {
                return Err(bad_args(op, format!("unknown zone {}", a.zone)));
            }
            to_value(Reposition {
                taxi: TaxiId::new(a.taxi),
                zone: ZoneId::new(a.zone),
            })
        }
        "get_zone_infrastructure" => {
            let a: ZoneArgs = args(op, raw_args)?;
            to_value(net.get_zone_infrastructure(&a.zone).map_err(|e| observe_err(op, e))?)
        }
        "get_zones_by_infrastructure" => {
            let a: KindArgs = args(op, raw_args)?;
            to_value(
                net.get_zones_by_infrastructure(&a.kind)
                    .map_err(|e| observe_err(op, e))?,
            )
        }
        "get_static_resource" => {
            let a: NameArgs = args(op, raw_args)?;
            static_resource(state, &a.name).ok_or_else(|| {
                bad_args(
                    op,
                    format!(
                        "unknown resource \"{}\"; known: {}",
                        a.name,
                        STATIC_RESOURCES.join(", ")
                    ),
                )
            })?
        }
        "save_cache" => {
            let a: SaveArgs = args(op, raw_args)?;
            let key = CacheKey {
                zones: a.zones,
                window: a.window.unwrap_or((state.clock, state.clock)),
                task: a.task,
                kind: a.kind.unwrap_or_else(|| "note".into()),
            };
            let text = serde_json::to_string(&a.value).expect("serializable");
            escc.put(&a.label, text, key, state.tick).map_err(|e| bad_args(op, e))?;
            json!({ "saved": a.label })
        }
        "load_cache" => {
            let a: LabelArgs = args(op, raw_args)?;
            let text = escc.get(&a.label).map_err(|e| bad_args(op, e))?;
            serde_json::from_str(text).unwrap_or(Value::String(text.to_owned()))
        }
        "list_cache" => to_value(escc.list()),
        _ => return Err(unknown_operation(op)),
    };
    if let Some(label) = raw_args.get("save").and_then(Value::as_str) {
        if !matches!(op, "save_cache" | "load_cache" | "list_cache") {
            let window = raw_args.get("window").and_then(Value::as_f64).unwrap_or(0.0);
            let zones = raw_args
                .get("zone")
                .and_then(Value::as_str)
                .map(|z| BTreeSet::from([ZoneId::from(z)]))
                .unwrap_or_default();
            let task = raw_args
                .get("task")
                .and_then(Value::as_str)
                .and_then(|t| t.parse().ok());
            let key = CacheKey {
                zones,
                window: (state.clock - window, state.clock),
                task,
                kind: op.to_owned(),
            };
            let text = serde_json::to_string(&result).expect("serializable");
            escc.put(label, text, key, state.tick).map_err(|e| bad_args(op, e))?;
        }
    }
    Ok(result)
}

fn graph(edges: impl IntoIterator<Item = (String, String)>) -> Value {
    let edges: Vec<(String, String)> = edges.into_iter().collect();
    let nodes: BTreeSet<&String> = edges.iter().flat_map(|(a, b)| [a, b]).collect();
    json!({ "nodes": nodes, "edges": edges })
}

fn lane_entry(net: &TrafficNetwork, l: usize) -> Value {
    let lane = &net.lanes[l];
    let up = net.junctions[net.upstream_idx(l)].position;
    let down = net.junctions[net.downstream_idx(l)].position;
    json!({
        "kind": lane.kind,
        "road": lane.road_id(),
        "length": lane.length,
        "speed_limit": lane.speed_limit,
        "saturation_flow": lane.saturation_flow,
        "storage_capacity": lane.storage_capacity(),
        "from": lane.upstream,
        "to": lane.downstream,
        "direction": compass_direction(up, down),
        "start": up,
        "end": down,
        "successors": lane.successors,
    })
}

fn lane_dict(net: &TrafficNetwork, kind: Option<LaneKind>) -> Value {
    Value::Object(
        (0..net.lanes.len())
            .filter(|&l| kind.is_none_or(|k| net.lanes[l].kind == k))
            .map(|l| (net.lanes[l].id.to_string(), lane_entry(net, l)))
            .collect(),
    )
}

fn transit_graph(net: &TrafficNetwork) -> Value {
    let edges = net.routes.iter().flat_map(|r| {
        r.station_sequence
            .windows(2)
            .map(|w| (w[0].to_string(), w[1].to_string()))
            .collect::<Vec<_>>()
    });
    let mut g = graph(edges);
    g["routes"] = Value::Object(
        net.routes
            .iter()
            .map(|r| {
                (
                    r.id.to_string(),
                    json!({"mode": r.mode, "stations": r.station_sequence, "edges": r.edge_sequence}),
                )
            })
            .collect(),
    );
    g
}

fn lane_graph(net: &TrafficNetwork) -> Value {
    graph((0..net.lanes.len()).flat_map(|l| {
        net.lane_graph[l]
            .iter()
            .map(move |&s| (net.lanes[l].id.to_string(), net.lanes[s].id.to_string()))
    }))
}

fn road_graph(net: &TrafficNetwork) -> Value {
    let mut edges = BTreeSet::new();
    for l in 0..net.lanes.len() {
        for &s in &net.lane_graph[l] {
            let (a, b) = (net.lanes[l].road_id(), net.lanes[s].road_id());
            if a != b {
                edges.insert((a.to_owned(), b.to_owned()));
            }
        }
    }
    graph(edges)
}

fn schedules(state: &EnvState, mode: TransitMode) -> Value {
    let net = state.network();
    Value::Object(
        state
            .routes
            .iter()
            .enumerate()
            .filter(|(r, _)| net.routes[*r].mode == mode)
            .map(|(r, s)| {
                (
                    net.routes[r].id.to_string(),
                    json!({
                        "headway": s.schedule.headway,
                        "default_headway": net.routes[r].default_headway,
                        "dwell_override": s.schedule.dwell_override,
                        "next_departure": s.next_departure,
                        "active_vehicles": s.vehicles.len(),
                    }),
                )
            })
            .collect(),
    )
}

/// One of the twenty static resources, or `None` for an unknown name.
pub fn static_resource(state: &EnvState, name: &str) -> Option<Value> {
    let net = state.network();
    let v = match name {
        "zone_dict" => Value::Object(net.zones.iter().map(|z| (z.id.to_string(), to_value(z))).collect()),
        "lane_dict" => lane_dict(net, None),
        "lane_inter_graph" => graph((0..net.lanes.len()).flat_map(|l| {
            let lane = &net.lanes[l];
            [
                (lane.upstream.to_string(), lane.id.to_string()),
                (lane.id.to_string(), lane.downstream.to_string()),
            ]
        })),
        "highway_segment_graph" => graph(net.lanes_of_kind(LaneKind::HighwaySegment).flat_map(|l| {
            net.lane_graph[l]
                .iter()
                .filter(|&&s| net.lanes[s].kind == LaneKind::HighwaySegment)
                .map(move |&s| (net.lanes[l].id.to_string(), net.lanes[s].id.to_string()))
        })),
        "highway_segment_dict" => lane_dict(net, Some(LaneKind::HighwaySegment)),
        "ramp_lane_graph" => Value::Object(
            net.lanes_of_kind(LaneKind::Ramp)
                .map(|l| {
                    let upstream: Vec<&str> = (0..net.lanes.len())
                        .filter(|&k| net.lane_graph[k].contains(&l))
                        .map(|k| net.lanes[k].id.as_str())
                        .collect();
                    let downstream: Vec<&str> = net.lane_graph[l].iter().map(|&k| net.lanes[k].id.as_str()).collect();
                    (net.lanes[l].id.to_string(), json!({"upstream": upstream, "downstream": downstream}))
                })
                .collect(),
        ),
        "transit_graph" => transit_graph(net),
        "zone_graph" => graph(net.zone_graph.iter().enumerate().flat_map(|(a, bs)| {
            bs.iter()
                .map(move |&b| (net.zones[a].id.to_string(), net.zones[b].id.to_string()))
        })),
        "network_graphs" => json!({
            "lane_graph": lane_graph(net),
            "road_graph": road_graph(net),
            "transit_graph": transit_graph(net),
        }),
        "network_dicts" => {
            let mut roads: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
            for lane in &net.lanes {
                roads.entry(lane.road_id()).or_default().push(lane.id.as_str());
            }
            json!({
                "lane_dict": lane_dict(net, None),
                "road_dict": roads,
                "station_dict": net.stations.iter().map(|s| (s.id.to_string(), to_value(s))).collect::<BTreeMap<_, _>>(),
            })
        }
        "bus_route_info" => Value::Object(
            net.routes
                .iter()
                .enumerate()
                .filter(|(_, r)| r.mode == TransitMode::Bus)
                .map(|(k, r)| {
                    let s = &state.routes[k];
                    (
                        r.id.to_string(),
                        json!({
                            "stations": r.station_sequence,
                            "edges": r.edge_sequence,
                            "capacity": r.vehicle_capacity,
                            "default_headway": r.default_headway,
                            "headway": s.schedule.headway,
                            "dispatched": s.dispatched,
                            "active_vehicles": s.vehicles.iter().map(|v| &v.id).collect::<Vec<_>>(),
                        }),
                    )
                })
                .collect(),
        ),
        "current_signal_config" => Value::Object(
            state
                .signals
                .iter()
                .map(|(&j, s)| {
                    let phases: Vec<&str> = net.junctions[j].phases.iter().map(|p| p.id.as_str()).collect();
                    (
                        net.junctions[j].id.to_string(),
                        json!({
                            "cycle_time": s.plan.cycle_time,
                            "greens": s.plan.greens,
                            "lost_time": s.plan.lost_time,
                            "phases": phases,
                            "active_phase": s.active_phase,
                        }),
                    )
                })
                .collect(),
        ),
        "current_highway_speed_limit_config" => Value::Object(
            net.lanes_of_kind(LaneKind::HighwaySegment)
                .map(|l| {
                    (
                        net.lanes[l].id.to_string(),
                        json!({"limit": state.lanes[l].effective_speed_limit, "default": net.lanes[l].speed_limit}),
                    )
                })
                .collect(),
        ),
        "current_ramp_metering_config" => Value::Object(
            state
                .ramps
                .iter()
                .map(|(&l, r)| {
                    (
                        net.lanes[l].id.to_string(),
                        json!({"open_duration": r.plan.open_duration, "feedback": r.plan.feedback, "open_now": r.open_now}),
                    )
                })
                .collect(),
        ),
        "current_bus_schedule" => schedules(state, TransitMode::Bus),
        "current_subway_schedule" => schedules(state, TransitMode::Subway),
        "current_taxi_config" => json!({
            "fleet_size": state.fleet.taxis.len(),
            "auto_dispatch": state.config.auto_dispatch,
            "dispatch_rule": "nearest idle taxi, reservations in arrival order",
            "fare_base": state.config.fare_base,
            "fare_per_km": state.config.fare_per_km,
        }),
        "taxi_fleet_state" => to_value(state.fleet_sample()),
        "pending_reservations" => Value::Array(
            state
                .fleet
                .pending
                .iter()
                .map(|r| {
                    json!({
                        "id": r.id,
                        "pickup": net.junctions[r.pickup].id,
                        "dropoff": net.junctions[r.dropoff].id,
                        "requested_at": r.requested_at,
                    })
                })
                .collect(),
        ),
        "taz_stats" => Value::Object(
            net.zones
                .iter()
                .enumerate()
                .map(|(z, zone)| {
                    let demand = state
                        .fleet
                        .pending
                        .iter()
                        .filter(|r| net.zone_of_junction(r.pickup) == Some(z))
                        .count();
                    let supply = state
                        .fleet
                        .taxis
                        .iter()
                        .filter(|t| t.available() && net.zone_of_junction(t.junction) == Some(z))
                        .count();
                    let rate = if demand == 0 { 1.0 } else { (supply as f64 / demand as f64).min(1.0) };
                    (zone.id.to_string(), json!({"demand": demand, "supply": supply, "matching_rate": rate}))
                })
                .collect(),
        ),
        _ => return None,
    };
    Some(v)
}

/// Dependencies among the enabled modules.
pub fn dependencies(tasks: &[TaskId]) -> BTreeMap<TaskId, Dependencies> {
    tasks
        .iter()
        .map(|&t| {
            let affects = t.affects().iter().copied().filter(|a| tasks.contains(a)).collect();
            let affected_by = tasks.iter().copied().filter(|o| o.affects().contains(&t)).collect();
            (t, Dependencies { affects, affected_by })
        })
        .collect()
}

fn config_resource(task: TaskId) -> &'static str {
    match task {
        TaskId::SignalTiming => "current_signal_config",
        TaskId::HighwaySpeedLimit => "current_highway_speed_limit_config",
        TaskId::RampMetering => "current_ramp_metering_config",
        TaskId::BusScheduling => "current_bus_schedule",
        TaskId::SubwayScheduling => "current_subway_schedule",
        TaskId::TaxiDispatching => "current_taxi_config",
    }
}

fn metric_unit(kind: crate::tasks::MetricKind) -> &'static str {
    use crate::tasks::MetricKind::*;
    match kind {
        Throughput => "veh/h",
        AvgWaiting | AvgTravel | PassengerWaiting => "s",
        AvgSpeed => "m/s",
        AvgQueue => "veh",
        FuelKg => "kg",
        ElectricityKwh => "kWh",
        Income => "currency",
        Dropoffs => "count",
    }
}

/// Action schema, bounds, current configuration and metric definitions of
/// one module.
pub fn control_api(state: &EnvState, task: TaskId, enabled: &[TaskId]) -> Value {
    let net = state.network();
    let (schema, bounds) = match task {
        TaskId::SignalTiming => (
            json!({"signals": {"<junction_id>": {"junction": "string", "cycle_time": "seconds",
                "greens": "seconds per phase, in phase order", "lost_time": "seconds"}}}),
            json!({
                "cycle_time": [MIN_CYCLE_S, MAX_CYCLE_S],
                "rule": "sum(greens) + lost_time = cycle_time",
                "lost_time_per_phase": state.config.lost_time_per_phase,
                "phases": state.signals.keys().map(|&j| {
                    let jn = &net.junctions[j];
                    (jn.id.to_string(), jn.phases.iter().map(|p| json!({
                        "id": p.id, "min_green": p.min_green, "max_green": p.max_green,
                        "movements": p.green_movements,
                    })).collect::<Vec<_>>())
                }).collect::<BTreeMap<_, _>>(),
            }),
        ),
        TaskId::HighwaySpeedLimit => (
            json!({"speed_limits": {"<segment_id>": {"segment": "string", "limit": "m/s"}}}),
            json!({"limit_factor_of_default": [SPEED_LIMIT_BOUNDS.0, SPEED_LIMIT_BOUNDS.1]}),
        ),
        TaskId::RampMetering => (
            json!({"ramps": {"<ramp_id>": {"ramp": "string", "open_duration": "seconds per 60 s cycle",
                "feedback": {"gain": "seconds per occupancy unit", "target_occupancy": "fraction"}}}}),
            json!({"open_duration": [0.0, METER_CYCLE_S], "meter_cycle": METER_CYCLE_S,
                "alinea_defaults": {"gain": DEFAULT_ALINEA_GAIN, "target_occupancy": DEFAULT_ALINEA_TARGET}}),
        ),
        TaskId::BusScheduling | TaskId::SubwayScheduling => (
            json!({"transit": {"<route_id>": {"route": "string", "headway": "seconds",
                "dwell_override": {"<station_id>": "seconds"}}}}),
            json!({"headway_min": MIN_HEADWAY_S, "dwell_override_min": 0.0}),
        ),
        TaskId::TaxiDispatching => (
            json!({"dispatch": {"assignments": [{"taxi": "string", "reservation": "integer"}],
                "repositions": [{"taxi": "string", "zone": "string"}]}}),
            json!({"rule": "each taxi and reservation at most once; only idle taxis"}),
        ),
    };
    let deps = dependencies(enabled).remove(&task).unwrap_or_default();
    let resource = config_resource(task);
    json!({
        "module": task,
        "affects": deps.affects,
        "affected_by": deps.affected_by,
        "action_schema": schema,
        "bounds": bounds,
        resource: static_resource(state, resource),
        "metrics": task.metrics().iter().map(|m| json!({
            "name": m, "column": m.column(), "unit": metric_unit(*m), "higher_is_better": m.higher_is_better(),
        })).collect::<Vec<_>>(),
        "callable_functions": WHITELIST,
        "static_resources": STATIC_RESOURCES,
    })
}
