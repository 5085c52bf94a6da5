//! Static road and transit network.
//!
//! The network is loaded from a JSON document with top-level arrays `zones`,
//! `junctions`, `lanes`, `routes` and `stations`. Every cross reference is
//! resolved and checked once at load time; afterwards the network is
//! immutable and shared behind an `Arc` by every consumer.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{JunctionId, LaneId, RouteId, StationId, ZoneId};

/// Effective footprint of one queued vehicle.
pub const VEHICLE_LENGTH_M: f64 = 7.5;

/// Default impedance of trips that start and end in the same zone.
pub const DEFAULT_INTRA_ZONE_FLOOR_S: f64 = 60.0;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("cannot read network file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("network parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid network: {0}")]
    Validation(String),
    #[error("{owner} references unknown {kind} \"{missing}\"")]
    DanglingReference {
        owner: String,
        kind: &'static str,
        missing: String,
    },
    #[error("unknown zone \"{0}\"")]
    UnknownZone(String),
    #[error("unknown junction \"{0}\"")]
    UnknownJunction(String),
    #[error("unknown lane \"{0}\"")]
    UnknownLane(String),
    #[error("unknown infrastructure kind \"{0}\" (expected lane, junction, highway, ramp or station)")]
    UnknownKind(String),
    #[error("zone {from} cannot reach zone {to} over the road network")]
    Unreachable { from: ZoneId, to: ZoneId },
}

/// Planar coordinates in meters, serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Point(pub f64, pub f64);

impl Point {
    pub fn distance(&self, other: &Point) -> f64 {
        (self.0 - other.0).hypot(self.1 - other.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    Urban,
    HighwaySegment,
    Ramp,
    TransitOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitMode {
    Bus,
    Subway,
}

impl fmt::Display for TransitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransitMode::Bus => "bus",
            TransitMode::Subway => "subway",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfrastructureKind {
    Lane,
    Junction,
    Highway,
    Ramp,
    Station,
}

impl InfrastructureKind {
    pub const ALL: [InfrastructureKind; 5] = [
        InfrastructureKind::Lane,
        InfrastructureKind::Junction,
        InfrastructureKind::Highway,
        InfrastructureKind::Ramp,
        InfrastructureKind::Station,
    ];
}

impl FromStr for InfrastructureKind {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lane" | "lanes" => Ok(Self::Lane),
            "junction" | "junctions" | "intersection" | "intersections" => Ok(Self::Junction),
            "highway" | "highways" => Ok(Self::Highway),
            "ramp" | "ramps" => Ok(Self::Ramp),
            "station" | "stations" => Ok(Self::Station),
            _ => Err(NetworkError::UnknownKind(s.to_owned())),
        }
    }
}

/// Identifiers of the infrastructure contained in one zone.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ZoneInfrastructure {
    #[serde(default)]
    pub lanes: Vec<LaneId>,
    #[serde(default)]
    pub junctions: Vec<JunctionId>,
    #[serde(default)]
    pub highways: Vec<LaneId>,
    #[serde(default)]
    pub ramps: Vec<LaneId>,
    #[serde(default)]
    pub stations: Vec<StationId>,
}

impl ZoneInfrastructure {
    pub fn ids_of(&self, kind: InfrastructureKind) -> Vec<&str> {
        match kind {
            InfrastructureKind::Lane => self.lanes.iter().map(|l| l.as_str()).collect(),
            InfrastructureKind::Junction => self.junctions.iter().map(|j| j.as_str()).collect(),
            InfrastructureKind::Highway => self.highways.iter().map(|l| l.as_str()).collect(),
            InfrastructureKind::Ramp => self.ramps.iter().map(|l| l.as_str()).collect(),
            InfrastructureKind::Station => self.stations.iter().map(|s| s.as_str()).collect(),
        }
    }

    pub fn contains_kind(&self, kind: InfrastructureKind) -> bool {
        !self.ids_of(kind).is_empty()
    }

    /// Every identifier in the listing, in kind order.
    pub fn identifiers(&self) -> Vec<String> {
        InfrastructureKind::ALL
            .iter()
            .flat_map(|k| self.ids_of(*k).into_iter().map(str::to_owned))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.identifiers().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: ZoneId,
    pub centroid: Point,
    pub population_density: f64,
    pub poi_count: u32,
    #[serde(flatten)]
    pub infrastructure: ZoneInfrastructure,
}

/// A permitted `(from_lane, to_lane)` movement through a junction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Movement(pub LaneId, pub LaneId);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub id: String,
    pub green_movements: Vec<Movement>,
    pub min_green: f64,
    pub max_green: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub id: JunctionId,
    pub position: Point,
    #[serde(default)]
    pub incoming_lanes: Vec<LaneId>,
    #[serde(default)]
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub signalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    /// Road grouping used for road-level aggregates; defaults to the lane id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub road: Option<String>,
    pub length: f64,
    pub speed_limit: f64,
    pub saturation_flow: f64,
    pub upstream: JunctionId,
    pub downstream: JunctionId,
    #[serde(default)]
    pub successors: Vec<LaneId>,
    pub kind: LaneKind,
}

impl Lane {
    pub fn storage_capacity(&self) -> usize {
        storage_capacity(self.length)
    }

    pub fn free_flow_time(&self) -> f64 {
        self.length / self.speed_limit
    }

    pub fn road_id(&self) -> &str {
        self.road.as_deref().unwrap_or(self.id.as_str())
    }
}

/// `floor(length / 7.5 m)`, never below one vehicle.
pub fn storage_capacity(length: f64) -> usize {
    ((length / VEHICLE_LENGTH_M).floor() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitRoute {
    pub id: RouteId,
    pub mode: TransitMode,
    pub station_sequence: Vec<StationId>,
    /// One lane per gap between consecutive stations.
    pub edge_sequence: Vec<LaneId>,
    pub default_headway: f64,
    pub vehicle_capacity: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: StationId,
    pub zone: ZoneId,
    pub junction: JunctionId,
    pub routes_served: Vec<RouteId>,
}

/// On-disk layout of a network document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub zones: Vec<Zone>,
    pub junctions: Vec<Junction>,
    pub lanes: Vec<Lane>,
    #[serde(default)]
    pub routes: Vec<TransitRoute>,
    #[serde(default)]
    pub stations: Vec<Station>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intra_zone_floor: Option<f64>,
}

/// Validated, indexed network.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficNetwork {
    pub zones: Vec<Zone>,
    pub junctions: Vec<Junction>,
    pub lanes: Vec<Lane>,
    pub routes: Vec<TransitRoute>,
    pub stations: Vec<Station>,
    /// Directed zone adjacency, by zone index.
    pub zone_graph: Vec<BTreeSet<usize>>,
    /// Lane successors, by lane index.
    pub lane_graph: Vec<Vec<usize>>,
    pub intra_zone_floor: f64,
    zone_index: BTreeMap<ZoneId, usize>,
    junction_index: BTreeMap<JunctionId, usize>,
    lane_index: BTreeMap<LaneId, usize>,
    route_index: BTreeMap<RouteId, usize>,
    station_index: BTreeMap<StationId, usize>,
    lanes_from: Vec<Vec<usize>>,
    zone_of_junction: Vec<Option<usize>>,
    zone_anchor: Vec<usize>,
}

/// Reads and validates a network file.
pub fn load_network(path: impl AsRef<Path>) -> Result<TrafficNetwork, NetworkError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    TrafficNetwork::from_json(&text)
}

fn index_of<K: Ord + Clone + fmt::Display>(
    ids: impl Iterator<Item = K>,
    what: &str,
) -> Result<BTreeMap<K, usize>, NetworkError> {
    let mut map = BTreeMap::new();
    for (i, id) in ids.enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return Err(NetworkError::Validation(format!("duplicate {what} id \"{id}\"")));
        }
    }
    Ok(map)
}

fn dangling(owner: impl Into<String>, kind: &'static str, missing: impl fmt::Display) -> NetworkError {
    NetworkError::DanglingReference {
        owner: owner.into(),
        kind,
        missing: missing.to_string(),
    }
}

impl TrafficNetwork {
    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let file: NetworkFile = serde_json::from_str(text).map_err(|e| NetworkError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::from_file(file)
    }

    pub fn from_file(file: NetworkFile) -> Result<Self, NetworkError> {
        let NetworkFile {
            zones,
            junctions,
            lanes,
            routes,
            stations,
            intra_zone_floor,
        } = file;
        if zones.is_empty() {
            return Err(NetworkError::Validation("network must contain ≥ 1 zone".into()));
        }
        let zone_index = index_of(zones.iter().map(|z| z.id.clone()), "zone")?;
        let junction_index = index_of(junctions.iter().map(|j| j.id.clone()), "junction")?;
        let lane_index = index_of(lanes.iter().map(|l| l.id.clone()), "lane")?;
        let route_index = index_of(routes.iter().map(|r| r.id.clone()), "route")?;
        let station_index = index_of(stations.iter().map(|s| s.id.clone()), "station")?;

        let intra_zone_floor = intra_zone_floor.unwrap_or(DEFAULT_INTRA_ZONE_FLOOR_S);
        if !(intra_zone_floor > 0.0) {
            return Err(NetworkError::Validation("intra_zone_floor must be > 0".into()));
        }

        for lane in &lanes {
            let owner = format!("lane {}", lane.id);
            if !(lane.length > 0.0) || !(lane.speed_limit > 0.0) || !(lane.saturation_flow > 0.0) {
                return Err(NetworkError::Validation(format!(
                    "{owner}: length, speed_limit and saturation_flow must be > 0"
                )));
            }
            for j in [&lane.upstream, &lane.downstream] {
                if !junction_index.contains_key(j) {
                    return Err(dangling(owner, "junction", j));
                }
            }
            for s in &lane.successors {
                let Some(&si) = lane_index.get(s) else {
                    return Err(dangling(owner, "lane", s));
                };
                if lanes[si].upstream != lane.downstream {
                    return Err(NetworkError::Validation(format!(
                        "{owner}: successor {s} does not start at junction {}",
                        lane.downstream
                    )));
                }
            }
        }

        for junction in &junctions {
            let owner = format!("junction {}", junction.id);
            for l in &junction.incoming_lanes {
                let Some(&li) = lane_index.get(l) else {
                    return Err(dangling(owner, "lane", l));
                };
                if lanes[li].downstream != junction.id {
                    return Err(NetworkError::Validation(format!(
                        "{owner}: incoming lane {l} ends at {}",
                        lanes[li].downstream
                    )));
                }
            }
            if junction.signalized && junction.phases.is_empty() {
                return Err(NetworkError::Validation(format!(
                    "{owner} is signalized but has no phases"
                )));
            }
            for phase in &junction.phases {
                if !(phase.min_green > 0.0) || phase.min_green > phase.max_green {
                    return Err(NetworkError::Validation(format!(
                        "{owner} phase {}: require 0 < min_green ≤ max_green",
                        phase.id
                    )));
                }
                for Movement(from, to) in &phase.green_movements {
                    if !junction.incoming_lanes.contains(from) {
                        return Err(NetworkError::Validation(format!(
                            "{owner} phase {}: movement from {from} is not an incoming lane",
                            phase.id
                        )));
                    }
                    let Some(&ti) = lane_index.get(to) else {
                        return Err(dangling(owner, "lane", to));
                    };
                    let fi = lane_index[from];
                    if !lanes[fi].successors.contains(&lanes[ti].id) {
                        return Err(NetworkError::Validation(format!(
                            "{owner} phase {}: {to} is not a successor of {from}",
                            phase.id
                        )));
                    }
                }
            }
        }

        for zone in &zones {
            let owner = format!("zone {}", zone.id);
            if !(zone.population_density >= 0.0) {
                return Err(NetworkError::Validation(format!(
                    "{owner}: population_density must be ≥ 0"
                )));
            }
            let infra = &zone.infrastructure;
            for l in &infra.lanes {
                if !lane_index.contains_key(l) {
                    return Err(dangling(owner, "lane", l));
                }
            }
            for j in &infra.junctions {
                if !junction_index.contains_key(j) {
                    return Err(dangling(owner, "junction", j));
                }
            }
            for (list, kind, label) in [
                (&infra.highways, LaneKind::HighwaySegment, "highway"),
                (&infra.ramps, LaneKind::Ramp, "ramp"),
            ] {
                for l in list {
                    let Some(&li) = lane_index.get(l) else {
                        return Err(dangling(owner, label, l));
                    };
                    if lanes[li].kind != kind {
                        return Err(NetworkError::Validation(format!(
                            "{owner}: {l} listed as {label} but has kind {:?}",
                            lanes[li].kind
                        )));
                    }
                }
            }
            for s in &infra.stations {
                if !station_index.contains_key(s) {
                    return Err(dangling(owner, "station", s));
                }
            }
        }

        for station in &stations {
            let owner = format!("station {}", station.id);
            if !zone_index.contains_key(&station.zone) {
                return Err(dangling(owner, "zone", &station.zone));
            }
            if !junction_index.contains_key(&station.junction) {
                return Err(dangling(owner, "junction", &station.junction));
            }
            if station.routes_served.is_empty() {
                return Err(NetworkError::Validation(format!("{owner} serves no routes")));
            }
            for r in &station.routes_served {
                let Some(&ri) = route_index.get(r) else {
                    return Err(dangling(owner, "route", r));
                };
                if !routes[ri].station_sequence.contains(&station.id) {
                    return Err(NetworkError::Validation(format!(
                        "{owner} claims route {r}, which does not stop there"
                    )));
                }
            }
        }

        for route in &routes {
            let owner = format!("route {}", route.id);
            if route.station_sequence.len() < 2 {
                return Err(NetworkError::Validation(format!("{owner} needs ≥ 2 stations")));
            }
            if route.edge_sequence.len() + 1 != route.station_sequence.len() {
                return Err(NetworkError::Validation(format!(
                    "{owner}: expected {} edges for {} stations",
                    route.station_sequence.len() - 1,
                    route.station_sequence.len()
                )));
            }
            if !(route.default_headway > 0.0) || route.vehicle_capacity == 0 {
                return Err(NetworkError::Validation(format!(
                    "{owner}: default_headway and vehicle_capacity must be > 0"
                )));
            }
            let mut station_junctions = Vec::new();
            for s in &route.station_sequence {
                let Some(&si) = station_index.get(s) else {
                    return Err(dangling(owner, "station", s));
                };
                if !stations[si].routes_served.contains(&route.id) {
                    return Err(NetworkError::Validation(format!(
                        "{owner} stops at {s}, which does not list the route"
                    )));
                }
                station_junctions.push(&stations[si].junction);
            }
            for (k, e) in route.edge_sequence.iter().enumerate() {
                let Some(&li) = lane_index.get(e) else {
                    return Err(dangling(owner, "lane", e));
                };
                let lane = &lanes[li];
                if &lane.upstream != station_junctions[k] || &lane.downstream != station_junctions[k + 1] {
                    return Err(NetworkError::Validation(format!(
                        "{owner}: edge {e} does not connect {} to {}",
                        route.station_sequence[k],
                        route.station_sequence[k + 1]
                    )));
                }
            }
        }

        let mut lanes_from = vec![Vec::new(); junctions.len()];
        for (i, lane) in lanes.iter().enumerate() {
            lanes_from[junction_index[&lane.upstream]].push(i);
        }
        let lane_graph: Vec<Vec<usize>> = lanes
            .iter()
            .map(|l| l.successors.iter().map(|s| lane_index[s]).collect())
            .collect();

        let mut zone_of_junction = vec![None; junctions.len()];
        for (zi, zone) in zones.iter().enumerate() {
            for j in &zone.infrastructure.junctions {
                zone_of_junction[junction_index[j]].get_or_insert(zi);
            }
        }
        let mut zone_graph = vec![BTreeSet::new(); zones.len()];
        for lane in &lanes {
            let (Some(a), Some(b)) = (
                zone_of_junction[junction_index[&lane.upstream]],
                zone_of_junction[junction_index[&lane.downstream]],
            ) else {
                continue;
            };
            if a != b {
                zone_graph[a].insert(b);
            }
        }

        let road_junction: Vec<bool> = (0..junctions.len())
            .map(|j| {
                lanes.iter().any(|l| {
                    l.kind != LaneKind::TransitOnly
                        && (junction_index[&l.upstream] == j || junction_index[&l.downstream] == j)
                })
            })
            .collect();
        let mut zone_anchor = Vec::with_capacity(zones.len());
        for zone in &zones {
            let own: Vec<usize> = zone
                .infrastructure
                .junctions
                .iter()
                .map(|j| junction_index[j])
                .filter(|&j| road_junction[j])
                .collect();
            let pool: Vec<usize> = if own.is_empty() {
                (0..junctions.len()).filter(|&j| road_junction[j]).collect()
            } else {
                own
            };
            let anchor = pool
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    let da = junctions[a].position.distance(&zone.centroid);
                    let db = junctions[b].position.distance(&zone.centroid);
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .ok_or_else(|| NetworkError::Validation("network has no junction with road lanes".into()))?;
            zone_anchor.push(anchor);
        }

        Ok(Self {
            zones,
            junctions,
            lanes,
            routes,
            stations,
            zone_graph,
            lane_graph,
            intra_zone_floor,
            zone_index,
            junction_index,
            lane_index,
            route_index,
            station_index,
            lanes_from,
            zone_of_junction,
            zone_anchor,
        })
    }

    pub fn to_file(&self) -> NetworkFile {
        NetworkFile {
            zones: self.zones.clone(),
            junctions: self.junctions.clone(),
            lanes: self.lanes.clone(),
            routes: self.routes.clone(),
            stations: self.stations.clone(),
            intra_zone_floor: Some(self.intra_zone_floor),
        }
    }

    pub fn zone_idx(&self, id: &str) -> Option<usize> {
        self.zone_index.get(id).copied()
    }

    pub fn junction_idx(&self, id: &str) -> Option<usize> {
        self.junction_index.get(id).copied()
    }

    pub fn lane_idx(&self, id: &str) -> Option<usize> {
        self.lane_index.get(id).copied()
    }

    pub fn route_idx(&self, id: &str) -> Option<usize> {
        self.route_index.get(id).copied()
    }

    pub fn station_idx(&self, id: &str) -> Option<usize> {
        self.station_index.get(id).copied()
    }

    pub fn zone(&self, id: &str) -> Result<&Zone, NetworkError> {
        self.zone_idx(id)
            .map(|i| &self.zones[i])
            .ok_or_else(|| NetworkError::UnknownZone(id.to_owned()))
    }

    pub fn lane(&self, id: &str) -> Result<&Lane, NetworkError> {
        self.lane_idx(id)
            .map(|i| &self.lanes[i])
            .ok_or_else(|| NetworkError::UnknownLane(id.to_owned()))
    }

    pub fn upstream_idx(&self, lane: usize) -> usize {
        self.junction_index[&self.lanes[lane].upstream]
    }

    pub fn downstream_idx(&self, lane: usize) -> usize {
        self.junction_index[&self.lanes[lane].downstream]
    }

    /// Lanes leaving a junction, by index.
    pub fn lanes_from(&self, junction: usize) -> &[usize] {
        &self.lanes_from[junction]
    }

    /// First zone listing the junction, if any.
    pub fn zone_of_junction(&self, junction: usize) -> Option<usize> {
        self.zone_of_junction[junction]
    }

    /// Road junction closest to the zone centroid; trips start and end here.
    pub fn zone_anchor(&self, zone: usize) -> usize {
        self.zone_anchor[zone]
    }

    pub fn lanes_of_kind(&self, kind: LaneKind) -> impl Iterator<Item = usize> + '_ {
        self.lanes
            .iter()
            .enumerate()
            .filter(move |(_, l)| l.kind == kind)
            .map(|(i, _)| i)
    }

    /// Shortest free-flow lane path between two junctions over road lanes.
    ///
    /// For `from == to` the shortest cycle of at least one lane is returned.
    /// Ties between equal-cost paths resolve toward lower lane indices.
    pub fn shortest_lane_path(&self, from: usize, to: usize) -> Option<(Vec<usize>, f64)> {
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl Ord for Item {
            fn cmp(&self, other: &Self) -> Ordering {
                other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Item {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }

        let n = self.lanes.len();
        let usable = |l: usize| self.lanes[l].kind != LaneKind::TransitOnly;
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut heap = BinaryHeap::new();
        for &l in self.lanes_from(from) {
            if usable(l) {
                dist[l] = self.lanes[l].free_flow_time();
                heap.push(Item(dist[l], l));
            }
        }
        let mut best: Option<usize> = None;
        while let Some(Item(d, l)) = heap.pop() {
            if d > dist[l] {
                continue;
            }
            if self.downstream_idx(l) == to {
                best = Some(l);
                break;
            }
            for &s in &self.lane_graph[l] {
                if !usable(s) {
                    continue;
                }
                let nd = d + self.lanes[s].free_flow_time();
                if nd < dist[s] {
                    dist[s] = nd;
                    prev[s] = l;
                    heap.push(Item(nd, s));
                }
            }
        }
        let last = best?;
        let mut path = vec![last];
        let mut cur = last;
        while prev[cur] != usize::MAX {
            cur = prev[cur];
            path.push(cur);
        }
        path.reverse();
        Some((path, dist[last]))
    }

    /// Free-flow impedance between two zones.
    pub fn free_flow_travel_time(&self, origin: &str, dest: &str) -> Result<f64, NetworkError> {
        let o = self
            .zone_idx(origin)
            .ok_or_else(|| NetworkError::UnknownZone(origin.into()))?;
        let d = self
            .zone_idx(dest)
            .ok_or_else(|| NetworkError::UnknownZone(dest.into()))?;
        self.impedance(o, d)
    }

    pub fn impedance(&self, o: usize, d: usize) -> Result<f64, NetworkError> {
        let (ja, jb) = (self.zone_anchor(o), self.zone_anchor(d));
        if o == d || ja == jb {
            return Ok(self.intra_zone_floor);
        }
        self.shortest_lane_path(ja, jb)
            .map(|(_, t)| t)
            .ok_or_else(|| NetworkError::Unreachable {
                from: self.zones[o].id.clone(),
                to: self.zones[d].id.clone(),
            })
    }

    /// Full zone-by-zone impedance table.
    pub fn impedance_matrix(&self) -> Result<Vec<Vec<f64>>, NetworkError> {
        let n = self.zones.len();
        (0..n).map(|o| (0..n).map(|d| self.impedance(o, d)).collect()).collect()
    }

    pub fn get_zone_infrastructure(&self, zone: &str) -> Result<&ZoneInfrastructure, NetworkError> {
        Ok(&self.zone(zone)?.infrastructure)
    }

    pub fn get_zones_by_infrastructure(&self, kind: &str) -> Result<BTreeSet<ZoneId>, NetworkError> {
        let kind: InfrastructureKind = kind.parse()?;
        Ok(self.zones_with(kind))
    }

    pub fn zones_with(&self, kind: InfrastructureKind) -> BTreeSet<ZoneId> {
        self.zones
            .iter()
            .filter(|z| z.infrastructure.contains_kind(kind))
            .map(|z| z.id.clone())
            .collect()
    }

    /// Lanes listed by the zone (its `lanes`, `highways` and `ramps`), deduplicated.
    pub fn zone_lane_indices(&self, zone: usize) -> Vec<usize> {
        let infra = &self.zones[zone].infrastructure;
        let set: BTreeSet<usize> = infra
            .lanes
            .iter()
            .chain(&infra.highways)
            .chain(&infra.ramps)
            .map(|l| self.lane_index[l])
            .collect();
        set.into_iter().collect()
    }
}
