//! Mesoscopic point-queue simulator.
//!
//! Road vehicles traverse a lane in free-flow time, then join the lane's
//! FIFO queue. A queue discharges at the lane's saturation flow while its
//! head movement is green, the ramp meter is open and the downstream lane
//! has storage left. Buses and trains run on their route edges outside the
//! lane queues; buses pay the current queue delay of each edge they use.
//!
//! One tick runs, in order: trip injection and lane entry, signal and plan
//! update, transit, taxis, lane discharge, accumulation, exit handling.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controllers::{
    greedy_dispatch, uniform_plan, validate_action, AlineaParams, DispatchAssignment, RampMeterPlan,
    ReservationSnapshot, SignalPlan, SpeedLimitPlan, TaxiSnapshot, TransitSchedule, ValidationReport,
    DEFAULT_LOST_TIME_PER_PHASE_S, METER_CYCLE_S,
};
use crate::demand::{Mode, Trip};
use crate::ids::{JunctionId, LaneId, RouteId, TaxiId};
use crate::network::{LaneKind, Point, TrafficNetwork, TransitMode, VEHICLE_LENGTH_M};
use crate::reward::{eval_task_metrics, GlobalMetrics, MetricLogs, TaskMetrics};
use crate::tasks::TaskId;

const EPS: f64 = 1e-9;
/// Seconds over which `recent_order_count` is taken.
pub const RECENT_ORDER_WINDOW_S: f64 = 3600.0;
const RNG_DOMAIN: u64 = 0x5eed_d1a6_0000_0000;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid action: {0}")]
    InvalidAction(ValidationReport),
    #[error("trips must be sorted by departure time (trip at index {0} departs earlier than its predecessor)")]
    UnsortedTrips(usize),
    #[error("trip {trip} references unknown zone \"{zone}\"")]
    UnknownTripZone { trip: u64, zone: String },
    #[error("dt must be > 0 (got {0})")]
    BadDt(f64),
    #[error("horizon {horizon} s is not a multiple of dt {dt} s")]
    HorizonNotMultiple { horizon: f64, dt: f64 },
    #[error("consumption inputs must be ≥ 0")]
    NegativeInput,
}

/// Linear consumption coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionModel {
    pub bus_g_per_m: f64,
    pub bus_g_per_idle_s: f64,
    pub bus_g_per_stop: f64,
    pub subway_wh_per_m: f64,
    pub subway_wh_per_stop: f64,
}

impl Default for ConsumptionModel {
    fn default() -> Self {
        Self {
            bus_g_per_m: 0.07,
            bus_g_per_idle_s: 0.17,
            bus_g_per_stop: 5.0,
            subway_wh_per_m: 2.5,
            subway_wh_per_stop: 50.0,
        }
    }
}

impl ConsumptionModel {
    /// Bus fuel in grams or subway energy in watt-hours.
    pub fn update(&self, kind: TransitMode, distance_m: f64, idle_s: f64, stops: u32) -> Result<f64, DynamicsError> {
        if !(distance_m >= 0.0 && idle_s >= 0.0) {
            return Err(DynamicsError::NegativeInput);
        }
        let stops = f64::from(stops);
        Ok(match kind {
            TransitMode::Bus => {
                self.bus_g_per_m * distance_m + self.bus_g_per_idle_s * idle_s + self.bus_g_per_stop * stops
            }
            TransitMode::Subway => self.subway_wh_per_m * distance_m + self.subway_wh_per_stop * stops,
        })
    }
}

/// Consumption with the default coefficients.
pub fn consumption_update(kind: TransitMode, distance_m: f64, idle_s: f64, stops: u32) -> Result<f64, DynamicsError> {
    ConsumptionModel::default().update(kind, distance_m, idle_s, stops)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Clock at initialization, seconds since midnight.
    pub start_time: f64,
    pub fare_base: f64,
    pub fare_per_km: f64,
    pub dwell_base_s: f64,
    pub dwell_per_boarding_s: f64,
    pub consumption: ConsumptionModel,
    pub lost_time_per_phase: f64,
    /// Cycle of the initial uniform fixed-time plans.
    pub initial_cycle: f64,
    pub history_interval_s: f64,
    pub history_span_s: f64,
    /// Assign pending reservations to the nearest idle taxi every tick.
    pub auto_dispatch: bool,
    pub record_events: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            start_time: 0.0,
            fare_base: 3.0,
            fare_per_km: 1.5,
            dwell_base_s: 10.0,
            dwell_per_boarding_s: 2.0,
            consumption: ConsumptionModel::default(),
            lost_time_per_phase: DEFAULT_LOST_TIME_PER_PHASE_S,
            initial_cycle: 60.0,
            history_interval_s: 10.0,
            history_span_s: 3600.0,
            auto_dispatch: true,
            record_events: true,
        }
    }
}

/// Plans to hold for the next horizon. Empty maps keep the current
/// configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionBundle {
    pub signals: BTreeMap<JunctionId, SignalPlan>,
    pub speed_limits: BTreeMap<LaneId, SpeedLimitPlan>,
    pub ramps: BTreeMap<LaneId, RampMeterPlan>,
    pub transit: BTreeMap<RouteId, TransitSchedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dispatch: Option<DispatchAssignment>,
    pub horizon: f64,
}

impl ActionBundle {
    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
            && self.speed_limits.is_empty()
            && self.ramps.is_empty()
            && self.transit.is_empty()
            && self.dispatch.as_ref().is_none_or(DispatchAssignment::is_empty)
    }

    /// Plans of `other` override plans of `self` entity by entity.
    pub fn overlay(&self, other: &ActionBundle) -> ActionBundle {
        let mut out = self.clone();
        out.signals.extend(other.signals.clone());
        out.speed_limits.extend(other.speed_limits.clone());
        out.ramps.extend(other.ramps.clone());
        out.transit.extend(other.transit.clone());
        if other.dispatch.is_some() {
            out.dispatch = other.dispatch.clone();
        }
        out.horizon = other.horizon;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleKind {
    Private,
    Taxi,
}

#[derive(Debug, Clone, Serialize)]
pub struct Vehicle {
    pub id: u64,
    pub kind: VehicleKind,
    /// Trip id for private vehicles, taxi index for taxi legs.
    pub owner: u64,
    pub route: Vec<usize>,
    /// Index into `route` of the lane the vehicle is on or waiting for.
    pub leg: usize,
    pub depart_time: f64,
    pub waiting: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Traverse {
    pub vehicle: u64,
    pub entered_at: f64,
    pub arrive_at: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LaneState {
    pub traversing: VecDeque<Traverse>,
    pub queue: VecDeque<u64>,
    /// Vehicles waiting outside the network to enter this lane.
    pub backlog: VecDeque<u64>,
    pub effective_speed_limit: f64,
    pub entered: u64,
    pub exited: u64,
    pub discharge_credit: f64,
}

impl LaneState {
    pub fn vehicle_count(&self) -> usize {
        self.traversing.len() + self.queue.len()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SignalState {
    pub plan: SignalPlan,
    /// Clock at which the plan started its first cycle.
    pub plan_start: f64,
    /// Active phase this tick; `None` during all-red.
    pub active_phase: Option<usize>,
    /// Seconds into the current cycle.
    pub cycle_position: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RampState {
    pub plan: RampMeterPlan,
    pub open_now: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Passenger {
    pub id: u64,
    pub route: usize,
    /// Index into the route's station sequence.
    pub board_at: usize,
    pub alight_at: usize,
    pub arrival_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TransitStatus {
    Dwelling {
        station: usize,
        remaining: f64,
    },
    Traveling {
        edge: usize,
        elapsed: f64,
        duration: f64,
        delay: f64,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct TransitVehicle {
    pub id: String,
    pub route: usize,
    pub status: TransitStatus,
    pub onboard: Vec<Passenger>,
    pub departure_time: f64,
    pub distance_m: f64,
    pub idle_s: f64,
    pub stops: u32,
    /// Grams of fuel (bus) or watt-hours (subway).
    pub consumption: f64,
}

impl TransitVehicle {
    /// Current edge index and seconds of progress along it.
    pub fn position(&self) -> (usize, f64) {
        match self.status {
            TransitStatus::Dwelling { station, .. } => (station, 0.0),
            TransitStatus::Traveling { edge, elapsed, .. } => (edge, elapsed),
        }
    }

    pub fn dwell_timer(&self) -> f64 {
        match self.status {
            TransitStatus::Dwelling { remaining, .. } => remaining.max(0.0),
            TransitStatus::Traveling { .. } => 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RouteState {
    pub schedule: TransitSchedule,
    pub next_departure: f64,
    pub last_departure: Option<f64>,
    pub dispatched: u64,
    pub vehicles: Vec<TransitVehicle>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaxiStatus {
    Idle,
    Pickup,
    Occupied,
}

#[derive(Debug, Clone, Serialize)]
pub struct Reservation {
    pub id: u64,
    pub trip: u64,
    pub pickup: usize,
    pub dropoff: usize,
    pub requested_at: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Taxi {
    pub id: TaxiId,
    pub status: TaxiStatus,
    /// Junction where the taxi is parked or where its current leg started.
    pub junction: usize,
    pub vehicle: Option<u64>,
    pub reservation: Option<Reservation>,
    pub reposition_to: Option<usize>,
    pub income: f64,
    pub dropoffs: u64,
    pub dropoff_times: VecDeque<f64>,
    /// Length of the occupied leg in progress.
    pub fare_distance: f64,
}

impl Taxi {
    /// Idle, parked and not under a reposition order.
    pub fn available(&self) -> bool {
        self.status == TaxiStatus::Idle && self.vehicle.is_none() && self.reposition_to.is_none()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TaxiFleet {
    pub taxis: Vec<Taxi>,
    pub pending: Vec<Reservation>,
    pub next_reservation: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub entered: u64,
    pub exited: u64,
    pub trips_injected: u64,
    pub walk_trips: u64,
    pub unroutable_trips: u64,
    pub unserved_passengers: u64,
    pub passengers: u64,
    pub reservations: u64,
    pub waiting_vehicle_s: f64,
    pub bus_fuel_g: f64,
    pub subway_wh: f64,
    pub taxi_income: f64,
    pub dropoffs: u64,
    pub highway_distance_m: f64,
    pub highway_vehicle_s: f64,
    pub ramp_queue_vehicle_s: f64,
    pub ramp_lane_s: f64,
    pub transit_departures: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub vehicle: u64,
    pub taxi: bool,
    pub depart: f64,
    pub exit: f64,
    pub waiting: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoardingRecord {
    pub passenger: u64,
    pub route: usize,
    pub mode: TransitMode,
    pub arrival: f64,
    pub boarded: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoffRecord {
    pub taxi: usize,
    pub time: f64,
    pub fare: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    pub kind: String,
    pub entity: String,
    pub value: serde_json::Value,
}

/// Per-lane raw statistics retained in history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSample {
    pub queue: u32,
    pub moving: u32,
    /// Mean speed over vehicles on the lane, or the effective limit when empty.
    pub mean_speed: f64,
    pub mean_waiting: f64,
    /// Vehicles that entered since the previous sample.
    pub entering: u32,
    pub effective_speed_limit: f64,
    pub green_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitVehicleView {
    pub id: String,
    pub edge: usize,
    pub progress_s: f64,
    pub speed: f64,
    pub passengers: u32,
    pub departure_time: f64,
    pub next_station: Option<usize>,
    pub dwell_remaining: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSample {
    pub headway: f64,
    pub vehicles: Vec<TransitVehicleView>,
    /// Seconds waited so far by each passenger waiting for this route.
    pub waiting: Vec<f64>,
    pub next_dwell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxiView {
    pub id: TaxiId,
    pub status: TaxiStatus,
    pub edge: Option<usize>,
    pub zone: Option<usize>,
    pub position: Point,
    pub speed: f64,
    pub income: f64,
    pub recent_orders: u32,
    pub customers: u32,
    pub available: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSample {
    pub taxis: Vec<TaxiView>,
    pub pending: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub lanes: Vec<LaneSample>,
    pub routes: Vec<RouteSample>,
    pub fleet: FleetSample,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct TripRef {
    id: u64,
    origin: usize,
    destination: usize,
    mode: Mode,
    departure: f64,
}

#[derive(Debug, Default)]
struct PhaseMoves {
    moves: BTreeSet<(usize, usize)>,
    from: BTreeSet<usize>,
}

/// Index-resolved signal and ramp topology derived from the network.
#[derive(Debug, Default)]
struct Topology {
    phases: Vec<Vec<PhaseMoves>>,
    /// Lanes appearing in some phase, per junction.
    controlled: Vec<BTreeSet<usize>>,
    /// (from, to) pairs appearing in some phase, per junction.
    listed_moves: Vec<BTreeSet<(usize, usize)>>,
    highway_successors: Vec<Vec<usize>>,
    zone_road_junctions: Vec<Vec<usize>>,
}

impl Topology {
    fn build(net: &TrafficNetwork) -> Self {
        let mut t = Topology::default();
        for j in &net.junctions {
            let mut phases = Vec::new();
            let mut controlled = BTreeSet::new();
            let mut listed = BTreeSet::new();
            for p in &j.phases {
                let mut pm = PhaseMoves::default();
                for m in &p.green_movements {
                    let (Some(a), Some(b)) = (net.lane_idx(m.0.as_str()), net.lane_idx(m.1.as_str())) else {
                        continue;
                    };
                    pm.moves.insert((a, b));
                    pm.from.insert(a);
                    controlled.insert(a);
                    listed.insert((a, b));
                }
                phases.push(pm);
            }
            t.phases.push(phases);
            t.controlled.push(controlled);
            t.listed_moves.push(listed);
        }
        t.highway_successors = (0..net.lanes.len())
            .map(|l| {
                net.lane_graph[l]
                    .iter()
                    .copied()
                    .filter(|&s| net.lanes[s].kind == LaneKind::HighwaySegment)
                    .collect()
            })
            .collect();
        t.zone_road_junctions = net
            .zones
            .iter()
            .map(|z| {
                z.infrastructure
                    .junctions
                    .iter()
                    .filter_map(|j| net.junction_idx(j.as_str()))
                    .filter(|&j| {
                        net.lanes_from(j)
                            .iter()
                            .any(|&l| net.lanes[l].kind != LaneKind::TransitOnly)
                    })
                    .collect()
            })
            .collect();
        t
    }
}

/// Counter-based random draws: draw `k` uses its own ChaCha stream.
#[derive(Debug, Clone, Serialize)]
pub struct CounterRng {
    pub seed: u64,
    pub counter: u64,
}

impl CounterRng {
    pub fn index(&mut self, n: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ RNG_DOMAIN);
        rng.set_stream(self.counter);
        self.counter += 1;
        rng.random_range(0..n)
    }
}

/// Lane sequence and free-flow cost between two junctions.
type CachedRoute = Arc<(Vec<usize>, f64)>;

/// Complete simulator state. Field order is the canonical serialization
/// order used by [`EnvState::state_hash`]; the shared network, trip list
/// and derived topology are excluded.
#[derive(Debug, Clone, Serialize)]
pub struct EnvState {
    #[serde(skip)]
    net: Arc<TrafficNetwork>,
    #[serde(skip)]
    trips: Arc<Vec<TripRef>>,
    #[serde(skip)]
    topology: Arc<Topology>,
    #[serde(skip)]
    route_cache: BTreeMap<(usize, usize), Option<CachedRoute>>,
    pub config: SimConfig,
    pub seed: u64,
    pub clock: f64,
    pub tick: u64,
    next_trip: usize,
    next_vehicle: u64,
    next_passenger: u64,
    pub lanes: Vec<LaneState>,
    pub signals: BTreeMap<usize, SignalState>,
    pub ramps: BTreeMap<usize, RampState>,
    pub routes: Vec<RouteState>,
    /// Waiting passengers per station, in arrival order.
    pub stations: Vec<Vec<Passenger>>,
    pub fleet: TaxiFleet,
    pub vehicles: BTreeMap<u64, Vehicle>,
    pub counters: Counters,
    pub exits: Vec<ExitRecord>,
    pub boardings: Vec<BoardingRecord>,
    pub dropoffs: Vec<DropoffRecord>,
    pub rng: CounterRng,
    pub history: VecDeque<Snapshot>,
    lane_entered_at_sample: Vec<u64>,
    last_bundle: Option<ActionBundle>,
    last_dispatch: Option<DispatchAssignment>,
    pending_dispatch: Option<DispatchAssignment>,
    #[serde(skip)]
    events: Vec<Event>,
}

/// Builds the initial state. Taxis are parked round-robin at zone anchors.
pub fn init_state(
    net: Arc<TrafficNetwork>,
    trips: &[Trip],
    fleet_size: usize,
    seed: u64,
    config: SimConfig,
) -> Result<EnvState, DynamicsError> {
    let mut refs = Vec::with_capacity(trips.len());
    for (k, t) in trips.iter().enumerate() {
        if k > 0 && t.departure_time < trips[k - 1].departure_time {
            return Err(DynamicsError::UnsortedTrips(k));
        }
        let zone = |z: &str| {
            net.zone_idx(z).ok_or_else(|| DynamicsError::UnknownTripZone {
                trip: t.id,
                zone: z.to_owned(),
            })
        };
        refs.push(TripRef {
            id: t.id,
            origin: zone(t.origin.as_str())?,
            destination: zone(t.destination.as_str())?,
            mode: t.mode,
            departure: t.departure_time,
        });
    }
    let topology = Arc::new(Topology::build(&net));
    let lanes = net
        .lanes
        .iter()
        .map(|l| LaneState {
            traversing: VecDeque::new(),
            queue: VecDeque::new(),
            backlog: VecDeque::new(),
            effective_speed_limit: l.speed_limit,
            entered: 0,
            exited: 0,
            discharge_credit: 0.0,
        })
        .collect();
    let signals = net
        .junctions
        .iter()
        .enumerate()
        .filter(|(_, j)| j.signalized && !j.phases.is_empty())
        .map(|(k, j)| {
            let plan = uniform_plan(j, config.initial_cycle, config.lost_time_per_phase);
            (
                k,
                SignalState {
                    plan,
                    plan_start: config.start_time,
                    active_phase: None,
                    cycle_position: 0.0,
                },
            )
        })
        .collect();
    let ramps = net
        .lanes_of_kind(LaneKind::Ramp)
        .map(|l| {
            (
                l,
                RampState {
                    plan: classic_ramp_plan(&net, l),
                    open_now: true,
                },
            )
        })
        .collect();
    let routes = net
        .routes
        .iter()
        .map(|r| RouteState {
            schedule: TransitSchedule {
                route: r.id.clone(),
                headway: r.default_headway,
                dwell_override: BTreeMap::new(),
            },
            next_departure: config.start_time,
            last_departure: None,
            dispatched: 0,
            vehicles: Vec::new(),
        })
        .collect();
    let taxis = (0..fleet_size)
        .map(|k| {
            let junction = if net.zones.is_empty() {
                0
            } else {
                net.zone_anchor(k % net.zones.len())
            };
            Taxi {
                id: TaxiId::new(format!("taxi_{k}")),
                status: TaxiStatus::Idle,
                junction,
                vehicle: None,
                reservation: None,
                reposition_to: None,
                income: 0.0,
                dropoffs: 0,
                dropoff_times: VecDeque::new(),
                fare_distance: 0.0,
            }
        })
        .collect();
    let n_lanes = net.lanes.len();
    let n_stations = net.stations.len();
    Ok(EnvState {
        trips: Arc::new(refs),
        topology,
        route_cache: BTreeMap::new(),
        clock: config.start_time,
        config,
        seed,
        tick: 0,
        next_trip: 0,
        next_vehicle: 0,
        next_passenger: 0,
        lanes,
        signals,
        ramps,
        routes,
        stations: vec![Vec::new(); n_stations],
        fleet: TaxiFleet {
            taxis,
            pending: Vec::new(),
            next_reservation: 0,
        },
        vehicles: BTreeMap::new(),
        counters: Counters::default(),
        exits: Vec::new(),
        boardings: Vec::new(),
        dropoffs: Vec::new(),
        rng: CounterRng { seed, counter: 0 },
        history: VecDeque::new(),
        lane_entered_at_sample: vec![0; n_lanes],
        last_bundle: None,
        last_dispatch: None,
        pending_dispatch: None,
        events: Vec::new(),
        net,
    })
}

fn classic_ramp_plan(net: &TrafficNetwork, lane: usize) -> RampMeterPlan {
    RampMeterPlan {
        ramp: net.lanes[lane].id.clone(),
        open_duration: METER_CYCLE_S,
        feedback: Some(AlineaParams::default()),
    }
}

/// Initial plans of every controllable entity.
pub fn classic_bundle(net: &TrafficNetwork, config: &SimConfig) -> ActionBundle {
    ActionBundle {
        signals: net
            .junctions
            .iter()
            .filter(|j| j.signalized && !j.phases.is_empty())
            .map(|j| {
                (
                    j.id.clone(),
                    uniform_plan(j, config.initial_cycle, config.lost_time_per_phase),
                )
            })
            .collect(),
        speed_limits: net
            .lanes_of_kind(LaneKind::HighwaySegment)
            .map(|l| {
                let lane = &net.lanes[l];
                let plan = SpeedLimitPlan {
                    segment: lane.id.clone(),
                    limit: lane.speed_limit,
                };
                (lane.id.clone(), plan)
            })
            .collect(),
        ramps: net
            .lanes_of_kind(LaneKind::Ramp)
            .map(|l| (net.lanes[l].id.clone(), classic_ramp_plan(net, l)))
            .collect(),
        transit: net
            .routes
            .iter()
            .map(|r| {
                let sched = TransitSchedule {
                    route: r.id.clone(),
                    headway: r.default_headway,
                    dwell_override: BTreeMap::new(),
                };
                (r.id.clone(), sched)
            })
            .collect(),
        dispatch: None,
        horizon: 0.0,
    }
}

/// Result of a horizon run: metrics for every task over the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonOutcome {
    pub start: f64,
    pub end: f64,
    pub tasks: BTreeMap<TaskId, TaskMetrics>,
    pub global: GlobalMetrics,
}

/// Consuming form of [`EnvState::step`].
pub fn step(mut state: EnvState, actions: &ActionBundle, dt: f64) -> Result<EnvState, DynamicsError> {
    state.step(actions, dt)?;
    Ok(state)
}

/// Consuming form of [`EnvState::run_horizon`].
pub fn run_horizon(
    mut state: EnvState,
    actions: &ActionBundle,
    horizon: f64,
    dt: f64,
) -> Result<(EnvState, HorizonOutcome), DynamicsError> {
    let out = state.run_horizon(actions, horizon, dt)?;
    Ok((state, out))
}

pub fn clone_state(state: &EnvState) -> EnvState {
    state.clone()
}

impl EnvState {
    pub fn network(&self) -> &Arc<TrafficNetwork> {
        &self.net
    }

    /// 64-bit digest of the canonical JSON serialization.
    pub fn state_hash(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("state serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// `(entered, in_network, exited)`.
    pub fn vehicle_counts(&self) -> (u64, u64, u64) {
        let in_network = self.lanes.iter().map(|l| l.vehicle_count() as u64).sum();
        (self.counters.entered, in_network, self.counters.exited)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    /// Bundle currently in force, if any has been applied.
    pub fn last_bundle(&self) -> Option<&ActionBundle> {
        self.last_bundle.as_ref()
    }

    /// The configuration currently in force, as a bundle.
    pub fn current_bundle(&self) -> ActionBundle {
        ActionBundle {
            signals: self
                .signals
                .iter()
                .map(|(&j, s)| (self.net.junctions[j].id.clone(), s.plan.clone()))
                .collect(),
            speed_limits: self
                .net
                .lanes_of_kind(LaneKind::HighwaySegment)
                .map(|l| {
                    let id = self.net.lanes[l].id.clone();
                    let plan = SpeedLimitPlan {
                        segment: id.clone(),
                        limit: self.lanes[l].effective_speed_limit,
                    };
                    (id, plan)
                })
                .collect(),
            ramps: self
                .ramps
                .iter()
                .map(|(&l, r)| (self.net.lanes[l].id.clone(), r.plan.clone()))
                .collect(),
            transit: self
                .routes
                .iter()
                .map(|r| (r.schedule.route.clone(), r.schedule.clone()))
                .collect(),
            dispatch: None,
            horizon: 0.0,
        }
    }

    fn emit(&mut self, kind: &str, entity: impl Into<String>, value: serde_json::Value) {
        if self.config.record_events {
            self.events.push(Event {
                tick: self.tick,
                kind: kind.to_owned(),
                entity: entity.into(),
                value,
            });
        }
    }

    fn traversal_time(&self, lane: usize) -> f64 {
        self.net.lanes[lane].length / self.lanes[lane].effective_speed_limit
    }

    fn lane_path(&mut self, from: usize, to: usize) -> Option<Arc<(Vec<usize>, f64)>> {
        let net = &self.net;
        self.route_cache
            .entry((from, to))
            .or_insert_with(|| net.shortest_lane_path(from, to).map(Arc::new))
            .clone()
    }

    /// Queues a road vehicle at the entry of its first lane.
    fn spawn_vehicle(&mut self, kind: VehicleKind, owner: u64, path: &[usize], depart: f64) -> u64 {
        let id = self.next_vehicle;
        self.next_vehicle += 1;
        self.vehicles.insert(
            id,
            Vehicle {
                id,
                kind,
                owner,
                route: path.to_vec(),
                leg: 0,
                depart_time: depart,
                waiting: 0.0,
                distance: 0.0,
            },
        );
        self.lanes[path[0]].backlog.push_back(id);
        id
    }

    /// Advances the state by one tick under `actions`.
    pub fn step(&mut self, actions: &ActionBundle, dt: f64) -> Result<(), DynamicsError> {
        if !(dt > 0.0) {
            return Err(DynamicsError::BadDt(dt));
        }
        let t = self.clock;
        self.inject_trips(t, dt);
        self.enter_from_backlog(t);
        self.apply_actions(actions)?;
        self.update_controls(t, dt);
        self.step_transit(t, dt);
        self.step_taxis(t);
        let finished = self.discharge(t, dt);
        self.accumulate(dt);
        self.finish_vehicles(finished, t + dt);
        self.clock = t + dt;
        self.tick += 1;
        self.record_history();
        Ok(())
    }

    /// Runs `horizon / dt` ticks and measures every task over the window.
    pub fn run_horizon(
        &mut self,
        actions: &ActionBundle,
        horizon: f64,
        dt: f64,
    ) -> Result<HorizonOutcome, DynamicsError> {
        if !(dt > 0.0) {
            return Err(DynamicsError::BadDt(dt));
        }
        let steps = (horizon / dt).round();
        if !(horizon >= 0.0) || (steps * dt - horizon).abs() > EPS * horizon.max(1.0) {
            return Err(DynamicsError::HorizonNotMultiple { horizon, dt });
        }
        let start = self.clock;
        let counters = self.counters.clone();
        let marks = self.log_marks();
        for _ in 0..steps as u64 {
            self.step(actions, dt)?;
        }
        Ok(self.window_outcome(start, &counters, marks))
    }

    /// Current log lengths, used to slice the window's records.
    pub fn log_marks(&self) -> (usize, usize, usize) {
        (self.exits.len(), self.boardings.len(), self.dropoffs.len())
    }

    pub fn window_outcome(&self, start: f64, counters: &Counters, marks: (usize, usize, usize)) -> HorizonOutcome {
        let logs = self.metric_logs(start, counters, marks);
        let tasks = eval_task_metrics(&logs, &TaskId::ALL);
        HorizonOutcome {
            start,
            end: self.clock,
            tasks,
            global: GlobalMetrics::from_logs(&logs),
        }
    }

    /// Records of the window `[start, clock]`. Vehicles and passengers still
    /// travelling or waiting at the end are included with their elapsed times.
    pub fn metric_logs(&self, start: f64, counters: &Counters, marks: (usize, usize, usize)) -> MetricLogs {
        let end = self.clock;
        let in_network = self
            .vehicles
            .values()
            .map(|v| ExitRecord {
                vehicle: v.id,
                taxi: v.kind == VehicleKind::Taxi,
                depart: v.depart_time,
                exit: end,
                waiting: v.waiting,
                distance: v.distance,
            })
            .collect();
        let mut waiting_passengers = Vec::new();
        for station in &self.stations {
            for p in station {
                waiting_passengers.push(BoardingRecord {
                    passenger: p.id,
                    route: p.route,
                    mode: self.net.routes[p.route].mode,
                    arrival: p.arrival_time,
                    boarded: end,
                });
            }
        }
        let c = &self.counters;
        MetricLogs {
            start,
            end,
            exits: self.exits[marks.0..].to_vec(),
            in_network,
            boardings: self.boardings[marks.1..].to_vec(),
            waiting_passengers,
            dropoffs: self.dropoffs[marks.2..].to_vec(),
            bus_fuel_g: c.bus_fuel_g - counters.bus_fuel_g,
            subway_wh: c.subway_wh - counters.subway_wh,
            highway_distance_m: c.highway_distance_m - counters.highway_distance_m,
            highway_vehicle_s: c.highway_vehicle_s - counters.highway_vehicle_s,
            ramp_queue_vehicle_s: c.ramp_queue_vehicle_s - counters.ramp_queue_vehicle_s,
            ramp_lane_s: c.ramp_lane_s - counters.ramp_lane_s,
            has_highway: self.net.lanes_of_kind(LaneKind::HighwaySegment).next().is_some(),
        }
    }

    // (1) trip injection and lane entry.

    fn inject_trips(&mut self, t: f64, dt: f64) {
        let trips = Arc::clone(&self.trips);
        while let Some(trip) = trips.get(self.next_trip) {
            if trip.departure >= t + dt {
                break;
            }
            self.next_trip += 1;
            self.counters.trips_injected += 1;
            match trip.mode {
                Mode::Walk => self.counters.walk_trips += 1,
                Mode::Vehicle => {
                    let (a, b) = (
                        self.net.zone_anchor(trip.origin),
                        self.net.zone_anchor(trip.destination),
                    );
                    match self.lane_path(a, b) {
                        Some(p) => {
                            self.spawn_vehicle(VehicleKind::Private, trip.id, &p.0, trip.departure);
                        }
                        None => {
                            self.counters.unroutable_trips += 1;
                            self.emit("unroutable", format!("trip_{}", trip.id), serde_json::Value::Null);
                        }
                    }
                }
                Mode::Bus | Mode::Subway => self.add_passenger(trip),
                Mode::Taxi => {
                    let id = self.fleet.next_reservation;
                    self.fleet.next_reservation += 1;
                    self.counters.reservations += 1;
                    self.fleet.pending.push(Reservation {
                        id,
                        trip: trip.id,
                        pickup: self.net.zone_anchor(trip.origin),
                        dropoff: self.net.zone_anchor(trip.destination),
                        requested_at: trip.departure,
                    });
                }
            }
        }
    }

    /// First route of the trip's mode that stops in the origin zone and,
    /// later on, in the destination zone.
    fn add_passenger(&mut self, trip: &TripRef) {
        let wanted = if trip.mode == Mode::Bus {
            TransitMode::Bus
        } else {
            TransitMode::Subway
        };
        let net = Arc::clone(&self.net);
        let zone_of_station = |s: &crate::ids::StationId| {
            net.station_idx(s.as_str())
                .and_then(|k| net.zone_idx(net.stations[k].zone.as_str()))
        };
        for (r, route) in net.routes.iter().enumerate() {
            if route.mode != wanted {
                continue;
            }
            let zones: Vec<Option<usize>> = route.station_sequence.iter().map(zone_of_station).collect();
            let Some(board) = zones.iter().position(|z| *z == Some(trip.origin)) else {
                continue;
            };
            let Some(alight) = (board + 1..zones.len()).find(|&k| zones[k] == Some(trip.destination)) else {
                continue;
            };
            let station = net
                .station_idx(route.station_sequence[board].as_str())
                .expect("validated route");
            let id = self.next_passenger;
            self.next_passenger += 1;
            self.counters.passengers += 1;
            self.stations[station].push(Passenger {
                id,
                route: r,
                board_at: board,
                alight_at: alight,
                arrival_time: trip.departure,
            });
            return;
        }
        self.counters.unserved_passengers += 1;
        self.emit("unserved", format!("trip_{}", trip.id), serde_json::Value::Null);
    }

    fn enter_from_backlog(&mut self, t: f64) {
        for l in 0..self.lanes.len() {
            let cap = self.net.lanes[l].storage_capacity();
            let tau = self.traversal_time(l);
            let lane = &mut self.lanes[l];
            while lane.vehicle_count() < cap {
                let Some(v) = lane.backlog.pop_front() else { break };
                lane.traversing.push_back(Traverse {
                    vehicle: v,
                    entered_at: t,
                    arrive_at: t + tau,
                });
                lane.entered += 1;
                self.counters.entered += 1;
            }
        }
    }

    // (2) plans, signal timers and ramp meters.

    fn apply_actions(&mut self, actions: &ActionBundle) -> Result<(), DynamicsError> {
        if self.last_bundle.as_ref() == Some(actions) {
            return Ok(());
        }
        let report = validate_action(&self.net, actions);
        if !report.is_valid() {
            return Err(DynamicsError::InvalidAction(report));
        }
        let net = Arc::clone(&self.net);
        for (id, plan) in &actions.signals {
            let j = net.junction_idx(id.as_str()).expect("validated");
            let clock = self.clock;
            let s = self.signals.get_mut(&j).expect("validated signalized junction");
            if &s.plan != plan {
                s.plan = plan.clone();
                s.plan_start = clock;
                self.emit("signal_plan", id.as_str(), serde_json::json!(plan.cycle_time));
            }
        }
        for (id, plan) in &actions.speed_limits {
            let l = net.lane_idx(id.as_str()).expect("validated");
            if self.lanes[l].effective_speed_limit != plan.limit {
                self.lanes[l].effective_speed_limit = plan.limit;
                self.emit("speed_limit", id.as_str(), serde_json::json!(plan.limit));
            }
        }
        for (id, plan) in &actions.ramps {
            let l = net.lane_idx(id.as_str()).expect("validated");
            let r = self.ramps.get_mut(&l).expect("validated ramp");
            if &r.plan != plan {
                r.plan = plan.clone();
                self.emit("ramp_open", id.as_str(), serde_json::json!(plan.open_duration));
            }
        }
        for (id, sched) in &actions.transit {
            let r = net.route_idx(id.as_str()).expect("validated");
            let clock = self.clock;
            let route = &mut self.routes[r];
            if &route.schedule != sched {
                route.next_departure = match route.last_departure {
                    Some(last) => (last + sched.headway).max(clock),
                    None => route.next_departure,
                };
                route.schedule = sched.clone();
                self.emit("schedule", id.as_str(), serde_json::json!(sched.headway));
            }
        }
        if actions.dispatch != self.last_dispatch {
            self.last_dispatch = actions.dispatch.clone();
            self.pending_dispatch = actions.dispatch.clone();
        }
        self.last_bundle = Some(actions.clone());
        Ok(())
    }

    fn update_controls(&mut self, t: f64, dt: f64) {
        for s in self.signals.values_mut() {
            let cycle = s.plan.cycle_time;
            let pos = (t - s.plan_start).rem_euclid(cycle);
            s.cycle_position = pos;
            s.active_phase = active_phase(&s.plan, pos);
        }
        let since = t - self.config.start_time;
        let meter_pos = since.rem_euclid(METER_CYCLE_S);
        let boundary = meter_pos < dt / 2.0 && since > dt / 2.0;
        let ramp_ids: Vec<usize> = self.ramps.keys().copied().collect();
        for l in ramp_ids {
            if boundary {
                if let Some(params) = self.ramps[&l].plan.feedback {
                    let measured = self.downstream_occupancy(l);
                    let r = self.ramps.get_mut(&l).expect("present");
                    let updated = r.plan.alinea_update(measured, params);
                    if updated.open_duration != r.plan.open_duration {
                        let v = updated.open_duration;
                        r.plan = updated;
                        let id = self.net.lanes[l].id.to_string();
                        self.emit("ramp_open", id, serde_json::json!(v));
                    }
                }
            }
            let r = self.ramps.get_mut(&l).expect("present");
            r.open_now = meter_pos < r.plan.open_duration - EPS;
        }
    }

    /// Mean occupancy of the highway lanes fed by a ramp (or of all its
    /// successors when none is a highway segment).
    pub fn downstream_occupancy(&self, ramp: usize) -> f64 {
        let succ = &self.topology.highway_successors[ramp];
        let lanes: &[usize] = if succ.is_empty() {
            &self.net.lane_graph[ramp]
        } else {
            succ
        };
        if lanes.is_empty() {
            return 0.0;
        }
        lanes
            .iter()
            .map(|&l| self.lanes[l].vehicle_count() as f64 / self.net.lanes[l].storage_capacity() as f64)
            .sum::<f64>()
            / lanes.len() as f64
    }

    /// Whether the head vehicle of `lane` may take the movement to `next`
    /// (`None` leaves the network) this tick.
    fn movement_allowed(&self, lane: usize, next: Option<usize>) -> bool {
        if let Some(r) = self.ramps.get(&lane) {
            if !r.open_now {
                return false;
            }
        }
        let j = self.net.downstream_idx(lane);
        let Some(sig) = self.signals.get(&j) else {
            return true;
        };
        if !self.topology.controlled[j].contains(&lane) {
            return true;
        }
        let Some(phase) = sig.active_phase else {
            return false;
        };
        let moves = &self.topology.phases[j][phase];
        match next {
            Some(m) if self.topology.listed_moves[j].contains(&(lane, m)) => moves.moves.contains(&(lane, m)),
            _ => moves.from.contains(&lane),
        }
    }

    /// Share of the cycle during which `lane` has some green movement.
    pub fn green_fraction(&self, lane: usize) -> f64 {
        if let Some(r) = self.ramps.get(&lane) {
            return r.plan.open_duration / METER_CYCLE_S;
        }
        let j = self.net.downstream_idx(lane);
        let Some(sig) = self.signals.get(&j) else {
            return 1.0;
        };
        if !self.topology.controlled[j].contains(&lane) {
            return 1.0;
        }
        self.topology.phases[j]
            .iter()
            .enumerate()
            .filter(|(_, p)| p.from.contains(&lane))
            .map(|(k, _)| sig.plan.green_fraction(k))
            .sum::<f64>()
            .min(1.0)
    }

    // (3) transit.

    fn step_transit(&mut self, t: f64, dt: f64) {
        let net = Arc::clone(&self.net);
        for r in 0..self.routes.len() {
            if self.routes[r].next_departure <= t + EPS {
                let route = &mut self.routes[r];
                let id = format!("{}#{}", net.routes[r].id, route.dispatched);
                route.dispatched += 1;
                route.last_departure = Some(t);
                route.next_departure = t + route.schedule.headway;
                route.vehicles.push(TransitVehicle {
                    id: id.clone(),
                    route: r,
                    status: TransitStatus::Dwelling {
                        station: 0,
                        remaining: 0.0,
                    },
                    onboard: Vec::new(),
                    departure_time: t,
                    distance_m: 0.0,
                    idle_s: 0.0,
                    stops: 0,
                    consumption: 0.0,
                });
                self.counters.transit_departures += 1;
                self.emit("transit_depart", id, serde_json::json!(t));
                let k = self.routes[r].vehicles.len() - 1;
                self.arrive_station(r, k, 0, t + dt);
            }
            let mut k = 0;
            while k < self.routes[r].vehicles.len() {
                let retired = self.advance_transit_vehicle(r, k, t, dt);
                if retired {
                    let v = self.routes[r].vehicles.remove(k);
                    self.emit("transit_arrive", v.id, serde_json::json!(v.stops));
                } else {
                    k += 1;
                }
            }
        }
    }

    fn add_consumption(&mut self, r: usize, k: usize, distance: f64, idle: f64, stops: u32) {
        let mode = self.net.routes[r].mode;
        let amount = self
            .config
            .consumption
            .update(mode, distance, idle, stops)
            .expect("non-negative increments");
        self.routes[r].vehicles[k].consumption += amount;
        match mode {
            TransitMode::Bus => self.counters.bus_fuel_g += amount,
            TransitMode::Subway => self.counters.subway_wh += amount,
        }
    }

    /// Returns true when the vehicle finished its last stop.
    fn advance_transit_vehicle(&mut self, r: usize, k: usize, t: f64, dt: f64) -> bool {
        let n_stations = self.net.routes[r].station_sequence.len();
        let status = self.routes[r].vehicles[k].status;
        match status {
            TransitStatus::Dwelling { station, remaining } => {
                if remaining > EPS {
                    let idle = remaining.min(dt);
                    self.routes[r].vehicles[k].idle_s += idle;
                    self.add_consumption(r, k, 0.0, idle, 0);
                    let left = remaining - dt;
                    self.routes[r].vehicles[k].status = TransitStatus::Dwelling {
                        station,
                        remaining: left,
                    };
                    if left > EPS {
                        return false;
                    }
                }
                if station + 1 >= n_stations {
                    return true;
                }
                let lane = self
                    .net
                    .lane_idx(self.net.routes[r].edge_sequence[station].as_str())
                    .expect("validated");
                let run = self.traversal_time(lane);
                let delay = if self.net.routes[r].mode == TransitMode::Bus {
                    self.lanes[lane].queue.len() as f64 / self.net.lanes[lane].saturation_flow
                } else {
                    0.0
                };
                self.routes[r].vehicles[k].status = TransitStatus::Traveling {
                    edge: station,
                    elapsed: 0.0,
                    duration: run + delay,
                    delay,
                };
                false
            }
            TransitStatus::Traveling {
                edge,
                elapsed,
                duration,
                delay,
            } => {
                let now = elapsed + dt;
                let idle = (delay - elapsed).clamp(0.0, dt);
                if idle > 0.0 {
                    self.routes[r].vehicles[k].idle_s += idle;
                    self.add_consumption(r, k, 0.0, idle, 0);
                }
                if now + EPS < duration {
                    self.routes[r].vehicles[k].status = TransitStatus::Traveling {
                        edge,
                        elapsed: now,
                        duration,
                        delay,
                    };
                    return false;
                }
                let lane = self
                    .net
                    .lane_idx(self.net.routes[r].edge_sequence[edge].as_str())
                    .expect("validated");
                let length = self.net.lanes[lane].length;
                self.routes[r].vehicles[k].distance_m += length;
                self.add_consumption(r, k, length, 0.0, 0);
                self.arrive_station(r, k, edge + 1, t + dt);
                false
            }
        }
    }

    /// Alight, board and start dwelling at station `pos` of the route.
    fn arrive_station(&mut self, r: usize, k: usize, pos: usize, now: f64) {
        let net = Arc::clone(&self.net);
        let route = &net.routes[r];
        let station = net
            .station_idx(route.station_sequence[pos].as_str())
            .expect("validated");
        let capacity = route.vehicle_capacity as usize;
        let v = &mut self.routes[r].vehicles[k];
        v.onboard.retain(|p| p.alight_at != pos);
        let room = capacity.saturating_sub(v.onboard.len());
        let mut boarded = Vec::new();
        let mut kept = Vec::new();
        for p in self.stations[station].drain(..) {
            if p.route == r && p.board_at == pos && boarded.len() < room {
                boarded.push(p);
            } else {
                kept.push(p);
            }
        }
        self.stations[station] = kept;
        for p in &boarded {
            self.boardings.push(BoardingRecord {
                passenger: p.id,
                route: r,
                mode: route.mode,
                arrival: p.arrival_time,
                boarded: now,
            });
        }
        let n_boarded = boarded.len();
        let v = &mut self.routes[r].vehicles[k];
        v.onboard.extend(boarded);
        v.stops += 1;
        let base = self.config.dwell_base_s + self.config.dwell_per_boarding_s * n_boarded as f64;
        let dwell = self.routes[r]
            .schedule
            .dwell_override
            .get(&route.station_sequence[pos])
            .map_or(base, |o| o.max(base));
        self.routes[r].vehicles[k].status = TransitStatus::Dwelling {
            station: pos,
            remaining: dwell,
        };
        self.add_consumption(r, k, 0.0, 0.0, 1);
    }

    // (4) taxis.

    fn step_taxis(&mut self, t: f64) {
        if let Some(d) = self.pending_dispatch.take() {
            for a in &d.assignments {
                let taxi = self.fleet.taxis.iter().position(|x| x.id == a.taxi);
                let res = self.fleet.pending.iter().position(|r| r.id == a.reservation);
                match (taxi, res) {
                    (Some(ti), Some(ri)) if self.fleet.taxis[ti].available() => {
                        let res = self.fleet.pending.remove(ri);
                        self.assign(ti, res, t);
                    }
                    _ => self.emit("dispatch_skipped", a.taxi.as_str(), serde_json::json!(a.reservation)),
                }
            }
            for rp in &d.repositions {
                let Some(ti) = self.fleet.taxis.iter().position(|x| x.id == rp.taxi) else {
                    continue;
                };
                let Some(z) = self.net.zone_idx(rp.zone.as_str()) else {
                    continue;
                };
                if !self.fleet.taxis[ti].available() {
                    self.emit("reposition_skipped", rp.taxi.as_str(), serde_json::Value::Null);
                    continue;
                }
                let options = self.topology.zone_road_junctions[z].clone();
                if options.is_empty() {
                    continue;
                }
                let target = options[self.rng.index(options.len())];
                if target == self.fleet.taxis[ti].junction {
                    continue;
                }
                if self.start_leg(ti, target, t) {
                    self.fleet.taxis[ti].reposition_to = Some(target);
                    self.emit("reposition", rp.taxi.as_str(), serde_json::json!(rp.zone.as_str()));
                }
            }
        }
        if self.config.auto_dispatch && !self.fleet.pending.is_empty() {
            let taxis: Vec<TaxiSnapshot> = self
                .fleet
                .taxis
                .iter()
                .map(|x| TaxiSnapshot {
                    id: x.id.clone(),
                    available: x.available(),
                    position: self.net.junctions[x.junction].position,
                })
                .collect();
            if taxis.iter().any(|x| x.available) {
                let res = self.reservation_snapshots();
                for a in greedy_dispatch(&taxis, &res).assignments {
                    let ti = self
                        .fleet
                        .taxis
                        .iter()
                        .position(|x| x.id == a.taxi)
                        .expect("known taxi");
                    let ri = self
                        .fleet
                        .pending
                        .iter()
                        .position(|r| r.id == a.reservation)
                        .expect("pending");
                    let res = self.fleet.pending.remove(ri);
                    self.assign(ti, res, t);
                }
            }
        }
    }

    fn assign(&mut self, ti: usize, res: Reservation, t: f64) {
        let id = self.fleet.taxis[ti].id.to_string();
        self.emit("dispatch", id, serde_json::json!(res.id));
        let pickup = res.pickup;
        let taxi = &mut self.fleet.taxis[ti];
        taxi.status = TaxiStatus::Pickup;
        taxi.reservation = Some(res);
        if taxi.junction == pickup {
            self.pick_up(ti, t);
        } else if !self.start_leg(ti, pickup, t) {
            self.abandon(ti);
        }
    }

    fn abandon(&mut self, ti: usize) {
        let taxi = &mut self.fleet.taxis[ti];
        taxi.status = TaxiStatus::Idle;
        if let Some(res) = taxi.reservation.take() {
            let id = taxi.id.to_string();
            self.emit("unroutable", id, serde_json::json!(res.id));
        }
    }

    fn pick_up(&mut self, ti: usize, t: f64) {
        let id = self.fleet.taxis[ti].id.to_string();
        let taxi = &mut self.fleet.taxis[ti];
        taxi.status = TaxiStatus::Occupied;
        let res = taxi.reservation.as_ref().expect("assigned");
        let dropoff = res.dropoff;
        let rid = res.id;
        self.emit("pickup", id, serde_json::json!(rid));
        let from = self.fleet.taxis[ti].junction;
        let path = self.lane_path(from, dropoff);
        match path {
            Some(p) if from != dropoff => {
                self.fleet.taxis[ti].fare_distance = p.0.iter().map(|&l| self.net.lanes[l].length).sum();
                let vid = self.spawn_vehicle(VehicleKind::Taxi, ti as u64, &p.0, t);
                self.fleet.taxis[ti].vehicle = Some(vid);
            }
            Some(_) => {
                self.fleet.taxis[ti].fare_distance = 0.0;
                self.drop_off(ti, t);
            }
            None => self.abandon(ti),
        }
    }

    fn drop_off(&mut self, ti: usize, now: f64) {
        let fare = self.config.fare_base + self.config.fare_per_km * self.fleet.taxis[ti].fare_distance / 1000.0;
        let taxi = &mut self.fleet.taxis[ti];
        taxi.status = TaxiStatus::Idle;
        taxi.reservation = None;
        taxi.income += fare;
        taxi.dropoffs += 1;
        taxi.dropoff_times.push_back(now);
        taxi.fare_distance = 0.0;
        self.counters.taxi_income += fare;
        self.counters.dropoffs += 1;
        self.dropoffs.push(DropoffRecord {
            taxi: ti,
            time: now,
            fare,
        });
        let id = self.fleet.taxis[ti].id.to_string();
        self.emit("dropoff", id, serde_json::json!(fare));
    }

    /// Sends the taxi toward a junction; false when no road path exists.
    fn start_leg(&mut self, ti: usize, target: usize, t: f64) -> bool {
        let from = self.fleet.taxis[ti].junction;
        let Some(p) = self.lane_path(from, target) else {
            return false;
        };
        let vid = self.spawn_vehicle(VehicleKind::Taxi, ti as u64, &p.0, t);
        self.fleet.taxis[ti].vehicle = Some(vid);
        true
    }

    // (5) discharge.

    fn discharge(&mut self, t: f64, dt: f64) -> Vec<u64> {
        for lane in &mut self.lanes {
            let (arrived, still): (Vec<Traverse>, Vec<Traverse>) =
                lane.traversing.drain(..).partition(|tr| tr.arrive_at <= t + EPS);
            lane.traversing = still.into();
            lane.queue.extend(arrived.into_iter().map(|tr| tr.vehicle));
        }
        let mut finished = Vec::new();
        for l in 0..self.lanes.len() {
            let Some(&head) = self.lanes[l].queue.front() else {
                self.lanes[l].discharge_credit = 0.0;
                continue;
            };
            if !self.movement_allowed(l, self.next_lane(head)) {
                self.lanes[l].discharge_credit = 0.0;
                continue;
            }
            let sat = self.net.lanes[l].saturation_flow;
            let cap = (sat * dt).max(1.0);
            let lane_len = self.net.lanes[l].length;
            let is_highway = self.net.lanes[l].kind == LaneKind::HighwaySegment;
            self.lanes[l].discharge_credit = (self.lanes[l].discharge_credit + sat * dt).min(cap);
            while self.lanes[l].discharge_credit >= 1.0 - EPS {
                let Some(&v) = self.lanes[l].queue.front() else { break };
                let next = self.next_lane(v);
                if !self.movement_allowed(l, next) {
                    break;
                }
                if let Some(m) = next {
                    if self.lanes[m].vehicle_count() >= self.net.lanes[m].storage_capacity() {
                        break;
                    }
                }
                self.lanes[l].queue.pop_front();
                self.lanes[l].discharge_credit -= 1.0;
                self.lanes[l].exited += 1;
                if is_highway {
                    self.counters.highway_distance_m += lane_len;
                }
                let veh = self.vehicles.get_mut(&v).expect("vehicle on lane");
                veh.distance += lane_len;
                veh.leg += 1;
                match next {
                    Some(m) => {
                        let tau = self.traversal_time(m);
                        let lane = &mut self.lanes[m];
                        lane.traversing.push_back(Traverse {
                            vehicle: v,
                            entered_at: t + dt,
                            arrive_at: t + dt + tau,
                        });
                        lane.entered += 1;
                    }
                    None => finished.push(v),
                }
            }
        }
        finished
    }

    fn next_lane(&self, vehicle: u64) -> Option<usize> {
        let v = &self.vehicles[&vehicle];
        v.route.get(v.leg + 1).copied()
    }

    // (6) accumulation.

    fn accumulate(&mut self, dt: f64) {
        for l in 0..self.lanes.len() {
            let queued = self.lanes[l].queue.len();
            for k in 0..queued {
                let v = self.lanes[l].queue[k];
                self.vehicles.get_mut(&v).expect("queued vehicle").waiting += dt;
            }
            self.counters.waiting_vehicle_s += queued as f64 * dt;
            match self.net.lanes[l].kind {
                LaneKind::HighwaySegment => {
                    self.counters.highway_vehicle_s += self.lanes[l].vehicle_count() as f64 * dt;
                }
                LaneKind::Ramp => {
                    self.counters.ramp_queue_vehicle_s += queued as f64 * dt;
                    self.counters.ramp_lane_s += dt;
                }
                _ => {}
            }
        }
    }

    // (7) exits and taxi leg transitions.

    fn finish_vehicles(&mut self, finished: Vec<u64>, now: f64) {
        for v in finished {
            let veh = self.vehicles.remove(&v).expect("finished vehicle");
            self.counters.exited += 1;
            self.exits.push(ExitRecord {
                vehicle: veh.id,
                taxi: veh.kind == VehicleKind::Taxi,
                depart: veh.depart_time,
                exit: now,
                waiting: veh.waiting,
                distance: veh.distance,
            });
            if veh.kind == VehicleKind::Taxi {
                let ti = veh.owner as usize;
                let dest = self.net.downstream_idx(*veh.route.last().expect("non-empty route"));
                let taxi = &mut self.fleet.taxis[ti];
                taxi.vehicle = None;
                taxi.junction = dest;
                match taxi.status {
                    TaxiStatus::Pickup => self.pick_up(ti, now),
                    TaxiStatus::Occupied => self.drop_off(ti, now),
                    TaxiStatus::Idle => taxi.reposition_to = None,
                }
            } else {
                self.emit(
                    "exit",
                    format!("veh_{}", veh.id),
                    serde_json::json!(now - veh.depart_time),
                );
            }
        }
        let horizon = now - RECENT_ORDER_WINDOW_S;
        for taxi in &mut self.fleet.taxis {
            while taxi.dropoff_times.front().is_some_and(|&x| x < horizon) {
                taxi.dropoff_times.pop_front();
            }
        }
    }

    // History.

    fn record_history(&mut self) {
        let since = self.clock - self.config.start_time;
        let interval = self.config.history_interval_s;
        let k = (since / interval).round();
        if (since - k * interval).abs() > EPS {
            return;
        }
        let snap = self.snapshot();
        for (l, lane) in self.lanes.iter().enumerate() {
            self.lane_entered_at_sample[l] = lane.entered;
        }
        self.history.push_back(snap);
        let keep = (self.config.history_span_s / interval).round().max(1.0) as usize;
        while self.history.len() > keep {
            self.history.pop_front();
        }
    }

    /// Speed of a vehicle on a lane: traversal speed while moving, 0 when queued.
    pub fn vehicle_speed(&self, lane: usize, tr: &Traverse) -> f64 {
        let dur = tr.arrive_at - tr.entered_at;
        if dur > 0.0 {
            self.net.lanes[lane].length / dur
        } else {
            self.lanes[lane].effective_speed_limit
        }
    }

    pub fn lane_sample(&self, l: usize) -> LaneSample {
        let lane = &self.lanes[l];
        let n = lane.vehicle_count();
        let mean_speed = if n == 0 {
            lane.effective_speed_limit
        } else {
            lane.traversing.iter().map(|tr| self.vehicle_speed(l, tr)).sum::<f64>() / n as f64
        };
        let mean_waiting = if n == 0 {
            0.0
        } else {
            lane.traversing
                .iter()
                .map(|tr| tr.vehicle)
                .chain(lane.queue.iter().copied())
                .map(|v| self.vehicles[&v].waiting)
                .sum::<f64>()
                / n as f64
        };
        LaneSample {
            queue: lane.queue.len() as u32,
            moving: lane.traversing.len() as u32,
            mean_speed,
            mean_waiting,
            entering: (lane.entered - self.lane_entered_at_sample[l]) as u32,
            effective_speed_limit: lane.effective_speed_limit,
            green_fraction: self.green_fraction(l),
        }
    }

    pub fn route_sample(&self, r: usize) -> RouteSample {
        let net = &self.net;
        let route = &self.routes[r];
        let vehicles = route
            .vehicles
            .iter()
            .map(|v| {
                let (edge, progress) = v.position();
                let (speed, next_station) = match v.status {
                    TransitStatus::Dwelling { station, .. } => (0.0, Some(station)),
                    TransitStatus::Traveling {
                        edge,
                        elapsed,
                        delay,
                        duration,
                    } => {
                        let lane = net
                            .lane_idx(net.routes[r].edge_sequence[edge].as_str())
                            .expect("validated");
                        let s = if elapsed < delay {
                            0.0
                        } else {
                            net.lanes[lane].length / (duration - delay).max(EPS)
                        };
                        (s, Some(edge + 1))
                    }
                };
                TransitVehicleView {
                    id: v.id.clone(),
                    edge,
                    progress_s: progress,
                    speed,
                    passengers: v.onboard.len() as u32,
                    departure_time: v.departure_time,
                    next_station,
                    dwell_remaining: v.dwell_timer(),
                }
            })
            .collect();
        let waiting = self
            .stations
            .iter()
            .flatten()
            .filter(|p| p.route == r)
            .map(|p| (self.clock - p.arrival_time).max(0.0))
            .collect();
        RouteSample {
            headway: route.schedule.headway,
            vehicles,
            waiting,
            next_dwell: self.config.dwell_base_s,
        }
    }

    pub fn taxi_view(&self, ti: usize) -> TaxiView {
        let taxi = &self.fleet.taxis[ti];
        let net = &self.net;
        let mut view = TaxiView {
            id: taxi.id.clone(),
            status: taxi.status,
            edge: None,
            zone: net.zone_of_junction(taxi.junction),
            position: net.junctions[taxi.junction].position,
            speed: 0.0,
            income: taxi.income,
            recent_orders: taxi.dropoff_times.len() as u32,
            customers: u32::from(taxi.status == TaxiStatus::Occupied),
            available: taxi.available(),
        };
        if let Some(v) = taxi.vehicle {
            let veh = &self.vehicles[&v];
            let lane = veh.route[veh.leg.min(veh.route.len() - 1)];
            view.edge = Some(lane);
            let (a, b) = (
                net.junctions[net.upstream_idx(lane)].position,
                net.junctions[net.downstream_idx(lane)].position,
            );
            view.zone = net.zone_of_junction(net.upstream_idx(lane));
            let frac = match self.lanes[lane].traversing.iter().find(|tr| tr.vehicle == v) {
                Some(tr) => {
                    view.speed = self.vehicle_speed(lane, tr);
                    let dur = tr.arrive_at - tr.entered_at;
                    if dur > 0.0 {
                        ((self.clock - tr.entered_at) / dur).clamp(0.0, 1.0)
                    } else {
                        1.0
                    }
                }
                None if self.lanes[lane].queue.contains(&v) => 1.0,
                None => 0.0,
            };
            view.position = Point(a.0 + (b.0 - a.0) * frac, a.1 + (b.1 - a.1) * frac);
        }
        view
    }

    pub fn fleet_sample(&self) -> FleetSample {
        FleetSample {
            taxis: (0..self.fleet.taxis.len()).map(|k| self.taxi_view(k)).collect(),
            pending: self.fleet.pending.len() as u32,
        }
    }

    /// Observation sample of the live state.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            time: self.clock,
            lanes: (0..self.lanes.len()).map(|l| self.lane_sample(l)).collect(),
            routes: (0..self.routes.len()).map(|r| self.route_sample(r)).collect(),
            fleet: self.fleet_sample(),
        }
    }

    /// Position of a vehicle measured from the lane start, meters.
    pub fn vehicle_position(&self, lane: usize, vehicle: u64) -> f64 {
        let len = self.net.lanes[lane].length;
        let state = &self.lanes[lane];
        if let Some(tr) = state.traversing.iter().find(|tr| tr.vehicle == vehicle) {
            let dur = tr.arrive_at - tr.entered_at;
            return if dur > 0.0 {
                len * ((self.clock - tr.entered_at) / dur).clamp(0.0, 1.0)
            } else {
                len
            };
        }
        let k = state.queue.iter().position(|&v| v == vehicle).unwrap_or(0);
        (len - k as f64 * VEHICLE_LENGTH_M).max(0.0)
    }

    /// Taxi fleet in the shape consumed by the greedy dispatcher.
    pub fn reservation_snapshots(&self) -> Vec<ReservationSnapshot> {
        self.fleet
            .pending
            .iter()
            .map(|r| ReservationSnapshot {
                id: r.id,
                position: self.net.junctions[r.pickup].position,
                requested_at: r.requested_at,
            })
            .collect()
    }

    /// The Classic configuration: uniform fixed-time signals, default speed
    /// limits, ALINEA ramps, fixed-headway transit and greedy dispatch.
    pub fn classic_bundle(&self) -> ActionBundle {
        classic_bundle(&self.net, &self.config)
    }

    pub fn taxi_snapshots(&self) -> Vec<TaxiSnapshot> {
        self.fleet
            .taxis
            .iter()
            .map(|x| TaxiSnapshot {
                id: x.id.clone(),
                available: x.available(),
                position: self.net.junctions[x.junction].position,
            })
            .collect()
    }
}

/// Phase green at `pos` seconds into the cycle; `None` during all-red.
pub fn active_phase(plan: &SignalPlan, pos: f64) -> Option<usize> {
    let n = plan.greens.len();
    if n == 0 {
        return None;
    }
    let red = plan.lost_time / n as f64;
    let mut start = 0.0;
    for (k, g) in plan.greens.iter().enumerate() {
        if pos < start + g - EPS {
            return (pos >= start - EPS).then_some(k);
        }
        start += g + red;
        if pos < start - EPS {
            return None;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consumption_reference_values() {
        assert_eq!(consumption_update(TransitMode::Bus, 0.0, 0.0, 0).unwrap(), 0.0);
        let g = consumption_update(TransitMode::Bus, 1000.0, 60.0, 2).unwrap();
        assert!((g - 90.2).abs() < 1e-9);
        let double = consumption_update(TransitMode::Bus, 2000.0, 120.0, 4).unwrap();
        assert!((double - 2.0 * g).abs() < 1e-9);
        let wh = consumption_update(TransitMode::Subway, 1000.0, 0.0, 2).unwrap();
        assert!((wh - 2600.0).abs() < 1e-9);
        assert!(consumption_update(TransitMode::Bus, -1.0, 0.0, 0).is_err());
    }

    #[test]
    fn phase_lookup_with_all_red() {
        let plan = SignalPlan {
            junction: "J".into(),
            cycle_time: 30.0,
            greens: vec![10.0, 10.0],
            lost_time: 10.0,
        };
        assert_eq!(active_phase(&plan, 0.0), Some(0));
        assert_eq!(active_phase(&plan, 9.5), Some(0));
        assert_eq!(active_phase(&plan, 10.0), None);
        assert_eq!(active_phase(&plan, 14.9), None);
        assert_eq!(active_phase(&plan, 15.0), Some(1));
        assert_eq!(active_phase(&plan, 25.0), None);
    }
}
