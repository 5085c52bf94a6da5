//! Deterministic reference agent. It reads the static network in-process
//! and gets all live data through protocol replies.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde_json::{json, Value};

use super::protocol::{ActionKind, ClientMessage, ServerMessage};
use super::CommitRecord;
use crate::controllers::{
    webster_plan, DispatchAssignment, SignalPlan, SpeedLimitPlan, TransitSchedule, DEFAULT_LOST_TIME_PER_PHASE_S,
    MAX_CYCLE_S, MIN_CYCLE_S, MIN_HEADWAY_S,
};
use crate::dynamics::ActionBundle;
use crate::network::{TrafficNetwork, TransitMode};
use crate::observe::{HighwayObservation, LaneObservation, ObservationWindow};
use crate::tasks::TaskId;

/// Cycle multipliers tried after the first proposal.
pub const CYCLE_VARIANTS: [f64; 2] = [0.75, 1.5];
const OBSERVE_WINDOW_S: f64 = 900.0;

#[derive(Debug, Clone, PartialEq)]
enum Step {
    Hello,
    ControlApi(TaskId),
    Hotspots,
    ReadLanes,
    ReadHighway,
    ReadTransit(TransitMode),
    Dispatch,
    Propose,
    Variant(f64),
    Finish,
    Reflect,
}

pub struct ScriptedAgent {
    net: Arc<TrafficNetwork>,
    horizon: f64,
    tasks: Vec<TaskId>,
    queue: VecDeque<Step>,
    awaiting: Option<Step>,
    lanes: Vec<ObservationWindow<LaneObservation>>,
    highway: Vec<ObservationWindow<HighwayObservation>>,
    transit: Vec<Value>,
    dispatch: Option<DispatchAssignment>,
    proposal: Option<ActionBundle>,
    commit: Option<CommitRecord>,
    started: bool,
}

impl ScriptedAgent {
    pub fn new(net: Arc<TrafficNetwork>, horizon: f64) -> Self {
        Self {
            net,
            horizon,
            tasks: Vec::new(),
            queue: VecDeque::new(),
            awaiting: None,
            lanes: Vec::new(),
            highway: Vec::new(),
            transit: Vec::new(),
            dispatch: None,
            proposal: None,
            commit: None,
            started: false,
        }
    }

    fn plan(&mut self, tasks: Vec<TaskId>) {
        let mut q: VecDeque<Step> = tasks.iter().map(|&t| Step::ControlApi(t)).collect();
        q.push_back(Step::Hotspots);
        for t in &tasks {
            match t {
                TaskId::SignalTiming => q.push_back(Step::ReadLanes),
                TaskId::HighwaySpeedLimit => q.push_back(Step::ReadHighway),
                TaskId::BusScheduling => q.push_back(Step::ReadTransit(TransitMode::Bus)),
                TaskId::SubwayScheduling => q.push_back(Step::ReadTransit(TransitMode::Subway)),
                TaskId::TaxiDispatching => q.push_back(Step::Dispatch),
                TaskId::RampMetering => {}
            }
        }
        q.push_back(Step::Propose);
        if tasks.contains(&TaskId::SignalTiming) {
            q.extend(CYCLE_VARIANTS.map(Step::Variant));
        }
        q.push_back(Step::Finish);
        q.push_back(Step::Reflect);
        self.tasks = tasks;
        self.queue = q;
    }

    fn absorb(&mut self, step: &Step, reply: &ServerMessage) {
        if let ServerMessage::Error(e) = reply {
            if let Some(c) = &e.commit {
                self.commit = Some((**c).clone());
                self.queue.retain(|s| *s == Step::Reflect);
            }
            return;
        }
        match (step, reply) {
            (Step::Hello, ServerMessage::Hello { modules, .. }) => self.plan(modules.clone()),
            (Step::ReadLanes, ServerMessage::Observe { result, .. }) => {
                self.lanes = serde_json::from_value(result.clone()).unwrap_or_default();
            }
            (Step::ReadHighway, ServerMessage::Observe { result, .. }) => {
                self.highway = serde_json::from_value(result.clone()).unwrap_or_default();
            }
            (Step::ReadTransit(_), ServerMessage::Observe { result, .. }) => {
                self.transit.extend(result.as_array().cloned().unwrap_or_default());
            }
            (Step::Dispatch, ServerMessage::Observe { result, .. }) => {
                self.dispatch = serde_json::from_value(result.clone())
                    .ok()
                    .filter(|d: &DispatchAssignment| !d.is_empty());
            }
            (Step::Finish, ServerMessage::Commit { record, .. }) => self.commit = Some((**record).clone()),
            _ => {}
        }
    }

    fn message(&mut self, step: &Step) -> ClientMessage {
        let observe = |op: &str| ClientMessage::Observe {
            op: op.into(),
            args: json!({"window": OBSERVE_WINDOW_S}),
        };
        match step {
            Step::Hello => ClientMessage::Hello {
                agent: "scripted".into(),
            },
            Step::ControlApi(t) => ClientMessage::call(ActionKind::GetControlApi, json!({"module": t.name()})),
            Step::Hotspots => ClientMessage::call(
                ActionKind::DataAnalysis,
                json!({"op": "identify_congestion_hotspots", "args": {}, "save": "hotspots"}),
            ),
            Step::ReadLanes => observe("read_lane_traffic_states"),
            Step::ReadHighway => observe("read_highway_traffic_states"),
            Step::ReadTransit(TransitMode::Bus) => observe("read_bus_states"),
            Step::ReadTransit(TransitMode::Subway) => observe("read_subway_states"),
            Step::Dispatch => ClientMessage::Observe {
                op: "dispatch_taxi".into(),
                args: json!({}),
            },
            Step::Propose => {
                let bundle = self.propose();
                self.proposal = Some(bundle.clone());
                ClientMessage::Policy { bundle }
            }
            Step::Variant(f) => {
                let base = self.proposal.clone().unwrap_or_default();
                ClientMessage::Policy {
                    bundle: self.scaled(&base, *f),
                }
            }
            Step::Finish => ClientMessage::Finish {},
            Step::Reflect => ClientMessage::reflect(ActionKind::ReflectionFinish, Value::Array(self.insights())),
        }
    }

    /// First proposal from the observations gathered so far.
    pub fn propose(&self) -> ActionBundle {
        let mut b = ActionBundle {
            horizon: self.horizon,
            ..ActionBundle::default()
        };
        if self.tasks.contains(&TaskId::SignalTiming) {
            b.signals = self.webster_signals();
        }
        if self.tasks.contains(&TaskId::HighwaySpeedLimit) {
            b.speed_limits = self.speed_limits();
        }
        let schedules = self.headways();
        b.transit = schedules;
        if self.tasks.contains(&TaskId::TaxiDispatching) {
            b.dispatch = self.dispatch.clone();
        }
        b
    }

    fn webster_signals(&self) -> BTreeMap<crate::JunctionId, SignalPlan> {
        let net = &self.net;
        let demand: BTreeMap<&str, f64> = self
            .lanes
            .iter()
            .filter_map(|w| {
                let l = net.lane_idx(&w.entity)?;
                let n = w.samples.len().max(1) as f64;
                let arrival = w.samples.iter().map(|(_, o)| o.arrival_rate).sum::<f64>() / n;
                let queue = w.samples.last().map_or(0.0, |(_, o)| f64::from(o.queue_length));
                Some((
                    w.entity.as_str(),
                    (arrival + queue / self.horizon) / net.lanes[l].saturation_flow,
                ))
            })
            .collect();
        net.junctions
            .iter()
            .filter(|j| j.signalized && !j.phases.is_empty())
            .filter_map(|j| {
                let ratios: Vec<f64> = j
                    .phases
                    .iter()
                    .map(|p| {
                        p.green_movements
                            .iter()
                            .map(|m| demand.get(m.0.as_str()).copied().unwrap_or(0.0))
                            .fold(0.0, f64::max)
                    })
                    .collect();
                webster_plan(j, &ratios, DEFAULT_LOST_TIME_PER_PHASE_S)
                    .ok()
                    .map(|(plan, _)| (j.id.clone(), plan))
            })
            .collect()
    }

    fn speed_limits(&self) -> BTreeMap<crate::LaneId, SpeedLimitPlan> {
        self.highway
            .iter()
            .filter_map(|w| {
                let n = w.samples.len();
                if n == 0 {
                    return None;
                }
                let speed = w.samples.iter().map(|(_, o)| o.segment_speed).sum::<f64>() / n as f64;
                let default = w.samples[n - 1].1.segment_default_speed_limit;
                let lane = self.net.lane_idx(&w.entity)?;
                (speed < 0.5 * default).then(|| {
                    let id = self.net.lanes[lane].id.clone();
                    (
                        id.clone(),
                        SpeedLimitPlan {
                            segment: id,
                            limit: 0.8 * default,
                        },
                    )
                })
            })
            .collect()
    }

    fn headways(&self) -> BTreeMap<crate::RouteId, TransitSchedule> {
        self.transit
            .iter()
            .filter_map(|w| {
                let id = w.get("entity")?.as_str()?;
                let r = self.net.route_idx(id)?;
                let samples = w.get("samples")?.as_array()?;
                let obs: Vec<&Value> = samples.iter().filter_map(|s| s.get(1)).collect();
                let last = *obs.last()?;
                let headway = last.get("headway")?.as_f64()?;
                let n = obs.len() as f64;
                let mean = |k: &str| obs.iter().filter_map(|o| o.get(k)?.as_f64()).sum::<f64>() / n;
                let wait = mean("avg_waiting_time");
                let load = obs
                    .iter()
                    .flat_map(|o| o.get("vehicles").and_then(Value::as_array).cloned().unwrap_or_default())
                    .filter_map(|v| v.get("load_ratio")?.as_f64())
                    .fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
                let load = if load.1 == 0 { 0.0 } else { load.0 / load.1 as f64 };
                let next = if wait > 0.6 * headway {
                    (0.8 * headway).max(MIN_HEADWAY_S)
                } else if wait < 0.3 * headway && load < 0.3 {
                    1.25 * headway
                } else {
                    return None;
                };
                ((next - headway).abs() > 1e-9).then(|| {
                    let route = self.net.routes[r].id.clone();
                    (
                        route.clone(),
                        TransitSchedule {
                            route,
                            headway: next,
                            dwell_override: BTreeMap::new(),
                        },
                    )
                })
            })
            .collect()
    }

    /// `base` with every signal cycle scaled by `factor` and clamped to the
    /// cycle range; greens are clamped to phase bounds and plans that still
    /// leave the range are dropped.
    pub fn scaled(&self, base: &ActionBundle, factor: f64) -> ActionBundle {
        let mut out = base.clone();
        out.signals = base
            .signals
            .iter()
            .filter_map(|(id, p)| {
                let j = &self.net.junctions[self.net.junction_idx(id.as_str())?];
                let target = (p.cycle_time * factor).clamp(MIN_CYCLE_S, MAX_CYCLE_S);
                let effective = p.cycle_time - p.lost_time;
                let scale = if effective > 0.0 {
                    (target - p.lost_time).max(0.0) / effective
                } else {
                    1.0
                };
                let greens: Vec<f64> = p
                    .greens
                    .iter()
                    .zip(&j.phases)
                    .map(|(g, ph)| (g * scale).clamp(ph.min_green, ph.max_green))
                    .collect();
                let cycle = p.lost_time + greens.iter().sum::<f64>();
                (MIN_CYCLE_S..=MAX_CYCLE_S).contains(&cycle).then(|| {
                    (
                        id.clone(),
                        SignalPlan {
                            junction: id.clone(),
                            cycle_time: cycle,
                            greens,
                            lost_time: p.lost_time,
                        },
                    )
                })
            })
            .collect();
        out
    }

    fn insights(&self) -> Vec<Value> {
        let Some(c) = &self.commit else {
            return Vec::new();
        };
        let mut out: Vec<Value> = c
            .reward
            .task_ri
            .iter()
            .map(|(task, ri)| {
                let verb = if *ri >= 0.0 { "improved" } else { "regressed" };
                Value::String(format!(
                    "Observation-driven plans {verb} {task} by {:.1}% against the fixed-time baseline.",
                    ri.abs() * 100.0
                ))
            })
            .collect();
        if c.candidate.is_some() && !c.bundle.signals.is_empty() {
            let n = c.bundle.signals.len() as f64;
            let cycle = c.bundle.signals.values().map(|p| p.cycle_time).sum::<f64>() / n;
            out.push(Value::String(format!(
                "A mean signal cycle of {cycle:.0} s scored best among the rolled-out candidates in this window."
            )));
        }
        out
    }
}

impl super::Agent for ScriptedAgent {
    fn next_message(&mut self, last_reply: Option<&ServerMessage>) -> Option<ClientMessage> {
        if let (Some(step), Some(reply)) = (self.awaiting.take(), last_reply) {
            self.absorb(&step, reply);
        }
        let step = if self.started {
            loop {
                let step = self.queue.pop_front()?;
                if step == Step::Propose && self.propose().is_empty() {
                    self.queue.retain(|s| !matches!(s, Step::Variant(_)));
                    continue;
                }
                if let (Step::Variant(f), Some(base)) = (&step, &self.proposal) {
                    if self.scaled(base, *f) == *base {
                        continue;
                    }
                }
                break step;
            }
        } else {
            self.started = true;
            Step::Hello
        };
        let msg = self.message(&step);
        self.awaiting = Some(step);
        Some(msg)
    }
}
