//! Control plans, classic baseline controllers and plan validation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::ActionBundle;
use crate::ids::{JunctionId, LaneId, RouteId, StationId, TaxiId, ZoneId};
use crate::network::{Junction, LaneKind, Point, TrafficNetwork, TransitRoute};

/// Lost (all-red) time charged per phase by the classic signal controller.
pub const DEFAULT_LOST_TIME_PER_PHASE_S: f64 = 4.0;
pub const MIN_CYCLE_S: f64 = 30.0;
pub const MAX_CYCLE_S: f64 = 180.0;
/// Ramp metering duty cycle length.
pub const METER_CYCLE_S: f64 = 60.0;
pub const DEFAULT_ALINEA_GAIN: f64 = 70.0;
pub const DEFAULT_ALINEA_TARGET: f64 = 0.25;
pub const MIN_HEADWAY_S: f64 = 60.0;
pub const SPEED_LIMIT_BOUNDS: (f64, f64) = (0.5, 1.5);

const CYCLE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("oversaturated: critical flow ratio sum Y = {0} ≥ 1")]
    Oversaturated(f64),
    #[error("lost time must be > 0 (got {0})")]
    BadLostTime(f64),
    #[error("critical flow ratios must be ≥ 0")]
    NegativeRatio,
    #[error("junction {0} has no phases")]
    NoPhases(JunctionId),
    #[error("headway {0} s is below the {MIN_HEADWAY_S} s minimum")]
    HeadwayTooSmall(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub junction: JunctionId,
    pub cycle_time: f64,
    /// Green seconds per phase, in the junction's phase order.
    pub greens: Vec<f64>,
    /// Total all-red time per cycle, split evenly after each green.
    pub lost_time: f64,
}

impl SignalPlan {
    pub fn green_fraction(&self, phase: usize) -> f64 {
        self.greens.get(phase).map_or(0.0, |g| g / self.cycle_time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlineaParams {
    pub gain: f64,
    pub target_occupancy: f64,
}

impl Default for AlineaParams {
    fn default() -> Self {
        Self {
            gain: DEFAULT_ALINEA_GAIN,
            target_occupancy: DEFAULT_ALINEA_TARGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampMeterPlan {
    pub ramp: LaneId,
    /// Seconds of each 60 s metering cycle during which the ramp may discharge.
    pub open_duration: f64,
    /// When set, the open duration is re-tuned by ALINEA once per metering cycle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<AlineaParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedLimitPlan {
    pub segment: LaneId,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitSchedule {
    pub route: RouteId,
    pub headway: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dwell_override: BTreeMap<StationId, f64>,
}

impl TransitSchedule {
    /// Departure times `start + k·headway` falling in `[start, end)`.
    pub fn departures(&self, start: f64, end: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0u64;
        loop {
            let t = start + k as f64 * self.headway;
            if t >= end {
                break;
            }
            out.push(t);
            k += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub taxi: TaxiId,
    pub reservation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reposition {
    pub taxi: TaxiId,
    pub zone: ZoneId,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DispatchAssignment {
    #[serde(default)]
    pub assignments: Vec<Assignment>,
    #[serde(default)]
    pub repositions: Vec<Reposition>,
}

impl DispatchAssignment {
    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty() && self.repositions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebsterTiming {
    pub cycle: f64,
    /// Cycle length before clamping to [30, 180] s.
    pub unclamped_cycle: f64,
    pub greens: Vec<f64>,
    pub lost_time: f64,
}

/// Webster's optimal cycle `C = (1.5 L + 5) / (1 − Y)`, clamped to
/// [30, 180] s, with effective green `C − L` split in proportion to each
/// phase's critical flow ratio (equal split when `Y = 0`).
pub fn webster_cycle(critical_flow_ratios: &[f64], lost_time: f64) -> Result<WebsterTiming, ControlError> {
    if !(lost_time > 0.0) {
        return Err(ControlError::BadLostTime(lost_time));
    }
    if critical_flow_ratios.iter().any(|y| !(*y >= 0.0)) {
        return Err(ControlError::NegativeRatio);
    }
    let y_sum: f64 = critical_flow_ratios.iter().sum();
    if y_sum >= 1.0 {
        return Err(ControlError::Oversaturated(y_sum));
    }
    let unclamped_cycle = (1.5 * lost_time + 5.0) / (1.0 - y_sum);
    let cycle = unclamped_cycle.clamp(MIN_CYCLE_S, MAX_CYCLE_S);
    let effective = (cycle - lost_time).max(0.0);
    let n = critical_flow_ratios.len().max(1) as f64;
    let greens = critical_flow_ratios
        .iter()
        .map(|y| {
            if y_sum > 0.0 {
                effective * y / y_sum
            } else {
                effective / n
            }
        })
        .collect();
    Ok(WebsterTiming {
        cycle,
        unclamped_cycle,
        greens,
        lost_time,
    })
}

fn plan_from_greens(junction: &Junction, greens: &[f64], lost_time: f64) -> SignalPlan {
    let greens: Vec<f64> = junction
        .phases
        .iter()
        .zip(greens)
        .map(|(p, g)| g.clamp(p.min_green, p.max_green))
        .collect();
    let cycle_time = greens.iter().sum::<f64>() + lost_time;
    SignalPlan {
        junction: junction.id.clone(),
        cycle_time,
        greens,
        lost_time,
    }
}

/// Webster plan for one junction. Greens are clamped to each phase's
/// bounds and the cycle is re-derived from the clamped greens. An
/// oversaturated junction falls back to the maximum cycle with an equal
/// split; the returned flag reports that fallback.
pub fn webster_plan(
    junction: &Junction,
    critical_flow_ratios: &[f64],
    lost_per_phase: f64,
) -> Result<(SignalPlan, bool), ControlError> {
    if junction.phases.is_empty() {
        return Err(ControlError::NoPhases(junction.id.clone()));
    }
    let lost_time = lost_per_phase * junction.phases.len() as f64;
    match webster_cycle(critical_flow_ratios, lost_time) {
        Ok(t) => Ok((plan_from_greens(junction, &t.greens, lost_time), false)),
        Err(ControlError::Oversaturated(_)) => {
            let n = junction.phases.len() as f64;
            let greens = vec![(MAX_CYCLE_S - lost_time) / n; junction.phases.len()];
            Ok((plan_from_greens(junction, &greens, lost_time), true))
        }
        Err(e) => Err(e),
    }
}

/// Equal greens for every phase at the given cycle length.
pub fn uniform_plan(junction: &Junction, cycle: f64, lost_per_phase: f64) -> SignalPlan {
    let n = junction.phases.len().max(1);
    let lost_time = lost_per_phase * junction.phases.len() as f64;
    let greens = vec![(cycle - lost_time).max(0.0) / n as f64; junction.phases.len()];
    plan_from_greens(junction, &greens, lost_time)
}

/// ALINEA feedback law on the open-duration actuator:
/// `open' = clamp(open + K·(target − measured), 0, 60)`.
///
/// The actuator resolves to one millisecond.
pub fn alinea_rate(prev_open: f64, measured_occupancy: f64, target_occupancy: f64, gain: f64) -> f64 {
    let raw = prev_open + gain * (target_occupancy - measured_occupancy);
    let open = raw.clamp(0.0, METER_CYCLE_S);
    (open * 1000.0).round() / 1000.0
}

impl RampMeterPlan {
    pub fn alinea_update(&self, measured_occupancy: f64, params: AlineaParams) -> RampMeterPlan {
        RampMeterPlan {
            ramp: self.ramp.clone(),
            open_duration: alinea_rate(
                self.open_duration,
                measured_occupancy,
                params.target_occupancy,
                params.gain,
            ),
            feedback: self.feedback,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaxiSnapshot {
    pub id: TaxiId,
    /// Idle and not already moving under a reposition order.
    pub available: bool,
    pub position: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservationSnapshot {
    pub id: u64,
    pub position: Point,
    pub requested_at: f64,
}

/// Nearest available taxi per reservation, reservations in arrival order,
/// ties by lexicographic taxi id.
pub fn greedy_dispatch(taxis: &[TaxiSnapshot], reservations: &[ReservationSnapshot]) -> DispatchAssignment {
    let mut order: Vec<&ReservationSnapshot> = reservations.iter().collect();
    order.sort_by(|a, b| a.requested_at.total_cmp(&b.requested_at).then(a.id.cmp(&b.id)));
    let mut taken = BTreeSet::new();
    let mut assignments = Vec::new();
    for r in order {
        let best = taxis
            .iter()
            .filter(|t| t.available && !taken.contains(&t.id))
            .min_by(|a, b| {
                a.position
                    .distance(&r.position)
                    .total_cmp(&b.position.distance(&r.position))
                    .then_with(|| a.id.cmp(&b.id))
            });
        if let Some(t) = best {
            taken.insert(t.id.clone());
            assignments.push(Assignment {
                taxi: t.id.clone(),
                reservation: r.id,
            });
        }
    }
    DispatchAssignment {
        assignments,
        repositions: Vec::new(),
    }
}

pub fn fixed_headway_schedule(route: &TransitRoute, headway: f64) -> Result<TransitSchedule, ControlError> {
    if !(headway >= MIN_HEADWAY_S) {
        return Err(ControlError::HeadwayTooSmall(headway));
    }
    Ok(TransitSchedule {
        route: route.id.clone(),
        headway,
        dwell_override: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCheck {
    pub plan: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<PlanCheck>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PlanCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn record(&mut self, plan: String, failure: Option<String>) {
        self.checks.push(PlanCheck {
            plan,
            passed: failure.is_none(),
            reason: failure,
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let failures: Vec<String> = self
            .failures()
            .map(|c| format!("{}: {}", c.plan, c.reason.as_deref().unwrap_or("failed")))
            .collect();
        if failures.is_empty() {
            write!(f, "all {} plan checks passed", self.checks.len())
        } else {
            f.write_str(&failures.join("; "))
        }
    }
}

fn check_signal(net: &TrafficNetwork, plan: &SignalPlan) -> Option<String> {
    let Some(j) = net.junction_idx(plan.junction.as_str()) else {
        return Some(format!("unknown junction {}", plan.junction));
    };
    let junction = &net.junctions[j];
    if !junction.signalized {
        return Some("junction is not signalized".into());
    }
    if plan.greens.len() != junction.phases.len() {
        return Some(format!(
            "expected {} phase greens, got {}",
            junction.phases.len(),
            plan.greens.len()
        ));
    }
    if !(plan.lost_time >= 0.0) || !(plan.cycle_time > 0.0) {
        return Some("cycle_time must be > 0 and lost_time ≥ 0".into());
    }
    for (phase, g) in junction.phases.iter().zip(&plan.greens) {
        if !(*g >= phase.min_green - CYCLE_TOLERANCE && *g <= phase.max_green + CYCLE_TOLERANCE) {
            return Some(format!(
                "phase {} green {g} s outside [{}, {}]",
                phase.id, phase.min_green, phase.max_green
            ));
        }
    }
    let total = plan.greens.iter().sum::<f64>() + plan.lost_time;
    if (total - plan.cycle_time).abs() > CYCLE_TOLERANCE {
        return Some(format!(
            "greens plus lost time sum to {total} s, cycle is {} s",
            plan.cycle_time
        ));
    }
    None
}

fn check_ramp(net: &TrafficNetwork, plan: &RampMeterPlan) -> Option<String> {
    match net.lane(plan.ramp.as_str()) {
        Err(_) => return Some(format!("unknown ramp {}", plan.ramp)),
        Ok(l) if l.kind != LaneKind::Ramp => return Some(format!("{} is not a ramp", plan.ramp)),
        Ok(_) => {}
    }
    if plan.open_duration > METER_CYCLE_S {
        return Some(format!("open_duration {} s exceeds 60 s cycle", plan.open_duration));
    }
    if !(plan.open_duration >= 0.0) {
        return Some("open_duration must be ≥ 0".into());
    }
    if let Some(p) = plan.feedback {
        if !(p.gain > 0.0) || !(0.0..=1.0).contains(&p.target_occupancy) {
            return Some("ALINEA gain must be > 0 and target occupancy in [0, 1]".into());
        }
    }
    None
}

fn check_speed(net: &TrafficNetwork, plan: &SpeedLimitPlan) -> Option<String> {
    let lane = match net.lane(plan.segment.as_str()) {
        Err(_) => return Some(format!("unknown segment {}", plan.segment)),
        Ok(l) if l.kind != LaneKind::HighwaySegment => {
            return Some(format!("{} is not a highway segment", plan.segment))
        }
        Ok(l) => l,
    };
    let (lo, hi) = (
        SPEED_LIMIT_BOUNDS.0 * lane.speed_limit,
        SPEED_LIMIT_BOUNDS.1 * lane.speed_limit,
    );
    if !(plan.limit >= lo - 1e-9 && plan.limit <= hi + 1e-9) {
        return Some(format!("limit {} m/s outside [{lo}, {hi}]", plan.limit));
    }
    None
}

fn check_transit(net: &TrafficNetwork, plan: &TransitSchedule) -> Option<String> {
    let Some(r) = net.route_idx(plan.route.as_str()) else {
        return Some(format!("unknown route {}", plan.route));
    };
    if !(plan.headway >= MIN_HEADWAY_S) {
        return Some(format!("headway {} s below {MIN_HEADWAY_S} s", plan.headway));
    }
    for (station, dwell) in &plan.dwell_override {
        if !net.routes[r].station_sequence.contains(station) {
            return Some(format!("station {station} is not on route {}", plan.route));
        }
        if !(*dwell >= 0.0) {
            return Some(format!("dwell override at {station} must be ≥ 0"));
        }
    }
    None
}

fn check_dispatch(net: &TrafficNetwork, d: &DispatchAssignment) -> Option<String> {
    let mut taxis = BTreeSet::new();
    let mut reservations = BTreeSet::new();
    for a in &d.assignments {
        if !taxis.insert(a.taxi.clone()) {
            return Some(format!("duplicate taxi {}", a.taxi));
        }
        if !reservations.insert(a.reservation) {
            return Some(format!("duplicate reservation {}", a.reservation));
        }
    }
    for r in &d.repositions {
        if !taxis.insert(r.taxi.clone()) {
            return Some(format!("duplicate taxi {}", r.taxi));
        }
        if net.zone_idx(r.zone.as_str()).is_none() {
            return Some(format!("unknown zone {}", r.zone));
        }
    }
    None
}

/// Checks every plan in the bundle against the network.
///
/// Whether assigned taxis are idle is a property of the live state and is
/// checked when the dispatch is applied.
pub fn validate_action(net: &TrafficNetwork, bundle: &ActionBundle) -> ValidationReport {
    let mut report = ValidationReport::default();
    if !(bundle.horizon >= 0.0) {
        report.record("horizon".into(), Some("horizon must be ≥ 0".into()));
    }
    for (key, plan) in &bundle.signals {
        let mut failure = check_signal(net, plan);
        if failure.is_none() && key != &plan.junction {
            failure = Some(format!("keyed under {key} but targets {}", plan.junction));
        }
        report.record(format!("signal:{key}"), failure);
    }
    for (key, plan) in &bundle.ramps {
        let mut failure = check_ramp(net, plan);
        if failure.is_none() && key != &plan.ramp {
            failure = Some(format!("keyed under {key} but targets {}", plan.ramp));
        }
        report.record(format!("ramp:{key}"), failure);
    }
    for (key, plan) in &bundle.speed_limits {
        let mut failure = check_speed(net, plan);
        if failure.is_none() && key != &plan.segment {
            failure = Some(format!("keyed under {key} but targets {}", plan.segment));
        }
        report.record(format!("speed_limit:{key}"), failure);
    }
    for (key, plan) in &bundle.transit {
        let mut failure = check_transit(net, plan);
        if failure.is_none() && key != &plan.route {
            failure = Some(format!("keyed under {key} but targets {}", plan.route));
        }
        report.record(format!("transit:{key}"), failure);
    }
    if let Some(d) = &bundle.dispatch {
        report.record("dispatch".into(), check_dispatch(net, d));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn webster_reference_cycle() {
        let t = webster_cycle(&[0.375, 0.3], 10.0).unwrap();
        assert!((t.unclamped_cycle - 20.0 / 0.325).abs() < 1e-9);
        assert!((t.unclamped_cycle - 61.538_461_538).abs() < 1e-6);
        assert_eq!(t.cycle, t.unclamped_cycle);
        let effective = t.cycle - 10.0;
        assert!((t.greens[0] - effective * 0.375 / 0.675).abs() < 1e-9);
    }

    #[test]
    fn webster_zero_demand_clamps_and_splits_equally() {
        let t = webster_cycle(&[0.0, 0.0], 10.0).unwrap();
        assert_eq!(t.unclamped_cycle, 20.0);
        assert_eq!(t.cycle, MIN_CYCLE_S);
        assert_eq!(t.greens, vec![10.0, 10.0]);
    }

    #[test]
    fn webster_oversaturation() {
        assert_eq!(webster_cycle(&[0.5, 0.5], 10.0), Err(ControlError::Oversaturated(1.0)));
    }

    #[test]
    fn alinea_fixed_point_and_step() {
        assert_eq!(alinea_rate(30.0, 0.25, 0.25, 100.0), 30.0);
        assert_eq!(alinea_rate(30.0, 0.35, 0.25, 100.0), 20.0);
        assert_eq!(alinea_rate(5.0, 0.35, 0.25, 100.0), 0.0);
        assert_eq!(alinea_rate(55.0, 0.0, 0.25, 100.0), 60.0);
    }

    fn taxi(id: &str, x: f64) -> TaxiSnapshot {
        TaxiSnapshot {
            id: id.into(),
            available: true,
            position: Point(x, 0.0),
        }
    }

    fn res(id: u64, x: f64, t: f64) -> ReservationSnapshot {
        ReservationSnapshot {
            id,
            position: Point(x, 0.0),
            requested_at: t,
        }
    }

    #[test]
    fn greedy_single_taxi_takes_first_reservation() {
        let d = greedy_dispatch(&[taxi("T1", 0.0)], &[res(1, 1.0, 0.0), res(2, 5.0, 1.0)]);
        assert_eq!(
            d.assignments,
            vec![Assignment {
                taxi: "T1".into(),
                reservation: 1
            }]
        );
    }

    #[test]
    fn greedy_picks_nearest_then_lexicographic() {
        let d = greedy_dispatch(&[taxi("T1", 0.0), taxi("T2", 10.0)], &[res(7, 9.0, 0.0)]);
        assert_eq!(d.assignments[0].taxi.as_str(), "T2");
        let d = greedy_dispatch(&[taxi("T2", -1.0), taxi("T1", 1.0)], &[res(7, 0.0, 0.0)]);
        assert_eq!(d.assignments[0].taxi.as_str(), "T1");
    }

    #[test]
    fn greedy_skips_unavailable() {
        let mut busy = taxi("T0", 0.0);
        busy.available = false;
        let d = greedy_dispatch(&[busy, taxi("T9", 100.0)], &[res(1, 0.0, 0.0)]);
        assert_eq!(d.assignments[0].taxi.as_str(), "T9");
    }

    fn route() -> TransitRoute {
        TransitRoute {
            id: "R".into(),
            mode: crate::network::TransitMode::Bus,
            station_sequence: vec!["S1".into(), "S2".into()],
            edge_sequence: vec!["L".into()],
            default_headway: 600.0,
            vehicle_capacity: 40,
        }
    }

    #[test]
    fn headway_schedule() {
        let s = fixed_headway_schedule(&route(), 600.0).unwrap();
        assert_eq!(s.departures(0.0, 3600.0).len(), 6);
        assert!(fixed_headway_schedule(&route(), 60.0).is_ok());
        assert_eq!(
            fixed_headway_schedule(&route(), 30.0),
            Err(ControlError::HeadwayTooSmall(30.0))
        );
    }
}
