//! Scenario files, baseline and agent runs, reports and comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent_runtime::scripted::ScriptedAgent;
use crate::agent_runtime::{
    run_episode, step_metrics, EpisodeConfig, RuntimeError, Session, DEFAULT_REFLECTION_TURN_LIMIT,
    DEFAULT_ROLLOUT_BUDGET, DEFAULT_TURN_LIMIT,
};
use crate::demand::{
    apply_mode_split, compute_activity, gravity_demand, sample_trips, DemandError, DemandStats, Mode, ModeSplitTable,
    OdMatrix, PairCategorizer, Purpose, TemporalProfile, Trip,
};
use crate::dynamics::{init_state, ActionBundle, DynamicsError, EnvState, SimConfig};
use crate::memory::{MemoryError, ProceduralInsight, ProceduralMemory};
use crate::network::{load_network, InfrastructureKind, LaneKind, NetworkError, TrafficNetwork, TransitMode};
use crate::reward::{
    breakdown, coordination_score, step_reward, stub_verdict, task_improvement, GlobalMetrics, Judge, JudgeVerdict,
    RewardBreakdown, RewardError, StepMetrics, TaskMetrics,
};
use crate::tasks::{MetricKind, TaskId};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("scenario is invalid:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("no baseline report at {path}; run `citycoord run --mode baseline` with the same scenario and seed first")]
    MissingBaseline { path: String },
    #[error("reports are not comparable: {0}")]
    Mismatch(String),
    #[error("external mode needs an agent connection")]
    NoAgent,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("agent failed: {0}")]
    Agent(String),
}

impl HarnessError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            HarnessError::Io { .. } => "io",
            HarnessError::Parse { .. } => "parse",
            HarnessError::Invalid(_) => "invalid_scenario",
            HarnessError::MissingBaseline { .. } => "missing_baseline",
            HarnessError::Mismatch(_) => "mismatch",
            HarnessError::NoAgent => "no_agent",
            HarnessError::Network(_) => "network",
            HarnessError::Demand(_) => "demand",
            HarnessError::Dynamics(_) => "dynamics",
            HarnessError::Runtime(_) => "runtime",
            HarnessError::Memory(_) => "memory",
            HarnessError::Reward(_) => "reward",
            HarnessError::Agent(_) => "agent",
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn to_json_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Hourly weights: `"uniform"`, `"rush_hours"`, a file path or 24 numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Weights([f64; 24]),
    Named(String),
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec::Named("rush_hours".into())
    }
}

impl ProfileSpec {
    fn resolve(&self, base: &Path) -> Result<TemporalProfile, HarnessError> {
        Ok(match self {
            ProfileSpec::Weights(w) => TemporalProfile(*w),
            ProfileSpec::Named(n) if n == "uniform" => TemporalProfile::uniform(),
            ProfileSpec::Named(n) if n == "rush_hours" => TemporalProfile::rush_hours(),
            ProfileSpec::Named(path) => TemporalProfile::load(base.join(path))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GravitySpec {
    #[serde(default = "half")]
    pub w_pop: f64,
    #[serde(default = "half")]
    pub w_poi: f64,
    /// Trips per day over all zone pairs.
    pub total_trips: f64,
    /// Mode-split table file; the built-in survey table when absent.
    #[serde(default)]
    pub mode_split: Option<String>,
    /// Purpose labels keyed by `"ORIGIN->DEST"`.
    #[serde(default)]
    pub purposes: BTreeMap<String, Purpose>,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdEntry {
    pub origin: String,
    pub destination: String,
    pub mode: Mode,
    /// Trips per day.
    pub trips: f64,
}

/// Exactly one of `gravity`, `od` or `trips` must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gravity: Option<GravitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub od: Option<Vec<OdEntry>>,
    /// CSV or JSON trip list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trips: Option<String>,
    #[serde(default)]
    pub profile: ProfileSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentLimits {
    pub turn_limit: usize,
    pub reflection_turn_limit: usize,
    pub rollout_budget: usize,
}

impl Default for AgentLimits {
    fn default() -> Self {
        Self {
            turn_limit: DEFAULT_TURN_LIMIT,
            reflection_turn_limit: DEFAULT_REFLECTION_TURN_LIMIT,
            rollout_budget: DEFAULT_ROLLOUT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Network file, relative to the scenario file.
    pub network: String,
    pub demand: DemandSpec,
    #[serde(default)]
    pub fleet_size: usize,
    pub tasks: Vec<TaskId>,
    /// Simulated period, seconds since midnight.
    #[serde(default)]
    pub start: f64,
    #[serde(default = "full_day")]
    pub end: f64,
    #[serde(default = "one")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub decision_horizon: f64,
    /// Window start times that run an agent episode; every window when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episodes: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default = "half")]
    pub beta: f64,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub agent: AgentLimits,
    /// Procedural memory file shared across runs; a fresh per-run file when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<String>,
}

fn full_day() -> f64 {
    86_400.0
}

fn one() -> f64 {
    1.0
}

fn default_horizon() -> f64 {
    crate::agent_runtime::DEFAULT_HORIZON_S
}

/// A parsed scenario and the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    pub base: PathBuf,
    pub path: PathBuf,
}

impl ScenarioFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = read_text(path)?;
        Self::from_str(&text, path.parent().unwrap_or(Path::new(".")), path)
    }

    pub fn from_str(text: &str, base: &Path, path: &Path) -> Result<Self, HarnessError> {
        let scenario = serde_json::from_str(text).map_err(|e| HarnessError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self {
            scenario,
            base: base.to_path_buf(),
            path: path.to_path_buf(),
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }

    pub fn network(&self) -> Result<TrafficNetwork, HarnessError> {
        Ok(load_network(self.resolve(&self.scenario.network))?)
    }

    /// Hex digest of the scenario without its seed.
    pub fn digest(&self) -> String {
        let mut s = self.scenario.clone();
        s.seed = 0;
        let bytes = serde_json::to_vec(&s).expect("serializable");
        Sha256::digest(&bytes)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Decision window start times over the period.
    pub fn windows(&self) -> Vec<f64> {
        let s = &self.scenario;
        let n = ((s.end - s.start) / s.decision_horizon + 1e-9).floor().max(0.0) as usize;
        (0..n).map(|k| s.start + k as f64 * s.decision_horizon).collect()
    }

    fn is_episode(&self, t: f64) -> bool {
        self.scenario
            .episodes
            .as_ref()
            .is_none_or(|e| e.iter().any(|&x| (x - t).abs() < 1e-6))
    }

    /// Every problem found, in a stable order.
    pub fn validate(&self) -> Vec<String> {
        let s = &self.scenario;
        let mut out = Vec::new();
        if s.name.trim().is_empty() || s.name.contains(['/', '\\']) {
            out.push(format!(
                "name \"{}\" must be non-empty and contain no path separators",
                s.name
            ));
        }
        if s.tasks.is_empty() {
            out.push("task set is empty".into());
        }
        if !(s.alpha > 0.0 && s.beta > 0.0) {
            out.push(format!("alpha and beta must be > 0, got {} and {}", s.alpha, s.beta));
        }
        if !(s.dt > 0.0) {
            out.push(format!("dt must be > 0, got {}", s.dt));
        } else {
            let steps = (s.decision_horizon / s.dt).round();
            if !(s.decision_horizon > 0.0) || (steps * s.dt - s.decision_horizon).abs() > 1e-9 * s.decision_horizon {
                out.push(format!(
                    "decision_horizon {} is not a positive multiple of dt {}",
                    s.decision_horizon, s.dt
                ));
            }
        }
        if !(s.start >= 0.0 && s.end > s.start) {
            out.push(format!("period [{}, {}) is empty", s.start, s.end));
        } else if s.decision_horizon > 0.0 {
            let n = (s.end - s.start) / s.decision_horizon;
            if (n - n.round()).abs() > 1e-9 {
                out.push(format!(
                    "period length {} s is not a whole number of {} s decision windows",
                    s.end - s.start,
                    s.decision_horizon
                ));
            }
        }
        if let Some(eps) = &s.episodes {
            let windows = self.windows();
            for t in eps {
                if !windows.iter().any(|w| (w - t).abs() < 1e-6) {
                    out.push(format!("episode time {t} is not a decision window start"));
                }
            }
        }
        if s.agent.turn_limit == 0 {
            out.push("agent.turn_limit must be ≥ 1".into());
        }
        let d = &s.demand;
        let sources = [d.gravity.is_some(), d.od.is_some(), d.trips.is_some()]
            .iter()
            .filter(|x| **x)
            .count();
        if sources != 1 {
            out.push(format!(
                "demand must set exactly one of gravity, od or trips; {sources} set"
            ));
        }
        if let Some(g) = &d.gravity {
            if !(g.total_trips > 0.0) {
                out.push(format!("demand.gravity.total_trips must be > 0, got {}", g.total_trips));
            }
            if let Some(p) = &g.mode_split {
                if !self.resolve(p).is_file() {
                    out.push(format!("mode split file {} does not exist", self.resolve(p).display()));
                }
            }
        }
        if let Some(t) = &d.trips {
            if !self.resolve(t).is_file() {
                out.push(format!("trips file {} does not exist", self.resolve(t).display()));
            }
        }
        if let Err(e) = d
            .profile
            .resolve(&self.base)
            .map_err(|e| e.to_string())
            .and_then(|p| p.validate().map_err(|e| e.to_string()))
        {
            out.push(format!("demand.profile: {e}"));
        }
        let net = match self.network() {
            Ok(n) => n,
            Err(e) => {
                out.push(format!("network: {e}"));
                return out;
            }
        };
        if let Some(od) = &d.od {
            for (k, e) in od.iter().enumerate() {
                for z in [&e.origin, &e.destination] {
                    if net.zone_idx(z).is_none() {
                        out.push(format!("demand.od[{k}] references unknown zone \"{z}\""));
                    }
                }
                if !(e.trips >= 0.0) {
                    out.push(format!("demand.od[{k}].trips must be ≥ 0, got {}", e.trips));
                }
            }
        }
        for &task in &s.tasks {
            let has = match task {
                TaskId::SignalTiming => net.junctions.iter().any(|j| j.signalized && !j.phases.is_empty()),
                TaskId::HighwaySpeedLimit => net.lanes_of_kind(LaneKind::HighwaySegment).next().is_some(),
                TaskId::RampMetering => !net.zones_with(InfrastructureKind::Ramp).is_empty(),
                TaskId::BusScheduling => net.routes.iter().any(|r| r.mode == TransitMode::Bus),
                TaskId::SubwayScheduling => net.routes.iter().any(|r| r.mode == TransitMode::Subway),
                TaskId::TaxiDispatching => s.fleet_size > 0,
            };
            if !has {
                out.push(format!("task {task} has nothing to control in this scenario"));
            }
        }
        out
    }

    fn ensure_valid(&self) -> Result<(), HarnessError> {
        let failures = self.validate();
        if failures.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Invalid(failures))
        }
    }

    /// OD matrix (when the demand is matrix-based) and the trips departing
    /// within the period, sorted by departure time.
    pub fn demand(&self, net: &TrafficNetwork, seed: u64) -> Result<(Option<OdMatrix>, Vec<Trip>), HarnessError> {
        let d = &self.scenario.demand;
        let profile = d.profile.resolve(&self.base)?;
        let od = if let Some(g) = &d.gravity {
            let activity = compute_activity(net, g.w_pop, g.w_poi)?;
            let od = gravity_demand(&activity, &net.impedance_matrix()?, g.total_trips)?;
            let table = match &g.mode_split {
                Some(p) => ModeSplitTable::load(self.resolve(p))?,
                None => ModeSplitTable::default_survey(),
            };
            let cat = PairCategorizer {
                purposes: g.purposes.clone(),
            };
            Some(apply_mode_split(&od, &table, |i, j| cat.categorize(net, i, j))?)
        } else if let Some(entries) = &d.od {
            Some(explicit_od(net, entries)?)
        } else {
            None
        };
        let trips = match (&od, &d.trips) {
            (Some(od), _) => sample_trips(od, &profile, seed)?,
            (None, Some(path)) => read_trips(&self.resolve(path))?,
            (None, None) => return Err(HarnessError::Invalid(vec!["demand has no source".into()])),
        };
        let (start, end) = (self.scenario.start, self.scenario.end);
        Ok((
            od,
            trips
                .into_iter()
                .filter(|t| t.departure_time >= start && t.departure_time < end)
                .collect(),
        ))
    }
}

fn explicit_od(net: &TrafficNetwork, entries: &[OdEntry]) -> Result<OdMatrix, HarnessError> {
    let n = net.zones.len();
    let mut total = vec![vec![0.0; n]; n];
    let mut by_mode = vec![vec![[0.0; 5]; n]; n];
    for e in entries {
        let zone = |z: &str| net.zone_idx(z).ok_or_else(|| NetworkError::UnknownZone(z.to_owned()));
        let (i, j) = (zone(&e.origin)?, zone(&e.destination)?);
        total[i][j] += e.trips;
        by_mode[i][j][e.mode.index()] += e.trips;
    }
    Ok(OdMatrix {
        zones: net.zones.iter().map(|z| z.id.clone()).collect(),
        total,
        by_mode: Some(by_mode),
        categories: None,
    })
}

/// Trips from a CSV (`id,origin,destination,mode,departure_time`) or JSON file.
pub fn read_trips(path: &Path) -> Result<Vec<Trip>, HarnessError> {
    let parse_err = |e: &dyn std::fmt::Display| HarnessError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut trips: Vec<Trip> = if path.extension().is_some_and(|e| e == "csv") {
        let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
        r.deserialize().collect::<Result<_, _>>().map_err(|e| parse_err(&e))?
    } else {
        serde_json::from_str(&read_text(path)?).map_err(|e| parse_err(&e))?
    };
    trips.sort_by(|a, b| a.departure_time.total_cmp(&b.departure_time).then(a.id.cmp(&b.id)));
    Ok(trips)
}

pub fn write_trips_csv(path: &Path, trips: &[Trip]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for t in trips {
        w.serialize(t).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub scenario: String,
    pub valid: bool,
    pub failures: Vec<String>,
}

pub fn cmd_validate(path: impl AsRef<Path>) -> Result<ValidationOutcome, HarnessError> {
    let file = ScenarioFile::load(path)?;
    let failures = file.validate();
    Ok(ValidationOutcome {
        scenario: file.scenario.name.clone(),
        valid: failures.is_empty(),
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandExport {
    pub stats: DemandStats,
    pub files: Vec<String>,
}

/// Writes `od.json` (matrix demand only), `trips.csv` and `demand_stats.csv`.
pub fn cmd_demand(
    path: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    seed: Option<u64>,
) -> Result<DemandExport, HarnessError> {
    let file = ScenarioFile::load(path)?;
    file.ensure_valid()?;
    let net = file.network()?;
    let (od, trips) = file.demand(&net, seed.unwrap_or(file.scenario.seed))?;
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut files = Vec::new();
    if let Some(od) = &od {
        let p = out.join("od.json");
        write_text(&p, &to_json_pretty(od))?;
        files.push(p.display().to_string());
    }
    let p = out.join("trips.csv");
    write_trips_csv(&p, &trips)?;
    files.push(p.display().to_string());
    let stats = DemandStats::from_trips(&file.scenario.name, &trips);
    let p = out.join("demand_stats.csv");
    write_text(&p, &stats.to_csv())?;
    files.push(p.display().to_string());
    Ok(DemandExport { stats, files })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Baseline,
    Scripted,
    External,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::Baseline => "baseline",
            RunMode::Scripted => "scripted",
            RunMode::External => "external",
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(RunMode::Baseline),
            "scripted" => Ok(RunMode::Scripted),
            "external" | "external-agent" => Ok(RunMode::External),
            _ => Err(format!(
                "unknown mode \"{s}\" (expected baseline, scripted or external)"
            )),
        }
    }
}

/// Runs one episode's agent side against a session.
pub trait EpisodeDriver {
    fn drive(&mut self, session: &mut Session) -> Result<(), HarnessError>;
}

pub struct ScriptedDriver;

impl EpisodeDriver for ScriptedDriver {
    fn drive(&mut self, session: &mut Session) -> Result<(), HarnessError> {
        let mut agent = ScriptedAgent::new(Arc::clone(session.state().network()), session.config().horizon);
        run_episode(session, &mut agent);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub start: f64,
    pub end: f64,
    pub episode: Option<u64>,
    pub metrics: StepMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub episode: u64,
    pub window: (f64, f64),
    /// Committed rollout index; `None` when the baseline was committed.
    pub committed: Option<usize>,
    pub flagged: bool,
    pub reason: crate::agent_runtime::FinishReason,
    pub turns: usize,
    pub rollout_rewards: Vec<f64>,
    /// Reward of the committed window against the stored baseline window.
    pub reward: RewardBreakdown,
    pub judge: JudgeVerdict,
    pub insights: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub scenario_digest: String,
    pub seed: u64,
    pub mode: RunMode,
    pub tasks: Vec<TaskId>,
    pub period: (f64, f64),
    pub decision_horizon: f64,
    pub trips: u64,
    /// Whole-period metrics per enabled task.
    pub metrics: BTreeMap<TaskId, TaskMetrics>,
    pub global: GlobalMetrics,
    pub windows: Vec<WindowReport>,
    pub episodes: Vec<EpisodeReport>,
    /// Relative improvement per task against the stored baseline run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_ri: Option<BTreeMap<TaskId, f64>>,
    /// Reward over all windows against the stored baseline run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardBreakdown>,
    pub conservation: Conservation,
    pub final_state_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conservation {
    pub entered: u64,
    pub in_network: u64,
    pub exited: u64,
}

impl RunReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(REPORT_FILE);
        }
        let text = read_text(&path)?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        to_json_pretty(self)
    }

    /// Human-readable tables.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} seed {} mode {}  period {}–{}  trips {}",
            self.scenario,
            self.seed,
            self.mode.name(),
            clock(self.period.0),
            clock(self.period.1),
            self.trips
        );
        let mut header = vec!["Task".to_owned()];
        header.extend(REPORT_COLUMNS.iter().map(|k| k.column().to_owned()));
        header.push("f_RI".into());
        let mut rows = vec![header];
        for (task, m) in &self.metrics {
            let mut row = vec![task.name().to_owned()];
            for k in REPORT_COLUMNS {
                row.push(match m.values.get(&k) {
                    Some(_) if m.empty.contains(&k) => "(empty)".into(),
                    Some(v) => format!("{v:.2}"),
                    None => "-".into(),
                });
            }
            row.push(
                self.f_ri
                    .as_ref()
                    .and_then(|f| f.get(task))
                    .map_or("-".into(), |v| format!("{:+.2}%", v * 100.0)),
            );
            rows.push(row);
        }
        out.push_str(&table(&rows));
        let _ = writeln!(
            out,
            "\nAverage travel time (all vehicles): {:.2} s",
            self.global.avg_travel_time
        );
        let _ = writeln!(out, "Throughput: {:.2} veh/h", self.global.throughput);
        if let Some(r) = &self.reward {
            let _ = writeln!(
                out,
                "Reward: total {:.4}  R_env {:.4}  f_TT {:.4}  f_TP {:.4}  f_RI {:.4}  judge {}/10",
                r.total, r.r_env, r.f_tt, r.f_tp, r.f_ri, r.judge_score
            );
        }
        if !self.episodes.is_empty() {
            let mut rows = vec![["Episode", "Window", "Committed", "Turns", "Reward", "Judge"]
                .map(str::to_owned)
                .to_vec()];
            for e in &self.episodes {
                rows.push(vec![
                    e.episode.to_string(),
                    format!("{}–{}", clock(e.window.0), clock(e.window.1)),
                    e.committed
                        .map_or("baseline (flagged)".into(), |k| format!("candidate {k}")),
                    e.turns.to_string(),
                    format!("{:.4}", e.reward.total),
                    e.judge.score.to_string(),
                ]);
            }
            out.push('\n');
            out.push_str(&table(&rows));
        }
        out
    }
}

/// Metric columns of the report table.
pub const REPORT_COLUMNS: [MetricKind; 10] = [
    MetricKind::Throughput,
    MetricKind::AvgWaiting,
    MetricKind::FuelKg,
    MetricKind::Income,
    MetricKind::Dropoffs,
    MetricKind::ElectricityKwh,
    MetricKind::AvgTravel,
    MetricKind::AvgQueue,
    MetricKind::AvgSpeed,
    MetricKind::PassengerWaiting,
];

pub fn clock(t: f64) -> String {
    let m = (t / 60.0).round() as u64;
    format!("{:02}:{:02}", m / 60, m % 60)
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (k, r) in rows.iter().enumerate() {
        let line: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if k == 0 {
            let _ = writeln!(
                out,
                "{}",
                widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")
            );
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub simulated_seconds: f64,
    pub episode_wall_seconds: Vec<f64>,
}

pub struct RunOptions<'a> {
    pub out_root: PathBuf,
    pub seed: Option<u64>,
    pub judge: Option<(&'a dyn Judge, &'a str)>,
    /// Agent side of external runs.
    pub driver: Option<&'a mut dyn EpisodeDriver>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            out_root: PathBuf::from("runs"),
            seed: None,
            judge: None,
            driver: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub report: RunReport,
}

pub fn run_dir_name(scenario: &str, seed: u64, mode: RunMode) -> String {
    format!("{scenario}_{seed}_{}", mode.name())
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

/// Stored baseline report matching the scenario and seed.
pub fn load_baseline(file: &ScenarioFile, seed: u64, out_root: &Path) -> Result<RunReport, HarnessError> {
    let dir = out_root.join(run_dir_name(&file.scenario.name, seed, RunMode::Baseline));
    let path = dir.join(REPORT_FILE);
    if !path.is_file() {
        return Err(HarnessError::MissingBaseline {
            path: path.display().to_string(),
        });
    }
    let report = RunReport::load(&path)?;
    if report.scenario_digest != file.digest() || report.seed != seed {
        return Err(HarnessError::Mismatch(format!(
            "baseline at {} was produced from a different scenario or seed",
            path.display()
        )));
    }
    Ok(report)
}

/// Runs a scenario and writes `report.json`, `report.txt`, `events.ndjson`,
/// transcripts, `memory.json`, `timing.json` and a scenario copy into
/// `<out_root>/<scenario>_<seed>_<mode>/`.
pub fn cmd_run(path: impl AsRef<Path>, mode: RunMode, opts: RunOptions<'_>) -> Result<RunOutput, HarnessError> {
    let file = ScenarioFile::load(path)?;
    file.ensure_valid()?;
    let RunOptions {
        out_root,
        seed,
        judge,
        driver,
    } = opts;
    let seed = seed.unwrap_or(file.scenario.seed);
    let mut scripted = ScriptedDriver;
    let driver: Option<&mut dyn EpisodeDriver> = match mode {
        RunMode::Baseline => None,
        RunMode::Scripted => Some(&mut scripted),
        RunMode::External => Some(driver.ok_or(HarnessError::NoAgent)?),
    };
    let baseline = match mode {
        RunMode::Baseline => None,
        _ => Some(load_baseline(&file, seed, &out_root)?),
    };
    let dir = out_root.join(run_dir_name(&file.scenario.name, seed, mode));
    if dir.join(REPORT_FILE).is_file() {
        fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    fs::create_dir_all(dir.join("transcripts")).map_err(|e| io_err(&dir, e))?;
    write_text(&dir.join("scenario.json"), &to_json_pretty(&file.scenario))?;
    let memory_path = file
        .scenario
        .memory
        .as_ref()
        .map_or_else(|| dir.join("memory.json"), |m| file.resolve(m));
    let report = execute_run(&file, mode, seed, &dir, &memory_path, baseline.as_ref(), driver, judge)?;
    Ok(RunOutput { dir, report })
}

#[allow(clippy::too_many_arguments)]
fn execute_run(
    file: &ScenarioFile,
    mode: RunMode,
    seed: u64,
    dir: &Path,
    memory_path: &Path,
    baseline: Option<&RunReport>,
    mut driver: Option<&mut dyn EpisodeDriver>,
    judge: Option<(&dyn Judge, &str)>,
) -> Result<RunReport, HarnessError> {
    let clock0 = Instant::now();
    let s = &file.scenario;
    let net = Arc::new(file.network()?);
    let (_, trips) = file.demand(&net, seed)?;
    let config = SimConfig {
        start_time: s.start,
        ..s.sim.clone()
    };
    let mut state = init_state(Arc::clone(&net), &trips, s.fleet_size, seed, config)?;
    let counters0 = state.counters.clone();
    let marks0 = state.log_marks();
    let mut memory = ProceduralMemory::load(memory_path)?;
    let windows = file.windows();
    if let Some(b) = baseline {
        if b.windows.len() != windows.len() || b.tasks != s.tasks {
            return Err(HarnessError::Mismatch(
                "baseline windows or tasks differ from this scenario".into(),
            ));
        }
    }
    let events_path = dir.join("events.ndjson");
    let mut events = fs::File::create(&events_path).map_err(|e| io_err(&events_path, e))?;
    let mut classic = state.classic_bundle();
    classic.horizon = s.decision_horizon;
    let hold = ActionBundle {
        horizon: s.decision_horizon,
        ..ActionBundle::default()
    };
    let mut window_reports = Vec::with_capacity(windows.len());
    let mut episodes = Vec::new();
    let mut episode_wall = Vec::new();
    for (w, &t0) in windows.iter().enumerate() {
        let episode = driver.is_some() && file.is_episode(t0);
        let outcome = if let (true, Some(driver)) = (episode, driver.as_deref_mut()) {
            let started = Instant::now();
            let k = episodes.len() as u64;
            let cfg = EpisodeConfig {
                tasks: s.tasks.clone(),
                horizon: s.decision_horizon,
                dt: s.dt,
                turn_limit: s.agent.turn_limit,
                reflection_turn_limit: s.agent.reflection_turn_limit,
                rollout_budget: s.agent.rollout_budget,
                seed,
                alpha: s.alpha,
                beta: s.beta,
                episode: k,
            };
            let mut session = Session::new(state, cfg, &memory)?;
            let driven = driver.drive(&mut session);
            let (live, record) = session.into_parts();
            state = live;
            driven?;
            let commit = record
                .commit
                .clone()
                .ok_or_else(|| HarnessError::Agent("episode ended without a commit".into()))?;
            let metrics = step_metrics(&commit.outcome, &s.tasks);
            let reference = &baseline.expect("agent modes load a baseline").windows[w].metrics;
            let step = step_reward(&metrics, reference, &s.tasks)?;
            let verdict = coordination_score(&record.transcript_text(), &s.tasks, &step.task_ri, judge);
            let reward = breakdown(&[step], &verdict, s.alpha, s.beta)?;
            let insights: Vec<ProceduralInsight> = record
                .summary
                .iter()
                .flat_map(|sm| sm.insights.iter())
                .filter_map(|text| ProceduralInsight::candidate(text, k).ok())
                .collect();
            let inserted = insights.len();
            memory.update(insights);
            write_transcript(&dir.join("transcripts").join(format!("episode_{k:03}.ndjson")), &record)?;
            episodes.push(EpisodeReport {
                episode: k,
                window: record.window,
                committed: commit.candidate,
                flagged: commit.flagged,
                reason: commit.reason,
                turns: record.turns.len(),
                rollout_rewards: record.rollouts.iter().map(|r| r.reward.total).collect(),
                reward,
                judge: verdict,
                insights: inserted,
                warnings: record.warnings.clone(),
            });
            episode_wall.push(started.elapsed().as_secs_f64());
            tracing::info!(episode = k, window = %clock(t0), "episode committed");
            commit.outcome
        } else {
            let bundle = if mode == RunMode::Baseline { &classic } else { &hold };
            state.run_horizon(bundle, s.decision_horizon, s.dt)?
        };
        for e in state.take_events() {
            let line = serde_json::to_string(&e).expect("serializable");
            writeln!(events, "{line}").map_err(|e| io_err(&events_path, e))?;
        }
        window_reports.push(WindowReport {
            start: outcome.start,
            end: outcome.end,
            episode: episode.then(|| episodes.len() as u64 - 1),
            metrics: step_metrics(&outcome, &s.tasks),
        });
    }
    memory.save(memory_path)?;
    let whole = state.window_outcome(s.start, &counters0, marks0);
    let metrics: BTreeMap<TaskId, TaskMetrics> = whole.tasks.into_iter().filter(|(t, _)| s.tasks.contains(t)).collect();
    let (f_ri, reward) = match baseline {
        None => (None, None),
        Some(b) => {
            let f_ri: BTreeMap<TaskId, f64> = metrics
                .iter()
                .filter_map(|(t, m)| b.metrics.get(t).map(|bm| (*t, task_improvement(m, bm))))
                .collect();
            let steps = window_reports
                .iter()
                .zip(&b.windows)
                .map(|(r, bw)| step_reward(&r.metrics, &bw.metrics, &s.tasks))
                .collect::<Result<Vec<_>, _>>()?;
            let reward = breakdown(&steps, &stub_verdict(&f_ri), s.alpha, s.beta)?;
            (Some(f_ri), Some(reward))
        }
    };
    let (entered, in_network, exited) = state.vehicle_counts();
    let report = RunReport {
        scenario: s.name.clone(),
        scenario_digest: file.digest(),
        seed,
        mode,
        tasks: s.tasks.clone(),
        period: (s.start, s.end),
        decision_horizon: s.decision_horizon,
        trips: trips.len() as u64,
        metrics,
        global: whole.global,
        windows: window_reports,
        episodes,
        f_ri,
        reward,
        conservation: Conservation {
            entered,
            in_network,
            exited,
        },
        final_state_hash: hex(state.state_hash()),
    };
    write_text(&dir.join(REPORT_FILE), &report.to_json())?;
    write_text(&dir.join("report.txt"), &report.render())?;
    let timing = Timing {
        wall_seconds: clock0.elapsed().as_secs_f64(),
        simulated_seconds: s.end - s.start,
        episode_wall_seconds: episode_wall,
    };
    write_text(&dir.join("timing.json"), &to_json_pretty(&timing))?;
    Ok(report)
}

fn write_transcript(path: &Path, record: &crate::agent_runtime::EpisodeRecord) -> Result<(), HarnessError> {
    let mut out = String::new();
    for t in &record.turns {
        out.push_str(&serde_json::to_string(t).expect("serializable"));
        out.push('\n');
    }
    let tail = json!({
        "episode": record.episode,
        "window": record.window,
        "rollouts": record.rollouts,
        "commit": record.commit,
        "summary": record.summary,
        "cache_labels": record.cache_labels,
        "warnings": record.warnings,
    });
    out.push_str(&tail.to_string());
    out.push('\n');
    write_text(path, &out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// `None` for network-wide rows.
    pub task: Option<TaskId>,
    pub metric: String,
    pub higher_is_better: bool,
    pub a: f64,
    pub b: f64,
    /// Signed change of B relative to A, percent; `None` when A is 0 and B is not.
    pub change_pct: Option<f64>,
    /// Change with the sign flipped for lower-is-better metrics.
    pub improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: String,
    pub seed: u64,
    pub a_mode: RunMode,
    pub b_mode: RunMode,
    pub rows: Vec<ComparisonRow>,
}

/// Percent change of `b` against `a` and its direction-aware improvement.
pub fn percent_change(a: f64, b: f64, higher_is_better: bool) -> (Option<f64>, Option<f64>) {
    let change = if a != 0.0 {
        Some((b - a) / a.abs() * 100.0)
    } else if b == 0.0 {
        Some(0.0)
    } else {
        None
    };
    let improvement = change.map(|c| if higher_is_better { c } else { -c });
    (change, improvement)
}

pub fn compare_reports(a: &RunReport, b: &RunReport) -> Result<Comparison, HarnessError> {
    if a.scenario != b.scenario || a.scenario_digest != b.scenario_digest {
        return Err(HarnessError::Mismatch(format!(
            "scenario {} ({}) vs {} ({})",
            a.scenario, a.scenario_digest, b.scenario, b.scenario_digest
        )));
    }
    if a.seed != b.seed {
        return Err(HarnessError::Mismatch(format!("seed {} vs {}", a.seed, b.seed)));
    }
    let row = |task, metric: String, hib: bool, x: f64, y: f64| {
        let (change_pct, improvement_pct) = percent_change(x, y, hib);
        ComparisonRow {
            task,
            metric,
            higher_is_better: hib,
            a: x,
            b: y,
            change_pct,
            improvement_pct,
        }
    };
    let mut rows = Vec::new();
    for (task, ma) in &a.metrics {
        let Some(mb) = b.metrics.get(task) else { continue };
        for (kind, va) in &ma.values {
            if let Some(vb) = mb.values.get(kind) {
                rows.push(row(
                    Some(*task),
                    kind.column().to_owned(),
                    kind.higher_is_better(),
                    *va,
                    *vb,
                ));
            }
        }
    }
    rows.push(row(
        None,
        "Average Travel Time".into(),
        false,
        a.global.avg_travel_time,
        b.global.avg_travel_time,
    ));
    rows.push(row(
        None,
        "Throughput".into(),
        true,
        a.global.throughput,
        b.global.throughput,
    ));
    Ok(Comparison {
        scenario: a.scenario.clone(),
        seed: a.seed,
        a_mode: a.mode,
        b_mode: b.mode,
        rows,
    })
}

pub fn cmd_compare(a: impl AsRef<Path>, b: impl AsRef<Path>) -> Result<Comparison, HarnessError> {
    compare_reports(&RunReport::load(a)?, &RunReport::load(b)?)
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut rows = vec![["Task", "Metric", "A", "B", "Change", "Improvement"]
            .map(str::to_owned)
            .to_vec()];
        let pct = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:+.2}%"));
        for r in &self.rows {
            rows.push(vec![
                r.task.map_or("network".into(), |t| t.name().to_owned()),
                r.metric.clone(),
                format!("{:.2}", r.a),
                format!("{:.2}", r.b),
                pct(r.change_pct),
                pct(r.improvement_pct),
            ]);
        }
        format!(
            "{} seed {}: {} (A) vs {} (B)\n{}",
            self.scenario,
            self.seed,
            self.a_mode.name(),
            self.b_mode.name(),
            table(&rows)
        )
    }
}

/// Initial state of a scenario, for services that drive episodes themselves.
pub fn initial_state(file: &ScenarioFile, seed: u64) -> Result<EnvState, HarnessError> {
    file.ensure_valid()?;
    let net = Arc::new(file.network()?);
    let (_, trips) = file.demand(&net, seed)?;
    let config = SimConfig {
        start_time: file.scenario.start,
        ..file.scenario.sim.clone()
    };
    Ok(init_state(net, &trips, file.scenario.fleet_size, seed, config)?)
}
