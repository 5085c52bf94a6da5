//! Task metrics, system reward, coordination judge and total reward.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{BoardingRecord, DropoffRecord, ExitRecord};
use crate::network::TransitMode;
use crate::tasks::{MetricKind, TaskId};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("no baseline metrics for task {0}; run the baseline first")]
    MissingBaseline(TaskId),
    #[error("no metrics for task {0}")]
    MissingTask(TaskId),
    #[error("baseline has {baseline} decision steps, run has {run}")]
    StepMismatch { baseline: usize, run: usize },
    #[error("reward weights must be > 0 (alpha = {alpha}, beta = {beta})")]
    NonPositiveWeight { alpha: f64, beta: f64 },
}

/// Raw records of one measurement window. Vehicles still in the network
/// and passengers still waiting at `end` appear in `in_network` and
/// `waiting_passengers` with `end` as their exit or boarding time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLogs {
    pub start: f64,
    pub end: f64,
    pub exits: Vec<ExitRecord>,
    pub in_network: Vec<ExitRecord>,
    pub boardings: Vec<BoardingRecord>,
    pub waiting_passengers: Vec<BoardingRecord>,
    pub dropoffs: Vec<DropoffRecord>,
    pub bus_fuel_g: f64,
    pub subway_wh: f64,
    pub highway_distance_m: f64,
    pub highway_vehicle_s: f64,
    pub ramp_queue_vehicle_s: f64,
    pub ramp_lane_s: f64,
    pub has_highway: bool,
}

impl MetricLogs {
    fn hours(&self) -> f64 {
        (self.end - self.start) / 3600.0
    }

    fn vehicles(&self) -> impl Iterator<Item = &ExitRecord> {
        self.exits.iter().chain(&self.in_network)
    }

    fn passenger_waits(&self, mode: TransitMode) -> Vec<f64> {
        self.boardings
            .iter()
            .chain(&self.waiting_passengers)
            .filter(|b| b.mode == mode)
            .map(|b| (b.boarded - b.arrival).max(0.0))
            .collect()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Value of one metric over the window; `None` when its log is empty.
pub fn metric_value(logs: &MetricLogs, kind: MetricKind) -> Option<f64> {
    match kind {
        MetricKind::Throughput => {
            let h = logs.hours();
            (h > 0.0 && !logs.exits.is_empty()).then(|| logs.exits.len() as f64 / h)
        }
        MetricKind::AvgWaiting => mean(logs.vehicles().map(|e| e.waiting)),
        MetricKind::AvgTravel => mean(logs.vehicles().map(|e| e.exit - e.depart)),
        MetricKind::AvgSpeed => {
            (logs.highway_vehicle_s > 0.0).then(|| logs.highway_distance_m / logs.highway_vehicle_s)
        }
        MetricKind::AvgQueue => (logs.ramp_lane_s > 0.0).then(|| logs.ramp_queue_vehicle_s / logs.ramp_lane_s),
        MetricKind::FuelKg => Some(logs.bus_fuel_g / 1000.0),
        MetricKind::ElectricityKwh => Some(logs.subway_wh / 1000.0),
        MetricKind::PassengerWaiting => None,
        MetricKind::Income => Some(logs.dropoffs.iter().map(|d| d.fare).sum()),
        MetricKind::Dropoffs => Some(logs.dropoffs.len() as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: TaskId,
    pub values: BTreeMap<MetricKind, f64>,
    /// Metrics whose source log was empty; their value is reported as 0.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub empty: BTreeSet<MetricKind>,
}

impl TaskMetrics {
    pub fn get(&self, kind: MetricKind) -> f64 {
        self.values.get(&kind).copied().unwrap_or(0.0)
    }

    pub fn is_empty(&self) -> bool {
        !self.empty.is_empty()
    }
}

/// Network-wide travel time and throughput of the window.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GlobalMetrics {
    pub avg_travel_time: f64,
    pub throughput: f64,
    pub avg_waiting_time: f64,
    pub vehicles: u64,
    pub exits: u64,
}

impl GlobalMetrics {
    pub fn from_logs(logs: &MetricLogs) -> Self {
        GlobalMetrics {
            avg_travel_time: metric_value(logs, MetricKind::AvgTravel).unwrap_or(0.0),
            throughput: metric_value(logs, MetricKind::Throughput).unwrap_or(0.0),
            avg_waiting_time: metric_value(logs, MetricKind::AvgWaiting).unwrap_or(0.0),
            vehicles: (logs.exits.len() + logs.in_network.len()) as u64,
            exits: logs.exits.len() as u64,
        }
    }
}

pub fn eval_task_metrics(logs: &MetricLogs, tasks: &[TaskId]) -> BTreeMap<TaskId, TaskMetrics> {
    tasks
        .iter()
        .map(|&task| {
            let mut values = BTreeMap::new();
            let mut empty = BTreeSet::new();
            for &kind in task.metrics() {
                let v = match kind {
                    MetricKind::PassengerWaiting => {
                        let mode = if task == TaskId::SubwayScheduling {
                            TransitMode::Subway
                        } else {
                            TransitMode::Bus
                        };
                        mean(logs.passenger_waits(mode).into_iter())
                    }
                    MetricKind::AvgSpeed if !logs.has_highway => None,
                    _ => metric_value(logs, kind),
                };
                if v.is_none() {
                    empty.insert(kind);
                }
                values.insert(kind, v.unwrap_or(0.0));
            }
            (task, TaskMetrics { task, values, empty })
        })
        .collect()
}

/// Signed relative improvement of `value` over `baseline`, positive when
/// better, clipped to [−1, 1].
pub fn relative_improvement(kind: MetricKind, value: f64, baseline: f64) -> f64 {
    let gain = if kind.higher_is_better() {
        value - baseline
    } else {
        baseline - value
    };
    let ri = if baseline.abs() > 0.0 {
        gain / baseline.abs()
    } else if gain == 0.0 {
        0.0
    } else {
        gain.signum()
    };
    ri.clamp(-1.0, 1.0)
}

/// Mean over metrics of the task's relative improvement.
pub fn task_improvement(metrics: &TaskMetrics, baseline: &TaskMetrics) -> f64 {
    let kinds = metrics.task.metrics();
    kinds
        .iter()
        .map(|&k| relative_improvement(k, metrics.get(k), baseline.get(k)))
        .sum::<f64>()
        / kinds.len() as f64
}

/// Normalization references for travel time and throughput.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRefs {
    pub tt_ref: f64,
    pub tp_ref: f64,
}

impl NormalizationRefs {
    pub fn from_baseline(global: &GlobalMetrics) -> Self {
        Self {
            tt_ref: global.avg_travel_time,
            tp_ref: global.throughput,
        }
    }
}

pub fn f_tt(tt: f64, tt_ref: f64) -> f64 {
    if tt_ref > 0.0 {
        1.0 - (tt / tt_ref).min(1.0)
    } else if tt <= 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn f_tp(tp: f64, tp_ref: f64) -> f64 {
    if tp_ref > 0.0 {
        (tp / tp_ref).min(1.0)
    } else if tp > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Metrics of one decision step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub tasks: BTreeMap<TaskId, TaskMetrics>,
    pub global: GlobalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReward {
    pub f_tt: f64,
    pub f_tp: f64,
    pub f_ri: f64,
    pub task_ri: BTreeMap<TaskId, f64>,
}

impl StepReward {
    pub fn sum(&self) -> f64 {
        self.f_tt + self.f_tp + self.f_ri
    }
}

pub fn step_reward(run: &StepMetrics, baseline: &StepMetrics, tasks: &[TaskId]) -> Result<StepReward, RewardError> {
    let refs = NormalizationRefs::from_baseline(&baseline.global);
    let mut task_ri = BTreeMap::new();
    for &task in tasks {
        let m = run.tasks.get(&task).ok_or(RewardError::MissingTask(task))?;
        let b = baseline.tasks.get(&task).ok_or(RewardError::MissingBaseline(task))?;
        task_ri.insert(task, task_improvement(m, b));
    }
    let f_ri = if task_ri.is_empty() {
        0.0
    } else {
        (task_ri.values().sum::<f64>() / task_ri.len() as f64).clamp(-1.0, 1.0)
    };
    Ok(StepReward {
        f_tt: f_tt(run.global.avg_travel_time, refs.tt_ref),
        f_tp: f_tp(run.global.throughput, refs.tp_ref),
        f_ri,
        task_ri,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// Means over decision steps.
    pub f_tt: f64,
    pub f_tp: f64,
    pub f_ri: f64,
    /// Mean relative improvement per task over decision steps.
    pub task_ri: BTreeMap<TaskId, f64>,
    /// Sum of `f_tt + f_tp + f_ri` over decision steps.
    pub r_env: f64,
    /// Judge score rescaled to [0, 1].
    pub r_coord: f64,
    pub judge_score: u8,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub steps: usize,
}

/// System-level reward over aligned decision steps of a run and its baseline.
pub fn system_reward(
    run: &[StepMetrics],
    baseline: &[StepMetrics],
    tasks: &[TaskId],
) -> Result<(f64, Vec<StepReward>), RewardError> {
    if run.len() != baseline.len() {
        return Err(RewardError::StepMismatch {
            baseline: baseline.len(),
            run: run.len(),
        });
    }
    let steps = run
        .iter()
        .zip(baseline)
        .map(|(r, b)| step_reward(r, b, tasks))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((steps.iter().map(StepReward::sum).sum(), steps))
}

pub fn total_reward(r_env: f64, judge_score: u8, alpha: f64, beta: f64) -> Result<f64, RewardError> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(RewardError::NonPositiveWeight { alpha, beta });
    }
    Ok(alpha * r_env + beta * (f64::from(judge_score) / 10.0))
}

/// Assembles the full breakdown from per-step rewards and a verdict.
pub fn breakdown(
    steps: &[StepReward],
    verdict: &JudgeVerdict,
    alpha: f64,
    beta: f64,
) -> Result<RewardBreakdown, RewardError> {
    let n = steps.len().max(1) as f64;
    let r_env = steps.iter().map(StepReward::sum).sum();
    let mut task_ri: BTreeMap<TaskId, f64> = BTreeMap::new();
    for s in steps {
        for (t, v) in &s.task_ri {
            *task_ri.entry(*t).or_default() += v / n;
        }
    }
    Ok(RewardBreakdown {
        f_tt: steps.iter().map(|s| s.f_tt).sum::<f64>() / n,
        f_tp: steps.iter().map(|s| s.f_tp).sum::<f64>() / n,
        f_ri: steps.iter().map(|s| s.f_ri).sum::<f64>() / n,
        task_ri,
        r_env,
        r_coord: f64::from(verdict.score) / 10.0,
        judge_score: verdict.score,
        total: total_reward(r_env, verdict.score, alpha, beta)?,
        alpha,
        beta,
        steps: steps.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeSource {
    Stub,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub score: u8,
    pub comment: String,
    pub source: JudgeSource,
    /// Set when an external judge was configured but its reply was unusable.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

/// `round(5·improved_fraction + 5·clamp(mean_f_ri + 0.5, 0, 1))`.
pub fn stub_score(improved_fraction: f64, mean_f_ri: f64) -> u8 {
    let s = 5.0 * improved_fraction.clamp(0.0, 1.0) + 5.0 * (mean_f_ri + 0.5).clamp(0.0, 1.0);
    s.round().clamp(0.0, 10.0) as u8
}

pub fn stub_verdict(task_ri: &BTreeMap<TaskId, f64>) -> JudgeVerdict {
    let n = task_ri.len();
    let (frac, mean_ri) = if n == 0 {
        (0.0, 0.0)
    } else {
        (
            task_ri.values().filter(|v| **v > 0.0).count() as f64 / n as f64,
            task_ri.values().sum::<f64>() / n as f64,
        )
    };
    let score = stub_score(frac, mean_ri);
    JudgeVerdict {
        score,
        comment: format!(
            "{:.0}% of tasks improved, mean relative improvement {mean_ri:+.3}",
            frac * 100.0
        ),
        source: JudgeSource::Stub,
        fallback: false,
    }
}

#[derive(Debug, Error)]
#[error("judge request failed: {0}")]
pub struct JudgeError(pub String);

/// Text-in, text-out scoring endpoint.
pub trait Judge: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, JudgeError>;
}

/// Default rubric. Placeholders: `{module_names_str}`, `{conversation_text}`.
pub const DEFAULT_RUBRIC: &str = "\
You review a session in which an agent tuned a city traffic simulator. \
Give a single score between 0 and 10.

Part 1, coordination across control modules (up to 5 points).
Modules in this session: {module_names_str}.
Consider how well the modules were tuned together, whether their mutual effects \
were taken into account, and whether conflicting settings were avoided.

Part 2, quality of the modelling (up to 5 points).
Consider whether the proposed policies for {module_names_str} implement a sound \
method with sensible parameters, make use of the observations the environment \
offered, and improve from one simulated rollout to the next.

Reply in exactly this form:
Score: <integer 0-10>
Brief Comment: <one or two sentences>

Session:
{conversation_text}

Evaluation:
";

pub fn render_rubric(template: &str, modules: &[TaskId], conversation: &str) -> String {
    let names = modules.iter().map(|t| t.name()).collect::<Vec<_>>().join(", ");
    template
        .replace("{module_names_str}", &names)
        .replace("{conversation_text}", conversation)
}

/// Parses `Score: N` (0–10) and an optional `Brief Comment:` line.
pub fn parse_verdict(reply: &str) -> Option<(u8, String)> {
    let mut score = None;
    let mut comment = String::new();
    for line in reply.lines().map(str::trim) {
        if let Some(rest) = line.strip_prefix("Score:") {
            if score.is_some() {
                return None;
            }
            let v: u8 = rest.trim().parse().ok()?;
            if v > 10 {
                return None;
            }
            score = Some(v);
        } else if let Some(rest) = line.strip_prefix("Brief Comment:") {
            comment = rest.trim().to_owned();
        }
    }
    score.map(|s| (s, comment))
}

/// Scores an episode transcript. Without a judge, or when the judge fails
/// or replies out of format, the stub score is used.
pub fn coordination_score(
    transcript: &str,
    tasks: &[TaskId],
    task_ri: &BTreeMap<TaskId, f64>,
    judge: Option<(&dyn Judge, &str)>,
) -> JudgeVerdict {
    let Some((judge, template)) = judge else {
        return stub_verdict(task_ri);
    };
    let prompt = render_rubric(template, tasks, transcript);
    match judge.complete(&prompt).ok().as_deref().and_then(parse_verdict) {
        Some((score, comment)) => JudgeVerdict {
            score,
            comment,
            source: JudgeSource::External,
            fallback: false,
        },
        None => {
            tracing::warn!("judge reply unusable; using stub score");
            JudgeVerdict {
                fallback: true,
                ..stub_verdict(task_ri)
            }
        }
    }
}
