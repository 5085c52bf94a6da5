//! Closed-loop episode protocol: turns, simulated rollouts, commit and
//! reflection, plus the scripted reference agent.

pub mod ops;
pub mod protocol;
pub mod scripted;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::controllers::validate_action;
use crate::dynamics::{ActionBundle, DynamicsError, EnvState, HorizonOutcome};
use crate::memory::{parse_reflection, summarize_episode, ContextCache, EpisodeSummary, ProceduralMemory};
use crate::network::TransitMode;
use crate::reward::{
    breakdown, step_reward, stub_verdict, GlobalMetrics, RewardBreakdown, RewardError, StepMetrics, TaskMetrics,
};
use crate::tasks::TaskId;

pub use protocol::{
    parse_action, ActionKind, ActionParseError, ClientMessage, ErrorCode, ErrorReply, ParsedAction, ServerMessage,
};

pub const DEFAULT_TURN_LIMIT: usize = 20;
pub const DEFAULT_REFLECTION_TURN_LIMIT: usize = 5;
pub const DEFAULT_ROLLOUT_BUDGET: usize = 5;
pub const DEFAULT_HORIZON_S: f64 = 1800.0;
/// Messages accepted per episode before the agent is treated as gone.
pub const MESSAGE_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid episode configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("rollout changed the live state (hash {before:016x} → {after:016x})")]
    Isolation { before: u64, after: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub tasks: Vec<TaskId>,
    /// Decision horizon H, seconds.
    pub horizon: f64,
    pub dt: f64,
    pub turn_limit: usize,
    pub reflection_turn_limit: usize,
    pub rollout_budget: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    /// Episode number, recorded in memory provenance.
    pub episode: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            tasks: vec![TaskId::SignalTiming],
            horizon: DEFAULT_HORIZON_S,
            dt: 1.0,
            turn_limit: DEFAULT_TURN_LIMIT,
            reflection_turn_limit: DEFAULT_REFLECTION_TURN_LIMIT,
            rollout_budget: DEFAULT_ROLLOUT_BUDGET,
            seed: 0,
            alpha: 0.5,
            beta: 0.5,
            episode: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let fail = |m: String| Err(RuntimeError::Config(m));
        if self.tasks.is_empty() {
            return fail("task set is empty".into());
        }
        if self.turn_limit == 0 {
            return fail("turn_limit must be ≥ 1".into());
        }
        if !(self.dt > 0.0) {
            return fail(format!("dt must be > 0, got {}", self.dt));
        }
        let steps = (self.horizon / self.dt).round();
        if !(self.horizon > 0.0) || (steps * self.dt - self.horizon).abs() > 1e-9 * self.horizon {
            return fail(format!(
                "horizon {} is not a positive multiple of dt {}",
                self.horizon, self.dt
            ));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return fail(format!(
                "alpha and beta must be > 0, got {} and {}",
                self.alpha, self.beta
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnPhase {
    Decision,
    Reflection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTurn {
    pub index: usize,
    pub phase: TurnPhase,
    /// `None` when the action line could not be parsed.
    pub action: Option<ActionKind>,
    pub payload: Value,
    pub reply: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub candidate: usize,
    pub turn: usize,
    pub bundle: ActionBundle,
    pub tasks: BTreeMap<TaskId, TaskMetrics>,
    pub global: GlobalMetrics,
    pub reward: RewardBreakdown,
    /// 1-based rank by total reward among this episode's candidates so far.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Finish,
    TurnLimit,
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub bundle: ActionBundle,
    /// Index of the committed rollout; `None` when the baseline was committed.
    pub candidate: Option<usize>,
    /// No validated candidate existed and the baseline was committed.
    pub flagged: bool,
    pub reason: FinishReason,
    /// Reward the committed candidate earned in its rollout.
    pub recorded_reward: Option<f64>,
    pub outcome: HorizonOutcome,
    pub reward: RewardBreakdown,
}

/// Everything an episode produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub window: (f64, f64),
    pub tasks: Vec<TaskId>,
    pub turns: Vec<AgentTurn>,
    pub rollouts: Vec<RolloutResult>,
    pub reference: Option<StepMetrics>,
    pub commit: Option<CommitRecord>,
    pub summary: Option<EpisodeSummary>,
    pub cache_labels: Vec<String>,
    pub warnings: Vec<String>,
}

impl EpisodeRecord {
    /// Plain-text transcript, one block per turn.
    pub fn transcript_text(&self) -> String {
        let mut out = String::new();
        for t in &self.turns {
            let action = t.action.map_or("INVALID", ActionKind::name);
            out.push_str(&format!("[turn {} {:?}] ACTION: {action}\n", t.index, t.phase));
            if !t.payload.is_null() {
                out.push_str(&format!("{}\n", t.payload));
            }
            out.push_str(&format!("=> {}\n\n", truncate(&t.reply.to_string(), 2000)));
        }
        out
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_owned();
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}…", &s[..end])
}

/// Tasks whose plans a bundle touches.
pub fn bundle_tasks(state: &EnvState, bundle: &ActionBundle) -> Vec<TaskId> {
    let net = state.network();
    let mut out = Vec::new();
    if !bundle.signals.is_empty() {
        out.push(TaskId::SignalTiming);
    }
    if !bundle.speed_limits.is_empty() {
        out.push(TaskId::HighwaySpeedLimit);
    }
    if !bundle.ramps.is_empty() {
        out.push(TaskId::RampMetering);
    }
    for id in bundle.transit.keys() {
        let task = match net.route_idx(id.as_str()).map(|r| net.routes[r].mode) {
            Some(TransitMode::Subway) => TaskId::SubwayScheduling,
            _ => TaskId::BusScheduling,
        };
        if !out.contains(&task) {
            out.push(task);
        }
    }
    if bundle.dispatch.is_some() {
        out.push(TaskId::TaxiDispatching);
    }
    out
}

/// Metrics of running `bundle` for one horizon on a clone of `live`.
pub fn simulate_window(
    live: &EnvState,
    bundle: &ActionBundle,
    cfg: &EpisodeConfig,
) -> Result<StepMetrics, RuntimeError> {
    let mut sim = live.clone();
    let out = sim.run_horizon(bundle, cfg.horizon, cfg.dt)?;
    Ok(step_metrics(&out, &cfg.tasks))
}

pub fn step_metrics(out: &HorizonOutcome, tasks: &[TaskId]) -> StepMetrics {
    StepMetrics {
        tasks: out
            .tasks
            .iter()
            .filter(|(t, _)| tasks.contains(t))
            .map(|(t, m)| (*t, m.clone()))
            .collect(),
        global: out.global,
    }
}

/// Reward of one window against the reference window, with the stub judge.
pub fn window_reward(
    run: &StepMetrics,
    reference: &StepMetrics,
    cfg: &EpisodeConfig,
) -> Result<RewardBreakdown, RuntimeError> {
    let step = step_reward(run, reference, &cfg.tasks)?;
    let verdict = stub_verdict(&step.task_ri);
    Ok(breakdown(&[step], &verdict, cfg.alpha, cfg.beta)?)
}

/// Evaluates a validated bundle on a clone of the live state and checks
/// that the live state is untouched.
pub fn rollout_evaluate(
    live: &EnvState,
    bundle: &ActionBundle,
    reference: &StepMetrics,
    cfg: &EpisodeConfig,
) -> Result<(StepMetrics, RewardBreakdown), RuntimeError> {
    let before = live.state_hash();
    let report = validate_action(live.network(), bundle);
    if !report.is_valid() {
        return Err(DynamicsError::InvalidAction(report).into());
    }
    let metrics = simulate_window(live, bundle, cfg)?;
    let after = live.state_hash();
    if before != after {
        return Err(RuntimeError::Isolation { before, after });
    }
    let reward = window_reward(&metrics, reference, cfg)?;
    Ok((metrics, reward))
}

/// Short label of how a bundle sets one task, used in templated insights.
pub fn plan_kind(state: &EnvState, bundle: &ActionBundle, task: TaskId) -> String {
    let net = state.network();
    let mean = |v: Vec<f64>| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    match task {
        TaskId::SignalTiming if !bundle.signals.is_empty() => {
            format!(
                "mean-cycle-{:.0}s",
                mean(bundle.signals.values().map(|p| p.cycle_time).collect())
            )
        }
        TaskId::HighwaySpeedLimit if !bundle.speed_limits.is_empty() => {
            let factors = bundle
                .speed_limits
                .iter()
                .filter_map(|(id, p)| net.lane_idx(id.as_str()).map(|l| p.limit / net.lanes[l].speed_limit))
                .collect();
            format!("speed-factor-{:.2}", mean(factors))
        }
        TaskId::RampMetering if !bundle.ramps.is_empty() => {
            if bundle.ramps.values().all(|p| p.feedback.is_some()) {
                "alinea".into()
            } else {
                format!(
                    "fixed-open-{:.0}s",
                    mean(bundle.ramps.values().map(|p| p.open_duration).collect())
                )
            }
        }
        TaskId::BusScheduling | TaskId::SubwayScheduling => {
            let mode = if task == TaskId::BusScheduling {
                TransitMode::Bus
            } else {
                TransitMode::Subway
            };
            let h: Vec<f64> = bundle
                .transit
                .iter()
                .filter(|(id, _)| net.route_idx(id.as_str()).is_some_and(|r| net.routes[r].mode == mode))
                .map(|(_, s)| s.headway)
                .collect();
            if h.is_empty() {
                "unchanged".into()
            } else {
                format!("headway-{:.0}s", mean(h))
            }
        }
        TaskId::TaxiDispatching if bundle.dispatch.is_some() => "explicit-dispatch".into(),
        _ => "unchanged".into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    Decision,
    Reflection,
    Done,
}

/// One episode over the live state. Every message gets exactly one reply.
pub struct Session {
    cfg: EpisodeConfig,
    live: EnvState,
    classic: ActionBundle,
    memory: Vec<String>,
    escc: ContextCache,
    phase: SessionPhase,
    window: (f64, f64),
    turns: Vec<AgentTurn>,
    decision_turns: usize,
    reflection_turns: usize,
    rollouts: Vec<RolloutResult>,
    reference: Option<StepMetrics>,
    last_error: Option<ErrorReply>,
    commit: Option<CommitRecord>,
    summary: Option<EpisodeSummary>,
    messages: usize,
    warnings: Vec<String>,
}

impl Session {
    pub fn new(live: EnvState, cfg: EpisodeConfig, memory: &ProceduralMemory) -> Result<Self, RuntimeError> {
        cfg.validate()?;
        let classic = live.classic_bundle();
        let window = (live.clock, live.clock + cfg.horizon);
        Ok(Self {
            memory: memory.items().iter().map(|i| i.text.clone()).collect(),
            cfg,
            live,
            classic,
            escc: ContextCache::default(),
            phase: SessionPhase::Decision,
            window,
            turns: Vec::new(),
            decision_turns: 0,
            reflection_turns: 0,
            rollouts: Vec::new(),
            reference: None,
            last_error: None,
            commit: None,
            summary: None,
            messages: 0,
            warnings: Vec::new(),
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnvState {
        &self.live
    }

    pub fn phase(&self) -> SessionPhase {
        self.phase
    }

    pub fn is_done(&self) -> bool {
        self.phase == SessionPhase::Done
    }

    pub fn rollouts(&self) -> &[RolloutResult] {
        &self.rollouts
    }

    pub fn hello(&self) -> ServerMessage {
        ServerMessage::Hello {
            protocol: protocol::PROTOCOL_VERSION,
            episode: self.cfg.episode,
            modules: self.cfg.tasks.clone(),
            dependencies: ops::dependencies(&self.cfg.tasks),
            turn_limit: self.cfg.turn_limit,
            reflection_turn_limit: self.cfg.reflection_turn_limit,
            rollout_budget: self.cfg.rollout_budget,
            window: self.window,
            memory: self.memory.clone(),
        }
    }

    /// Parses one protocol line and returns the reply line.
    pub fn handle_line(&mut self, line: &str) -> String {
        let reply = match serde_json::from_str::<ClientMessage>(line) {
            Ok(msg) => self.handle(msg),
            Err(e) => ServerMessage::error(ErrorCode::MalformedMessage, format!("cannot parse message: {e}")),
        };
        serde_json::to_string(&reply).expect("serializable reply")
    }

    pub fn handle(&mut self, msg: ClientMessage) -> ServerMessage {
        self.messages += 1;
        if self.messages > MESSAGE_CAP && self.phase != SessionPhase::Done {
            self.warnings.push("message cap reached".into());
            self.abandon();
            return ServerMessage::error(ErrorCode::EpisodeOver, "message cap reached; episode closed");
        }
        match (self.phase, msg) {
            (_, ClientMessage::Hello { .. }) => self.hello(),
            (SessionPhase::Done, _) => ServerMessage::error(ErrorCode::EpisodeOver, "episode is over"),
            (_, ClientMessage::Observe { op, args }) => match ops::execute(&self.live, &mut self.escc, &op, &args) {
                Ok(result) => ServerMessage::Observe {
                    turn: None,
                    action: None,
                    result,
                },
                Err(e) => ServerMessage::Error(e),
            },
            (SessionPhase::Decision, ClientMessage::Call { action, payload, text }) => {
                self.decision_turn(action, payload, text)
            }
            (SessionPhase::Decision, ClientMessage::Policy { bundle }) => {
                let payload = serde_json::to_value(bundle).expect("serializable");
                self.decision_turn(Some(ActionKind::PolicyPlanning), payload, None)
            }
            (SessionPhase::Decision, ClientMessage::Finish {}) => {
                self.decision_turn(Some(ActionKind::Finish), Value::Null, None)
            }
            (SessionPhase::Reflection, ClientMessage::Reflect { action, payload, text }) => {
                self.reflection_turn(action, payload, text)
            }
            (SessionPhase::Reflection, ClientMessage::Finish {}) => {
                let summary = self.finish_reflection(None);
                ServerMessage::Finish { summary }
            }
            (SessionPhase::Decision, ClientMessage::Reflect { .. }) => ServerMessage::error(
                ErrorCode::WrongPhase,
                "reflection starts after FINISH; send a decision turn",
            ),
            (SessionPhase::Reflection, _) => ServerMessage::error(
                ErrorCode::WrongPhase,
                "the policy is committed; send reflect messages or finish",
            ),
        }
    }

    fn record(&mut self, phase: TurnPhase, action: Option<ActionKind>, payload: Value, reply: &ServerMessage) {
        let index = self.turns.len();
        self.turns.push(AgentTurn {
            index,
            phase,
            action,
            payload,
            reply: serde_json::to_value(reply).expect("serializable"),
        });
    }

    fn fail(&mut self, mut e: ErrorReply, turn: usize) -> ServerMessage {
        e.turn = Some(turn);
        if e.debug_eligible {
            self.last_error = Some(e.clone());
        }
        ServerMessage::Error(e)
    }

    fn resolve_action(
        action: Option<ActionKind>,
        payload: Value,
        text: Option<String>,
    ) -> Result<(ActionKind, Value), (Value, ErrorReply)> {
        match (action, text) {
            (Some(kind), _) => Ok((kind, payload)),
            (None, Some(text)) => {
                let raw = Value::String(text.clone());
                let parsed = parse_action(&text).map_err(|e| {
                    (
                        raw.clone(),
                        ErrorReply::new(ErrorCode::MalformedAction, e.to_string()).debuggable(),
                    )
                })?;
                if parsed.kind == ActionKind::ReflectionFinish {
                    return Ok((parsed.kind, Value::String(parsed.body)));
                }
                match parsed.json() {
                    Ok(v) => Ok((parsed.kind, v)),
                    Err(_) if matches!(parsed.kind, ActionKind::Plan | ActionKind::Debug) => {
                        Ok((parsed.kind, Value::String(parsed.body)))
                    }
                    Err(e) => Err((
                        raw,
                        ErrorReply::new(ErrorCode::MalformedAction, e.to_string()).debuggable(),
                    )),
                }
            }
            (None, None) => Err((
                Value::Null,
                ErrorReply::new(ErrorCode::MalformedAction, "turn names no action").debuggable(),
            )),
        }
    }

    fn decision_turn(&mut self, action: Option<ActionKind>, payload: Value, text: Option<String>) -> ServerMessage {
        if self.decision_turns >= self.cfg.turn_limit {
            let limit = self.cfg.turn_limit;
            return match self.finalize(FinishReason::TurnLimit) {
                Ok(record) => ServerMessage::Error(ErrorReply {
                    commit: Some(Box::new(record)),
                    ..ErrorReply::new(
                        ErrorCode::TurnLimit,
                        format!("turn limit of {limit} reached; the best policy so far was committed"),
                    )
                }),
                Err(e) => ServerMessage::error(ErrorCode::Internal, e.to_string()),
            };
        }
        let turn = self.turns.len();
        self.decision_turns += 1;
        let (kind, payload) = match Self::resolve_action(action, payload, text) {
            Ok(x) => x,
            Err((raw, e)) => {
                let reply = self.fail(e, turn);
                self.record(TurnPhase::Decision, None, raw, &reply);
                return reply;
            }
        };
        let reply = match kind {
            ActionKind::Plan => ServerMessage::Observe {
                turn: Some(turn),
                action: Some(kind),
                result: json!({"noted": true, "turns_remaining": self.cfg.turn_limit - self.decision_turns}),
            },
            ActionKind::GetControlApi => self.control_api_turn(turn, &payload),
            ActionKind::DataAnalysis => self.analysis_turn(turn, &payload, TurnPhase::Decision),
            ActionKind::PolicyPlanning => self.policy_turn(turn, &payload),
            ActionKind::Debug => ServerMessage::Observe {
                turn: Some(turn),
                action: Some(kind),
                result: json!({
                    "last_error": self.last_error,
                    "hint": "resubmit the corrected payload with the original action",
                }),
            },
            ActionKind::Finish => {
                self.record(
                    TurnPhase::Decision,
                    Some(kind),
                    payload,
                    &ServerMessage::Observe {
                        turn: Some(turn),
                        action: Some(kind),
                        result: Value::Null,
                    },
                );
                return match self.finalize(FinishReason::Finish) {
                    Ok(record) => {
                        let reply = ServerMessage::Commit {
                            turn,
                            record: Box::new(record),
                        };
                        self.turns[turn].reply = serde_json::to_value(&reply).expect("serializable");
                        reply
                    }
                    Err(e) => ServerMessage::error(ErrorCode::Internal, e.to_string()),
                };
            }
            ActionKind::ReflectionFinish => self.fail(
                ErrorReply::new(ErrorCode::WrongPhase, "REFLECTION_FINISH is only valid after FINISH"),
                turn,
            ),
        };
        self.record(TurnPhase::Decision, Some(kind), payload, &reply);
        reply
    }

    fn control_api_turn(&mut self, turn: usize, payload: &Value) -> ServerMessage {
        let module = payload
            .get("module")
            .and_then(Value::as_str)
            .or_else(|| payload.as_str())
            .unwrap_or_default()
            .trim()
            .to_owned();
        match module.parse::<TaskId>() {
            Ok(task) if self.cfg.tasks.contains(&task) => ServerMessage::Observe {
                turn: Some(turn),
                action: Some(ActionKind::GetControlApi),
                result: ops::control_api(&self.live, task, &self.cfg.tasks),
            },
            _ => {
                let enabled: Vec<&str> = self.cfg.tasks.iter().map(|t| t.name()).collect();
                self.fail(
                    ErrorReply::new(
                        ErrorCode::ModuleNotEnabled,
                        format!(
                            "module \"{module}\" is not enabled; only enabled modules can be optimized: {}",
                            enabled.join(", ")
                        ),
                    )
                    .debuggable(),
                    turn,
                )
            }
        }
    }

    fn analysis_turn(&mut self, turn: usize, payload: &Value, phase: TurnPhase) -> ServerMessage {
        let Some(op) = payload.get("op").and_then(Value::as_str) else {
            return self.fail(ops::unknown_operation("<missing op>"), turn);
        };
        let args = match (payload.get("args"), payload.get("save")) {
            (Some(a), Some(save)) if a.is_object() => {
                let mut a = a.clone();
                a["save"] = save.clone();
                a
            }
            (Some(a), _) => a.clone(),
            (None, _) => payload.clone(),
        };
        match ops::execute(&self.live, &mut self.escc, op, &args) {
            Ok(result) => match phase {
                TurnPhase::Decision => ServerMessage::Observe {
                    turn: Some(turn),
                    action: Some(ActionKind::DataAnalysis),
                    result,
                },
                TurnPhase::Reflection => ServerMessage::Reflect { turn, result },
            },
            Err(e) => self.fail(e, turn),
        }
    }

    fn reference(&mut self) -> Result<StepMetrics, RuntimeError> {
        if let Some(r) = &self.reference {
            return Ok(r.clone());
        }
        let r = simulate_window(&self.live, &self.classic, &self.cfg)?;
        self.reference = Some(r.clone());
        Ok(r)
    }

    fn policy_turn(&mut self, turn: usize, payload: &Value) -> ServerMessage {
        if self.rollouts.len() >= self.cfg.rollout_budget {
            return self.fail(
                ErrorReply::new(
                    ErrorCode::RolloutBudget,
                    format!("rollout budget of {} is spent; send FINISH", self.cfg.rollout_budget),
                ),
                turn,
            );
        }
        let mut bundle: ActionBundle = match serde_json::from_value(payload.clone()) {
            Ok(b) => b,
            Err(e) => {
                return self.fail(
                    ErrorReply::new(
                        ErrorCode::InvalidPolicy,
                        format!("policy does not match the schema: {e}"),
                    )
                    .debuggable(),
                    turn,
                )
            }
        };
        bundle.horizon = self.cfg.horizon;
        let stray: Vec<&str> = bundle_tasks(&self.live, &bundle)
            .into_iter()
            .filter(|t| !self.cfg.tasks.contains(t))
            .map(TaskId::name)
            .collect();
        if !stray.is_empty() {
            return self.fail(
                ErrorReply::new(
                    ErrorCode::ModuleNotEnabled,
                    format!("policy touches modules that are not enabled: {}", stray.join(", ")),
                )
                .debuggable(),
                turn,
            );
        }
        let report = validate_action(self.live.network(), &bundle);
        if !report.is_valid() {
            let reasons: Vec<String> = report
                .failures()
                .map(|c| format!("{}: {}", c.plan, c.reason.as_deref().unwrap_or("failed")))
                .collect();
            return self.fail(
                ErrorReply {
                    report: Some(report),
                    ..ErrorReply::new(ErrorCode::InvalidPolicy, reasons.join("; ")).debuggable()
                },
                turn,
            );
        }
        let evaluated = self
            .reference()
            .and_then(|reference| rollout_evaluate(&self.live, &bundle, &reference, &self.cfg));
        match evaluated {
            Ok((metrics, reward)) => {
                let rank = 1 + self.rollouts.iter().filter(|r| r.reward.total > reward.total).count();
                let result = RolloutResult {
                    candidate: self.rollouts.len(),
                    turn,
                    bundle,
                    tasks: metrics.tasks,
                    global: metrics.global,
                    reward,
                    rank,
                };
                self.rollouts.push(result.clone());
                ServerMessage::RolloutResult {
                    turn,
                    result: Box::new(result),
                }
            }
            Err(e) => self.fail(ErrorReply::new(ErrorCode::Internal, e.to_string()), turn),
        }
    }

    /// Best candidate by recorded total reward; the earliest among ties.
    pub fn best_candidate(&self) -> Option<&RolloutResult> {
        self.rollouts
            .iter()
            .reduce(|best, r| if r.reward.total > best.reward.total { r } else { best })
    }

    /// Commits the best candidate (or the baseline) to the live state.
    fn finalize(&mut self, reason: FinishReason) -> Result<CommitRecord, RuntimeError> {
        let reference = self.reference()?;
        let (bundle, candidate, recorded) = match self.best_candidate() {
            Some(r) => (r.bundle.clone(), Some(r.candidate), Some(r.reward.total)),
            None => {
                let mut b = self.classic.clone();
                b.horizon = self.cfg.horizon;
                (b, None, None)
            }
        };
        let outcome = self.live.run_horizon(&bundle, self.cfg.horizon, self.cfg.dt)?;
        let reward = window_reward(&step_metrics(&outcome, &self.cfg.tasks), &reference, &self.cfg)?;
        if let Some(rec) = recorded {
            if (rec - reward.total).abs() > 1e-9 {
                self.warnings.push(format!(
                    "committed reward {} differs from its rollout reward {rec}",
                    reward.total
                ));
            }
        }
        let record = CommitRecord {
            bundle,
            candidate,
            flagged: candidate.is_none(),
            reason,
            recorded_reward: recorded,
            outcome,
            reward,
        };
        self.commit = Some(record.clone());
        self.phase = SessionPhase::Reflection;
        Ok(record)
    }

    fn reflection_turn(&mut self, action: Option<ActionKind>, payload: Value, text: Option<String>) -> ServerMessage {
        let turn = self.turns.len();
        let (kind, payload) = match Self::resolve_action(action, payload, text) {
            Ok(x) => x,
            Err((raw, e)) => {
                let reply = self.fail(e, turn);
                self.record(TurnPhase::Reflection, None, raw, &reply);
                return reply;
            }
        };
        let reply = match kind {
            ActionKind::DataAnalysis if self.reflection_turns >= self.cfg.reflection_turn_limit => {
                let mut summary = self.finish_reflection(None);
                summary.warnings.push(format!(
                    "reflection limit of {} DATA_ANALYSIS turns reached",
                    self.cfg.reflection_turn_limit
                ));
                self.summary = Some(summary.clone());
                ServerMessage::Finish { summary }
            }
            ActionKind::DataAnalysis => {
                self.reflection_turns += 1;
                self.analysis_turn(turn, &payload, TurnPhase::Reflection)
            }
            ActionKind::ReflectionFinish => {
                let raw = match &payload {
                    Value::String(s) => s.clone(),
                    Value::Object(m) if m.contains_key("insights") => m["insights"].to_string(),
                    other => other.to_string(),
                };
                let summary = self.finish_reflection(Some(&raw));
                ServerMessage::Finish { summary }
            }
            _ => self.fail(
                ErrorReply::new(
                    ErrorCode::WrongPhase,
                    "reflection accepts DATA_ANALYSIS or REFLECTION_FINISH",
                ),
                turn,
            ),
        };
        self.record(TurnPhase::Reflection, Some(kind), payload, &reply);
        reply
    }

    fn finish_reflection(&mut self, external: Option<&str>) -> EpisodeSummary {
        let (task_ri, kinds) = match &self.commit {
            Some(c) => (
                c.reward.task_ri.clone(),
                self.cfg
                    .tasks
                    .iter()
                    .map(|&t| (t, plan_kind(&self.live, &c.bundle, t)))
                    .collect(),
            ),
            None => (BTreeMap::new(), BTreeMap::new()),
        };
        let summary = summarize_episode(external, &task_ri, &kinds, self.window);
        self.summary = Some(summary.clone());
        self.phase = SessionPhase::Done;
        summary
    }

    /// Closes the episode when the agent stops responding.
    pub fn abandon(&mut self) {
        if self.phase == SessionPhase::Decision {
            if let Err(e) = self.finalize(FinishReason::Disconnected) {
                self.warnings.push(format!("commit failed: {e}"));
            }
        }
        if self.phase != SessionPhase::Done {
            self.finish_reflection(None);
        }
    }

    pub fn record_so_far(&self) -> EpisodeRecord {
        EpisodeRecord {
            episode: self.cfg.episode,
            window: self.window,
            tasks: self.cfg.tasks.clone(),
            turns: self.turns.clone(),
            rollouts: self.rollouts.clone(),
            reference: self.reference.clone(),
            commit: self.commit.clone(),
            summary: self.summary.clone(),
            cache_labels: self.escc.list().into_iter().map(str::to_owned).collect(),
            warnings: self.warnings.clone(),
        }
    }

    /// Ends the session, returning the advanced live state and the record.
    pub fn into_parts(mut self) -> (EnvState, EpisodeRecord) {
        if self.phase != SessionPhase::Done {
            self.abandon();
        }
        let record = self.record_so_far();
        (self.live, record)
    }
}

/// Source of agent messages for [`run_episode`].
pub trait Agent {
    /// Next message given the reply to the previous one; `None` hangs up.
    fn next_message(&mut self, last_reply: Option<&ServerMessage>) -> Option<ClientMessage>;
}

/// Drives a session with an in-process agent until the episode is over.
pub fn run_episode(session: &mut Session, agent: &mut dyn Agent) {
    let mut reply = None;
    while !session.is_done() {
        match agent.next_message(reply.as_ref()) {
            Some(msg) => reply = Some(session.handle(msg)),
            None => session.abandon(),
        }
    }
}

/// Validates and parses a reflection array without a session.
pub fn reflection_items(raw: &str) -> Result<Vec<String>, crate::memory::MemoryError> {
    parse_reflection(raw).map(|(items, _)| items)
}
