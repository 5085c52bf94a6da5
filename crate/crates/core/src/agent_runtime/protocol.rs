//! Wire messages and the `ACTION: <NAME>` text grammar.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::controllers::ValidationReport;
use crate::dynamics::ActionBundle;
use crate::memory::EpisodeSummary;
use crate::tasks::TaskId;

use super::{CommitRecord, RolloutResult};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    Plan,
    GetControlApi,
    DataAnalysis,
    PolicyPlanning,
    Debug,
    Finish,
    ReflectionFinish,
}

impl ActionKind {
    pub const ALL: [ActionKind; 7] = [
        ActionKind::Plan,
        ActionKind::GetControlApi,
        ActionKind::DataAnalysis,
        ActionKind::PolicyPlanning,
        ActionKind::Debug,
        ActionKind::Finish,
        ActionKind::ReflectionFinish,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Plan => "PLAN",
            ActionKind::GetControlApi => "GET_CONTROL_API",
            ActionKind::DataAnalysis => "DATA_ANALYSIS",
            ActionKind::PolicyPlanning => "POLICY_PLANNING",
            ActionKind::Debug => "DEBUG",
            ActionKind::Finish => "FINISH",
            ActionKind::ReflectionFinish => "REFLECTION_FINISH",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionKind {
    type Err = ActionParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ActionParseError::UnknownAction(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionParseError {
    #[error("reply contains no line starting with \"ACTION:\"")]
    Missing,
    #[error("reply contains {0} ACTION lines; send one action per turn")]
    Multiple(usize),
    #[error("the first non-empty line must be the ACTION line, found \"{0}\"")]
    NotFirst(String),
    #[error("unknown action \"{0}\"")]
    UnknownAction(String),
    #[error("payload is not valid JSON: {0}")]
    Payload(String),
}

/// An action block split into its kind and the text that follows.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAction {
    pub kind: ActionKind,
    pub body: String,
}

impl ParsedAction {
    /// Body as JSON. Markdown code fences are ignored; an empty body is `{}`.
    pub fn json(&self) -> Result<Value, ActionParseError> {
        let body = strip_fences(&self.body);
        if body.is_empty() {
            return Ok(Value::Object(Default::default()));
        }
        serde_json::from_str(body).map_err(|e| ActionParseError::Payload(e.to_string()))
    }
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map_or("", |(_, r)| r);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// Parses a reply in the strict `ACTION: <NAME>` format.
pub fn parse_action(text: &str) -> Result<ParsedAction, ActionParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let action_lines: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.trim_start().starts_with("ACTION:"))
        .map(|(k, _)| k)
        .collect();
    let &first = match action_lines.len() {
        0 => return Err(ActionParseError::Missing),
        1 => &action_lines[0],
        n => return Err(ActionParseError::Multiple(n)),
    };
    if let Some(before) = lines[..first].iter().find(|l| !l.trim().is_empty()) {
        return Err(ActionParseError::NotFirst(before.trim().to_owned()));
    }
    let name = lines[first].trim_start()["ACTION:".len()..].trim();
    let kind = name.parse()?;
    Ok(ParsedAction {
        kind,
        body: lines[first + 1..].join("\n").trim().to_owned(),
    })
}

/// Messages an agent sends. Every message receives exactly one reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello {
        #[serde(default)]
        agent: String,
    },
    /// Read-only data access; does not consume a turn.
    Observe {
        op: String,
        #[serde(default)]
        args: Value,
    },
    /// One decision turn, given either as `action` + `payload` or as raw
    /// `ACTION:` text.
    Call {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        action: Option<ActionKind>,
        #[serde(default, skip_serializing_if = "Value::is_null")]
        payload: Value,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
    },
    /// Shorthand for a POLICY_PLANNING turn.
    Policy { bundle: ActionBundle },
    /// One reflection turn, same shape as `call`.
    Reflect {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        action: Option<ActionKind>,
        #[serde(default, skip_serializing_if = "Value::is_null")]
        payload: Value,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
    },
    /// Shorthand for FINISH; during reflection it ends the episode without
    /// insights.
    Finish {},
}

impl ClientMessage {
    pub fn call(action: ActionKind, payload: Value) -> Self {
        ClientMessage::Call {
            action: Some(action),
            payload,
            text: None,
        }
    }

    pub fn reflect(action: ActionKind, payload: Value) -> Self {
        ClientMessage::Reflect {
            action: Some(action),
            payload,
            text: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dependencies {
    pub affects: Vec<TaskId>,
    pub affected_by: Vec<TaskId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    MalformedMessage,
    MalformedAction,
    UnknownOperation,
    BadArguments,
    ModuleNotEnabled,
    InvalidPolicy,
    RolloutBudget,
    TurnLimit,
    WrongPhase,
    EpisodeOver,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<usize>,
    /// The agent may retry with a DEBUG turn.
    pub debug_eligible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub whitelist: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ValidationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commit: Option<Box<CommitRecord>>,
}

impl ErrorReply {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            turn: None,
            debug_eligible: false,
            whitelist: None,
            report: None,
            commit: None,
        }
    }

    pub fn debuggable(mut self) -> Self {
        self.debug_eligible = true;
        self
    }
}

/// Server replies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        protocol: u32,
        episode: u64,
        modules: Vec<TaskId>,
        dependencies: BTreeMap<TaskId, Dependencies>,
        turn_limit: usize,
        reflection_turn_limit: usize,
        rollout_budget: usize,
        window: (f64, f64),
        memory: Vec<String>,
    },
    /// Result of a data request or a non-policy turn.
    Observe {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        turn: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        action: Option<ActionKind>,
        result: Value,
    },
    RolloutResult {
        turn: usize,
        result: Box<RolloutResult>,
    },
    Commit {
        turn: usize,
        record: Box<CommitRecord>,
    },
    /// Reply to a reflection DATA_ANALYSIS turn.
    Reflect {
        turn: usize,
        result: Value,
    },
    Finish {
        summary: EpisodeSummary,
    },
    Error(ErrorReply),
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error(ErrorReply::new(code, message))
    }

    pub fn is_error(&self) -> bool {
        matches!(self, ServerMessage::Error(_))
    }
}
