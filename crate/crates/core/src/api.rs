//! Request and response bodies of the HTTP service.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::harness::{HarnessError, RunMode, RunReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    /// Scenario path on the server's filesystem.
    pub scenario: PathBuf,
    pub mode: RunMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Text-in, text-out judge endpoint; the stub judge is used without one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_url: Option<String>,
    /// Block until the run ends. Defaults to true except in external mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunView {
    /// Also the run directory name, `<scenario>_<seed>_<mode>`.
    pub id: String,
    pub mode: RunMode,
    pub state: RunState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RunReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRequest {
    pub scenario: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandRequest {
    pub scenario: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Runs to compare, by run id or by report path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRequest {
    pub a: String,
    pub b: String,
}

/// Machine-readable error, also printed by the CLI on failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ApiError,
}

impl From<&HarnessError> for ApiError {
    fn from(e: &HarnessError) -> Self {
        ApiError {
            code: e.code().to_owned(),
            message: e.to_string(),
        }
    }
}
