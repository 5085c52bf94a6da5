//! `citycoord`: run, compare, validate and export scenarios, locally or
//! against a running service.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use citycoord_client::{drive_remote, ClientError, NdjsonClient, ServiceClient, Transcript};
use citycoord_core::agent_runtime::scripted::ScriptedAgent;
use citycoord_core::api::{ApiError, ErrorBody, RunRequest, RunState, RunView};
use citycoord_core::harness::{
    cmd_compare, cmd_demand, cmd_run, cmd_validate, Comparison, HarnessError, RunMode, RunOptions, RunReport,
    ScenarioFile, ValidationOutcome,
};
use citycoord_core::reward::{Judge, DEFAULT_RUBRIC};
use citycoord_server::{router, run_with_listener, AppState, HttpJudge};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "citycoord", version, about = "Urban traffic control runs and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Print structured JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its report directory.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// baseline, scripted or external.
        #[arg(long, default_value = "baseline")]
        mode: RunMode,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Root directory for run directories.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Accept external agents on this address (line-delimited JSON).
        #[arg(long)]
        listen: Option<String>,
        /// Run on a citycoord service instead of in-process.
        #[arg(long)]
        server: Option<String>,
        /// Judge endpoint; the stub judge is used without one.
        #[arg(long)]
        judge_url: Option<String>,
        #[command(flatten)]
        output: Output,
    },
    /// Compare two run reports (directories, report files, or run ids with --server).
    Compare {
        a: String,
        b: String,
        #[arg(long)]
        server: Option<String>,
        #[command(flatten)]
        output: Output,
    },
    /// Check a scenario and its network.
    Validate {
        scenario: PathBuf,
        #[arg(long)]
        server: Option<String>,
        #[command(flatten)]
        output: Output,
    },
    /// Write the OD matrix, trips and demand statistics of a scenario.
    Demand {
        scenario: PathBuf,
        #[arg(long, default_value = "demand")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        server: Option<String>,
        #[command(flatten)]
        output: Output,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Drive an external run with the scripted reference agent.
    Agent {
        /// Scenario the run uses; the agent reads its network.
        #[arg(long)]
        scenario: PathBuf,
        /// Address of a `run --listen` listener.
        #[arg(long, conflicts_with = "server")]
        connect: Option<String>,
        #[arg(long, requires = "run")]
        server: Option<String>,
        /// Run id on the service.
        #[arg(long)]
        run: Option<String>,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Debug)]
struct Failure(ApiError);

impl Failure {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Failure(ApiError {
            code: code.to_owned(),
            message: message.into(),
        })
    }

    fn exit_code(&self) -> u8 {
        match self.0.code.as_str() {
            "invalid_scenario" | "parse" | "bad_request" | "no_agent" | "usage" | "not_external" => 2,
            "missing_baseline" | "mismatch" | "run_in_progress" => 3,
            "http" | "decode" => 4,
            _ => 1,
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure(ApiError::from(&e))
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Service { error, .. } => Failure(error),
            other => Failure::new(other.code(), other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new("io", e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
    } else {
        print!("{}", human());
    }
}

fn init_tracing(default: &str) {
    let filter = EnvFilter::try_from_env("CITYCOORD_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_tracing(if matches!(cli.command, Command::Serve { .. }) {
        "info"
    } else {
        "warn"
    });
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let body = ErrorBody { error: f.0.clone() };
            eprintln!("{}", serde_json::to_string(&body).expect("serializable"));
            ExitCode::from(f.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Run {
            scenario,
            mode,
            seed,
            out,
            listen,
            server,
            judge_url,
            output,
        } => match server {
            Some(url) => run_remote(&url, scenario, mode, seed, judge_url, output.json),
            None => run_local(&scenario, mode, seed, out, listen, judge_url, output.json),
        },
        Command::Compare { a, b, server, output } => {
            let cmp = match server {
                Some(url) => ServiceClient::new(url)?.compare(&a, &b)?,
                None => cmd_compare(&a, &b)?,
            };
            emit(output.json, &cmp, || Comparison::render(&cmp));
            Ok(())
        }
        Command::Validate {
            scenario,
            server,
            output,
        } => {
            let v = match server {
                Some(url) => ServiceClient::new(url)?.validate(&absolute(&scenario)?)?,
                None => cmd_validate(&scenario)?,
            };
            emit(output.json, &v, || render_validation(&v));
            if v.valid {
                Ok(())
            } else {
                Err(Failure::new(
                    "invalid_scenario",
                    format!("{} has {} problem(s)", v.scenario, v.failures.len()),
                ))
            }
        }
        Command::Demand {
            scenario,
            out,
            seed,
            server,
            output,
        } => {
            let export = match server {
                Some(url) => ServiceClient::new(url)?.demand(&absolute(&scenario)?, &absolute(&out)?, seed)?,
                None => cmd_demand(&scenario, &out, seed)?,
            };
            emit(output.json, &export, || {
                let s = &export.stats;
                format!(
                    "{}: {} trips (taxi {}, public transit {}, walk {}, vehicle {})\n{}\n",
                    s.region,
                    s.total,
                    s.taxi,
                    s.public_transit,
                    s.walk,
                    s.vehicle,
                    export.files.join("\n")
                )
            });
            Ok(())
        }
        Command::Serve { addr, out } => serve(&addr, out),
        Command::Agent {
            scenario,
            connect,
            server,
            run,
            output,
        } => agent(&scenario, connect, server.zip(run), output.json),
    }
}

/// Paths sent to a service are made absolute so they do not depend on its
/// working directory.
fn absolute(p: &Path) -> Result<PathBuf, Failure> {
    Ok(std::path::absolute(p)?)
}

fn render_validation(v: &ValidationOutcome) -> String {
    if v.valid {
        format!("{}: valid\n", v.scenario)
    } else {
        let mut s = format!("{}: invalid\n", v.scenario);
        for f in &v.failures {
            s.push_str(&format!("  - {f}\n"));
        }
        s
    }
}

fn run_local(
    scenario: &Path,
    mode: RunMode,
    seed: Option<u64>,
    out_root: PathBuf,
    listen: Option<String>,
    judge_url: Option<String>,
    json: bool,
) -> Outcome {
    let judge = judge_url
        .map(|u| HttpJudge::new(u, Duration::from_secs(60)))
        .transpose()
        .map_err(|e| Failure::new("bad_request", e.to_string()))?;
    let opts = RunOptions {
        out_root,
        seed,
        judge: judge.as_ref().map(|j| (j as &dyn Judge, DEFAULT_RUBRIC)),
        driver: None,
    };
    let out = match (mode, listen) {
        (RunMode::External, Some(addr)) => {
            let listener = std::net::TcpListener::bind(&addr)?;
            eprintln!("listening {}", listener.local_addr()?);
            run_with_listener(scenario, opts, listener)?
        }
        (RunMode::External, None) => {
            return Err(Failure::new(
                "no_agent",
                "external mode needs --listen <addr> or --server <url>",
            ))
        }
        (_, Some(_)) => return Err(Failure::new("usage", "--listen only applies to --mode external")),
        (_, None) => cmd_run(scenario, mode, opts)?,
    };
    emit(json, &out.report, || {
        format!("{}\nwritten to {}\n", out.report.render(), out.dir.display())
    });
    Ok(())
}

fn run_remote(
    url: &str,
    scenario: PathBuf,
    mode: RunMode,
    seed: Option<u64>,
    judge_url: Option<String>,
    json: bool,
) -> Outcome {
    let client = ServiceClient::new(url)?;
    let req = RunRequest {
        scenario: absolute(&scenario)?,
        mode,
        seed,
        judge_url,
        wait: None,
    };
    let view = client.start_run(&req)?;
    if view.state == RunState::Running {
        emit(json, &view, || {
            format!(
                "{} started; drive it with `citycoord agent --server {url} --run {} --scenario <path>`\n",
                view.id, view.id
            )
        });
        return Ok(());
    }
    let report = view
        .report
        .as_ref()
        .ok_or_else(|| Failure::new("decode", "service returned no report"))?;
    emit(json, &view, || render_remote(&view, report));
    Ok(())
}

fn render_remote(view: &RunView, report: &RunReport) -> String {
    let dir = view.dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default();
    format!("{}\nwritten to {dir}\n", report.render())
}

fn serve(addr: &str, out: PathBuf) -> Outcome {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening http://{}", listener.local_addr()?);
        let app = router(AppState::new(out));
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

#[derive(Serialize)]
struct AgentSummary {
    episodes: usize,
    messages: usize,
}

fn agent(scenario: &Path, connect: Option<String>, remote: Option<(String, String)>, json: bool) -> Outcome {
    let file = ScenarioFile::load(scenario)?;
    let net = Arc::new(file.network()?);
    let horizon = file.scenario.decision_horizon;
    let make = || ScriptedAgent::new(Arc::clone(&net), horizon);
    let mut transcript = Transcript::new();
    let episodes = match (connect, remote) {
        (Some(addr), _) => {
            let mut conn = NdjsonClient::connect_with_retry(&addr, Duration::from_secs(10))?;
            drive_remote(&mut conn, make, &mut transcript)?
        }
        (None, Some((url, run))) => {
            let client = ServiceClient::new(url)?;
            let mut session = client.session(&run);
            drive_remote(&mut session, make, &mut transcript)?
        }
        (None, None) => {
            return Err(Failure::new(
                "usage",
                "give --connect <addr> or --server <url> --run <id>",
            ))
        }
    };
    let summary = AgentSummary {
        episodes,
        messages: transcript.len(),
    };
    emit(json, &summary, || {
        format!("{episodes} episode(s), {} message(s)\n", summary.messages)
    });
    Ok(())
}
