//! Blocking client for the citycoord service.
//!
//! [`ServiceClient`] wraps the HTTP API. Agent sessions go through a
//! [`Transport`]: [`HttpSession`] for runs started over HTTP, or
//! [`NdjsonClient`] for a line-delimited JSON listener.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::Path;
use std::time::Duration;

use citycoord_core::agent_runtime::{Agent, ClientMessage, ErrorCode, ServerMessage};
use citycoord_core::api::*;
use citycoord_core::harness::{Comparison, DemandExport, ValidationOutcome};
use reqwest::blocking::{Client, Response};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request to {url} failed: {message}")]
    Http { url: String, message: String },
    /// Error reported by the service.
    #[error("{}", .error.message)]
    Service { status: u16, error: ApiError },
    #[error("connection error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot decode reply: {0}")]
    Decode(String),
    #[error("run finished")]
    RunFinished,
}

impl ClientError {
    /// Stable machine-readable code; service errors keep the server's code.
    pub fn code(&self) -> &str {
        match self {
            ClientError::Http { .. } => "http",
            ClientError::Service { error, .. } => &error.code,
            ClientError::Io(_) => "io",
            ClientError::Decode(_) => "decode",
            ClientError::RunFinished => "run_finished",
        }
    }
}

pub struct ServiceClient {
    base: String,
    http: Client,
}

impl ServiceClient {
    /// `base` is the service root, e.g. `http://127.0.0.1:7878`. Runs can
    /// take minutes, so requests have no timeout.
    pub fn new(base: impl Into<String>) -> Result<Self, ClientError> {
        let base = base.into().trim_end_matches('/').to_owned();
        let http = Client::builder()
            .timeout(None::<Duration>)
            .build()
            .map_err(|e| ClientError::Http {
                url: base.clone(),
                message: e.to_string(),
            })?;
        Ok(Self { base, http })
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn check(&self, url: &str, resp: Result<Response, reqwest::Error>) -> Result<Response, ClientError> {
        let resp = resp.map_err(|e| ClientError::Http {
            url: url.to_owned(),
            message: e.to_string(),
        })?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().unwrap_or_default();
        let error = serde_json::from_str::<ErrorBody>(&text)
            .map(|b| b.error)
            .unwrap_or(ApiError {
                code: "http".into(),
                message: format!("{status}: {text}"),
            });
        Err(ClientError::Service {
            status: status.as_u16(),
            error,
        })
    }

    fn decode<T: DeserializeOwned>(resp: Response) -> Result<T, ClientError> {
        let text = resp.text().map_err(|e| ClientError::Decode(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| ClientError::Decode(e.to_string()))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let url = self.url(path);
        let resp = self.check(&url, self.http.get(&url).send())?;
        Self::decode(resp)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let url = self.url(path);
        let resp = self.check(&url, self.http.post(&url).json(body).send())?;
        Self::decode(resp)
    }

    pub fn health(&self) -> Result<(), ClientError> {
        self.get::<serde_json::Value>("/health").map(drop)
    }

    pub fn validate(&self, scenario: &Path) -> Result<ValidationOutcome, ClientError> {
        self.post(
            "/validate",
            &ScenarioRequest {
                scenario: scenario.to_path_buf(),
            },
        )
    }

    pub fn demand(&self, scenario: &Path, out_dir: &Path, seed: Option<u64>) -> Result<DemandExport, ClientError> {
        let req = DemandRequest {
            scenario: scenario.to_path_buf(),
            out_dir: out_dir.to_path_buf(),
            seed,
        };
        self.post("/demand", &req)
    }

    pub fn compare(&self, a: &str, b: &str) -> Result<Comparison, ClientError> {
        let req = CompareRequest {
            a: a.to_owned(),
            b: b.to_owned(),
        };
        self.post("/compare", &req)
    }

    pub fn start_run(&self, req: &RunRequest) -> Result<RunView, ClientError> {
        self.post("/runs", req)
    }

    pub fn run(&self, id: &str) -> Result<RunView, ClientError> {
        self.get(&format!("/runs/{id}"))
    }

    pub fn runs(&self) -> Result<Vec<RunView>, ClientError> {
        self.get("/runs")
    }

    /// Polls until the run leaves the running state.
    pub fn wait(&self, id: &str, every: Duration) -> Result<RunView, ClientError> {
        loop {
            let view = self.run(id)?;
            if view.state != RunState::Running {
                return Ok(view);
            }
            std::thread::sleep(every);
        }
    }

    pub fn session(&self, run_id: &str) -> HttpSession<'_> {
        HttpSession {
            client: self,
            run_id: run_id.to_owned(),
        }
    }
}

/// One request, one reply.
pub trait Transport {
    fn exchange(&mut self, msg: &ClientMessage) -> Result<ServerMessage, ClientError>;
}

/// Agent session of an external run started over HTTP.
pub struct HttpSession<'a> {
    client: &'a ServiceClient,
    run_id: String,
}

impl HttpSession<'_> {
    pub fn send_raw(&self, body: &str) -> Result<ServerMessage, ClientError> {
        let url = self.client.url(&format!("/runs/{}/messages", self.run_id));
        let resp = self.client.http.post(&url).body(body.to_owned()).send();
        match self.client.check(&url, resp) {
            Ok(resp) => ServiceClient::decode(resp),
            Err(ClientError::Service { status: 410, .. }) => Err(ClientError::RunFinished),
            Err(e) => Err(e),
        }
    }

    pub fn hang_up(&self) -> Result<(), ClientError> {
        let url = self.client.url(&format!("/runs/{}/hangup", self.run_id));
        self.client.check(&url, self.client.http.post(&url).send()).map(drop)
    }
}

impl Transport for HttpSession<'_> {
    fn exchange(&mut self, msg: &ClientMessage) -> Result<ServerMessage, ClientError> {
        let body = serde_json::to_string(msg).map_err(|e| ClientError::Decode(e.to_string()))?;
        self.send_raw(&body)
    }
}

/// Connection to a line-delimited JSON listener.
pub struct NdjsonClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl NdjsonClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    /// Connects, retrying until `patience` runs out; for listeners that
    /// are still starting.
    pub fn connect_with_retry(addr: &str, patience: Duration) -> Result<Self, ClientError> {
        let start = std::time::Instant::now();
        loop {
            match Self::connect(addr) {
                Ok(c) => return Ok(c),
                Err(e) if start.elapsed() >= patience => return Err(e),
                Err(_) => std::thread::sleep(Duration::from_millis(50)),
            }
        }
    }

    /// Sends one line and returns the raw reply line.
    pub fn send_line(&mut self, line: &str) -> Result<String, ClientError> {
        self.writer.write_all(line.trim_end().as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(ClientError::RunFinished);
        }
        Ok(reply.trim_end().to_owned())
    }
}

impl Transport for NdjsonClient {
    fn exchange(&mut self, msg: &ClientMessage) -> Result<ServerMessage, ClientError> {
        let line = serde_json::to_string(msg).map_err(|e| ClientError::Decode(e.to_string()))?;
        let reply = self.send_line(&line)?;
        let reply: ServerMessage = serde_json::from_str(&reply).map_err(|e| ClientError::Decode(e.to_string()))?;
        match reply {
            ServerMessage::Error(e) if e.code == ErrorCode::EpisodeOver && e.message == "run finished" => {
                Err(ClientError::RunFinished)
            }
            other => Ok(other),
        }
    }
}

/// Exchanges seen by [`drive_remote`], in order.
pub type Transcript = Vec<(ClientMessage, ServerMessage)>;

/// Plays episodes with a fresh agent each until the run ends or an agent
/// hangs up. Returns the number of episodes that reached FINISH.
pub fn drive_remote<T, A>(
    transport: &mut T,
    mut make_agent: impl FnMut() -> A,
    transcript: &mut Transcript,
) -> Result<usize, ClientError>
where
    T: Transport + ?Sized,
    A: Agent,
{
    let mut episodes = 0;
    loop {
        let mut agent = make_agent();
        let mut reply: Option<ServerMessage> = None;
        loop {
            let Some(msg) = agent.next_message(reply.as_ref()) else {
                return Ok(episodes);
            };
            let answer = match transport.exchange(&msg) {
                Ok(a) => a,
                Err(ClientError::RunFinished) => return Ok(episodes),
                Err(e) => return Err(e),
            };
            let finished = matches!(answer, ServerMessage::Finish { .. });
            transcript.push((msg, answer.clone()));
            reply = Some(answer);
            if finished {
                episodes += 1;
                break;
            }
        }
    }
}
