#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use citycoord_client::{Transcript, Transport};
use citycoord_core::agent_runtime::scripted::ScriptedAgent;
use citycoord_core::agent_runtime::{AgentTurn, ClientMessage, ServerMessage};
use citycoord_core::harness::{RunReport, ScenarioFile};
use citycoord_server::{router, AppState};

pub fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn congested() -> PathBuf {
    scenarios().join("toy_grid/congested.json")
}

/// Starts the HTTP service on an ephemeral port in a background thread.
pub fn spawn_service(out_root: &Path) -> String {
    let addr = spawn_router(router(AppState::new(out_root)));
    format!("http://{addr}")
}

pub fn spawn_router(app: axum::Router) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

pub fn scripted_factory(scenario: &Path) -> impl FnMut() -> ScriptedAgent {
    let file = ScenarioFile::load(scenario).unwrap();
    let net = Arc::new(file.network().unwrap());
    let horizon = file.scenario.decision_horizon;
    move || ScriptedAgent::new(Arc::clone(&net), horizon)
}

/// Everything that should not depend on how the agent was connected.
pub fn same_outcome(a: &RunReport, b: &RunReport) {
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.global, b.global);
    assert_eq!(a.f_ri, b.f_ri);
    assert_eq!(a.reward, b.reward);
    assert_eq!(a.episodes, b.episodes);
    assert_eq!(a.final_state_hash, b.final_state_hash);
}

/// Server transcript turns, in order, from a run directory.
pub fn server_turns(dir: &Path, episode: usize) -> Vec<AgentTurn> {
    let text = std::fs::read_to_string(dir.join(format!("transcripts/episode_{episode:03}.ndjson"))).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    lines[..lines.len() - 1]
        .iter()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Client exchanges that consume a turn, split into episodes.
pub fn client_turns(transcript: &Transcript) -> Vec<Vec<(ClientMessage, ServerMessage)>> {
    let mut episodes = vec![Vec::new()];
    for (msg, reply) in transcript {
        let counts = !matches!(msg, ClientMessage::Hello { .. } | ClientMessage::Observe { .. });
        if counts {
            episodes.last_mut().unwrap().push((msg.clone(), reply.clone()));
        }
        if matches!(reply, ServerMessage::Finish { .. }) {
            episodes.push(Vec::new());
        }
    }
    episodes.pop();
    episodes
}

/// Wraps a transport and counts exchanges.
pub struct Counting<T>(pub T, pub usize);

impl<T: Transport> Transport for Counting<T> {
    fn exchange(&mut self, msg: &ClientMessage) -> Result<ServerMessage, citycoord_client::ClientError> {
        self.1 += 1;
        self.0.exchange(msg)
    }
}
