use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;

use citycoord_client::*;
use citycoord_core::agent_runtime::scripted::ScriptedAgent;
use citycoord_core::agent_runtime::*;
use citycoord_core::harness::{initial_state, ScenarioFile};
use citycoord_core::memory::ProceduralMemory;
use citycoord_core::tasks::TaskId;

fn congested() -> ScenarioFile {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/toy_grid/congested.json");
    ScenarioFile::load(p).unwrap()
}

fn session(file: &ScenarioFile) -> Session {
    let cfg = EpisodeConfig {
        tasks: vec![TaskId::SignalTiming],
        horizon: 1800.0,
        seed: 7,
        ..EpisodeConfig::default()
    };
    Session::new(initial_state(file, 7).unwrap(), cfg, &ProceduralMemory::default()).unwrap()
}

/// One in-process session; refuses further episodes once it is done.
struct Local(Session);

impl Transport for Local {
    fn exchange(&mut self, msg: &ClientMessage) -> Result<ServerMessage, ClientError> {
        if self.0.is_done() {
            return Err(ClientError::RunFinished);
        }
        // Through the wire format, as a remote agent would see it.
        let line = serde_json::to_string(msg).unwrap();
        let reply = self.0.handle_line(&line);
        serde_json::from_str(&reply).map_err(|e| ClientError::Decode(e.to_string()))
    }
}

#[test]
fn driving_over_a_transport_matches_the_in_process_loop() {
    let file = congested();
    let net = Arc::new(file.network().unwrap());
    let mut direct = session(&file);
    run_episode(&mut direct, &mut ScriptedAgent::new(Arc::clone(&net), 1800.0));
    let (direct_state, direct_rec) = direct.into_parts();

    let mut local = Local(session(&file));
    let mut transcript = Transcript::new();
    let n = drive_remote(
        &mut local,
        || ScriptedAgent::new(Arc::clone(&net), 1800.0),
        &mut transcript,
    )
    .unwrap();
    assert_eq!(n, 1);
    let (state, rec) = local.0.into_parts();
    assert_eq!(state.state_hash(), direct_state.state_hash());
    assert_eq!(rec.turns, direct_rec.turns);
    assert_eq!(rec.commit, direct_rec.commit);
    assert!(matches!(transcript.last().unwrap().1, ServerMessage::Finish { .. }));
}

/// Serves canned reply lines, one per request line, then closes.
fn fake_listener(replies: Vec<&'static str>) -> (String, thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = stream;
        let mut seen = Vec::new();
        for reply in replies {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap() == 0 {
                break;
            }
            seen.push(line.trim_end().to_owned());
            writer.write_all(reply.as_bytes()).unwrap();
            writer.write_all(b"\n").unwrap();
        }
        seen
    });
    (addr, handle)
}

#[test]
fn ndjson_client_sends_one_line_per_message() {
    let (addr, server) = fake_listener(vec![
        r#"{"type":"observe","result":{"ok":true}}"#,
        r#"{"type":"error","code":"episode_over","message":"run finished","debug_eligible":false}"#,
    ]);
    let mut c = NdjsonClient::connect(&addr).unwrap();
    let msg = ClientMessage::Observe {
        op: "list_cache".into(),
        args: serde_json::Value::Null,
    };
    match c.exchange(&msg).unwrap() {
        ServerMessage::Observe { result, .. } => assert_eq!(result["ok"], true),
        other => panic!("{other:?}"),
    }
    assert!(matches!(c.exchange(&msg), Err(ClientError::RunFinished)));
    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 2);
    let first: ClientMessage = serde_json::from_str(&seen[0]).unwrap();
    assert_eq!(first, msg);
}

#[test]
fn end_of_stream_and_garbage_replies() {
    let (addr, server) = fake_listener(vec!["not json"]);
    let mut c = NdjsonClient::connect(&addr).unwrap();
    let hello = ClientMessage::Hello { agent: "t".into() };
    let e = c.exchange(&hello).unwrap_err();
    assert_eq!(e.code(), "decode");
    server.join().unwrap();
    assert!(matches!(
        c.exchange(&hello),
        Err(ClientError::RunFinished | ClientError::Io(_))
    ));
}

#[test]
fn other_episode_over_errors_are_replies() {
    let (addr, server) = fake_listener(vec![
        r#"{"type":"error","code":"episode_over","message":"episode is over","debug_eligible":false}"#,
    ]);
    let mut c = NdjsonClient::connect(&addr).unwrap();
    let reply = c.exchange(&ClientMessage::Finish {}).unwrap();
    assert!(reply.is_error());
    server.join().unwrap();
}

#[test]
fn unreachable_service_is_an_http_error() {
    // Bind and drop to get a port nobody listens on.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let c = ServiceClient::new(format!("http://127.0.0.1:{port}/")).unwrap();
    assert_eq!(c.base(), format!("http://127.0.0.1:{port}"));
    let e = c.health().unwrap_err();
    assert_eq!(e.code(), "http");
    assert!(e.to_string().contains("/health"));
}
