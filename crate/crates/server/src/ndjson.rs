//! Line-delimited JSON listener: one protocol message per line, one reply
//! line per message.

use std::path::Path;

use citycoord_core::agent_runtime::{ErrorCode, ServerMessage};
use citycoord_core::harness::{cmd_run, HarnessError, RunMode, RunOptions, RunOutput};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

use crate::link::{agent_link, AgentLink};

fn finished_line() -> String {
    let msg = ServerMessage::error(ErrorCode::EpisodeOver, "run finished");
    serde_json::to_string(&msg).expect("serializable reply")
}

/// Accepts agent connections until the run behind `link` ends. Connections
/// are served one at a time; a second agent waits until the first leaves.
pub async fn serve_ndjson(listener: TcpListener, link: AgentLink) {
    loop {
        tokio::select! {
            _ = link.closed() => break,
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    tracing::info!(%peer, "agent connected");
                    if let Err(e) = serve_connection(stream, &link).await {
                        tracing::warn!(%peer, error = %e, "agent connection failed");
                    }
                    tracing::info!(%peer, "agent disconnected");
                }
                Err(e) => tracing::warn!(error = %e, "accept failed"),
            },
        }
    }
}

async fn serve_connection(stream: TcpStream, link: &AgentLink) -> std::io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    loop {
        let next = tokio::select! {
            _ = link.closed() => None,
            line = lines.next_line() => Some(line),
        };
        let reply = match next {
            None => Err(()),
            Some(Ok(Some(line))) if line.trim().is_empty() => continue,
            Some(Ok(Some(line))) => link.send_line(line).await.map_err(|_| ()),
            Some(Ok(None)) => {
                link.hang_up().await;
                return Ok(());
            }
            Some(Err(e)) => {
                link.hang_up().await;
                return Err(e);
            }
        };
        match reply {
            Ok(mut reply) => {
                reply.push('\n');
                write.write_all(reply.as_bytes()).await?;
            }
            Err(()) => {
                let mut line = finished_line();
                line.push('\n');
                write.write_all(line.as_bytes()).await?;
                write.shutdown().await?;
                return Ok(());
            }
        }
    }
}

/// Runs a scenario in external mode with agents connecting to `listener`.
/// Blocks until the run ends.
pub fn run_with_listener(
    path: impl AsRef<Path>,
    opts: RunOptions<'_>,
    listener: std::net::TcpListener,
) -> Result<RunOutput, HarnessError> {
    let addr = listener.local_addr().map(|a| a.to_string()).unwrap_or_default();
    let io = |e: std::io::Error| HarnessError::Io {
        path: addr.clone(),
        message: e.to_string(),
    };
    listener.set_nonblocking(true).map_err(io)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(io)?;
    let listener = {
        let _guard = rt.enter();
        TcpListener::from_std(listener).map_err(io)?
    };
    let (link, mut driver) = agent_link();
    let server = rt.spawn(serve_ndjson(listener, link));
    let out = cmd_run(
        path,
        RunMode::External,
        RunOptions {
            out_root: opts.out_root,
            seed: opts.seed,
            judge: opts.judge,
            driver: Some(&mut driver),
        },
    );
    drop(driver);
    let _ = rt.block_on(server);
    out
}
