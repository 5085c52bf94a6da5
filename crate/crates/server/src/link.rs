//! Bridge between async frontends and the blocking run loop.

use citycoord_core::agent_runtime::Session;
use citycoord_core::harness::{EpisodeDriver, HarnessError};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};

enum Exchange {
    Line {
        line: String,
        reply: oneshot::Sender<String>,
    },
    HangUp,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("run finished")]
pub struct LinkClosed;

/// Frontend handle. Cloning it gives another handle to the same run.
#[derive(Clone)]
pub struct AgentLink {
    tx: mpsc::Sender<Exchange>,
}

/// Agent side of an external run, fed through [`AgentLink`]s.
pub struct ChannelDriver {
    rx: mpsc::Receiver<Exchange>,
}

pub fn agent_link() -> (AgentLink, ChannelDriver) {
    let (tx, rx) = mpsc::channel(32);
    (AgentLink { tx }, ChannelDriver { rx })
}

impl AgentLink {
    /// Sends one protocol line and waits for the reply line.
    pub async fn send_line(&self, line: String) -> Result<String, LinkClosed> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Exchange::Line { line, reply })
            .await
            .map_err(|_| LinkClosed)?;
        rx.await.map_err(|_| LinkClosed)
    }

    /// Tells the run the agent went away. An episode already in progress is
    /// closed out; otherwise the next episode keeps waiting for an agent.
    pub async fn hang_up(&self) {
        let _ = self.tx.send(Exchange::HangUp).await;
    }

    pub fn is_closed(&self) -> bool {
        self.tx.is_closed()
    }

    /// Resolves once the run has stopped accepting messages.
    pub async fn closed(&self) {
        self.tx.closed().await
    }
}

impl EpisodeDriver for ChannelDriver {
    fn drive(&mut self, session: &mut Session) -> Result<(), HarnessError> {
        let mut touched = false;
        while !session.is_done() {
            match self.rx.blocking_recv() {
                Some(Exchange::Line { line, reply }) => {
                    touched = true;
                    let out = session.handle_line(&line);
                    // A frontend that gave up waiting is not an error for the run.
                    let _ = reply.send(out);
                }
                Some(Exchange::HangUp) if touched => {
                    tracing::info!("agent hung up mid-episode");
                    session.abandon();
                }
                Some(Exchange::HangUp) => {}
                None => session.abandon(),
            }
        }
        Ok(())
    }
}
