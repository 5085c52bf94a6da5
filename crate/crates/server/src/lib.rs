//! Service side of citycoord: an HTTP API over the run harness, a
//! line-delimited JSON listener for external agents, and an HTTP judge.

pub mod http;
pub mod judge;
pub mod link;
pub mod ndjson;

pub use http::{router, AppState};
pub use judge::HttpJudge;
pub use link::{agent_link, AgentLink, ChannelDriver, LinkClosed};
pub use ndjson::{run_with_listener, serve_ndjson};
