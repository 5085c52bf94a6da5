//! Urban traffic control environment with multi-task coordination.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent_runtime;
pub mod api;
pub mod controllers;
pub mod demand;
pub mod dynamics;
pub mod harness;
pub mod ids;
pub mod memory;
pub mod network;
pub mod observe;
pub mod reward;
pub mod tasks;

pub use ids::{JunctionId, LaneId, RouteId, StationId, TaxiId, ZoneId};
