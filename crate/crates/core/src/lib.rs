//! Layered control runtime with bounded inter-layer coupling, typed
//! message contracts, per-layer authority and conflict arbitration.

pub mod arbiter;
pub mod authority;
pub mod hierarchy;
pub mod matrix;
pub mod messages;
pub mod runtime;
pub mod sim;
