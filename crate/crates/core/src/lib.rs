//! Switchable Raft / HotStuff consensus over a simulated wireless network.

pub mod auth;
pub mod batch;
pub mod cluster;
pub mod digest;
pub mod engine;
pub mod fault;
pub mod hotstuff;
pub mod ledger;
pub mod node;
pub mod raft;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod switch;
