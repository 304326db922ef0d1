//! Relay-style prefix-cache serving at desk scale: a seeded causal-attention
//! backbone with exact prefix KV reuse, sequence-aware admission control,
//! consistent-hash affinity routing, a two-tier (device/host) lifecycle
//! cache, and a deterministic discrete-event simulator that measures
//! tail-latency SLO compliance.

pub mod model;
pub mod request;
pub mod router;
pub mod trace;
pub mod cache;
pub mod cost;
pub mod metrics;
pub mod workload;
pub mod instance;
pub mod config;
pub mod sim;
pub mod verify;
pub mod trigger;
