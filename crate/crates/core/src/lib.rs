//! Deterministic discrete-event simulator and policy library for fair,
//! prefix-aware LLM request scheduling.
//!
//! A run dispatches requests from a synthetic workload to one or more
//! simulated workers. Each worker keeps a radix-tree prefix cache and a
//! continuous-batching loop driven by a local policy (DLPM, LPM, VTC,
//! FCFS); a global policy (D²LPM, round-robin, per-client round-robin,
//! prefix-threshold) picks the worker. Every decision lands in an
//! [`sim::EventLog`], from which [`metrics`] recomputes service, latency,
//! fairness and the service/latency bound checks.

pub mod cluster;
pub mod cost;
pub mod experiment;
mod error;
pub mod global;
pub mod local;
pub mod metrics;
pub mod radix;
pub mod request;
pub mod sim;
pub mod worker;
pub mod workload;

pub use error::SimError;
