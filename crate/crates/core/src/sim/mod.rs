//! Discrete-event plumbing: virtual clock, ordered event queue, seeded
//! randomness and the append-only event log.

mod log;
mod queue;
mod rng;
mod time;

pub use log::{EventLog, Lifecycle, LogRecord, Record, RunInfo, StepOutput};
pub use queue::{Event, EventHandle, EventKind, EventQueue};
pub use rng::RngStreams;
pub use time::{SimTime, Stamp};
