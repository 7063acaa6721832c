use thiserror::Error;

use crate::sim::SimTime;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event scheduled at {at} but the clock is already at {now}")]
    ScheduleInPast { at: SimTime, now: SimTime },
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("{what}: line {line}: {msg}")]
    Parse {
        what: &'static str,
        line: usize,
        msg: String,
    },
    #[error("{0} is undefined for this input")]
    Undefined(&'static str),
    #[error("workloads differ between compared configs: {0}")]
    WorkloadMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("config: {0}")]
    TomlSer(#[from] toml::ser::Error),
}
