use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{SimTime, Stamp};
use crate::request::{ClientId, RequestId, WorkerId};
use crate::SimError;

/// Run parameters recorded as the first log line so a log can be verified
/// without its config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub workers: u32,
    pub l_input: u32,
    pub l_output: u32,
    pub max_batch_tokens: u32,
    pub w_extend: u32,
    pub w_output: u32,
    /// Per-request service ceiling, `w_e * L_input + w_q * M`.
    pub u: i64,
    pub local_policy: String,
    /// Quantum of the local policy; for policies without one, the reference
    /// quantum the bound checks are evaluated against.
    pub quantum_u: i64,
    pub global_policy: String,
    pub quantum_w: Option<i64>,
    pub horizon: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutput {
    pub client: ClientId,
    pub tokens: u32,
    /// Local deficit counter after the per-step deduction (DLPM only).
    pub counter: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    RunInfo(RunInfo),
    Arrival {
        request: RequestId,
        client: ClientId,
        input_len: u32,
        parent: Option<RequestId>,
    },
    Dispatch {
        request: RequestId,
        client: ClientId,
        worker: WorkerId,
        match_len: u32,
        candidates: Vec<WorkerId>,
        counter: Option<i64>,
    },
    GlobalRefill {
        client: ClientId,
        quantum: i64,
        counters: Vec<(WorkerId, i64)>,
    },
    Admit {
        request: RequestId,
        client: ClientId,
        worker: WorkerId,
        input_len: u32,
        matched: u32,
        extend: u32,
        counter: Option<i64>,
    },
    Refill {
        worker: WorkerId,
        quantum: i64,
        counters: Vec<(ClientId, i64)>,
    },
    Step {
        worker: WorkerId,
        started: SimTime,
        batch_size: u32,
        extend_computed: u32,
        queued: u32,
        pool_used: u32,
        outputs: Vec<StepOutput>,
    },
    Finish {
        request: RequestId,
        client: ClientId,
        worker: WorkerId,
        output_len: u32,
        first_token: SimTime,
    },
    FinishNotice {
        request: RequestId,
        client: ClientId,
        worker: WorkerId,
        counter: Option<i64>,
    },
    Evict {
        worker: WorkerId,
        path_len: u32,
        tokens: u32,
    },
    EvictNotice {
        worker: WorkerId,
        path_len: u32,
        retained: u32,
        nodes_cleared: u32,
    },
    /// A worker sat idle across a virtual-time advance with requests queued.
    IdleWithQueue {
        worker: WorkerId,
        queued: u32,
        admissible: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ord: u64,
    pub time: SimTime,
    pub event: Record,
}

impl LogRecord {
    pub fn stamp(&self) -> Stamp {
        Stamp::new(self.time, self.ord)
    }
}

/// Per-request lifecycle, reconstructed from the log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lifecycle {
    pub client: ClientId,
    pub arrival: Option<SimTime>,
    pub dispatch: Option<SimTime>,
    pub admit: Option<SimTime>,
    pub first_token: Option<SimTime>,
    pub finish: Option<SimTime>,
    pub worker: Option<WorkerId>,
    pub input_len: u32,
    pub matched: u32,
    pub extend: u32,
    pub output_len: u32,
}

/// Append-only record of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    records: Vec<LogRecord>,
}

impl EventLog {
    pub fn new() -> Self {
        EventLog::default()
    }

    pub fn push(&mut self, time: SimTime, event: Record) -> Stamp {
        // ordinals start at 1 so `Stamp::start_of` sorts before every record
        let ord = self.records.len() as u64 + 1;
        if let Some(last) = self.records.last() {
            debug_assert!(last.time <= time, "log must be causal");
        }
        self.records.push(LogRecord { ord, time, event });
        Stamp::new(time, ord)
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn run_info(&self) -> Option<&RunInfo> {
        self.records.iter().find_map(|r| match &r.event {
            Record::RunInfo(info) => Some(info),
            _ => None,
        })
    }

    /// Clients in first-arrival order.
    pub fn clients(&self) -> Vec<ClientId> {
        let mut seen = Vec::new();
        for r in &self.records {
            if let Record::Arrival { client, .. } = r.event {
                if !seen.contains(&client) {
                    seen.push(client);
                }
            }
        }
        seen
    }

    pub fn end_time(&self) -> SimTime {
        self.run_info()
            .map(|i| i.horizon)
            .into_iter()
            .chain(self.records.last().map(|r| r.time))
            .max()
            .unwrap_or(SimTime::ZERO)
    }

    pub fn lifecycles(&self) -> BTreeMap<RequestId, Lifecycle> {
        let mut out: BTreeMap<RequestId, Lifecycle> = BTreeMap::new();
        for r in &self.records {
            match &r.event {
                Record::Arrival {
                    request,
                    client,
                    input_len,
                    ..
                } => {
                    let l = out.entry(*request).or_default();
                    l.client = *client;
                    l.arrival = Some(r.time);
                    l.input_len = *input_len;
                }
                Record::Dispatch { request, worker, .. } => {
                    let l = out.entry(*request).or_default();
                    l.dispatch = Some(r.time);
                    l.worker = Some(*worker);
                }
                Record::Admit {
                    request,
                    matched,
                    extend,
                    ..
                } => {
                    let l = out.entry(*request).or_default();
                    l.admit = Some(r.time);
                    l.matched = *matched;
                    l.extend = *extend;
                }
                Record::Finish {
                    request,
                    output_len,
                    first_token,
                    ..
                } => {
                    let l = out.entry(*request).or_default();
                    l.finish = Some(r.time);
                    l.first_token = Some(*first_token);
                    l.output_len = *output_len;
                }
                _ => {}
            }
        }
        out
    }

    /// One JSON object per line, fields in declaration order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, SimError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogRecord = serde_json::from_str(&line).map_err(|e| SimError::Parse {
                what: "event log",
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(EventLog { records })
    }
}
