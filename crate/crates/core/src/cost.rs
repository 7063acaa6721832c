//! Service measure and per-client service ledger.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::request::{ClientId, SystemParams, WorkerId};
use crate::sim::{EventLog, Record, SimTime, Stamp};
use crate::SimError;

/// Integer weights per extend token and per output token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub extend: u32,
    pub output: u32,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { extend: 1, output: 2 }
    }
}

impl CostWeights {
    pub fn extend_cost(&self, tokens: u32) -> i64 {
        i64::from(self.extend) * i64::from(tokens)
    }

    pub fn output_cost(&self, tokens: u32) -> i64 {
        i64::from(self.output) * i64::from(tokens)
    }
}

/// Largest service a single request can consume: `w_e * L_input + w_q * M`.
pub fn compute_u(params: &SystemParams) -> i64 {
    params.weights.extend_cost(params.l_input) + params.weights.output_cost(params.max_batch_tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Extend,
    Output,
    /// Cached prefix tokens: counted only from the client's perspective.
    CachedPrefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub stamp: Stamp,
    pub client: ClientId,
    pub worker: WorkerId,
    pub kind: ServiceKind,
    pub units: i64,
}

#[derive(Debug, Clone, Default)]
struct Series {
    stamps: Vec<Stamp>,
    /// Inclusive running sums of actual and client-perspective service.
    actual: Vec<i64>,
    perspective: Vec<i64>,
}

impl Series {
    fn push(&mut self, stamp: Stamp, actual: i64, perspective: i64) {
        debug_assert!(self.stamps.last().is_none_or(|s| *s <= stamp));
        let (a, p) = (
            self.actual.last().copied().unwrap_or(0),
            self.perspective.last().copied().unwrap_or(0),
        );
        self.stamps.push(stamp);
        self.actual.push(a + actual);
        self.perspective.push(p + perspective);
    }

    /// Sums over entries strictly before `at`.
    fn before(&self, at: Stamp) -> (i64, i64) {
        let n = self.stamps.partition_point(|s| *s < at);
        if n == 0 {
            (0, 0)
        } else {
            (self.actual[n - 1], self.perspective[n - 1])
        }
    }
}

/// Time-stamped service increments per client, with prefix sums so that
/// interval queries are logarithmic.
///
/// Extend service is booked at admission, output service at the end of each
/// decode step, matching the granularity at which deficit counters move.
#[derive(Debug, Clone, Default)]
pub struct ServiceLog {
    entries: Vec<ServiceEntry>,
    series: BTreeMap<ClientId, Series>,
}

impl ServiceLog {
    pub fn new() -> Self {
        ServiceLog::default()
    }

    /// Records an increment. Stamps must be non-decreasing.
    pub fn record(&mut self, stamp: Stamp, client: ClientId, worker: WorkerId, kind: ServiceKind, units: i64) {
        debug_assert!(units >= 0);
        let actual = if kind == ServiceKind::CachedPrefix { 0 } else { units };
        self.series.entry(client).or_default().push(stamp, actual, units);
        self.entries.push(ServiceEntry {
            stamp,
            client,
            worker,
            kind,
            units,
        });
    }

    /// Rebuilds the ledger from admission and step records.
    pub fn from_log(log: &EventLog, weights: CostWeights) -> Self {
        let mut out = ServiceLog::new();
        for r in log.records() {
            let stamp = r.stamp();
            match &r.event {
                Record::Admit {
                    client,
                    worker,
                    matched,
                    extend,
                    ..
                } => {
                    out.record(stamp, *client, *worker, ServiceKind::Extend, weights.extend_cost(*extend));
                    out.record(stamp, *client, *worker, ServiceKind::CachedPrefix, weights.extend_cost(*matched));
                }
                Record::Step { worker, outputs, .. } => {
                    for o in outputs {
                        out.record(stamp, o.client, *worker, ServiceKind::Output, weights.output_cost(o.tokens));
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn entries(&self) -> &[ServiceEntry] {
        &self.entries
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.series.keys().copied()
    }

    /// Actual service of `client` from entries stamped in `[from, to)`.
    pub fn service_between(&self, client: ClientId, from: Stamp, to: Stamp) -> i64 {
        match self.series.get(&client) {
            Some(s) if from < to => s.before(to).0 - s.before(from).0,
            _ => 0,
        }
    }

    /// Actual service received before `at`.
    pub fn cumulative(&self, client: ClientId, at: Stamp) -> i64 {
        self.series.get(&client).map_or(0, |s| s.before(at).0)
    }

    /// Actual service in the virtual-time interval `[t1, t2)`.
    pub fn service_in_interval(&self, client: ClientId, t1: SimTime, t2: SimTime) -> i64 {
        self.service_between(client, Stamp::start_of(t1), Stamp::start_of(t2))
    }

    /// Like [`ServiceLog::service_in_interval`] but counting the full input,
    /// cached prefix included, at the extend weight.
    pub fn client_perspective_service(&self, client: ClientId, t1: SimTime, t2: SimTime) -> i64 {
        let (from, to) = (Stamp::start_of(t1), Stamp::start_of(t2));
        match self.series.get(&client) {
            Some(s) if from < to => s.before(to).1 - s.before(from).1,
            _ => 0,
        }
    }

    /// Total actual service over all clients.
    pub fn total_actual(&self) -> i64 {
        self.series.values().filter_map(|s| s.actual.last()).sum()
    }

    /// CSV rows `time_us,client,worker,kind,units` for extend and output
    /// increments.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["time_us", "client", "worker", "kind", "units"])?;
        for e in &self.entries {
            let kind = match e.kind {
                ServiceKind::Extend => "extend",
                ServiceKind::Output => "output",
                ServiceKind::CachedPrefix => continue,
            };
            wr.write_record([
                e.stamp.time.as_micros().to_string(),
                e.client.0.to_string(),
                e.worker.0.to_string(),
                kind.to_string(),
                e.units.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}
