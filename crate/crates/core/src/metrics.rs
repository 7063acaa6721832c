//! Measurements over a finished run, and the fairness, latency and
//! work-conservation checks.
//!
//! Everything here is a pure function of an [`EventLog`]; the log's
//! [`RunInfo`] header carries the constants the bounds need.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cost::{CostWeights, ServiceKind, ServiceLog};
use crate::request::{ClientId, WorkerId};
use crate::sim::{EventLog, Record, RunInfo, SimTime, Stamp};
use crate::SimError;

/// `(Σx)² / (n·Σx²)`.
pub fn jain_index(values: &[f64]) -> Result<f64, SimError> {
    let sum: f64 = values.iter().sum();
    let sq: f64 = values.iter().map(|x| x * x).sum();
    if values.is_empty() || sq <= 0.0 {
        return Err(SimError::Undefined("jain index"));
    }
    Ok(sum * sum / (values.len() as f64 * sq))
}

/// Nearest-rank percentile, `p` in `(0, 100]`.
pub fn percentile<T: Copy + Ord>(values: &[T], p: f64) -> Option<T> {
    if values.is_empty() || !(p > 0.0 && p <= 100.0) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}

/// Matched prefix tokens over input tokens, across all admissions.
pub fn cache_hit_rate(log: &EventLog) -> f64 {
    let (mut matched, mut input) = (0u64, 0u64);
    for r in log.records() {
        if let Record::Admit { matched: m, input_len, .. } = r.event {
            matched += u64::from(m);
            input += u64::from(input_len);
        }
    }
    if input == 0 {
        0.0
    } else {
        matched as f64 / input as f64
    }
}

/// Half-open `[start, end)` in log order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: Stamp,
    pub end: Stamp,
}

impl Interval {
    fn intersect(&self, other: &Interval) -> Option<Interval> {
        let start = self.start.max(other.start);
        let end = self.end.min(other.end);
        (start < end).then_some(Interval { start, end })
    }
}

/// Per client, the maximal stretches of virtual time during which it has at
/// least one dispatched-but-unadmitted request.
///
/// Stretches of zero duration (a request admitted at the instant it
/// arrived) are not backlog.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BacklogTimeline {
    intervals: BTreeMap<ClientId, Vec<Interval>>,
}

impl BacklogTimeline {
    pub fn from_log(log: &EventLog) -> Self {
        let end = Stamp::new(log.end_time(), u64::MAX);
        let mut pending: BTreeMap<ClientId, (u32, Stamp)> = BTreeMap::new();
        let mut intervals: BTreeMap<ClientId, Vec<Interval>> = BTreeMap::new();
        for c in log.clients() {
            intervals.entry(c).or_default();
        }
        for r in log.records() {
            match r.event {
                Record::Arrival { client, .. } => {
                    let e = pending.entry(client).or_insert((0, r.stamp()));
                    if e.0 == 0 {
                        e.1 = r.stamp();
                    }
                    e.0 += 1;
                }
                Record::Admit { client, .. } => {
                    let e = pending.get_mut(&client).expect("admit after arrival");
                    e.0 -= 1;
                    if e.0 == 0 && e.1.time < r.time {
                        intervals.entry(client).or_default().push(Interval {
                            start: e.1,
                            end: r.stamp(),
                        });
                    }
                }
                _ => {}
            }
        }
        for (client, (n, start)) in pending {
            if n > 0 && start.time < end.time {
                intervals.entry(client).or_default().push(Interval { start, end });
            }
        }
        BacklogTimeline { intervals }
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.intervals.keys().copied()
    }

    pub fn intervals(&self, client: ClientId) -> &[Interval] {
        self.intervals.get(&client).map_or(&[], Vec::as_slice)
    }

    /// Whether `client` is backlogged throughout `[from, to)`.
    pub fn covers(&self, client: ClientId, from: Stamp, to: Stamp) -> bool {
        from >= to || self.intervals(client).iter().any(|i| i.start <= from && to <= i.end)
    }

    /// Intervals where both clients are backlogged.
    pub fn common(&self, f: ClientId, g: ClientId) -> Vec<Interval> {
        let (a, b) = (self.intervals(f), self.intervals(g));
        let (mut i, mut j, mut out) = (0, 0, Vec::new());
        while i < a.len() && j < b.len() {
            if let Some(x) = a[i].intersect(&b[j]) {
                out.push(x);
            }
            if a[i].end < b[j].end {
                i += 1;
            } else {
                j += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    /// Whether the policy under test promises this bound.
    pub guaranteed: bool,
    pub applicable: bool,
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
    pub pass: bool,
    pub witness: String,
}

impl BoundReport {
    fn new(name: &str, guaranteed: bool, measured: f64, bound: f64, witness: String) -> Self {
        BoundReport {
            name: name.into(),
            guaranteed,
            applicable: true,
            measured,
            bound,
            margin: bound - measured,
            pass: measured <= bound,
            witness,
        }
    }

    fn inapplicable(name: &str, guaranteed: bool, bound: f64, why: &str) -> Self {
        BoundReport {
            name: name.into(),
            guaranteed,
            applicable: false,
            measured: 0.0,
            bound,
            margin: bound,
            pass: true,
            witness: why.into(),
        }
    }

    /// A failure that the policy promised would not happen.
    pub fn is_violation(&self) -> bool {
        self.guaranteed && self.applicable && !self.pass
    }
}

pub fn write_reports_csv<W: Write>(reports: &[BoundReport], w: W) -> Result<(), SimError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in reports {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Per-client actual service, coalesced per stamp.
struct ServiceSeries(BTreeMap<ClientId, Vec<(Stamp, i64)>>);

impl ServiceSeries {
    fn new(service: &ServiceLog) -> Self {
        let mut m: BTreeMap<ClientId, Vec<(Stamp, i64)>> = BTreeMap::new();
        for e in service.entries() {
            if e.kind == ServiceKind::CachedPrefix || e.units == 0 {
                continue;
            }
            let v = m.entry(e.client).or_default();
            match v.last_mut() {
                Some((s, u)) if *s == e.stamp => *u += e.units,
                _ => v.push((e.stamp, e.units)),
            }
        }
        ServiceSeries(m)
    }

    fn within(&self, c: ClientId, iv: &Interval) -> &[(Stamp, i64)] {
        let Some(v) = self.0.get(&c) else { return &[] };
        let a = v.partition_point(|(s, _)| *s < iv.start);
        let b = v.partition_point(|(s, _)| *s < iv.end);
        &v[a..b]
    }

    /// `(stamp, sign * units)` of both clients merged in log order, with
    /// equal stamps combined.
    fn merged(&self, f: ClientId, g: ClientId, iv: &Interval) -> Vec<(Stamp, i64)> {
        let mut out: Vec<(Stamp, i64)> = self
            .within(f, iv)
            .iter()
            .copied()
            .chain(self.within(g, iv).iter().map(|(s, u)| (*s, -u)))
            .collect();
        out.sort_by_key(|(s, _)| *s);
        out.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        out
    }
}

fn fmt_stamp(s: Stamp) -> String {
    if s.ord == u64::MAX {
        format!("{}us(end)", s.time.as_micros())
    } else {
        format!("{}us#{}", s.time.as_micros(), s.ord)
    }
}

/// Largest `|W_f(t1,t2) − W_g(t1,t2)|` over all `t1 < t2` inside `iv`,
/// with the window attaining it.
fn max_pair_gap(series: &ServiceSeries, f: ClientId, g: ClientId, iv: &Interval) -> (i64, Stamp, Stamp) {
    let (mut x, mut hi, mut lo) = (0i64, (0i64, iv.start), (0i64, iv.start));
    for (s, d) in series.merged(f, g, iv) {
        x += d;
        // the value after this stamp holds from the next stamp on
        let at = Stamp::new(s.time, s.ord + 1);
        if x > hi.0 {
            hi = (x, at);
        }
        if x < lo.0 {
            lo = (x, at);
        }
    }
    let (a, b) = if hi.1 <= lo.1 { (hi.1, lo.1) } else { (lo.1, hi.1) };
    (hi.0 - lo.0, a, b)
}

/// Largest `W_g(t1,t2) − W_f(t1,t2)` over all `t1 < t2` inside `iv`.
fn max_excess(series: &ServiceSeries, f: ClientId, g: ClientId, iv: &Interval) -> (i64, Stamp, Stamp) {
    let (mut y, mut min, mut best) = (0i64, (0i64, iv.start), (0i64, iv.start, iv.start));
    for (s, d) in series.merged(g, f, iv) {
        y += d;
        let at = Stamp::new(s.time, s.ord + 1);
        if y - min.0 > best.0 {
            best = (y - min.0, min.1, at);
        }
        if y < min.0 {
            min = (y, at);
        }
    }
    best
}

/// `|W_f − W_g|` over one window, provided both clients are backlogged
/// throughout it.
pub fn verify_service_bound_local(
    log: &EventLog,
    f: ClientId,
    g: ClientId,
    t1: SimTime,
    t2: SimTime,
) -> Result<BoundReport, SimError> {
    let info = run_info(log)?;
    let bound = 2.0 * (info.u + info.quantum_u) as f64;
    let guaranteed = info.local_policy == "dlpm";
    let name = "service_pair_local";
    let (from, to) = (Stamp::start_of(t1), Stamp::start_of(t2));
    let timeline = BacklogTimeline::from_log(log);
    if info.workers != 1 {
        return Ok(BoundReport::inapplicable(name, guaranteed, bound, "multi-worker run"));
    }
    if !(timeline.covers(f, from, to) && timeline.covers(g, from, to)) {
        return Ok(BoundReport::inapplicable(name, guaranteed, bound, "clients not backlogged throughout"));
    }
    let service = ServiceLog::from_log(log, weights(info));
    let gap = (service.service_between(f, from, to) - service.service_between(g, from, to)).abs();
    Ok(BoundReport::new(
        name,
        guaranteed,
        gap as f64,
        bound,
        format!("clients {},{} over [{}us,{}us)", f.0, g.0, t1.as_micros(), t2.as_micros()),
    ))
}

/// Both service checks over every window inside every backlogged
/// interval: the largest gap between two backlogged clients, and the
/// largest excess of any client over a backlogged one.
pub fn verify_service_bounds(log: &EventLog, slack_factor: i64, name_suffix: &str, guaranteed: bool) -> Result<[BoundReport; 2], SimError> {
    let info = run_info(log)?;
    let bound = (2 * slack_factor * (info.u + info.quantum_u)) as f64;
    let service = ServiceLog::from_log(log, weights(info));
    let series = ServiceSeries::new(&service);
    let timeline = BacklogTimeline::from_log(log);
    let clients: Vec<ClientId> = timeline.clients().collect();

    let mut pair: Option<(i64, String)> = None;
    let mut any: Option<(i64, String)> = None;
    for (i, &f) in clients.iter().enumerate() {
        for &g in &clients[i + 1..] {
            for iv in timeline.common(f, g) {
                let (gap, a, b) = max_pair_gap(&series, f, g, &iv);
                if pair.as_ref().is_none_or(|(m, _)| gap > *m) {
                    pair = Some((gap, format!("clients {},{} over [{},{})", f.0, g.0, fmt_stamp(a), fmt_stamp(b))));
                }
            }
        }
        for iv in timeline.intervals(f) {
            for &g in clients.iter().filter(|g| **g != f) {
                let (ex, a, b) = max_excess(&series, f, g, iv);
                if any.as_ref().is_none_or(|(m, _)| ex > *m) {
                    any = Some((ex, format!("client {} over backlogged {} in [{},{})", g.0, f.0, fmt_stamp(a), fmt_stamp(b))));
                }
            }
        }
    }
    let pair_name = format!("service_pair_{name_suffix}");
    let any_name = format!("service_vs_any_{name_suffix}");
    Ok([
        match pair {
            Some((m, w)) => BoundReport::new(&pair_name, guaranteed, m as f64, bound, w),
            None => BoundReport::inapplicable(&pair_name, guaranteed, bound, "no two clients backlogged together"),
        },
        match any {
            Some((m, w)) => BoundReport::new(&any_name, guaranteed, m as f64, bound, w),
            None => BoundReport::inapplicable(&any_name, guaranteed, bound, "no backlogged client"),
        },
    ])
}

/// Every logged DLPM counter value `q` must satisfy `−U < q ≤ Q_u`.
pub fn verify_local_counters(log: &EventLog) -> Result<[BoundReport; 2], SimError> {
    let info = run_info(log)?;
    let applicable = info.local_policy == "dlpm";
    // extreme counter value and where it was logged
    type Extreme = Option<(i64, String)>;
    let (mut hi, mut lo): (Extreme, Extreme) = (None, None);
    let mut see = |q: i64, what: String| {
        if hi.as_ref().is_none_or(|(m, _)| q > *m) {
            hi = Some((q, what.clone()));
        }
        if lo.as_ref().is_none_or(|(m, _)| q < *m) {
            lo = Some((q, what));
        }
    };
    if applicable {
        for r in log.records() {
            let at = fmt_stamp(r.stamp());
            match &r.event {
                Record::Admit { client, worker, counter: Some(q), .. } => {
                    see(*q, format!("client {} worker {} at {at}", client.0, worker.0))
                }
                Record::Refill { worker, counters, .. } => {
                    for (c, q) in counters {
                        see(*q, format!("client {} worker {} at {at}", c.0, worker.0));
                    }
                }
                Record::Step { worker, outputs, .. } => {
                    for o in outputs {
                        if let Some(q) = o.counter {
                            see(q, format!("client {} worker {} at {at}", o.client.0, worker.0));
                        }
                    }
                }
                _ => {}
            }
        }
    }
    let upper = info.quantum_u as f64;
    // q > −U on integers is −q ≤ U − 1
    let lower = (info.u - 1) as f64;
    Ok([
        match hi {
            Some((q, w)) => BoundReport::new("counter_upper", true, q as f64, upper, w),
            None => BoundReport::inapplicable("counter_upper", true, upper, "no deficit counters logged"),
        },
        match lo {
            Some((q, w)) => BoundReport::new("counter_lower", true, -q as f64, lower, w),
            None => BoundReport::inapplicable("counter_lower", true, lower, "no deficit counters logged"),
        },
    ])
}

/// Maximal busy stretches per worker, from step records.
pub fn busy_periods(log: &EventLog) -> BTreeMap<WorkerId, Vec<(SimTime, SimTime)>> {
    let mut out: BTreeMap<WorkerId, Vec<(SimTime, SimTime)>> = BTreeMap::new();
    for r in log.records() {
        if let Record::Step { worker, started, .. } = r.event {
            let v = out.entry(worker).or_default();
            match v.last_mut() {
                Some((_, end)) if *end >= started => *end = r.time,
                _ => v.push((started, r.time)),
            }
        }
    }
    out
}

/// Smallest service (units per second) any single worker delivered over a
/// window of `width` that lies inside one of its busy stretches; `None` if
/// no stretch is that long.
pub fn min_worker_rate(log: &EventLog, service: &ServiceLog, width: SimTime) -> Option<f64> {
    let mut per_worker: BTreeMap<WorkerId, (Vec<Stamp>, Vec<i64>)> = BTreeMap::new();
    for e in service.entries() {
        if e.kind == ServiceKind::CachedPrefix {
            continue;
        }
        let (s, c) = per_worker.entry(e.worker).or_default();
        let prev = c.last().copied().unwrap_or(0);
        s.push(e.stamp);
        c.push(prev + e.units);
    }
    let cum = |w: WorkerId, at: Stamp| -> i64 {
        per_worker.get(&w).map_or(0, |(s, c)| {
            let n = s.partition_point(|x| *x < at);
            if n == 0 {
                0
            } else {
                c[n - 1]
            }
        })
    };
    let mut steps: BTreeMap<WorkerId, Vec<(SimTime, SimTime)>> = BTreeMap::new();
    for r in log.records() {
        if let Record::Step { worker, started, .. } = r.event {
            steps.entry(worker).or_default().push((started, r.time));
        }
    }
    let mut best: Option<i64> = None;
    for (w, periods) in busy_periods(log) {
        let st = &steps[&w];
        for (bs, be) in periods {
            if be - bs < width {
                continue;
            }
            let starts = st
                .iter()
                .filter(|(s, e)| *s >= bs && *e <= be)
                .flat_map(|(s, e)| [*s, e.saturating_sub(width)])
                .filter(|t| *t >= bs && *t + width <= be);
            for t in starts {
                let got = cum(w, Stamp::new(t + width, u64::MAX)) - cum(w, Stamp::start_of(t));
                best = Some(best.map_or(got, |b| b.min(got)));
            }
        }
    }
    best.map(|b| b as f64 / width.as_secs_f64())
}

/// Admission delay of every request whose client had nothing pending and
/// nothing running when it arrived. Requests never admitted count up to the
/// end of the log.
pub fn fresh_client_delays(log: &EventLog) -> Vec<(crate::request::RequestId, ClientId, SimTime)> {
    let mut load: BTreeMap<ClientId, (u32, u32)> = BTreeMap::new();
    let mut fresh = BTreeMap::new();
    let mut out = Vec::new();
    for r in log.records() {
        match r.event {
            Record::Arrival { request, client, .. } => {
                let l = load.entry(client).or_default();
                if *l == (0, 0) {
                    fresh.insert(request, (client, r.time));
                }
                l.0 += 1;
            }
            Record::Admit { request, client, .. } => {
                let l = load.get_mut(&client).expect("admit after arrival");
                l.0 -= 1;
                l.1 += 1;
                if let Some((c, at)) = fresh.remove(&request) {
                    out.push((request, c, r.time - at));
                }
            }
            Record::Finish { client, .. } => load.get_mut(&client).expect("finish after admit").1 -= 1,
            _ => {}
        }
    }
    let end = log.end_time();
    out.extend(fresh.into_iter().map(|(r, (c, at))| (r, c, end - at)));
    out
}

/// Admission delay of fresh-client requests against
/// `2 (n−1) (U + Q_u) / a`, with `a` the per-worker minimum service rate
/// (the cluster-wide bound `(n−1)·D·(2U + 2Q_u) / (D·a)` reduces to it).
pub fn verify_latency_bound(log: &EventLog, window: SimTime, guaranteed: bool) -> Result<BoundReport, SimError> {
    let info = run_info(log)?;
    let n = log.clients().len() as f64;
    let service = ServiceLog::from_log(log, weights(info));
    let name = "latency";
    let delays = fresh_client_delays(log);
    let Some(a) = min_worker_rate(log, &service, window).filter(|a| *a > 0.0) else {
        // never busy for a full window: `a` is unmeasurable
        return Ok(BoundReport::inapplicable(name, guaranteed, f64::INFINITY, "no busy window of the configured width"));
    };
    let bound = 2.0 * (n - 1.0) * (info.u + info.quantum_u) as f64 / a;
    match delays.iter().max_by_key(|(r, _, d)| (*d, std::cmp::Reverse(*r))) {
        None => Ok(BoundReport::inapplicable(name, guaranteed, bound, "no fresh-client requests")),
        Some((r, c, d)) => Ok(BoundReport::new(
            name,
            guaranteed,
            d.as_secs_f64(),
            bound,
            format!("request {} of client {} (a = {a:.1} units/s, n = {n})", r.0, c.0),
        )),
    }
}

/// Idle-with-admissible-queue snapshots; must be zero for every policy.
pub fn verify_work_conservation(log: &EventLog) -> BoundReport {
    let mut count = 0u64;
    let mut first = None;
    for r in log.records() {
        if let Record::IdleWithQueue { worker, admissible, .. } = r.event {
            if admissible > 0 {
                count += 1;
                first.get_or_insert(format!("worker {} at {}", worker.0, fmt_stamp(r.stamp())));
            }
        }
    }
    BoundReport::new(
        "work_conservation",
        true,
        count as f64,
        0.0,
        first.unwrap_or_else(|| "no idle worker with admissible work".into()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Width of the busy windows `a` is measured over.
    pub rate_window_us: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { rate_window_us: 1_000_000 }
    }
}

/// All checks that apply to the run's policies.
pub fn verify_all(log: &EventLog, cfg: &VerifyConfig) -> Result<Vec<BoundReport>, SimError> {
    let info = run_info(log)?;
    let dlpm = info.local_policy == "dlpm";
    let mut out = Vec::new();
    let latency_guaranteed = if info.workers == 1 {
        out.extend(verify_service_bounds(log, 1, "local", dlpm)?);
        dlpm
    } else {
        let g = dlpm && info.global_policy == "d2lpm";
        out.extend(verify_service_bounds(log, i64::from(info.workers), "global", g)?);
        g
    };
    out.extend(verify_local_counters(log)?);
    out.push(verify_latency_bound(log, SimTime(cfg.rate_window_us), latency_guaranteed)?);
    out.push(verify_work_conservation(log));
    Ok(out)
}

fn run_info(log: &EventLog) -> Result<&RunInfo, SimError> {
    log.run_info().ok_or_else(|| SimError::Parse {
        what: "event log",
        line: 1,
        msg: "missing run_info header".into(),
    })
}

fn weights(info: &RunInfo) -> CostWeights {
    CostWeights {
        extend: info.w_extend,
        output: info.w_output,
    }
}

/// Tokens (input, cached or not, plus generated) per second of horizon.
pub fn throughput(log: &EventLog) -> f64 {
    let mut tokens = 0u64;
    for r in log.records() {
        match &r.event {
            Record::Admit { input_len, .. } => tokens += u64::from(*input_len),
            Record::Step { outputs, .. } => tokens += outputs.iter().map(|o| u64::from(o.tokens)).sum::<u64>(),
            _ => {}
        }
    }
    let secs = log.end_time().as_secs_f64();
    if secs > 0.0 {
        tokens as f64 / secs
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientStats {
    pub client: u32,
    pub arrived: u64,
    pub finished: u64,
    pub service: i64,
    pub perspective_service: i64,
    pub latency_p50_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerStats {
    pub worker: u32,
    pub steps: u64,
    pub busy_s: f64,
    pub utilization: f64,
    pub admitted: u64,
    pub input_tokens: u64,
    pub matched_tokens: u64,
    pub output_tokens: u64,
    pub evicted_tokens: u64,
    pub cache_hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchRow {
    pub time_us: u64,
    pub request: u64,
    pub client: u32,
    pub worker: u32,
    pub match_len: u32,
    /// Space-separated worker ids.
    pub candidates: String,
    pub counter: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub local_policy: String,
    pub global_policy: String,
    pub workers: u32,
    pub clients: u32,
    pub horizon_s: f64,
    pub requests_arrived: u64,
    pub requests_admitted: u64,
    pub requests_finished: u64,
    pub throughput_tok_s: f64,
    pub jain_index: Option<f64>,
    pub latency_p50_s: Option<f64>,
    pub latency_p99_s: Option<f64>,
    pub ttft_p50_s: Option<f64>,
    pub ttft_p99_s: Option<f64>,
    pub cache_hit_rate: f64,
    pub bounds_checked: u32,
    pub bounds_violated: u32,
}

impl Summary {
    pub const COLUMNS: [&'static str; 17] = [
        "local_policy",
        "global_policy",
        "workers",
        "clients",
        "horizon_s",
        "requests_arrived",
        "requests_admitted",
        "requests_finished",
        "throughput_tok_s",
        "jain_index",
        "latency_p50_s",
        "latency_p99_s",
        "ttft_p50_s",
        "ttft_p99_s",
        "cache_hit_rate",
        "bounds_checked",
        "bounds_violated",
    ];

    /// Values in [`Summary::COLUMNS`] order; missing values are empty.
    pub fn values(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        vec![
            self.local_policy.clone(),
            self.global_policy.clone(),
            self.workers.to_string(),
            self.clients.to_string(),
            self.horizon_s.to_string(),
            self.requests_arrived.to_string(),
            self.requests_admitted.to_string(),
            self.requests_finished.to_string(),
            self.throughput_tok_s.to_string(),
            opt(self.jain_index),
            opt(self.latency_p50_s),
            opt(self.latency_p99_s),
            opt(self.ttft_p50_s),
            opt(self.ttft_p99_s),
            self.cache_hit_rate.to_string(),
            self.bounds_checked.to_string(),
            self.bounds_violated.to_string(),
        ]
    }
}

/// Summaries as CSV, each prefixed by its own leading columns.
pub fn write_summary_table<W: Write>(
    lead: &[&str],
    rows: impl IntoIterator<Item = (Vec<String>, Summary)>,
    w: W,
) -> Result<(), SimError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(lead.iter().chain(Summary::COLUMNS.iter()))?;
    for (head, s) in rows {
        wr.write_record(head.into_iter().chain(s.values()))?;
    }
    wr.flush()?;
    Ok(())
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        writeln!(f, "policy            {} / {}", self.local_policy, self.global_policy)?;
        writeln!(f, "workers, clients  {}, {}", self.workers, self.clients)?;
        writeln!(f, "horizon           {:.3} s", self.horizon_s)?;
        writeln!(
            f,
            "requests          {} arrived, {} admitted, {} finished",
            self.requests_arrived, self.requests_admitted, self.requests_finished
        )?;
        writeln!(f, "throughput        {:.1} tok/s", self.throughput_tok_s)?;
        writeln!(f, "jain index        {}", opt(self.jain_index))?;
        writeln!(f, "latency p50/p99   {} / {} s", opt(self.latency_p50_s), opt(self.latency_p99_s))?;
        writeln!(f, "ttft p50/p99      {} / {} s", opt(self.ttft_p50_s), opt(self.ttft_p99_s))?;
        writeln!(f, "cache hit rate    {:.4}", self.cache_hit_rate)?;
        write!(f, "bounds            {} checked, {} violated", self.bounds_checked, self.bounds_violated)
    }
}

/// Everything the run artifacts are made of.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub summary: Summary,
    pub clients: Vec<ClientStats>,
    pub workers: Vec<WorkerStats>,
    pub dispatch: Vec<DispatchRow>,
    pub bounds: Vec<BoundReport>,
}

fn secs(t: SimTime) -> f64 {
    t.as_secs_f64()
}

pub fn analyze(log: &EventLog, cfg: &VerifyConfig) -> Result<RunMetrics, SimError> {
    let info = run_info(log)?.clone();
    let service = ServiceLog::from_log(log, weights(&info));
    let end = log.end_time();
    let lifecycles = log.lifecycles();
    let clients = log.clients();

    let mut per_client: BTreeMap<ClientId, (u64, u64, Vec<SimTime>)> = clients.iter().map(|c| (*c, Default::default())).collect();
    let (mut latencies, mut ttfts) = (Vec::new(), Vec::new());
    let mut admitted = 0;
    for l in lifecycles.values() {
        let e = per_client.entry(l.client).or_default();
        e.0 += 1;
        admitted += u64::from(l.admit.is_some());
        if let (Some(a), Some(f)) = (l.arrival, l.finish) {
            e.1 += 1;
            e.2.push(f - a);
            latencies.push(f - a);
            if let Some(t) = l.first_token {
                ttfts.push(t - a);
            }
        }
    }
    let client_stats: Vec<ClientStats> = per_client
        .iter()
        .map(|(c, (arrived, finished, lat))| ClientStats {
            client: c.0,
            arrived: *arrived,
            finished: *finished,
            service: service.service_in_interval(*c, SimTime::ZERO, SimTime(end.0 + 1)),
            perspective_service: service.client_perspective_service(*c, SimTime::ZERO, SimTime(end.0 + 1)),
            latency_p50_s: percentile(lat, 50.0).map(secs),
        })
        .collect();
    let shares: Vec<f64> = client_stats.iter().map(|c| c.perspective_service as f64).collect();

    let mut workers: BTreeMap<u32, WorkerStats> = (0..info.workers)
        .map(|w| {
            (
                w,
                WorkerStats {
                    worker: w,
                    steps: 0,
                    busy_s: 0.0,
                    utilization: 0.0,
                    admitted: 0,
                    input_tokens: 0,
                    matched_tokens: 0,
                    output_tokens: 0,
                    evicted_tokens: 0,
                    cache_hit_rate: 0.0,
                },
            )
        })
        .collect();
    let mut dispatch = Vec::new();
    for r in log.records() {
        match &r.event {
            Record::Step { worker, started, outputs, .. } => {
                let w = workers.get_mut(&worker.0).expect("known worker");
                w.steps += 1;
                w.busy_s += secs(r.time - *started);
                w.output_tokens += outputs.iter().map(|o| u64::from(o.tokens)).sum::<u64>();
            }
            Record::Admit { worker, input_len, matched, .. } => {
                let w = workers.get_mut(&worker.0).expect("known worker");
                w.admitted += 1;
                w.input_tokens += u64::from(*input_len);
                w.matched_tokens += u64::from(*matched);
            }
            Record::Evict { worker, tokens, .. } => {
                workers.get_mut(&worker.0).expect("known worker").evicted_tokens += u64::from(*tokens);
            }
            Record::Dispatch {
                request,
                client,
                worker,
                match_len,
                candidates,
                counter,
            } => dispatch.push(DispatchRow {
                time_us: r.time.as_micros(),
                request: request.0,
                client: client.0,
                worker: worker.0,
                match_len: *match_len,
                candidates: candidates.iter().map(|w| w.0.to_string()).collect::<Vec<_>>().join(" "),
                counter: *counter,
            }),
            _ => {}
        }
    }
    for w in workers.values_mut() {
        if end > SimTime::ZERO {
            w.utilization = w.busy_s / secs(end);
        }
        if w.input_tokens > 0 {
            w.cache_hit_rate = w.matched_tokens as f64 / w.input_tokens as f64;
        }
    }

    let bounds = verify_all(log, cfg)?;
    let summary = Summary {
        local_policy: info.local_policy.clone(),
        global_policy: info.global_policy.clone(),
        workers: info.workers,
        clients: clients.len() as u32,
        horizon_s: secs(end),
        requests_arrived: lifecycles.values().filter(|l| l.arrival.is_some()).count() as u64,
        requests_admitted: admitted,
        requests_finished: latencies.len() as u64,
        throughput_tok_s: throughput(log),
        jain_index: jain_index(&shares).ok(),
        latency_p50_s: percentile(&latencies, 50.0).map(secs),
        latency_p99_s: percentile(&latencies, 99.0).map(secs),
        ttft_p50_s: percentile(&ttfts, 50.0).map(secs),
        ttft_p99_s: percentile(&ttfts, 99.0).map(secs),
        cache_hit_rate: cache_hit_rate(log),
        bounds_checked: bounds.iter().filter(|b| b.applicable).count() as u32,
        bounds_violated: bounds.iter().filter(|b| b.is_violation()).count() as u32,
    };
    Ok(RunMetrics {
        summary,
        clients: client_stats,
        workers: workers.into_values().collect(),
        dispatch,
        bounds,
    })
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<(), SimError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
