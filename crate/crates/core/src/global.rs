//! Dispatch policies: D²LPM, round-robin, per-client round-robin and a
//! prefix-threshold router.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cost::CostWeights;
use crate::local::scale_u;
use crate::radix::{Evicted, GlobalIndex};
use crate::request::{ClientId, Request, SystemParams, Token, WorkerId};
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum GlobalPolicyConfig {
    /// `quantum` is in multiples of U.
    D2lpm {
        #[serde(default = "GlobalPolicyConfig::default_quantum")]
        quantum: f64,
    },
    RoundRobin,
    PerClientRr,
    /// Route to the best-matching workers when at least a `theta` fraction
    /// of the input is cached somewhere, else to the least-loaded worker.
    Threshold {
        #[serde(default = "GlobalPolicyConfig::default_theta")]
        theta: f64,
    },
}

impl Default for GlobalPolicyConfig {
    fn default() -> Self {
        GlobalPolicyConfig::D2lpm {
            quantum: Self::default_quantum(),
        }
    }
}

impl GlobalPolicyConfig {
    pub fn default_quantum() -> f64 {
        1.0
    }

    pub fn default_theta() -> f64 {
        0.5
    }
}

impl GlobalPolicyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            GlobalPolicyConfig::D2lpm { .. } => "d2lpm",
            GlobalPolicyConfig::RoundRobin => "round_robin",
            GlobalPolicyConfig::PerClientRr => "per_client_rr",
            GlobalPolicyConfig::Threshold { .. } => "threshold",
        }
    }

    pub fn quantum_units(&self, params: &SystemParams) -> Option<i64> {
        match *self {
            GlobalPolicyConfig::D2lpm { quantum } => Some(scale_u(quantum, params)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        match *self {
            GlobalPolicyConfig::D2lpm { quantum } if !(quantum.is_finite() && quantum > 0.0) => {
                vec![format!("global.quantum must be a positive multiple of U, got {quantum}")]
            }
            GlobalPolicyConfig::Threshold { theta } if !(0.0..=1.0).contains(&theta) => {
                vec![format!("global.theta must lie in [0, 1], got {theta}")]
            }
            _ => Vec::new(),
        }
    }

    pub fn build(&self, params: &SystemParams) -> Dispatcher {
        let policy = match *self {
            GlobalPolicyConfig::D2lpm { .. } => GlobalPolicy::D2lpm(D2lpmState {
                quantum: self.quantum_units(params).unwrap_or(1),
                counters: BTreeMap::new(),
            }),
            GlobalPolicyConfig::RoundRobin => GlobalPolicy::RoundRobin { cursor: 0 },
            GlobalPolicyConfig::PerClientRr => GlobalPolicy::PerClientRr { cursors: BTreeMap::new() },
            GlobalPolicyConfig::Threshold { theta } => GlobalPolicy::Threshold { theta },
        };
        Dispatcher {
            policy,
            index: GlobalIndex::new(),
            in_flight: vec![0; params.workers as usize],
            weights: params.weights,
        }
    }
}

/// Per-(client, worker) deficit counters.
#[derive(Debug, Clone, PartialEq)]
pub struct D2lpmState {
    pub quantum: i64,
    counters: BTreeMap<(ClientId, WorkerId), i64>,
}

impl D2lpmState {
    pub fn counter(&self, client: ClientId, worker: WorkerId) -> i64 {
        self.counters.get(&(client, worker)).copied().unwrap_or(0)
    }

    pub fn set_counter(&mut self, client: ClientId, worker: WorkerId, value: i64) {
        self.counters.insert((client, worker), value);
    }

    fn client_counters(&self, client: ClientId, workers: u32) -> Vec<(WorkerId, i64)> {
        (0..workers).map(|w| (WorkerId(w), self.counter(client, WorkerId(w)))).collect()
    }

    /// Picks a worker for `client` given the best-matching set `g` and the
    /// per-worker load `load`. Refills the client's counters on every
    /// worker while none is positive; each refill round is reported.
    pub fn select_worker(
        &mut self,
        g: &BTreeSet<WorkerId>,
        client: ClientId,
        load: &[u32],
        refills: &mut Vec<Vec<(WorkerId, i64)>>,
    ) -> WorkerId {
        let n = load.len() as u32;
        let avail = |s: &Self| -> Vec<WorkerId> {
            (0..n).map(WorkerId).filter(|w| s.counter(client, *w) > 0).collect()
        };
        let mut g_avail = avail(self);
        while g_avail.is_empty() {
            for w in 0..n {
                *self.counters.entry((client, WorkerId(w))).or_insert(0) += self.quantum;
            }
            refills.push(self.client_counters(client, n));
            g_avail = avail(self);
        }
        let g_cand: Vec<WorkerId> = g_avail.iter().copied().filter(|w| g.contains(w)).collect();
        let pool = if g_cand.is_empty() { &g_avail } else { &g_cand };
        least_loaded(pool.iter().copied(), load)
    }
}

/// Argmin of `load` over `workers`, lowest id on ties.
fn least_loaded(workers: impl Iterator<Item = WorkerId>, load: &[u32]) -> WorkerId {
    workers
        .min_by_key(|w| (load[w.0 as usize], *w))
        .expect("at least one worker")
}

#[derive(Debug, Clone, PartialEq)]
pub enum GlobalPolicy {
    D2lpm(D2lpmState),
    RoundRobin { cursor: u32 },
    PerClientRr { cursors: BTreeMap<ClientId, u32> },
    Threshold { theta: f64 },
}

/// Outcome of one dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchRecord {
    pub worker: WorkerId,
    pub match_len: u32,
    pub candidates: Vec<WorkerId>,
    /// D²LPM counter of (client, worker) after the dispatch deduction.
    pub counter: Option<i64>,
    /// Counter snapshots after each refill round, for this client.
    pub refills: Vec<Vec<(WorkerId, i64)>>,
}

/// The global scheduler: policy state, prefix index and per-worker load
/// (dispatched, unfinished requests).
#[derive(Debug, Clone)]
pub struct Dispatcher {
    policy: GlobalPolicy,
    index: GlobalIndex,
    in_flight: Vec<u32>,
    weights: CostWeights,
}

impl Dispatcher {
    pub fn policy(&self) -> &GlobalPolicy {
        &self.policy
    }

    pub fn index(&self) -> &GlobalIndex {
        &self.index
    }

    /// Dispatched-but-unfinished requests per worker.
    pub fn load(&self) -> &[u32] {
        &self.in_flight
    }

    pub fn quantum(&self) -> Option<i64> {
        match &self.policy {
            GlobalPolicy::D2lpm(s) => Some(s.quantum),
            _ => None,
        }
    }

    pub fn dispatch(&mut self, request: &Request) -> DispatchRecord {
        let n = self.in_flight.len() as u32;
        let (match_len, g) = self.index.longest_match_workers(&request.input);
        let mut refills = Vec::new();
        let mut counter = None;
        let worker = match &mut self.policy {
            GlobalPolicy::D2lpm(s) => {
                let w = s.select_worker(&g, request.client, &self.in_flight, &mut refills);
                let q = s.counters.entry((request.client, w)).or_insert(0);
                *q -= self.weights.extend_cost(request.input.len() as u32);
                counter = Some(*q);
                w
            }
            GlobalPolicy::RoundRobin { cursor } => {
                let w = WorkerId(*cursor % n);
                *cursor = (*cursor + 1) % n;
                w
            }
            GlobalPolicy::PerClientRr { cursors } => {
                let c = cursors.entry(request.client).or_insert(0);
                let w = WorkerId(*c % n);
                *c = (*c + 1) % n;
                w
            }
            GlobalPolicy::Threshold { theta } => {
                let ratio = f64::from(match_len) / request.input.len().max(1) as f64;
                if match_len > 0 && !g.is_empty() && ratio >= *theta {
                    least_loaded(g.iter().copied(), &self.in_flight)
                } else {
                    least_loaded((0..n).map(WorkerId), &self.in_flight)
                }
            }
        };
        self.in_flight[worker.0 as usize] += 1;
        self.index.insert(&request.input, worker);
        DispatchRecord {
            worker,
            match_len,
            candidates: g.into_iter().collect(),
            counter,
            refills,
        }
    }

    /// Bookkeeping for a finished request; returns the D²LPM counter.
    pub fn on_finish(&mut self, request: &Request, worker: WorkerId, output_len: u32, now: SimTime) -> Option<i64> {
        let slot = &mut self.in_flight[worker.0 as usize];
        *slot = slot.saturating_sub(1);
        self.index.release(&request.input, worker, now);
        match &mut self.policy {
            GlobalPolicy::D2lpm(s) => {
                let q = s.counters.entry((request.client, worker)).or_insert(0);
                *q -= self.weights.output_cost(output_len);
                Some(*q)
            }
            _ => None,
        }
    }

    /// Applies an eviction notice; returns the number of index nodes the
    /// worker was removed from.
    pub fn on_evicted(&mut self, worker: WorkerId, evicted: &Evicted, at: SimTime) -> u32 {
        self.index.evict_notify(&evicted.path, evicted.retained, worker, at)
    }

    /// Index lookup, exposed for tests and analysis.
    pub fn longest_match(&self, tokens: &[Token]) -> (u32, BTreeSet<WorkerId>) {
        self.index.longest_match_workers(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::request::{Release, RequestId, TokenSeq};

    fn params(workers: u32) -> SystemParams {
        SystemParams {
            workers,
            ..SystemParams::default()
        }
    }

    fn req(id: u64, client: u32, input: Vec<u32>) -> Request {
        Request {
            id: RequestId(id),
            client: ClientId(client),
            input: TokenSeq::from(input),
            true_output_len: 1,
            release: Release::At(SimTime::ZERO),
        }
    }

    fn state(quantum: i64) -> D2lpmState {
        D2lpmState {
            quantum,
            counters: BTreeMap::new(),
        }
    }

    fn set(ids: &[u32]) -> BTreeSet<WorkerId> {
        ids.iter().map(|&i| WorkerId(i)).collect()
    }

    #[test]
    fn select_worker_examples() {
        let c = ClientId(0);
        let mut refills = Vec::new();

        let mut s = state(10);
        s.set_counter(c, WorkerId(1), 5);
        assert_eq!(s.select_worker(&set(&[1]), c, &[0, 3], &mut refills), WorkerId(1));
        assert!(refills.is_empty());

        let mut s = state(10);
        s.set_counter(c, WorkerId(0), -4);
        assert_eq!(s.select_worker(&set(&[]), c, &[2, 1], &mut refills), WorkerId(1));
        assert_eq!(refills, [vec![(WorkerId(0), 6), (WorkerId(1), 10)]]);

        // locality sacrificed: the matching worker has no credit
        let mut s = state(10);
        s.set_counter(c, WorkerId(0), 0);
        s.set_counter(c, WorkerId(1), 3);
        s.set_counter(c, WorkerId(2), 3);
        let mut refills = Vec::new();
        assert_eq!(s.select_worker(&set(&[0]), c, &[0, 4, 1], &mut refills), WorkerId(2));
        assert!(refills.is_empty());
    }

    #[test]
    fn dispatch_and_finish_bookkeeping() {
        let p = params(2);
        let mut d = GlobalPolicyConfig::D2lpm { quantum: 1.0 }.build(&p);
        let r = req(1, 0, vec![1, 2, 3]);
        let rec = d.dispatch(&r);
        // cold: min-load worker after one refill round
        assert_eq!(rec.worker, WorkerId(0));
        assert_eq!(rec.refills.len(), 1);
        let u = crate::cost::compute_u(&p);
        assert_eq!(rec.counter, Some(u - 3));
        assert_eq!(d.load(), [1, 0]);
        let q = d.on_finish(&r, WorkerId(0), 50, SimTime(9));
        assert_eq!(q, Some(u - 3 - 100));
        assert_eq!(d.load(), [0, 0]);
    }

    #[test]
    fn same_prefix_sticks_with_ample_quantum() {
        let mut d = GlobalPolicyConfig::D2lpm { quantum: 4.0 }.build(&params(4));
        let a = d.dispatch(&req(1, 0, vec![7, 7, 7, 1]));
        let b = d.dispatch(&req(2, 0, vec![7, 7, 7, 2]));
        assert_eq!(a.worker, b.worker);
        assert_eq!(b.candidates, [a.worker]);
        assert_eq!(b.match_len, 3);
    }

    #[test]
    fn tiny_quantum_spreads_same_prefix() {
        let p = SystemParams {
            workers: 4,
            l_input: 100,
            max_batch_tokens: 100,
            ..SystemParams::default()
        };
        // U = 300: one quantum pays for three 100-token dispatches, after
        // which the stream moves on to a worker that still has credit
        let mut d = GlobalPolicyConfig::D2lpm { quantum: 1.0 }.build(&p);
        let mut used = BTreeSet::new();
        for i in 0..12 {
            let input: Vec<u32> = (0..99).chain([1000 + i]).collect();
            used.insert(d.dispatch(&req(u64::from(i), 0, input)).worker);
        }
        assert_eq!(used.len(), 4);
    }

    #[test]
    fn round_robin_cursors() {
        let mut d = GlobalPolicyConfig::RoundRobin.build(&params(4));
        let ws: Vec<u32> = (0..8).map(|i| d.dispatch(&req(i, (i % 3) as u32, vec![i as u32 + 1])).worker.0).collect();
        assert_eq!(ws, [0, 1, 2, 3, 0, 1, 2, 3]);

        let mut d = GlobalPolicyConfig::PerClientRr.build(&params(4));
        let ws: Vec<u32> = (0..6).map(|i| d.dispatch(&req(i, (i % 2) as u32, vec![i as u32 + 1])).worker.0).collect();
        assert_eq!(ws, [0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn threshold_router_branches() {
        let mut d = GlobalPolicyConfig::Threshold { theta: 0.5 }.build(&params(3));
        let first = d.dispatch(&req(1, 0, (0..10).collect()));
        assert_eq!(first.worker, WorkerId(0));
        // 60% match → locality branch even though worker 0 is the busiest
        let r = d.dispatch(&req(2, 0, (0..6).chain(100..104).collect()));
        assert_eq!(r.worker, WorkerId(0));
        // 20% match → least loaded
        let r = d.dispatch(&req(3, 0, (0..2).chain(200..208).collect()));
        assert_eq!(r.worker, WorkerId(1));

        let mut d = GlobalPolicyConfig::Threshold { theta: 1.0 }.build(&params(2));
        d.dispatch(&req(1, 0, (0..10).collect()));
        let r = d.dispatch(&req(2, 0, (0..9).chain([99]).collect()));
        assert_eq!(r.worker, WorkerId(1));

        let mut d = GlobalPolicyConfig::Threshold { theta: 0.0 }.build(&params(2));
        d.dispatch(&req(1, 0, (0..10).collect()));
        d.dispatch(&req(2, 0, (50..60).collect()));
        let r = d.dispatch(&req(3, 0, vec![0, 77]));
        assert_eq!(r.worker, WorkerId(0));
    }
}
