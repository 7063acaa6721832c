//! Per-worker admission policies: DLPM, LPM, FCFS and VTC.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cost::{compute_u, CostWeights};
use crate::request::{ClientId, RequestId, SystemParams};
use crate::sim::SimTime;

/// What a policy sees of a queued request. True output length is absent
/// on purpose: policies are output-length oblivious.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub id: RequestId,
    pub client: ClientId,
    pub input_len: u32,
    pub arrival: SimTime,
}

/// The worker-side operations a policy drives during one fill.
pub trait Admission {
    /// Queued requests in enqueue order.
    fn candidates(&self) -> Vec<Candidate>;
    /// Cached prefix length, without side effects.
    fn peek_match(&self, id: RequestId) -> u32;
    fn can_add(&self, id: RequestId) -> bool;
    /// Moves `id` into the running batch. `charge` receives the extend
    /// length and returns the counter value to record. Returns the extend
    /// length.
    fn admit(&mut self, id: RequestId, charge: &mut dyn FnMut(u32) -> Option<i64>) -> u32;
    fn refilled(&mut self, quantum: i64, counters: Vec<(ClientId, i64)>);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum LocalPolicyConfig {
    /// `quantum` is in multiples of U.
    Dlpm {
        #[serde(default = "LocalPolicyConfig::default_quantum")]
        quantum: f64,
    },
    Lpm,
    Fcfs,
    Vtc,
}

impl Default for LocalPolicyConfig {
    fn default() -> Self {
        LocalPolicyConfig::Dlpm {
            quantum: Self::default_quantum(),
        }
    }
}

impl LocalPolicyConfig {
    pub fn default_quantum() -> f64 {
        0.25
    }

    pub fn name(&self) -> &'static str {
        match self {
            LocalPolicyConfig::Dlpm { .. } => "dlpm",
            LocalPolicyConfig::Lpm => "lpm",
            LocalPolicyConfig::Fcfs => "fcfs",
            LocalPolicyConfig::Vtc => "vtc",
        }
    }

    /// Quantum in service units, if the policy has one.
    pub fn quantum_units(&self, params: &SystemParams) -> Option<i64> {
        match *self {
            LocalPolicyConfig::Dlpm { quantum } => Some(scale_u(quantum, params)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        match *self {
            LocalPolicyConfig::Dlpm { quantum } if !(quantum.is_finite() && quantum > 0.0) => {
                vec![format!("local.quantum must be a positive multiple of U, got {quantum}")]
            }
            _ => Vec::new(),
        }
    }

    pub fn build(&self, params: &SystemParams) -> LocalPolicy {
        match *self {
            LocalPolicyConfig::Dlpm { .. } => {
                LocalPolicy::Dlpm(DlpmState::new(self.quantum_units(params).unwrap_or(1), params.weights))
            }
            LocalPolicyConfig::Lpm => LocalPolicy::Lpm,
            LocalPolicyConfig::Fcfs => LocalPolicy::Fcfs,
            LocalPolicyConfig::Vtc => LocalPolicy::Vtc(VtcState::new(params.weights)),
        }
    }
}

/// `factor * U`, rounded, at least 1.
pub fn scale_u(factor: f64, params: &SystemParams) -> i64 {
    ((factor * compute_u(params) as f64).round() as i64).max(1)
}

/// Sorts by cached prefix length descending, then arrival, then id.
pub fn lpm_order(mut cands: Vec<Candidate>, matched: impl Fn(&Candidate) -> u32) -> Vec<Candidate> {
    let keys: BTreeMap<RequestId, u32> = cands.iter().map(|c| (c.id, matched(c))).collect();
    cands.sort_by_key(|c| (std::cmp::Reverse(keys[&c.id]), c.arrival, c.id));
    cands
}

/// Deficit counters for one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct DlpmState {
    pub quantum: i64,
    weights: CostWeights,
    /// Every client seen at this worker, with its counter.
    counters: BTreeMap<ClientId, i64>,
}

impl DlpmState {
    pub fn new(quantum: i64, weights: CostWeights) -> Self {
        DlpmState {
            quantum,
            weights,
            counters: BTreeMap::new(),
        }
    }

    /// A client's first request joins it to the list with a zero counter.
    pub fn join(&mut self, client: ClientId) {
        self.counters.entry(client).or_insert(0);
    }

    pub fn counter(&self, client: ClientId) -> i64 {
        self.counters.get(&client).copied().unwrap_or(0)
    }

    pub fn set_counter(&mut self, client: ClientId, value: i64) {
        self.counters.insert(client, value);
    }

    pub fn counters(&self) -> Vec<(ClientId, i64)> {
        self.counters.iter().map(|(c, q)| (*c, *q)).collect()
    }

    /// Refills every listed client with a non-positive counter, unless a
    /// queued client still has credit. An empty queue never refills.
    /// Returns whether a refill happened.
    pub fn check_refill(&mut self, queued: impl IntoIterator<Item = ClientId>) -> bool {
        let mut any = false;
        for c in queued {
            any = true;
            if self.counter(c) > 0 {
                return false;
            }
        }
        if !any {
            return false;
        }
        for q in self.counters.values_mut() {
            if *q <= 0 {
                *q += self.quantum;
            }
        }
        true
    }

    fn fill(&mut self, ctx: &mut dyn Admission) {
        let cands = ctx.candidates();
        let mut pending = lpm_order(cands, |c| ctx.peek_match(c.id));
        loop {
            let mut progress = false;
            let mut i = 0;
            while i < pending.len() {
                let c = pending[i];
                if self.counter(c.client) <= 0 && self.check_refill(pending.iter().map(|p| p.client)) {
                    progress = true;
                    ctx.refilled(self.quantum, self.counters());
                }
                if self.counter(c.client) > 0 && ctx.can_add(c.id) {
                    let we = self.weights;
                    let q = self.counters.get_mut(&c.client).expect("queued clients are listed");
                    ctx.admit(c.id, &mut |extend| {
                        *q -= we.extend_cost(extend);
                        Some(*q)
                    });
                    pending.remove(i);
                    progress = true;
                } else {
                    i += 1;
                }
            }
            if !progress || pending.is_empty() {
                break;
            }
        }
    }
}

/// Virtual token counters for one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct VtcState {
    weights: CostWeights,
    counters: BTreeMap<ClientId, i64>,
}

impl VtcState {
    pub fn new(weights: CostWeights) -> Self {
        VtcState {
            weights,
            counters: BTreeMap::new(),
        }
    }

    pub fn counter(&self, client: ClientId) -> i64 {
        self.counters.get(&client).copied().unwrap_or(0)
    }

    /// On an inactive-to-active transition the counter is lifted to the
    /// smallest counter among clients that already have queued requests.
    fn activate(&mut self, client: ClientId, active: &BTreeSet<ClientId>) {
        if active.contains(&client) {
            return;
        }
        let floor = active.iter().map(|c| self.counter(*c)).min();
        let own = self.counters.entry(client).or_insert(0);
        if let Some(f) = floor {
            *own = (*own).max(f);
        }
    }

    fn fill(&mut self, ctx: &mut dyn Admission) {
        let mut pending = ctx.candidates();
        while !pending.is_empty() {
            let client = pending
                .iter()
                .map(|c| c.client)
                .min_by_key(|c| (self.counter(*c), *c))
                .expect("non-empty");
            let next = *pending
                .iter()
                .filter(|c| c.client == client)
                .min_by_key(|c| (c.arrival, c.id))
                .expect("client has a request");
            if !ctx.can_add(next.id) {
                break;
            }
            let cost = self.weights.extend_cost(next.input_len);
            let counter = self.counters.entry(client).or_insert(0);
            ctx.admit(next.id, &mut |_| {
                *counter += cost;
                Some(*counter)
            });
            pending.retain(|c| c.id != next.id);
        }
    }
}

/// A worker's local policy and its state.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum LocalPolicy {
    Dlpm(DlpmState),
    Lpm,
    #[default]
    Fcfs,
    Vtc(VtcState),
}

impl LocalPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            LocalPolicy::Dlpm(_) => "dlpm",
            LocalPolicy::Lpm => "lpm",
            LocalPolicy::Fcfs => "fcfs",
            LocalPolicy::Vtc(_) => "vtc",
        }
    }

    /// Called before `client`'s request is appended; `queued` lists the
    /// clients of requests already waiting.
    pub fn on_enqueue(&mut self, client: ClientId, queued: impl Iterator<Item = ClientId>) {
        match self {
            LocalPolicy::Dlpm(s) => s.join(client),
            LocalPolicy::Vtc(s) => s.activate(client, &queued.collect()),
            _ => {}
        }
    }

    /// Charges `tokens` decoded outputs; returns the client's counter.
    pub fn on_step(&mut self, client: ClientId, tokens: u32, weights: CostWeights) -> Option<i64> {
        let cost = weights.output_cost(tokens);
        match self {
            LocalPolicy::Dlpm(s) => {
                let q = s.counters.entry(client).or_insert(0);
                *q -= cost;
                Some(*q)
            }
            LocalPolicy::Vtc(s) => {
                let q = s.counters.entry(client).or_insert(0);
                *q += cost;
                Some(*q)
            }
            _ => None,
        }
    }

    pub fn on_finish(&mut self, _client: ClientId) {}

    pub fn counter(&self, client: ClientId) -> Option<i64> {
        match self {
            LocalPolicy::Dlpm(s) => Some(s.counter(client)),
            LocalPolicy::Vtc(s) => Some(s.counter(client)),
            _ => None,
        }
    }

    pub fn fill(&mut self, ctx: &mut dyn Admission) {
        match self {
            LocalPolicy::Dlpm(s) => s.fill(ctx),
            LocalPolicy::Lpm => {
                let order = lpm_order(ctx.candidates(), |c| ctx.peek_match(c.id));
                for c in order {
                    if ctx.can_add(c.id) {
                        ctx.admit(c.id, &mut |_| None);
                    }
                }
            }
            LocalPolicy::Fcfs => {
                for c in ctx.candidates() {
                    if !ctx.can_add(c.id) {
                        break;
                    }
                    ctx.admit(c.id, &mut |_| None);
                }
            }
            LocalPolicy::Vtc(s) => s.fill(ctx),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Admission stub: fixed matches, a token budget consumed by extend
    /// tokens, and a record of what happened.
    struct Stub {
        queue: Vec<Candidate>,
        matched: BTreeMap<RequestId, u32>,
        budget: u32,
        admitted: Vec<(RequestId, Option<i64>)>,
        refills: usize,
    }

    impl Stub {
        fn new(reqs: &[(u64, u32, u32, u32)], budget: u32) -> Self {
            Stub {
                queue: reqs
                    .iter()
                    .map(|&(id, client, len, _)| Candidate {
                        id: RequestId(id),
                        client: ClientId(client),
                        input_len: len,
                        arrival: SimTime(id),
                    })
                    .collect(),
                matched: reqs.iter().map(|&(id, _, _, m)| (RequestId(id), m)).collect(),
                budget,
                admitted: Vec::new(),
                refills: 0,
            }
        }

        fn extend(&self, id: RequestId) -> u32 {
            let c = self.queue.iter().find(|c| c.id == id).unwrap();
            c.input_len - self.matched[&id]
        }

        fn order(&self) -> Vec<u64> {
            self.admitted.iter().map(|(id, _)| id.0).collect()
        }
    }

    impl Admission for Stub {
        fn candidates(&self) -> Vec<Candidate> {
            self.queue.clone()
        }
        fn peek_match(&self, id: RequestId) -> u32 {
            self.matched[&id]
        }
        fn can_add(&self, id: RequestId) -> bool {
            self.extend(id) <= self.budget
        }
        fn admit(&mut self, id: RequestId, charge: &mut dyn FnMut(u32) -> Option<i64>) -> u32 {
            let e = self.extend(id);
            self.budget -= e;
            self.queue.retain(|c| c.id != id);
            let counter = charge(e);
            self.admitted.push((id, counter));
            e
        }
        fn refilled(&mut self, _quantum: i64, _counters: Vec<(ClientId, i64)>) {
            self.refills += 1;
        }
    }

    fn cand(id: u64, arrival: u64) -> Candidate {
        Candidate {
            id: RequestId(id),
            client: ClientId(0),
            input_len: 10,
            arrival: SimTime(arrival),
        }
    }

    #[test]
    fn lpm_order_examples() {
        let m = BTreeMap::from([(RequestId(1), 5), (RequestId(2), 2), (RequestId(3), 9)]);
        let out = lpm_order(vec![cand(1, 0), cand(2, 1), cand(3, 2)], |c| m[&c.id]);
        assert_eq!(out.iter().map(|c| c.id.0).collect::<Vec<_>>(), [3, 1, 2]);
        let out = lpm_order(vec![cand(7, 5), cand(4, 3), cand(9, 3)], |_| 1);
        assert_eq!(out.iter().map(|c| c.id.0).collect::<Vec<_>>(), [4, 9, 7]);
    }

    proptest! {
        #[test]
        fn lpm_order_is_sorted_permutation(items in prop::collection::vec((0u32..5, 0u64..4), 0..20)) {
            let cands: Vec<Candidate> = items.iter().enumerate().map(|(i, &(_, a))| cand(i as u64, a)).collect();
            let m: BTreeMap<RequestId, u32> = items.iter().enumerate().map(|(i, &(m, _))| (RequestId(i as u64), m)).collect();
            let out = lpm_order(cands.clone(), |c| m[&c.id]);
            let mut a: Vec<u64> = out.iter().map(|c| c.id.0).collect();
            a.sort();
            prop_assert_eq!(a, (0..items.len() as u64).collect::<Vec<_>>());
            for w in out.windows(2) {
                let k = |c: &Candidate| (std::cmp::Reverse(m[&c.id]), c.arrival, c.id);
                prop_assert!(k(&w[0]) <= k(&w[1]));
            }
        }
    }

    #[test]
    fn check_refill_examples() {
        let (a, b, c) = (ClientId(0), ClientId(1), ClientId(2));
        let mut s = DlpmState::new(10, CostWeights::default());
        s.set_counter(a, -5);
        s.set_counter(b, 3);
        assert!(!s.check_refill([a, b]));
        assert_eq!((s.counter(a), s.counter(b)), (-5, 3));

        s.set_counter(b, 0);
        s.set_counter(c, -2);
        assert!(s.check_refill([a, b]));
        assert_eq!(s.counters(), [(a, 5), (b, 10), (c, 8)]);

        let before = s.counters();
        s.set_counter(a, -1);
        assert!(!s.check_refill([]));
        assert!(!s.check_refill(std::iter::empty()));
        assert_eq!(s.counter(a), -1);
        assert_eq!(s.counters()[1..], before[1..]);
    }

    fn dlpm(quantum: i64) -> LocalPolicy {
        LocalPolicy::Dlpm(DlpmState::new(quantum, CostWeights::default()))
    }

    fn enqueue_all(p: &mut LocalPolicy, stub: &Stub) {
        for c in &stub.queue {
            p.on_enqueue(c.client, std::iter::empty());
        }
    }

    #[test]
    fn single_client_large_quantum_equals_lpm() {
        let reqs = [(1, 0, 10, 0), (2, 0, 10, 8), (3, 0, 10, 3), (4, 0, 30, 0), (5, 0, 10, 9)];
        let mut lpm = Stub::new(&reqs, 25);
        LocalPolicy::Lpm.fill(&mut lpm);
        let mut d = Stub::new(&reqs, 25);
        let mut p = dlpm(1_000_000);
        enqueue_all(&mut p, &d);
        p.fill(&mut d);
        assert_eq!(d.order(), lpm.order());
        assert_eq!(lpm.order(), [5, 2, 3, 1]);
    }

    #[test]
    fn tiny_quantum_alternates_clients() {
        // six equal-cost cold requests (10 extend tokens each), quantum = one request
        let reqs = [(1, 0, 10, 0), (2, 0, 10, 0), (3, 0, 10, 0), (4, 1, 10, 0), (5, 1, 10, 0), (6, 1, 10, 0)];
        let mut s = Stub::new(&reqs, 1000);
        let mut p = dlpm(10);
        enqueue_all(&mut p, &s);
        p.fill(&mut s);
        // a refill hands both clients one request's worth of credit, so the
        // per-client admitted counts never drift apart by more than one
        assert_eq!(s.order(), [1, 4, 5, 2, 3, 6]);
        assert_eq!(s.refills, 3);
        let mut gap = 0i32;
        for id in s.order() {
            gap += if id <= 3 { 1 } else { -1 };
            assert!(gap.abs() <= 1);
        }
        assert!(s.admitted.iter().all(|(_, q)| *q == Some(0)));
    }

    #[test]
    fn zero_counter_triggers_refill_then_admits() {
        let mut s = Stub::new(&[(1, 0, 10, 0)], 100);
        let mut p = dlpm(7);
        enqueue_all(&mut p, &s);
        p.fill(&mut s);
        assert_eq!(s.refills, 1);
        assert_eq!(s.admitted, [(RequestId(1), Some(-3))]);
    }

    #[test]
    fn dlpm_on_step_deducts_per_output() {
        let mut p = dlpm(10);
        p.on_enqueue(ClientId(0), std::iter::empty());
        assert_eq!(p.on_step(ClientId(0), 3, CostWeights::default()), Some(-6));
    }

    fn vtc() -> LocalPolicy {
        LocalPolicy::Vtc(VtcState::new(CostWeights::default()))
    }

    #[test]
    fn vtc_alternates_equal_clients() {
        let reqs = [(1, 0, 10, 0), (2, 0, 10, 0), (3, 1, 10, 0), (4, 1, 10, 0)];
        let mut s = Stub::new(&reqs, 1000);
        let mut p = vtc();
        let mut seen = Vec::new();
        for c in &s.queue {
            p.on_enqueue(c.client, seen.clone().into_iter());
            seen.push(c.client);
        }
        p.fill(&mut s);
        assert_eq!(s.order(), [1, 3, 2, 4]);
        let (a, b) = (p.counter(ClientId(0)).unwrap(), p.counter(ClientId(1)).unwrap());
        assert!((a - b).abs() <= 10);
    }

    #[test]
    fn vtc_lift_and_head_of_line() {
        let mut p = vtc();
        p.on_enqueue(ClientId(0), std::iter::empty());
        p.on_step(ClientId(0), 50, CostWeights::default());
        // client 1 joins while client 0 is queued: lifted to 100
        p.on_enqueue(ClientId(1), [ClientId(0)].into_iter());
        assert_eq!(p.counter(ClientId(1)), Some(100));

        // the lowest-counter client's head does not fit: nothing is admitted
        let mut s = Stub::new(&[(1, 0, 50, 0), (2, 1, 5, 0)], 20);
        p.fill(&mut s);
        assert!(s.admitted.is_empty());
    }

    #[test]
    fn vtc_idle_client_does_not_block() {
        let mut s = Stub::new(&[(1, 0, 10, 0), (2, 0, 10, 0)], 1000);
        let mut p = vtc();
        p.fill(&mut s);
        assert_eq!(s.order(), [1, 2]);
    }

    #[test]
    fn fcfs_stops_at_first_misfit_lpm_skips() {
        let reqs = [(1, 0, 10, 0), (2, 0, 50, 0), (3, 0, 10, 0)];
        let mut s = Stub::new(&reqs, 30);
        LocalPolicy::Fcfs.fill(&mut s);
        assert_eq!(s.order(), [1]);
        let mut s = Stub::new(&reqs, 30);
        LocalPolicy::Lpm.fill(&mut s);
        assert_eq!(s.order(), [1, 3]);
    }
}
