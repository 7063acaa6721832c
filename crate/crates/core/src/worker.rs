//! Simulated worker: KV pool, radix cache, running batch and the
//! continuous-batching loop around a local policy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::CostWeights;
use crate::local::{Admission, Candidate, LocalPolicy};
use crate::radix::{Evicted, NodeRef, RadixCache};
use crate::request::{ClientId, Request, RequestId, SystemParams, WorkerId};
use crate::sim::{EventLog, Record, SimTime, StepOutput};

/// Step latency model: `c0 + prefill * extend_tokens + decode * batch_size`,
/// all in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepTiming {
    pub c0_us: u64,
    pub prefill_us_per_token: u64,
    pub decode_us_per_request: u64,
}

impl Default for StepTiming {
    fn default() -> Self {
        StepTiming {
            c0_us: 5_000,
            prefill_us_per_token: 50,
            decode_us_per_request: 400,
        }
    }
}

impl StepTiming {
    pub fn step_latency(&self, extend_tokens: u64, batch_size: u64) -> SimTime {
        SimTime(self.c0_us + self.prefill_us_per_token * extend_tokens + self.decode_us_per_request * batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkerConfig {
    /// Output tokens reserved per running request at admission. `None`
    /// reserves `L_output`, which makes the pool overflow-free.
    pub output_reserve: Option<u32>,
    /// Maximum extend tokens computed per request per step.
    pub prefill_chunk: Option<u32>,
    /// Admit new requests every this many steps (an idle worker always admits).
    pub admission_interval: u32,
    pub timing: StepTiming,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        WorkerConfig {
            output_reserve: None,
            prefill_chunk: None,
            admission_interval: 1,
            timing: StepTiming::default(),
        }
    }
}

impl WorkerConfig {
    pub fn reserve(&self, params: &SystemParams) -> u32 {
        self.output_reserve.unwrap_or(params.l_output)
    }

    pub fn validate(&self, params: &SystemParams) -> Vec<String> {
        let mut errs = Vec::new();
        if self.admission_interval == 0 {
            errs.push("worker.admission_interval must be positive".into());
        }
        if self.prefill_chunk == Some(0) {
            errs.push("worker.prefill_chunk must be positive".into());
        }
        let need = u64::from(params.l_input) + u64::from(self.reserve(params));
        if need > u64::from(params.max_batch_tokens) {
            errs.push(format!(
                "system.max_batch_tokens ({}) must hold one maximal request: l_input + output reserve = {need}",
                params.max_batch_tokens
            ));
        }
        errs
    }
}

#[derive(Debug, Clone)]
pub struct Queued {
    pub request: Request,
    pub arrival: SimTime,
}

#[derive(Debug, Clone)]
struct Running {
    request: Request,
    node: NodeRef,
    extend_left: u32,
    generated: u32,
    target: u32,
    first_token: Option<SimTime>,
}

/// A request that completed on this worker.
#[derive(Debug, Clone)]
pub struct Finished {
    pub request: Request,
    pub output_len: u32,
}

#[derive(Debug, Default)]
pub struct StepOutcome {
    pub finished: Vec<Finished>,
    pub evicted: Vec<Evicted>,
    /// Completion time of the step just started, if any.
    pub next_step: Option<SimTime>,
}

/// Snapshot used by the per-worker metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerStatus {
    pub id: WorkerId,
    pub queued: u32,
    pub running: u32,
    pub busy: bool,
    pub pool_used: u64,
}

#[derive(Debug)]
pub struct Worker {
    id: WorkerId,
    cache: RadixCache,
    pool: u64,
    reserve: u32,
    l_output: u32,
    weights: CostWeights,
    cfg: WorkerConfig,
    policy: LocalPolicy,
    queue: Vec<Queued>,
    batch: Vec<Running>,
    /// Extend tokens each batch entry computes in the step in flight.
    plan: Vec<u32>,
    private_tokens: u64,
    busy: bool,
    step_started: SimTime,
    steps_since_fill: u32,
}

impl Worker {
    pub fn new(id: WorkerId, params: &SystemParams, cfg: WorkerConfig, policy: LocalPolicy) -> Self {
        let pool = u64::from(params.max_batch_tokens);
        Worker {
            id,
            cache: RadixCache::new(pool),
            pool,
            reserve: cfg.reserve(params),
            l_output: params.l_output,
            weights: params.weights,
            cfg,
            policy,
            queue: Vec::new(),
            batch: Vec::new(),
            plan: Vec::new(),
            private_tokens: 0,
            busy: false,
            step_started: SimTime::ZERO,
            steps_since_fill: 0,
        }
    }

    pub fn id(&self) -> WorkerId {
        self.id
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn policy(&self) -> &LocalPolicy {
        &self.policy
    }

    pub fn cache(&self) -> &RadixCache {
        &self.cache
    }

    /// Cache tokens plus per-request private tokens.
    pub fn pool_used(&self) -> u64 {
        self.cache.used_tokens() + self.private_tokens
    }

    pub fn status(&self) -> WorkerStatus {
        WorkerStatus {
            id: self.id,
            queued: self.queue.len() as u32,
            running: self.batch.len() as u32,
            busy: self.busy,
            pool_used: self.pool_used(),
        }
    }

    pub fn enqueue(&mut self, request: Request, arrival: SimTime) {
        self.policy.on_enqueue(request.client, self.queue.iter().map(|q| q.request.client));
        self.queue.push(Queued { request, arrival });
    }

    fn private_of(&self, generated: u32) -> u64 {
        u64::from(self.reserve.max(generated))
    }

    /// Queued requests that would pass the admission check right now.
    pub fn admissible_count(&self) -> u32 {
        self.queue.iter().filter(|q| self.fits(&q.request)).count() as u32
    }

    fn fits(&self, r: &Request) -> bool {
        let matched = self.cache.peek_match(&r.input);
        let extend = r.input.len() as u64 - u64::from(matched);
        let need = extend + u64::from(self.reserve);
        let free = self.pool as i64 - self.pool_used() as i64;
        let evictable = self.cache.evictable_tokens() - u64::from(self.cache.unpinned_on_path(&r.input, matched));
        need as i64 <= free + evictable as i64
    }

    /// Handles the end of the step in flight (if any), retires finished
    /// requests, runs the local policy and starts the next step.
    pub fn on_step_complete(&mut self, now: SimTime, log: &mut EventLog) -> StepOutcome {
        let mut out = StepOutcome::default();
        if self.busy {
            self.apply_step(now, log, &mut out);
            self.retire(now, log, &mut out);
        }
        self.busy = false;
        self.steps_since_fill += 1;
        if self.batch.is_empty() || self.steps_since_fill >= self.cfg.admission_interval {
            self.steps_since_fill = 0;
            let mut policy = std::mem::take(&mut self.policy);
            let mut ctx = Ctx {
                worker: self,
                now,
                log,
                evicted: Vec::new(),
            };
            policy.fill(&mut ctx);
            out.evicted.extend(ctx.evicted);
            self.policy = policy;
        }
        if !self.batch.is_empty() {
            let chunk = self.cfg.prefill_chunk.unwrap_or(u32::MAX);
            self.plan = self.batch.iter().map(|r| r.extend_left.min(chunk)).collect();
            let extend: u64 = self.plan.iter().map(|&e| u64::from(e)).sum();
            let latency = self.cfg.timing.step_latency(extend, self.batch.len() as u64);
            self.busy = true;
            self.step_started = now;
            out.next_step = Some(now + latency);
        }
        out
    }

    fn apply_step(&mut self, now: SimTime, log: &mut EventLog, out: &mut StepOutcome) {
        let mut per_client: BTreeMap<ClientId, u32> = BTreeMap::new();
        let extend_computed: u32 = self.plan.iter().sum();
        let mut growth = 0u64;
        for (r, &done) in self.batch.iter_mut().zip(&self.plan) {
            r.extend_left -= done;
            if r.extend_left == 0 {
                let before = u64::from(self.reserve.max(r.generated));
                r.generated += 1;
                growth += u64::from(self.reserve.max(r.generated)) - before;
                if r.first_token.is_none() {
                    r.first_token = Some(now);
                }
                *per_client.entry(r.request.client).or_default() += 1;
            }
        }
        self.private_tokens += growth;
        if growth > 0 {
            // optimistic reserve: make room for decode growth from unpinned cache
            let over = self.pool_used().saturating_sub(self.pool);
            if over > 0 {
                self.cache.set_capacity(self.pool.saturating_sub(self.private_tokens));
                let ev = self.cache.evict_lru(over);
                for e in &ev {
                    log.push(now, Record::Evict { worker: self.id, path_len: e.path.len() as u32, tokens: e.tokens });
                }
                out.evicted.extend(ev);
            }
        }
        let outputs: Vec<StepOutput> = per_client
            .into_iter()
            .map(|(client, tokens)| StepOutput {
                client,
                tokens,
                counter: self.policy.on_step(client, tokens, self.weights),
            })
            .collect();
        log.push(
            now,
            Record::Step {
                worker: self.id,
                started: self.step_started,
                batch_size: self.batch.len() as u32,
                extend_computed,
                queued: self.queue.len() as u32,
                pool_used: self.pool_used() as u32,
                outputs,
            },
        );
    }

    fn retire(&mut self, now: SimTime, log: &mut EventLog, out: &mut StepOutcome) {
        let mut kept = Vec::with_capacity(self.batch.len());
        for r in std::mem::take(&mut self.batch) {
            if r.generated >= r.target {
                self.cache.unpin(r.node);
                self.private_tokens -= self.private_of(r.generated);
                log.push(
                    now,
                    Record::Finish {
                        request: r.request.id,
                        client: r.request.client,
                        worker: self.id,
                        output_len: r.generated,
                        first_token: r.first_token.unwrap_or(now),
                    },
                );
                self.policy.on_finish(r.request.client);
                out.finished.push(Finished {
                    output_len: r.generated,
                    request: r.request,
                });
            } else {
                kept.push(r);
            }
        }
        self.batch = kept;
    }

    /// Pre-order dump of the local cache.
    pub fn cache_dump(&self) -> Vec<crate::radix::DumpEntry> {
        self.cache.dump()
    }
}

struct Ctx<'a> {
    worker: &'a mut Worker,
    now: SimTime,
    log: &'a mut EventLog,
    evicted: Vec<Evicted>,
}

impl Ctx<'_> {
    fn position(&self, id: RequestId) -> usize {
        self.worker
            .queue
            .iter()
            .position(|q| q.request.id == id)
            .expect("policy referenced a request that is not queued")
    }
}

impl Admission for Ctx<'_> {
    fn candidates(&self) -> Vec<Candidate> {
        self.worker
            .queue
            .iter()
            .map(|q| Candidate {
                id: q.request.id,
                client: q.request.client,
                input_len: q.request.input.len() as u32,
                arrival: q.arrival,
            })
            .collect()
    }

    fn peek_match(&self, id: RequestId) -> u32 {
        let q = &self.worker.queue[self.position(id)];
        self.worker.cache.peek_match(&q.request.input)
    }

    fn can_add(&self, id: RequestId) -> bool {
        self.worker.fits(&self.worker.queue[self.position(id)].request)
    }

    fn admit(&mut self, id: RequestId, charge: &mut dyn FnMut(u32) -> Option<i64>) -> u32 {
        let Queued { request, .. } = self.worker.queue.remove(self.position(id));
        let w = &mut *self.worker;
        let now = self.now;
        let matched = w.cache.match_prefix(&request.input, now).len;
        let private = u64::from(w.reserve);
        w.cache.set_capacity(w.pool.saturating_sub(w.private_tokens + private));
        let ins = w
            .cache
            .insert(&request.input, now)
            .expect("admission check guarantees room after eviction");
        for e in &ins.evicted {
            self.log.push(now, Record::Evict { worker: w.id, path_len: e.path.len() as u32, tokens: e.tokens });
        }
        self.evicted.extend(ins.evicted);
        w.cache.pin(ins.node);
        w.private_tokens += private;
        let input_len = request.input.len() as u32;
        let extend = input_len - matched;
        let counter = charge(extend);
        self.log.push(
            now,
            Record::Admit {
                request: request.id,
                client: request.client,
                worker: w.id,
                input_len,
                matched,
                extend,
                counter,
            },
        );
        let target = request.true_output_len.min(w.l_output).max(1);
        w.batch.push(Running {
            node: ins.node,
            extend_left: extend,
            generated: 0,
            target,
            first_token: None,
            request,
        });
        extend
    }

    fn refilled(&mut self, quantum: i64, counters: Vec<(ClientId, i64)>) {
        self.log.push(
            self.now,
            Record::Refill {
                worker: self.worker.id,
                quantum,
                counters,
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local::LocalPolicyConfig;
    use crate::request::{Release, TokenSeq};

    fn params(m: u32) -> SystemParams {
        SystemParams {
            l_input: 64,
            l_output: 8,
            max_batch_tokens: m,
            ..SystemParams::default()
        }
    }

    fn req(id: u64, client: u32, input: Vec<u32>, out: u32) -> Request {
        Request {
            id: RequestId(id),
            client: ClientId(client),
            input: TokenSeq::from(input),
            true_output_len: out,
            release: Release::At(SimTime::ZERO),
        }
    }

    fn worker(m: u32, policy: LocalPolicyConfig) -> Worker {
        let p = params(m);
        Worker::new(WorkerId(0), &p, WorkerConfig::default(), policy.build(&p))
    }

    /// Steps the worker until it goes idle; returns finish order and end time.
    fn drain(w: &mut Worker, log: &mut EventLog) -> (Vec<u64>, SimTime) {
        let mut now = SimTime::ZERO;
        let mut done = Vec::new();
        loop {
            let out = w.on_step_complete(now, log);
            done.extend(out.finished.iter().map(|f| f.request.id.0));
            match out.next_step {
                Some(t) => now = t,
                None => return (done, now),
            }
        }
    }

    #[test]
    fn latency_model() {
        let t = StepTiming::default();
        assert_eq!(t.step_latency(0, 0), SimTime(5_000));
        assert_eq!(t.step_latency(10, 0).0 - t.step_latency(0, 0).0, 10 * t.prefill_us_per_token);
        assert_eq!(t.step_latency(20, 0).0 - t.step_latency(10, 0).0, 10 * t.prefill_us_per_token);
        assert_eq!(t.step_latency(0, 3), SimTime(5_000 + 1_200));
    }

    #[test]
    fn single_output_token_finishes_in_one_step() {
        let mut w = worker(1000, LocalPolicyConfig::Fcfs);
        let mut log = EventLog::new();
        w.enqueue(req(1, 0, vec![1, 2, 3], 1), SimTime::ZERO);
        let (done, end) = drain(&mut w, &mut log);
        assert_eq!(done, [1]);
        assert_eq!(end, StepTiming::default().step_latency(3, 1));
        assert_eq!(w.pool_used(), 3);
        assert_eq!(w.cache().evictable_tokens(), 3);
    }

    #[test]
    fn can_add_examples() {
        // pool 20, reserve 8: a cold 10-token request needs 18
        let mut w = worker(20, LocalPolicyConfig::Fcfs);
        let mut log = EventLog::new();
        w.enqueue(req(1, 0, (1..=10).collect(), 8), SimTime::ZERO);
        assert_eq!(w.admissible_count(), 1);
        w.on_step_complete(SimTime::ZERO, &mut log);
        // full: 10 cached + 8 reserved; a cold copy does not fit, a cached one does
        w.enqueue(req(2, 0, (1..=10).collect(), 8), SimTime::ZERO);
        w.enqueue(req(3, 0, (21..=30).collect(), 8), SimTime::ZERO);
        assert_eq!(w.admissible_count(), 0);

        let mut w = worker(30, LocalPolicyConfig::Fcfs);
        w.enqueue(req(1, 0, (1..=10).collect(), 8), SimTime::ZERO);
        w.on_step_complete(SimTime::ZERO, &mut log);
        w.enqueue(req(2, 0, (1..=10).collect(), 8), SimTime::ZERO);
        w.enqueue(req(3, 0, (21..=30).collect(), 8), SimTime::ZERO);
        // 12 free: cached copy needs 8, cold copy needs 18
        assert_eq!(w.admissible_count(), 1);
    }

    #[test]
    fn batch_of_k_ledgers_k_tokens_per_step() {
        let mut w = worker(1000, LocalPolicyConfig::Fcfs);
        let mut log = EventLog::new();
        for i in 0..3 {
            w.enqueue(req(i, i as u32, vec![100 + i as u32], 4), SimTime::ZERO);
        }
        drain(&mut w, &mut log);
        let steps: Vec<u32> = log
            .records()
            .iter()
            .filter_map(|r| match &r.event {
                Record::Step { outputs, .. } => Some(outputs.iter().map(|o| o.tokens).sum()),
                _ => None,
            })
            .collect();
        assert_eq!(steps, [3, 3, 3, 3]);
    }

    #[test]
    fn full_batch_throughput_matches_closed_form() {
        let p = params(100_000);
        let cfg = WorkerConfig::default();
        let mut w = Worker::new(WorkerId(0), &p, cfg, LocalPolicyConfig::Fcfs.build(&p));
        let mut log = EventLog::new();
        let k = 16u64;
        for i in 0..k {
            // one-token inputs: prefill cost is negligible next to decode
            w.enqueue(req(i, 0, vec![1000 + i as u32], 8), SimTime::ZERO);
        }
        let (_, end) = drain(&mut w, &mut log);
        let t = cfg.timing;
        let measured = (k * 8) as f64 / end.as_secs_f64();
        let closed = k as f64 / (t.step_latency(0, k).as_secs_f64());
        assert!((measured - closed).abs() / closed < 0.01, "{measured} vs {closed}");
    }

    #[test]
    fn cache_hits_shrink_makespan_by_avoided_prefill() {
        let run = |shared: bool| {
            let p = params(100_000);
            let mut w = Worker::new(WorkerId(0), &p, WorkerConfig::default(), LocalPolicyConfig::Fcfs.build(&p));
            let mut log = EventLog::new();
            let mut now = SimTime::ZERO;
            for i in 0..3u32 {
                let input: Vec<u32> = if shared { (0..40).chain([500 + i]).collect() } else { (0..41).map(|t| t + 100 * i).collect() };
                w.enqueue(req(u64::from(i), 0, input, 1), now);
                while let Some(t) = w.on_step_complete(now, &mut log).next_step {
                    now = t;
                }
            }
            now
        };
        let t = StepTiming::default();
        // 3 sequential requests, 1 step each; sharing saves 2 * 40 prefill tokens
        assert_eq!(run(false), SimTime(3 * t.step_latency(41, 1).0));
        assert_eq!(run(true).0, run(false).0 - 80 * t.prefill_us_per_token);
    }

    #[test]
    fn finishing_sharers_release_prefix_refs() {
        let mut w = worker(1000, LocalPolicyConfig::Fcfs);
        let mut log = EventLog::new();
        w.enqueue(req(1, 0, vec![1, 2, 3, 4], 1), SimTime::ZERO);
        w.enqueue(req(2, 0, vec![1, 2, 3, 5], 2), SimTime::ZERO);
        w.enqueue(req(3, 0, vec![1, 2, 3, 6], 2), SimTime::ZERO);
        let out = w.on_step_complete(SimTime::ZERO, &mut log);
        let prefix_ref = |w: &Worker| w.cache_dump().iter().find(|d| d.path == [1, 2, 3]).unwrap().ref_count;
        assert_eq!(prefix_ref(&w), 3);
        let out = w.on_step_complete(out.next_step.unwrap(), &mut log);
        assert_eq!(out.finished.len(), 1);
        assert_eq!(prefix_ref(&w), 2);
        let out = w.on_step_complete(out.next_step.unwrap(), &mut log);
        assert_eq!(out.finished.len(), 2);
        assert_eq!(prefix_ref(&w), 0);
        assert_eq!(w.pool_used(), 6);
    }

    #[test]
    fn chunked_prefill_delays_first_token() {
        let p = params(1000);
        let cfg = WorkerConfig {
            prefill_chunk: Some(4),
            ..WorkerConfig::default()
        };
        let mut w = Worker::new(WorkerId(0), &p, cfg, LocalPolicyConfig::Fcfs.build(&p));
        let mut log = EventLog::new();
        w.enqueue(req(1, 0, (1..=10).collect(), 1), SimTime::ZERO);
        drain(&mut w, &mut log);
        let extends: Vec<u32> = log
            .records()
            .iter()
            .filter_map(|r| match r.event {
                Record::Step { extend_computed, .. } => Some(extend_computed),
                _ => None,
            })
            .collect();
        assert_eq!(extends, [4, 4, 2]);
    }

    #[test]
    fn output_truncated_at_l_output() {
        let mut w = worker(1000, LocalPolicyConfig::Fcfs);
        let mut log = EventLog::new();
        w.enqueue(req(1, 0, vec![1], 50), SimTime::ZERO);
        drain(&mut w, &mut log);
        assert!(log.records().iter().any(|r| matches!(r.event, Record::Finish { output_len: 8, .. })));
    }
}
