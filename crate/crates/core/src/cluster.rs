//! The event loop tying dispatcher and workers together.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::compute_u;
use crate::global::{Dispatcher, GlobalPolicyConfig};
use crate::local::{scale_u, LocalPolicyConfig};
use crate::radix::Evicted;
use crate::request::{Release, Request, RequestId, SystemParams, WorkerId};
use crate::sim::{Event, EventKind, EventLog, EventQueue, Record, RunInfo, SimTime};
use crate::worker::{Worker, WorkerConfig};
use crate::SimError;

/// Everything that shapes a run except the workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub system: SystemParams,
    pub worker: WorkerConfig,
    pub local: LocalPolicyConfig,
    pub global: GlobalPolicyConfig,
    /// Delay between a local eviction and the dispatcher learning of it.
    pub eviction_notice_delay_us: u64,
    /// Quantum, in multiples of U, that bound checks use when the local
    /// policy has none of its own.
    pub reference_quantum: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            system: SystemParams::default(),
            worker: WorkerConfig::default(),
            local: LocalPolicyConfig::default(),
            global: GlobalPolicyConfig::default(),
            eviction_notice_delay_us: 0,
            reference_quantum: 0.25,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.system.validate();
        errs.extend(self.worker.validate(&self.system));
        errs.extend(self.local.validate());
        errs.extend(self.global.validate());
        if !(self.reference_quantum.is_finite() && self.reference_quantum > 0.0) {
            errs.push("reference_quantum must be positive".into());
        }
        errs
    }

    /// Local quantum in service units (the reference one for policies
    /// without a quantum).
    pub fn local_quantum_units(&self) -> i64 {
        self.local
            .quantum_units(&self.system)
            .unwrap_or_else(|| scale_u(self.reference_quantum, &self.system))
    }

    pub fn run_info(&self, seed: u64, horizon: SimTime) -> RunInfo {
        RunInfo {
            seed,
            workers: self.system.workers,
            l_input: self.system.l_input,
            l_output: self.system.l_output,
            max_batch_tokens: self.system.max_batch_tokens,
            w_extend: self.system.weights.extend,
            w_output: self.system.weights.output,
            u: compute_u(&self.system),
            local_policy: self.local.name().into(),
            quantum_u: self.local_quantum_units(),
            global_policy: self.global.name().into(),
            quantum_w: self.global.quantum_units(&self.system),
            horizon,
        }
    }
}

#[derive(Debug)]
enum Payload {
    Arrival(Request),
    Step(WorkerId),
    Finished {
        request: Request,
        worker: WorkerId,
        output_len: u32,
    },
    Evicted {
        worker: WorkerId,
        evicted: Evicted,
        at: SimTime,
    },
}

/// One isolated simulated world.
#[derive(Debug)]
pub struct Simulation {
    events: EventQueue<Payload>,
    workers: Vec<Worker>,
    dispatcher: Dispatcher,
    log: EventLog,
    children: BTreeMap<RequestId, Vec<Request>>,
    kick_pending: Vec<bool>,
    notice_delay: SimTime,
}

impl Simulation {
    pub fn new(cfg: &ClusterConfig, seed: u64, requests: Vec<Request>, horizon: SimTime) -> Result<Self, SimError> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(SimError::InvalidConfig(errs));
        }
        let p = cfg.system;
        let workers = (0..p.workers)
            .map(|w| Worker::new(WorkerId(w), &p, cfg.worker, cfg.local.build(&p)))
            .collect();
        let mut sim = Simulation {
            events: EventQueue::new(),
            workers,
            dispatcher: cfg.global.build(&p),
            log: EventLog::new(),
            children: BTreeMap::new(),
            kick_pending: vec![false; p.workers as usize],
            notice_delay: SimTime(cfg.eviction_notice_delay_us),
        };
        sim.log.push(SimTime::ZERO, Record::RunInfo(cfg.run_info(seed, horizon)));
        for r in requests {
            match r.release {
                Release::At(t) => {
                    sim.events.schedule(t, EventKind::RequestArrival, Payload::Arrival(r))?;
                }
                Release::AfterParent { parent, .. } => sim.children.entry(parent).or_default().push(r),
            }
        }
        Ok(sim)
    }

    pub fn now(&self) -> SimTime {
        self.events.now()
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }

    pub fn workers(&self) -> &[Worker] {
        &self.workers
    }

    pub fn dispatcher(&self) -> &Dispatcher {
        &self.dispatcher
    }

    /// Processes every event up to and including `t_end`, then moves the
    /// clock to `t_end`.
    pub fn run_until(&mut self, t_end: SimTime) -> Result<(), SimError> {
        while let Some(t) = self.events.peek_time() {
            if t > t_end {
                break;
            }
            if t > self.events.now() {
                self.check_idle();
            }
            let ev = self.events.pop_until(t_end).expect("peeked");
            self.handle(ev)?;
        }
        if t_end > self.events.now() {
            self.check_idle();
            self.events.advance_to(t_end);
        }
        Ok(())
    }

    /// Records workers left idle with work queued as virtual time moves on.
    fn check_idle(&mut self) {
        let now = self.events.now();
        for w in &self.workers {
            if !w.is_busy() && w.queue_len() > 0 {
                self.log.push(
                    now,
                    Record::IdleWithQueue {
                        worker: w.id(),
                        queued: w.queue_len() as u32,
                        admissible: w.admissible_count(),
                    },
                );
            }
        }
    }

    fn handle(&mut self, ev: Event<Payload>) -> Result<(), SimError> {
        let now = ev.time;
        match ev.payload {
            Payload::Arrival(r) => self.on_arrival(now, r)?,
            Payload::Step(w) => self.on_step(now, w)?,
            Payload::Finished {
                request,
                worker,
                output_len,
            } => {
                let counter = self.dispatcher.on_finish(&request, worker, output_len, now);
                self.log.push(
                    now,
                    Record::FinishNotice {
                        request: request.id,
                        client: request.client,
                        worker,
                        counter,
                    },
                );
                for child in self.children.remove(&request.id).unwrap_or_default() {
                    let delay = match child.release {
                        Release::AfterParent { delay, .. } => delay,
                        Release::At(_) => SimTime::ZERO,
                    };
                    self.events.schedule(now + delay, EventKind::RequestArrival, Payload::Arrival(child))?;
                }
            }
            Payload::Evicted { worker, evicted, at } => {
                let cleared = self.dispatcher.on_evicted(worker, &evicted, at);
                self.log.push(
                    now,
                    Record::EvictNotice {
                        worker,
                        path_len: evicted.path.len() as u32,
                        retained: evicted.retained,
                        nodes_cleared: cleared,
                    },
                );
            }
        }
        Ok(())
    }

    fn on_arrival(&mut self, now: SimTime, r: Request) -> Result<(), SimError> {
        self.log.push(
            now,
            Record::Arrival {
                request: r.id,
                client: r.client,
                input_len: r.input.len() as u32,
                parent: r.parent(),
            },
        );
        let d = self.dispatcher.dispatch(&r);
        for counters in d.refills {
            self.log.push(
                now,
                Record::GlobalRefill {
                    client: r.client,
                    quantum: self.dispatcher.quantum().unwrap_or(0),
                    counters,
                },
            );
        }
        self.log.push(
            now,
            Record::Dispatch {
                request: r.id,
                client: r.client,
                worker: d.worker,
                match_len: d.match_len,
                candidates: d.candidates,
                counter: d.counter,
            },
        );
        let wi = d.worker.0 as usize;
        self.workers[wi].enqueue(r, now);
        if !self.workers[wi].is_busy() && !self.kick_pending[wi] {
            self.kick_pending[wi] = true;
            self.events.schedule(now, EventKind::StepComplete, Payload::Step(d.worker))?;
        }
        Ok(())
    }

    fn on_step(&mut self, now: SimTime, w: WorkerId) -> Result<(), SimError> {
        let wi = w.0 as usize;
        self.kick_pending[wi] = false;
        let out = self.workers[wi].on_step_complete(now, &mut self.log);
        for f in out.finished {
            self.events.schedule(
                now,
                EventKind::RequestFinished,
                Payload::Finished {
                    request: f.request,
                    worker: w,
                    output_len: f.output_len,
                },
            )?;
        }
        for evicted in out.evicted {
            self.events.schedule(
                now + self.notice_delay,
                EventKind::EvictionNotice,
                Payload::Evicted { worker: w, evicted, at: now },
            )?;
        }
        if let Some(t) = out.next_step {
            self.events.schedule(t, EventKind::StepComplete, Payload::Step(w))?;
        }
        Ok(())
    }
}

/// Runs `requests` to `horizon` and returns the log.
pub fn simulate(cfg: &ClusterConfig, seed: u64, requests: Vec<Request>, horizon: SimTime) -> Result<EventLog, SimError> {
    let mut sim = Simulation::new(cfg, seed, requests, horizon)?;
    sim.run_until(horizon)?;
    Ok(sim.into_log())
}
