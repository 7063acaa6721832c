use std::collections::BTreeSet;
use std::io::BufReader;

use dlpm_core::cluster::ClusterConfig;
use dlpm_core::experiment::{run, ExperimentConfig, RunOutput, WorkloadConfig};
use dlpm_core::global::GlobalPolicyConfig;
use dlpm_core::local::LocalPolicyConfig;
use dlpm_core::request::{read_trace, write_trace, RequestId, SystemParams};
use dlpm_core::sim::{EventLog, Record};
use dlpm_core::workload::{ClientProfile, OutputDist, ProgramShape};
use sha2::{Digest, Sha256};

fn params(workers: u32) -> SystemParams {
    SystemParams {
        l_input: 512,
        l_output: 32,
        max_batch_tokens: 2048,
        workers,
        ..SystemParams::default()
    }
}

fn clients() -> Vec<ClientProfile> {
    vec![
        ClientProfile {
            rate: 30.0,
            prefix_len: 256,
            suffix_len: 32,
            output: OutputDist::Constant { len: 12 },
            ..ClientProfile::default()
        },
        ClientProfile {
            rate: 3.0,
            cv: 2.0,
            shape: ProgramShape::Tree { branches: 2, depth: 2 },
            prefix_len: 128,
            suffix_len: 64,
            output: OutputDist::LogNormal { mean: 16.0, sigma: 0.6 },
            think_time_us: 5_000,
            ..ClientProfile::default()
        },
        ClientProfile {
            rate: 15.0,
            prefix_len: 0,
            suffix_len: 200,
            output: OutputDist::Constant { len: 24 },
            ..ClientProfile::default()
        },
    ]
}

fn config(seed: u64, workers: u32, local: LocalPolicyConfig, global: GlobalPolicyConfig) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        horizon_s: 4.0,
        cluster: ClusterConfig {
            system: params(workers),
            local,
            global,
            ..ClusterConfig::default()
        },
        workload: WorkloadConfig {
            trace: None,
            clients: clients(),
        },
        ..ExperimentConfig::default()
    }
}

fn policy_grid() -> Vec<ExperimentConfig> {
    let mut v = Vec::new();
    for local in [
        LocalPolicyConfig::Dlpm { quantum: 0.25 },
        LocalPolicyConfig::Lpm,
        LocalPolicyConfig::Fcfs,
        LocalPolicyConfig::Vtc,
    ] {
        v.push(config(9, 1, local, GlobalPolicyConfig::RoundRobin));
    }
    for global in [
        GlobalPolicyConfig::D2lpm { quantum: 1.0 },
        GlobalPolicyConfig::RoundRobin,
        GlobalPolicyConfig::PerClientRr,
        GlobalPolicyConfig::Threshold { theta: 0.5 },
    ] {
        v.push(config(9, 3, LocalPolicyConfig::Dlpm { quantum: 0.25 }, global));
    }
    v
}

fn hash(log: &EventLog) -> String {
    Sha256::digest(log.to_jsonl_string().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[test]
fn same_seed_same_log() {
    for cfg in policy_grid() {
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(hash(&a.log), hash(&b.log), "{:?}", cfg.cluster);
    }
    let a = run(&config(1, 2, LocalPolicyConfig::Dlpm { quantum: 0.25 }, GlobalPolicyConfig::D2lpm { quantum: 1.0 })).unwrap();
    let b = run(&config(2, 2, LocalPolicyConfig::Dlpm { quantum: 0.25 }, GlobalPolicyConfig::D2lpm { quantum: 1.0 })).unwrap();
    assert_ne!(hash(&a.log), hash(&b.log));
}

#[test]
fn log_round_trips_through_jsonl() {
    let out = run(&config(4, 2, LocalPolicyConfig::Vtc, GlobalPolicyConfig::PerClientRr)).unwrap();
    let text = out.log.to_jsonl_string();
    let back = EventLog::read_jsonl(BufReader::new(text.as_bytes())).unwrap();
    assert_eq!(back, out.log);

    let mut buf = Vec::new();
    write_trace(&out.trace, &mut buf).unwrap();
    assert_eq!(read_trace(BufReader::new(buf.as_slice())).unwrap(), out.trace);
}

/// Structural invariants every run must satisfy, whatever the policy.
fn check_invariants(out: &RunOutput) {
    let info = out.log.run_info().unwrap();
    let pool = info.max_batch_tokens;
    let mut admitted = BTreeSet::new();
    let mut finished = BTreeSet::new();
    let mut last = None;
    for r in out.log.records() {
        assert!(last <= Some(r.stamp()), "log out of order at {:?}", r.stamp());
        last = Some(r.stamp());
        match &r.event {
            Record::Admit { request, extend, matched, input_len, .. } => {
                assert!(admitted.insert(*request), "{request:?} admitted twice");
                assert_eq!(extend + matched, *input_len);
            }
            Record::Step { pool_used, batch_size, .. } => {
                assert!(*pool_used <= pool, "pool {pool_used} > {pool}");
                assert!(*batch_size > 0);
            }
            Record::Finish { request, output_len, .. } => {
                assert!(admitted.contains(request));
                assert!(finished.insert(*request));
                assert!(*output_len >= 1 && *output_len <= info.l_output);
            }
            _ => {}
        }
    }
    for (id, lc) in out.log.lifecycles() {
        let chain = [lc.arrival, lc.dispatch, lc.admit, lc.first_token, lc.finish];
        let known: Vec<_> = chain.iter().flatten().collect();
        assert!(known.windows(2).all(|w| w[0] <= w[1]), "{id:?}: {lc:?}");
        // a stage is only reached after every earlier one
        let first_gap = chain.iter().position(Option::is_none).unwrap_or(chain.len());
        assert!(chain[first_gap..].iter().all(Option::is_none), "{id:?}: {lc:?}");
    }
    assert!(!finished.is_empty());
}

#[test]
fn every_policy_keeps_engine_invariants() {
    for cfg in policy_grid() {
        let out = run(&cfg).unwrap();
        check_invariants(&out);
        let wc = out.metrics.bounds.iter().find(|b| b.name == "work_conservation").unwrap();
        assert!(wc.pass, "{:?}: {}", cfg.cluster, wc.witness);
    }
}

#[test]
fn fcfs_admits_in_arrival_order() {
    let out = run(&config(3, 1, LocalPolicyConfig::Fcfs, GlobalPolicyConfig::RoundRobin)).unwrap();
    let arrivals: Vec<RequestId> = out
        .log
        .records()
        .iter()
        .filter_map(|r| match r.event {
            Record::Arrival { request, .. } => Some(request),
            _ => None,
        })
        .collect();
    let admits: Vec<RequestId> = out
        .log
        .records()
        .iter()
        .filter_map(|r| match r.event {
            Record::Admit { request, .. } => Some(request),
            _ => None,
        })
        .collect();
    assert!(admits.len() > 10);
    assert_eq!(admits, arrivals[..admits.len()]);
}

#[test]
fn one_client_with_huge_quantum_is_lpm() {
    let admissions = |local| {
        let mut cfg = config(5, 1, local, GlobalPolicyConfig::RoundRobin);
        cfg.workload.clients.truncate(1);
        cfg.workload.clients[0].prefix_pool = 6;
        let out = run(&cfg).unwrap();
        out.log
            .records()
            .iter()
            .filter_map(|r| match r.event {
                Record::Admit { request, matched, .. } => Some((r.time, request, matched)),
                _ => None,
            })
            .collect::<Vec<_>>()
    };
    let lpm = admissions(LocalPolicyConfig::Lpm);
    assert!(lpm.len() > 50);
    assert_eq!(admissions(LocalPolicyConfig::Dlpm { quantum: 1e6 }), lpm);
}

#[test]
fn guaranteed_bounds_hold_on_the_grid() {
    for cfg in policy_grid() {
        let out = run(&cfg).unwrap();
        let bad: Vec<_> = out.metrics.bounds.iter().filter(|b| b.is_violation()).collect();
        assert!(bad.is_empty(), "{:?}: {bad:?}", cfg.cluster);
    }
}

#[test]
fn trace_shape_is_stable() {
    let cfg = config(21, 1, LocalPolicyConfig::Fcfs, GlobalPolicyConfig::RoundRobin);
    let trace = cfg.trace().unwrap();
    for (i, r) in trace.iter().enumerate() {
        assert_eq!(r.id, i as u64);
    }
    // program roots arrive in order; children carry a think delay instead
    let roots: Vec<u64> = trace.iter().filter(|r| r.parent_id.is_none()).map(|r| r.arrival_time).collect();
    assert!(roots.windows(2).all(|w| w[0] <= w[1]));
    assert!(trace.iter().all(|r| r.parent_id.is_none_or(|p| p < r.id)));
    let per_client: Vec<usize> = (0..3).map(|c| trace.iter().filter(|r| r.client == c).count()).collect();
    assert_eq!(per_client, FROZEN_COUNTS);
}

// about rate × horizon each; a tree program is seven requests
const FROZEN_COUNTS: [usize; 3] = [105, 63, 61];
