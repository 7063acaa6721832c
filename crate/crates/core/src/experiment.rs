//! Experiment configs and the run / compare / sweep drivers behind the CLI.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{simulate, ClusterConfig};
use crate::cost::{CostWeights, ServiceLog};
use crate::global::GlobalPolicyConfig;
use crate::local::LocalPolicyConfig;
use crate::metrics::{analyze, write_csv, write_reports_csv, write_summary_table, RunMetrics, Summary, VerifyConfig};
use crate::request::{materialize, read_trace, write_trace, TraceRecord};
use crate::sim::{EventLog, SimTime};
use crate::workload::{generate_trace, ClientProfile};
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Replay this trace file instead of generating from `clients`.
    pub trace: Option<PathBuf>,
    pub clients: Vec<ClientProfile>,
}

/// Grid of values to sweep; an empty list keeps the base config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Local deficit quantum, in multiples of U.
    pub local_quantum: Vec<f64>,
    /// Global deficit quantum, in multiples of U.
    pub global_quantum: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub horizon_s: f64,
    pub out_dir: Option<PathBuf>,
    pub cluster: ClusterConfig,
    pub workload: WorkloadConfig,
    pub verify: VerifyConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            horizon_s: 60.0,
            out_dir: None,
            cluster: ClusterConfig::default(),
            workload: WorkloadConfig::default(),
            verify: VerifyConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, SimError> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let mut cfg = Self::from_toml_str(&fs::read_to_string(path)?)?;
        // trace paths are relative to the config file
        if let (Some(t), Some(dir)) = (&cfg.workload.trace, path.parent()) {
            if t.is_relative() {
                cfg.workload.trace = Some(dir.join(t));
            }
        }
        Ok(cfg)
    }

    /// Every default spelled out.
    pub fn to_toml_string(&self) -> Result<String, SimError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = self.cluster.validate().into_iter().map(|e| format!("cluster: {e}")).collect();
        if !(self.horizon_s.is_finite() && self.horizon_s > 0.0) {
            errs.push("horizon_s must be positive".into());
        }
        if self.workload.trace.is_none() {
            if self.workload.clients.is_empty() {
                errs.push("workload: needs clients or a trace".into());
            }
            for (i, c) in self.workload.clients.iter().enumerate() {
                errs.extend(c.validate(&self.cluster.system, &format!("workload.clients[{i}]")));
            }
        }
        if self.verify.rate_window_us == 0 {
            errs.push("verify.rate_window_us must be positive".into());
        }
        for q in self.sweep.local_quantum.iter().chain(&self.sweep.global_quantum) {
            if !(q.is_finite() && *q > 0.0) {
                errs.push(format!("sweep: quantum {q} must be positive"));
            }
        }
        errs
    }

    pub fn check(&self) -> Result<(), SimError> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(errs))
        }
    }

    pub fn horizon(&self) -> SimTime {
        SimTime::from_secs_f64(self.horizon_s)
    }

    pub fn trace(&self) -> Result<Vec<TraceRecord>, SimError> {
        match &self.workload.trace {
            Some(path) => read_trace(BufReader::new(File::open(path)?)),
            None => generate_trace(&self.workload.clients, &self.cluster.system, self.horizon(), self.seed),
        }
    }

    /// The config with one sweep point applied.
    fn at_point(&self, local_q: Option<f64>, global_q: Option<f64>, seed: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.seed = seed;
        if let (Some(q), LocalPolicyConfig::Dlpm { quantum }) = (local_q, &mut c.cluster.local) {
            *quantum = q;
        }
        if let (Some(q), GlobalPolicyConfig::D2lpm { quantum }) = (global_q, &mut c.cluster.global) {
            *quantum = q;
        }
        c.sweep = SweepConfig::default();
        c
    }
}

/// Parses `dlpm[:quantum]`, `lpm`, `fcfs` or `vtc`.
pub fn parse_local_policy(s: &str) -> Result<LocalPolicyConfig, SimError> {
    let (name, arg) = split_arg(s)?;
    let p = match (name, arg) {
        ("dlpm", q) => LocalPolicyConfig::Dlpm { quantum: q.unwrap_or_else(LocalPolicyConfig::default_quantum) },
        ("lpm", None) => LocalPolicyConfig::Lpm,
        ("fcfs", None) => LocalPolicyConfig::Fcfs,
        ("vtc", None) => LocalPolicyConfig::Vtc,
        _ => return Err(SimError::InvalidConfig(vec![format!("unknown local policy `{s}`")])),
    };
    check_errs(p.validate()).map(|_| p)
}

/// Parses `d2lpm[:quantum]`, `round_robin`, `per_client_rr` or
/// `threshold[:theta]`.
pub fn parse_global_policy(s: &str) -> Result<GlobalPolicyConfig, SimError> {
    let (name, arg) = split_arg(s)?;
    let p = match (name, arg) {
        ("d2lpm", q) => GlobalPolicyConfig::D2lpm { quantum: q.unwrap_or_else(GlobalPolicyConfig::default_quantum) },
        ("round_robin" | "rr", None) => GlobalPolicyConfig::RoundRobin,
        ("per_client_rr", None) => GlobalPolicyConfig::PerClientRr,
        ("threshold", t) => GlobalPolicyConfig::Threshold { theta: t.unwrap_or_else(GlobalPolicyConfig::default_theta) },
        _ => return Err(SimError::InvalidConfig(vec![format!("unknown global policy `{s}`")])),
    };
    check_errs(p.validate()).map(|_| p)
}

fn split_arg(s: &str) -> Result<(&str, Option<f64>), SimError> {
    match s.split_once(':') {
        None => Ok((s, None)),
        Some((n, a)) => a
            .parse()
            .map(|v| (n, Some(v)))
            .map_err(|_| SimError::InvalidConfig(vec![format!("bad policy parameter in `{s}`")])),
    }
}

fn check_errs(errs: Vec<String>) -> Result<(), SimError> {
    if errs.is_empty() {
        Ok(())
    } else {
        Err(SimError::InvalidConfig(errs))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub log: EventLog,
    pub metrics: RunMetrics,
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, SimError> {
    cfg.check()?;
    let trace = cfg.trace()?;
    run_trace(cfg, trace)
}

fn run_trace(cfg: &ExperimentConfig, trace: Vec<TraceRecord>) -> Result<RunOutput, SimError> {
    let requests = materialize(&trace, &cfg.cluster.system)?;
    let log = simulate(&cfg.cluster, cfg.seed, requests, cfg.horizon())?;
    let metrics = analyze(&log, &cfg.verify)?;
    Ok(RunOutput { trace, log, metrics })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, SimError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Artifact files written by [`write_artifacts`].
pub const ARTIFACTS: [&str; 10] = [
    "config.toml",
    "trace.jsonl",
    "log.jsonl",
    "summary.json",
    "summary.txt",
    "clients.csv",
    "workers.csv",
    "dispatch.csv",
    "service.csv",
    "bounds.csv",
];

pub fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    // where the artifacts went is not part of the experiment
    let saved = ExperimentConfig {
        out_dir: None,
        ..cfg.clone()
    };
    fs::write(dir.join("config.toml"), saved.to_toml_string()?)?;
    let mut w = create(dir, "trace.jsonl")?;
    write_trace(&out.trace, &mut w)?;
    w.flush()?;
    let mut w = create(dir, "log.jsonl")?;
    out.log.write_jsonl(&mut w)?;
    w.flush()?;
    write_metrics(dir, &out.log, &out.metrics)
}

/// The metric artifacts alone (what `verify` regenerates from a log).
pub fn write_metrics(dir: &Path, log: &EventLog, m: &RunMetrics) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    let mut w = create(dir, "summary.json")?;
    serde_json::to_writer_pretty(&mut w, &m.summary)?;
    writeln!(w)?;
    w.flush()?;
    fs::write(dir.join("summary.txt"), format!("{}\n", m.summary))?;
    write_csv(&m.clients, create(dir, "clients.csv")?)?;
    write_csv(&m.workers, create(dir, "workers.csv")?)?;
    write_csv(&m.dispatch, create(dir, "dispatch.csv")?)?;
    let info = log.run_info().expect("analyzed logs have a header");
    let weights = CostWeights {
        extend: info.w_extend,
        output: info.w_output,
    };
    ServiceLog::from_log(log, weights).write_csv(create(dir, "service.csv")?)?;
    write_reports_csv(&m.bounds, create(dir, "bounds.csv")?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub requests: u64,
    pub summary: Summary,
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], w: W) -> Result<(), SimError> {
    write_summary_table(
        &["label", "requests"],
        rows.iter()
            .map(|r| (vec![r.label.clone(), r.requests.to_string()], r.summary.clone())),
        w,
    )
}

/// Runs each config on one shared trace. The configs must describe the same
/// workload (seed, horizon, clients and system parameters); only policy
/// stanzas may differ.
pub fn compare(configs: &[(String, ExperimentConfig)]) -> Result<Vec<ComparisonRow>, SimError> {
    let Some((_, first)) = configs.first() else {
        return Ok(Vec::new());
    };
    for (label, c) in configs {
        c.check()?;
        let mut why = Vec::new();
        if c.seed != first.seed {
            why.push("seed");
        }
        if c.horizon_s != first.horizon_s {
            why.push("horizon");
        }
        if c.workload != first.workload {
            why.push("workload");
        }
        if c.cluster.system != first.cluster.system {
            why.push("system parameters");
        }
        if !why.is_empty() {
            return Err(SimError::WorkloadMismatch(format!("`{label}` differs in {}", why.join(", "))));
        }
    }
    let trace = first.trace()?;
    configs
        .par_iter()
        .map(|(label, c)| {
            let out = run_trace(c, trace.clone())?;
            Ok(ComparisonRow {
                label: label.clone(),
                requests: trace.len() as u64,
                summary: out.metrics.summary,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub local_quantum: Option<f64>,
    pub global_quantum: Option<f64>,
    /// Largest service gap between two backlogged clients.
    pub max_service_gap: Option<f64>,
    pub summary: Summary,
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<(), SimError> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    write_summary_table(
        &["seed", "local_quantum", "global_quantum", "max_service_gap"],
        rows.iter().map(|r| {
            (
                vec![r.seed.to_string(), opt(r.local_quantum), opt(r.global_quantum), opt(r.max_service_gap)],
                r.summary.clone(),
            )
        }),
        w,
    )
}

/// One run per grid point, in parallel; rows come back in grid order.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, SimError> {
    cfg.check()?;
    let opt = |v: &[f64]| -> Vec<Option<f64>> {
        if v.is_empty() {
            vec![None]
        } else {
            v.iter().copied().map(Some).collect()
        }
    };
    let seeds = if cfg.sweep.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.sweep.seeds.clone()
    };
    let mut points = Vec::new();
    for &seed in &seeds {
        for lq in opt(&cfg.sweep.local_quantum) {
            for gq in opt(&cfg.sweep.global_quantum) {
                points.push((seed, lq, gq));
            }
        }
    }
    points
        .par_iter()
        .map(|&(seed, lq, gq)| {
            let c = cfg.at_point(lq, gq, seed);
            let out = run(&c)?;
            let gap = out
                .metrics
                .bounds
                .iter()
                .find(|b| b.name.starts_with("service_pair"))
                .filter(|b| b.applicable)
                .map(|b| b.measured);
            Ok(SweepRow {
                seed,
                local_quantum: match c.cluster.local {
                    LocalPolicyConfig::Dlpm { quantum } => Some(quantum),
                    _ => None,
                },
                global_quantum: match c.cluster.global {
                    GlobalPolicyConfig::D2lpm { quantum } => Some(quantum),
                    _ => None,
                },
                max_service_gap: gap,
                summary: out.metrics.summary,
            })
        })
        .collect()
}
