//! `dlpm`: run, compare and sweep scheduling experiments, re-verify logs,
//! and generate traces.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dlpm_core::experiment::{
    compare, parse_global_policy, parse_local_policy, run, sweep, write_artifacts, write_comparison_csv, write_metrics,
    write_sweep_csv, ExperimentConfig,
};
use dlpm_core::metrics::{analyze, BoundReport, Summary, VerifyConfig};
use dlpm_core::request::write_trace;
use dlpm_core::sim::EventLog;
use dlpm_core::SimError;

#[derive(Parser)]
#[command(name = "dlpm", version, about = "Fair, prefix-aware LLM scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one config and write all artifacts.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run several configs (or policy variants of one) on the same trace.
    Compare {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Seed override for every config.
        #[arg(long)]
        seed: Option<u64>,
        /// Local policy variants, e.g. `dlpm:0.25`, `lpm`, `vtc`.
        #[arg(long = "local")]
        locals: Vec<String>,
        /// Global policy variants, e.g. `d2lpm:1`, `rr`, `threshold:0.5`.
        #[arg(long = "global")]
        globals: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the config's sweep grid.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute metrics and bound checks from an existing event log.
    Verify {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Width of the busy windows the capacity lower bound is measured over.
        #[arg(long, default_value_t = VerifyConfig::default().rate_window_us)]
        rate_window_us: u64,
    },
    /// Write the config's workload as a trace file.
    GenTrace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Local policy override, e.g. `dlpm:0.5`.
    #[arg(long)]
    local: Option<String>,
    /// Global policy override, e.g. `d2lpm:2`.
    #[arg(long)]
    global: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.local {
            cfg.cluster.local = parse_local_policy(p)?;
        }
        if let Some(p) = &self.global {
            cfg.cluster.global = parse_global_policy(p)?;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        cfg.check()?;
        Ok(cfg)
    }
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn print_bounds(bounds: &[BoundReport]) {
    for b in bounds.iter().filter(|b| b.applicable) {
        println!(
            "{:<24} {:>4} {:>14.3} <= {:<14.3} {}{}",
            b.name,
            if b.pass { "ok" } else { "FAIL" },
            b.measured,
            b.bound,
            b.witness,
            if b.guaranteed { "" } else { " (not guaranteed by policy)" }
        );
    }
}

fn exit_for(violations: usize) -> ExitCode {
    if violations == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("{violations} guaranteed bound(s) violated");
        ExitCode::from(2)
    }
}

/// Prints a table to stdout and, with an output directory, saves it there.
fn emit(out: Option<&Path>, name: &str, write: impl Fn(&mut dyn Write) -> Result<(), SimError>) -> Result<()> {
    write(&mut io::stdout().lock())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(name))?);
        write(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn violations(s: &Summary) -> usize {
    s.bounds_violated as usize
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { common } => {
            let cfg = common.load()?;
            let out = run(&cfg)?;
            let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
            write_artifacts(&dir, &cfg, &out).with_context(|| format!("writing {}", dir.display()))?;
            println!("{}", out.metrics.summary);
            print_bounds(&out.metrics.bounds);
            println!("artifacts in {}", dir.display());
            Ok(exit_for(violations(&out.metrics.summary)))
        }
        Command::Compare {
            configs,
            seed,
            locals,
            globals,
            out,
        } => {
            let mut runs = Vec::new();
            for path in &configs {
                let mut cfg = load(path)?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                if locals.is_empty() && globals.is_empty() {
                    runs.push((stem.clone(), cfg.clone()));
                }
                for l in &locals {
                    let mut c = cfg.clone();
                    c.cluster.local = parse_local_policy(l)?;
                    runs.push((format!("{stem}:{l}"), c));
                }
                for g in &globals {
                    let mut c = cfg.clone();
                    c.cluster.global = parse_global_policy(g)?;
                    runs.push((format!("{stem}:{g}"), c));
                }
            }
            let rows = compare(&runs)?;
            let bad = rows.iter().map(|r| violations(&r.summary)).sum();
            emit(out.as_deref(), "comparison.csv", |w| write_comparison_csv(&rows, w))?;
            Ok(exit_for(bad))
        }
        Command::Sweep { common } => {
            let cfg = common.load()?;
            let rows = sweep(&cfg)?;
            let bad = rows.iter().map(|r| violations(&r.summary)).sum();
            emit(cfg.out_dir.as_deref(), "sweep.csv", |w| write_sweep_csv(&rows, w))?;
            Ok(exit_for(bad))
        }
        Command::Verify {
            log,
            out,
            rate_window_us,
        } => {
            let file = File::open(&log).with_context(|| format!("opening {}", log.display()))?;
            let events = EventLog::read_jsonl(BufReader::new(file))?;
            if events.run_info().is_none() {
                bail!("{} has no run_info header", log.display());
            }
            let m = analyze(&events, &VerifyConfig { rate_window_us })?;
            if let Some(dir) = &out {
                write_metrics(dir, &events, &m)?;
            }
            println!("{}", m.summary);
            print_bounds(&m.bounds);
            Ok(exit_for(violations(&m.summary)))
        }
        Command::GenTrace { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let trace = cfg.trace()?;
            match out {
                Some(p) => {
                    let mut w = BufWriter::new(File::create(&p)?);
                    write_trace(&trace, &mut w)?;
                    w.flush()?;
                    eprintln!("{} requests written to {}", trace.len(), p.display());
                }
                None => write_trace(&trace, io::stdout().lock())?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
