//! Synthetic traces: Gamma-process arrivals, flat or tree-shaped programs
//! with shared prefixes, and misbehaving-client profiles.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use serde::{Deserialize, Serialize};

use crate::request::{SystemParams, TraceRecord};
use crate::sim::{RngStreams, SimTime};
use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProgramShape {
    Flat,
    /// `branches` children per node, `depth` levels below the root.
    Tree { branches: u32, depth: u32 },
}

impl ProgramShape {
    /// Requests per program: `1 + b + b^2 + ... + b^d`.
    pub fn size(&self) -> u64 {
        match *self {
            ProgramShape::Flat => 1,
            ProgramShape::Tree { branches, depth } => (0..=depth).map(|k| u64::from(branches).pow(k)).sum(),
        }
    }

    fn depth(&self) -> u32 {
        match *self {
            ProgramShape::Flat => 0,
            ProgramShape::Tree { depth, .. } => depth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutputDist {
    Constant { len: u32 },
    /// Log-normal with the given mean and log-space sigma, rounded, clamped
    /// to at least one token.
    LogNormal { mean: f64, sigma: f64 },
}

impl Default for OutputDist {
    fn default() -> Self {
        OutputDist::Constant { len: 64 }
    }
}

impl OutputDist {
    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        match *self {
            OutputDist::Constant { len } => len,
            OutputDist::LogNormal { mean, sigma } => {
                let mu = mean.ln() - sigma * sigma / 2.0;
                let d = LogNormal::new(mu, sigma).expect("validated");
                (d.sample(rng).round() as u32).max(1)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum S1Target {
    Rate,
    Branches,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Misbehavior {
    #[default]
    None,
    /// More requests: request rate or branch count times `factor`.
    S1 { factor: f64, target: S1Target },
    /// Longer prefix: prefix length times `factor`.
    S2 { factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientProfile {
    /// Programs per second.
    pub rate: f64,
    /// Coefficient of variation of inter-arrival times.
    pub cv: f64,
    pub shape: ProgramShape,
    pub prefix_len: u32,
    pub suffix_len: u32,
    /// Distinct shared prefixes the client draws from, uniformly.
    pub prefix_pool: u32,
    pub output: OutputDist,
    pub misbehavior: Misbehavior,
    /// Delay between a parent finishing and its children arriving.
    pub think_time_us: u64,
    /// Arrivals before this time are dropped.
    pub start_s: f64,
    /// No arrivals after this time.
    pub stop_s: Option<f64>,
    pub max_programs: Option<u32>,
}

impl Default for ClientProfile {
    fn default() -> Self {
        ClientProfile {
            rate: 1.0,
            cv: 1.0,
            shape: ProgramShape::Flat,
            prefix_len: 256,
            suffix_len: 32,
            prefix_pool: 1,
            output: OutputDist::default(),
            misbehavior: Misbehavior::None,
            think_time_us: 0,
            start_s: 0.0,
            stop_s: None,
            max_programs: None,
        }
    }
}

/// Applies the profile's misbehavior tag; the tag itself is kept.
pub fn apply_misbehavior(profile: &ClientProfile, params: &SystemParams) -> Result<ClientProfile, SimError> {
    let mut p = profile.clone();
    match profile.misbehavior {
        Misbehavior::None => {}
        Misbehavior::S1 { factor, target } => match target {
            S1Target::Rate => p.rate *= factor,
            S1Target::Branches => {
                if let ProgramShape::Tree { branches, depth } = p.shape {
                    p.shape = ProgramShape::Tree {
                        branches: ((f64::from(branches) * factor).round() as u32).max(1),
                        depth,
                    };
                }
            }
        },
        Misbehavior::S2 { factor } => {
            let len = (f64::from(p.prefix_len) * factor).round();
            if len > f64::from(params.l_input) {
                return Err(SimError::InvalidConfig(vec![format!(
                    "S2 factor {factor} makes prefix {len} longer than l_input {}",
                    params.l_input
                )]));
            }
            p.prefix_len = len as u32;
        }
    }
    Ok(p)
}

impl ClientProfile {
    pub fn validate(&self, params: &SystemParams, at: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.rate.is_finite() && self.rate > 0.0) {
            errs.push(format!("{at}.rate must be positive"));
        }
        if !(self.cv.is_finite() && self.cv > 0.0) {
            errs.push(format!("{at}.cv must be positive"));
        }
        if self.prefix_pool == 0 || self.prefix_pool > 1 << 20 {
            errs.push(format!("{at}.prefix_pool must be in 1..=2^20"));
        }
        if let ProgramShape::Tree { branches: 0, .. } = self.shape {
            errs.push(format!("{at}.shape.branches must be positive"));
        }
        match self.output {
            OutputDist::Constant { len: 0 } => errs.push(format!("{at}.output.len must be positive")),
            OutputDist::LogNormal { mean, sigma } if !(mean > 0.0 && sigma >= 0.0) => {
                errs.push(format!("{at}.output needs mean > 0 and sigma >= 0"))
            }
            _ => {}
        }
        if let Misbehavior::S1 { factor, .. } | Misbehavior::S2 { factor } = self.misbehavior {
            if !(factor.is_finite() && factor > 0.0) {
                errs.push(format!("{at}.misbehavior.factor must be positive"));
            }
        }
        match apply_misbehavior(self, params) {
            Err(SimError::InvalidConfig(v)) => errs.extend(v.into_iter().map(|m| format!("{at}: {m}"))),
            Err(e) => errs.push(e.to_string()),
            Ok(eff) => {
                let longest = u64::from(eff.prefix_len) + u64::from(eff.suffix_len) * u64::from(eff.shape.depth() + 1);
                if longest == 0 {
                    errs.push(format!("{at}: requests would have empty inputs"));
                }
                if longest > u64::from(params.l_input) {
                    errs.push(format!("{at}: deepest request has {longest} input tokens, above l_input {}", params.l_input));
                }
            }
        }
        errs
    }
}

/// Gamma-process arrival times in `[0, horizon)`: i.i.d. gaps with mean
/// `1 / rate` (seconds) and coefficient of variation `cv`.
pub fn gen_gamma_arrivals(rate: f64, cv: f64, horizon: SimTime, rng: &mut ChaCha8Rng) -> Vec<SimTime> {
    let shape = 1.0 / (cv * cv);
    let scale = 1.0 / (rate * shape);
    let gap = Gamma::new(shape, scale).expect("rate and cv are positive");
    let mut out = Vec::new();
    let mut t = 0.0f64;
    loop {
        t += gap.sample(rng);
        let at = SimTime::from_secs_f64(t);
        if at >= horizon {
            return out;
        }
        out.push(at);
    }
}

/// Client `client`'s `k`-th shared prefix. Namespaces never overlap
/// between clients.
pub fn prefix_id(client: u32, k: u32) -> u64 {
    (u64::from(client) << 20) | u64::from(k)
}

/// One program's requests in pre-order, ids from `next_id`. The root
/// arrives at `root_arrival`; each child carries the think time as its
/// arrival (relative to its parent's finish).
pub fn gen_program(
    profile: &ClientProfile,
    client: u32,
    prefix: u64,
    root_arrival: SimTime,
    next_id: &mut u64,
    rng: &mut ChaCha8Rng,
) -> Vec<TraceRecord> {
    let mut out = Vec::new();
    let (branches, depth) = match profile.shape {
        ProgramShape::Flat => (0, 0),
        ProgramShape::Tree { branches, depth } => (branches, depth),
    };
    #[allow(clippy::too_many_arguments)]
    fn node(
        p: &ClientProfile,
        client: u32,
        prefix: u64,
        parent: Option<(u64, u32)>,
        level: u32,
        shape: (u32, u32),
        arrival: SimTime,
        next_id: &mut u64,
        rng: &mut ChaCha8Rng,
        out: &mut Vec<TraceRecord>,
    ) {
        let id = *next_id;
        *next_id += 1;
        let (prefix_len, shared) = match parent {
            Some((_, len)) => (len, None),
            None => (p.prefix_len, (p.prefix_len > 0).then_some(prefix)),
        };
        let input = prefix_len + p.suffix_len;
        out.push(TraceRecord {
            id,
            client,
            arrival_time: match parent {
                Some(_) => p.think_time_us,
                None => arrival.as_micros(),
            },
            input_token_count: input,
            shared_prefix_id: shared,
            prefix_len,
            true_output_len: p.output.sample(rng),
            parent_id: parent.map(|(pid, _)| pid),
        });
        if level < shape.1 {
            for _ in 0..shape.0 {
                node(p, client, prefix, Some((id, input)), level + 1, shape, arrival, next_id, rng, out);
            }
        }
    }
    node(profile, client, prefix, None, 0, (branches, depth), root_arrival, next_id, rng, &mut out);
    out
}

/// Generates a full trace. A pure function of `(profiles, params, horizon,
/// seed)`: each client draws from its own named random streams.
pub fn generate_trace(
    profiles: &[ClientProfile],
    params: &SystemParams,
    horizon: SimTime,
    seed: u64,
) -> Result<Vec<TraceRecord>, SimError> {
    let mut errs = Vec::new();
    if profiles.len() > 1 << 10 {
        errs.push("workload: at most 1024 clients".to_string());
    }
    for (i, p) in profiles.iter().enumerate() {
        errs.extend(p.validate(params, &format!("workload.clients[{i}]")));
    }
    if !errs.is_empty() {
        return Err(SimError::InvalidConfig(errs));
    }
    let streams = RngStreams::new(seed);
    // (root arrival, client, program records)
    let mut programs: Vec<(SimTime, u32, u32, ClientProfile, u64)> = Vec::new();
    for (i, p) in profiles.iter().enumerate() {
        let client = i as u32;
        let eff = apply_misbehavior(p, params)?;
        let mut arr_rng = streams.stream(&format!("arrivals/{client}"));
        let mut prefix_rng = streams.stream(&format!("prefix/{client}"));
        let start = SimTime::from_secs_f64(eff.start_s);
        let stop = eff.stop_s.map_or(horizon, |s| SimTime::from_secs_f64(s).min(horizon));
        let arrivals = gen_gamma_arrivals(eff.rate, eff.cv, stop.saturating_sub(start), &mut arr_rng);
        let cap = eff.max_programs.map_or(usize::MAX, |m| m as usize);
        for (n, t) in arrivals.into_iter().take(cap).enumerate() {
            let k = prefix_rng.random_range(0..eff.prefix_pool);
            programs.push((start + t, client, n as u32, eff.clone(), prefix_id(client, k)));
        }
    }
    programs.sort_by_key(|(t, c, n, ..)| (*t, *c, *n));
    let mut out_rngs: Vec<ChaCha8Rng> = (0..profiles.len())
        .map(|c| streams.stream(&format!("output/{c}")))
        .collect();
    let mut next_id = 0u64;
    let mut out = Vec::new();
    for (t, client, _, eff, prefix) in programs {
        out.extend(gen_program(&eff, client, prefix, t, &mut next_id, &mut out_rngs[client as usize]));
    }
    Ok(out)
}
