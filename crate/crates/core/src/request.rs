//! Requests, clients, token sequences, system limits and the trace format.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::CostWeights;
use crate::sim::SimTime;
use crate::SimError;

pub type Token = u32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkerId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

/// Immutable, cheaply clonable token sequence.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSeq(Arc<[Token]>);

impl TokenSeq {
    pub fn new(tokens: impl Into<Arc<[Token]>>) -> Self {
        TokenSeq(tokens.into())
    }

    pub fn as_slice(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<Token>> for TokenSeq {
    fn from(v: Vec<Token>) -> Self {
        TokenSeq(v.into())
    }
}

impl From<&[Token]> for TokenSeq {
    fn from(v: &[Token]) -> Self {
        TokenSeq(v.into())
    }
}

impl std::ops::Deref for TokenSeq {
    type Target = [Token];
    fn deref(&self) -> &[Token] {
        &self.0
    }
}

impl fmt::Debug for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len() <= 8 {
            write!(f, "{:?}", &self.0[..])
        } else {
            write!(f, "{:?}..+{}", &self.0[..8], self.len() - 8)
        }
    }
}

/// When a request enters the arrival stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Release {
    At(SimTime),
    /// Released `delay` after the parent request finishes.
    AfterParent { parent: RequestId, delay: SimTime },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: RequestId,
    pub client: ClientId,
    pub input: TokenSeq,
    /// Hidden from schedulers; only the worker engine reads it to decide
    /// when generation stops.
    pub true_output_len: u32,
    pub release: Release,
}

impl Request {
    pub fn parent(&self) -> Option<RequestId> {
        match self.release {
            Release::At(_) => None,
            Release::AfterParent { parent, .. } => Some(parent),
        }
    }
}

/// Tokens of `input_len` not covered by the cached prefix.
pub fn extend_length(input_len: u32, matched_prefix_len: u32) -> u32 {
    debug_assert!(matched_prefix_len <= input_len);
    input_len - matched_prefix_len.min(input_len)
}

/// System limits and cost weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    pub l_input: u32,
    pub l_output: u32,
    /// Token capacity of one worker's KV pool (running batch plus cache).
    pub max_batch_tokens: u32,
    #[serde(default = "default_workers")]
    pub workers: u32,
    #[serde(default)]
    pub weights: CostWeights,
}

fn default_workers() -> u32 {
    1
}

impl Default for SystemParams {
    fn default() -> Self {
        SystemParams {
            l_input: 2048,
            l_output: 256,
            max_batch_tokens: 8192,
            workers: 1,
            weights: CostWeights::default(),
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("system.l_input", self.l_input),
            ("system.l_output", self.l_output),
            ("system.max_batch_tokens", self.max_batch_tokens),
            ("system.workers", self.workers),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.weights.extend == 0 && self.weights.output == 0 {
            errs.push("system.weights: at least one weight must be positive".into());
        }
        errs
    }
}

/// One line of a trace file.
///
/// Input tokens expand as `canonical(shared_prefix_id)[..prefix_len] ++
/// unique_suffix(id)`. When `parent_id` is set the prefix is instead the
/// parent's full input (`prefix_len` must equal its length) and
/// `arrival_time` is the delay after the parent finishes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    pub client: u32,
    /// Microseconds.
    pub arrival_time: u64,
    pub input_token_count: u32,
    pub shared_prefix_id: Option<u64>,
    pub prefix_len: u32,
    pub true_output_len: u32,
    pub parent_id: Option<u64>,
}

const ID_LIMIT: u64 = 1 << 30;

/// Token `i` of shared prefix `prefix_id`. Prefix tokens are even; the
/// first one is unique per prefix so different prefixes never share a node.
pub fn prefix_token(prefix_id: u64, i: u32) -> Token {
    if i == 0 {
        (prefix_id as u32) << 1
    } else {
        (mix(prefix_id, i) as u32) & !1
    }
}

/// Token `i` of request `id`'s unique suffix. Suffix tokens are odd, so a
/// suffix never continues a shared prefix.
pub fn suffix_token(id: u64, i: u32) -> Token {
    if i == 0 {
        ((id as u32) << 1) | 1
    } else {
        (mix(id ^ 0x5bd1_e995, i) as u32) | 1
    }
}

fn mix(a: u64, b: u32) -> u64 {
    let mut z = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(u64::from(b).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn write_trace<W: Write>(records: &[TraceRecord], mut w: W) -> Result<(), SimError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceRecord>, SimError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SimError::Parse {
            what: "trace",
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Expands trace records into requests. Parents must precede children.
pub fn materialize(records: &[TraceRecord], params: &SystemParams) -> Result<Vec<Request>, SimError> {
    let mut by_id: BTreeMap<u64, TokenSeq> = BTreeMap::new();
    let mut out = Vec::with_capacity(records.len());
    let mut errs = Vec::new();
    for r in records {
        if r.id >= ID_LIMIT {
            errs.push(format!("trace id {}: ids must be below 2^30", r.id));
            continue;
        }
        if by_id.contains_key(&r.id) {
            errs.push(format!("trace id {}: duplicate id", r.id));
            continue;
        }
        if r.input_token_count == 0 || r.input_token_count > params.l_input {
            errs.push(format!(
                "trace id {}: input_token_count {} outside 1..={}",
                r.id, r.input_token_count, params.l_input
            ));
            continue;
        }
        if r.true_output_len == 0 {
            errs.push(format!("trace id {}: true_output_len must be positive", r.id));
            continue;
        }
        if r.prefix_len > r.input_token_count {
            errs.push(format!("trace id {}: prefix_len exceeds input", r.id));
            continue;
        }
        let mut tokens: Vec<Token> = Vec::with_capacity(r.input_token_count as usize);
        let release = match r.parent_id {
            Some(p) => {
                let Some(parent) = by_id.get(&p) else {
                    errs.push(format!("trace id {}: parent {} missing or later in trace", r.id, p));
                    continue;
                };
                if parent.len() != r.prefix_len as usize {
                    errs.push(format!("trace id {}: prefix_len must equal parent input length", r.id));
                    continue;
                }
                tokens.extend_from_slice(parent);
                Release::AfterParent {
                    parent: RequestId(p),
                    delay: SimTime(r.arrival_time),
                }
            }
            None => {
                if r.prefix_len > 0 {
                    let Some(pid) = r.shared_prefix_id.filter(|p| *p < ID_LIMIT) else {
                        errs.push(format!("trace id {}: prefix_len > 0 needs shared_prefix_id < 2^30", r.id));
                        continue;
                    };
                    tokens.extend((0..r.prefix_len).map(|i| prefix_token(pid, i)));
                }
                Release::At(SimTime(r.arrival_time))
            }
        };
        let suffix = r.input_token_count - r.prefix_len;
        tokens.extend((0..suffix).map(|i| suffix_token(r.id, i)));
        let input = TokenSeq::from(tokens);
        by_id.insert(r.id, input.clone());
        out.push(Request {
            id: RequestId(r.id),
            client: ClientId(r.client),
            input,
            true_output_len: r.true_output_len,
            release,
        });
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(SimError::InvalidConfig(errs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extend_length_examples() {
        assert_eq!(extend_length(100, 0), 100);
        assert_eq!(extend_length(100, 100), 0);
        assert_eq!(extend_length(546, 500), 46);
    }

    fn rec(id: u64, prefix: Option<u64>, plen: u32, len: u32, parent: Option<u64>) -> TraceRecord {
        TraceRecord {
            id,
            client: 0,
            arrival_time: 10,
            input_token_count: len,
            shared_prefix_id: prefix,
            prefix_len: plen,
            true_output_len: 4,
            parent_id: parent,
        }
    }

    #[test]
    fn expansion_shares_prefix_and_diverges_on_suffix() {
        let params = SystemParams::default();
        let reqs = materialize(
            &[
                rec(1, Some(7), 5, 8, None),
                rec(2, Some(7), 5, 9, None),
                rec(3, Some(8), 5, 8, None),
                rec(4, None, 8, 10, Some(1)),
            ],
            &params,
        )
        .unwrap();
        let (a, b, c, d) = (&reqs[0].input, &reqs[1].input, &reqs[2].input, &reqs[3].input);
        assert_eq!(a[..5], b[..5]);
        assert_ne!(a[5], b[5]);
        assert_ne!(a[0], c[0]);
        assert_eq!(&d[..8], &a[..]);
        assert_eq!(d.len(), 10);
        assert_eq!(reqs[3].parent(), Some(RequestId(1)));
        assert_eq!(
            reqs[3].release,
            Release::AfterParent { parent: RequestId(1), delay: SimTime(10) }
        );
    }

    #[test]
    fn rejects_bad_records() {
        let params = SystemParams { l_input: 16, ..SystemParams::default() };
        assert!(materialize(&[rec(1, None, 0, 17, None)], &params).is_err());
        assert!(materialize(&[rec(1, None, 0, 4, Some(9))], &params).is_err());
        assert!(materialize(&[rec(1, None, 3, 4, None)], &params).is_err());
    }

    #[test]
    fn trace_file_round_trip() {
        let recs = vec![rec(1, Some(2), 3, 8, None), rec(2, None, 8, 9, Some(1))];
        let mut buf = Vec::new();
        write_trace(&recs, &mut buf).unwrap();
        assert_eq!(read_trace(buf.as_slice()).unwrap(), recs);
    }
}
