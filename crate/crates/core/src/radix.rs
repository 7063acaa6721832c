//! Token-level radix trees.
//!
//! [`RadixCache`] is the per-worker KV prefix cache: reference-counted
//! nodes, a token budget and LRU leaf eviction. [`GlobalIndex`] is the
//! dispatcher's routing index, whose nodes carry the set of workers believed
//! to hold that prefix; it has no budget.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use thiserror::Error;

use crate::request::{Token, TokenSeq, WorkerId};
use crate::sim::SimTime;

const ROOT: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WorkerMark {
    /// Dispatched, unfinished requests whose input covers this node.
    pub in_flight: u32,
    pub last_finish: Option<SimTime>,
}

#[derive(Debug, Clone)]
struct Node {
    key: Vec<Token>,
    parent: usize,
    children: BTreeMap<Token, usize>,
    /// Path length from the root to the end of this node's edge.
    depth: u32,
    ref_count: u32,
    last_access: SimTime,
    /// Creation order; LRU tie-break and stale-handle detection.
    created: u64,
    workers: BTreeMap<WorkerId, WorkerMark>,
    alive: bool,
}

impl Node {
    fn start(&self) -> u32 {
        self.depth - self.key.len() as u32
    }
}

/// Handle to a node returned by matching or insertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    idx: usize,
    created: u64,
}

struct Walk {
    matched: u32,
    /// Nodes fully covered by the match, root excluded.
    full: Vec<usize>,
    /// Node the match ends inside of, with the number of its tokens matched.
    partial: Option<(usize, u32)>,
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
    free: Vec<usize>,
    next_created: u64,
    total_tokens: u64,
}

impl Tree {
    fn new() -> Self {
        let root = Node {
            key: Vec::new(),
            parent: ROOT,
            children: BTreeMap::new(),
            depth: 0,
            ref_count: 0,
            last_access: SimTime::ZERO,
            created: 0,
            workers: BTreeMap::new(),
            alive: true,
        };
        Tree {
            nodes: vec![root],
            free: Vec::new(),
            next_created: 1,
            total_tokens: 0,
        }
    }

    fn alloc(&mut self, node: Node) -> usize {
        if let Some(i) = self.free.pop() {
            self.nodes[i] = node;
            i
        } else {
            self.nodes.push(node);
            self.nodes.len() - 1
        }
    }

    fn walk(&self, tokens: &[Token]) -> Walk {
        let mut w = Walk {
            matched: 0,
            full: Vec::new(),
            partial: None,
        };
        let mut cur = ROOT;
        let mut pos = 0usize;
        while pos < tokens.len() {
            let Some(&child) = self.nodes[cur].children.get(&tokens[pos]) else {
                break;
            };
            let key = &self.nodes[child].key;
            let lcp = key
                .iter()
                .zip(&tokens[pos..])
                .take_while(|(a, b)| a == b)
                .count();
            pos += lcp;
            if lcp == key.len() {
                w.full.push(child);
                cur = child;
            } else {
                w.partial = Some((child, lcp as u32));
                break;
            }
        }
        w.matched = pos as u32;
        w
    }

    /// Splits `idx` after its first `k` key tokens; returns the new upper node.
    fn split(&mut self, idx: usize, k: u32) -> usize {
        let k = k as usize;
        debug_assert!(k > 0 && k < self.nodes[idx].key.len());
        let created = self.next_created;
        self.next_created += 1;
        let (head, tail, parent, ref_count, last_access, workers, start) = {
            let n = &self.nodes[idx];
            (
                n.key[..k].to_vec(),
                n.key[k..].to_vec(),
                n.parent,
                n.ref_count,
                n.last_access,
                n.workers.clone(),
                n.start(),
            )
        };
        let first_tail = tail[0];
        let first_head = head[0];
        let upper = self.alloc(Node {
            key: head,
            parent,
            children: BTreeMap::from([(first_tail, idx)]),
            depth: start + k as u32,
            ref_count,
            last_access,
            created,
            workers,
            alive: true,
        });
        self.nodes[idx].key = tail;
        self.nodes[idx].parent = upper;
        self.nodes[parent].children.insert(first_head, upper);
        upper
    }

    /// Longest match, splitting the last node if the match ends inside it.
    /// Returns the node whose path is exactly the matched prefix.
    fn match_split(&mut self, tokens: &[Token]) -> (u32, usize) {
        let w = self.walk(tokens);
        let node = match w.partial {
            Some((idx, k)) if k > 0 => self.split(idx, k),
            _ => w.full.last().copied().unwrap_or(ROOT),
        };
        (w.matched, node)
    }

    fn add_leaf(&mut self, parent: usize, key: &[Token], now: SimTime) -> usize {
        let created = self.next_created;
        self.next_created += 1;
        let depth = self.nodes[parent].depth + key.len() as u32;
        let idx = self.alloc(Node {
            key: key.to_vec(),
            parent,
            children: BTreeMap::new(),
            depth,
            ref_count: 0,
            last_access: now,
            created,
            workers: BTreeMap::new(),
            alive: true,
        });
        self.nodes[parent].children.insert(key[0], idx);
        self.total_tokens += key.len() as u64;
        idx
    }

    fn remove_leaf(&mut self, idx: usize) {
        debug_assert!(idx != ROOT && self.nodes[idx].children.is_empty());
        let parent = self.nodes[idx].parent;
        let first = self.nodes[idx].key[0];
        self.nodes[parent].children.remove(&first);
        self.total_tokens -= self.nodes[idx].key.len() as u64;
        self.nodes[idx].alive = false;
        self.nodes[idx].key = Vec::new();
        self.nodes[idx].workers.clear();
        self.free.push(idx);
    }

    /// Root-exclusive ancestors of `idx`, deepest first, `idx` included.
    fn path_to_root(&self, mut idx: usize) -> Vec<usize> {
        let mut out = Vec::new();
        while idx != ROOT {
            out.push(idx);
            idx = self.nodes[idx].parent;
        }
        out
    }

    fn path_tokens(&self, idx: usize) -> Vec<Token> {
        let mut chain = self.path_to_root(idx);
        chain.reverse();
        chain
            .into_iter()
            .flat_map(|i| self.nodes[i].key.iter().copied())
            .collect()
    }

    fn touch_path(&mut self, idx: usize, now: SimTime) {
        for i in self.path_to_root(idx) {
            self.nodes[i].last_access = now;
        }
    }

    fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack: Vec<usize> = self.nodes[ROOT].children.values().rev().copied().collect();
        while let Some(i) = stack.pop() {
            out.push(i);
            stack.extend(self.nodes[i].children.values().rev().copied());
        }
        out
    }

    fn dump(&self) -> Vec<DumpEntry> {
        self.preorder()
            .into_iter()
            .map(|i| {
                let n = &self.nodes[i];
                DumpEntry {
                    path: self.path_tokens(i),
                    edge_len: n.key.len() as u32,
                    ref_count: n.ref_count,
                    workers: n.workers.keys().copied().collect(),
                    last_access: n.last_access,
                }
            })
            .collect()
    }
}

/// One node of a deterministic pre-order dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpEntry {
    pub path: Vec<Token>,
    pub edge_len: u32,
    pub ref_count: u32,
    pub workers: Vec<WorkerId>,
    pub last_access: SimTime,
}

impl std::fmt::Display for DumpEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:?} edge={} ref={} workers={:?} t={}",
            self.path,
            self.edge_len,
            self.ref_count,
            self.workers.iter().map(|w| w.0).collect::<Vec<_>>(),
            self.last_access.as_micros()
        )
    }
}

/// A node removed by LRU eviction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evicted {
    /// Full token path of the evicted node.
    pub path: TokenSeq,
    pub tokens: u32,
    /// Length of the path still cached (the parent's depth).
    pub retained: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cache full: {needed} more tokens needed but nothing evictable remains")]
pub struct CacheFull {
    pub needed: u64,
    pub evicted: Vec<Evicted>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixMatch {
    pub len: u32,
    pub node: NodeRef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inserted {
    pub node: NodeRef,
    pub newly_cached: u32,
    pub evicted: Vec<Evicted>,
}

/// Per-worker KV prefix cache.
#[derive(Debug, Clone)]
pub struct RadixCache {
    tree: Tree,
    capacity: u64,
    evictable: u64,
}

impl RadixCache {
    pub fn new(capacity_tokens: u64) -> Self {
        RadixCache {
            tree: Tree::new(),
            capacity: capacity_tokens,
            evictable: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Changes the budget. Does not evict; callers shrinking the budget
    /// below usage follow up with [`RadixCache::evict_lru`].
    pub fn set_capacity(&mut self, capacity_tokens: u64) {
        self.capacity = capacity_tokens;
    }

    pub fn used_tokens(&self) -> u64 {
        self.tree.total_tokens
    }

    /// Tokens held by nodes no running request pins.
    pub fn evictable_tokens(&self) -> u64 {
        self.evictable
    }

    /// Longest cached prefix, without touching access times or structure.
    pub fn peek_match(&self, tokens: &[Token]) -> u32 {
        self.tree.walk(tokens).matched
    }

    /// Of the first `matched` tokens of `tokens`, how many sit in unpinned
    /// nodes (and would be protected if the request were admitted).
    pub fn unpinned_on_path(&self, tokens: &[Token], matched: u32) -> u32 {
        let w = self.tree.walk(tokens);
        let nodes = w.full.iter().copied().chain(w.partial.map(|(i, _)| i));
        let pinned = nodes
            .filter(|&i| self.tree.nodes[i].ref_count > 0)
            .map(|i| self.tree.nodes[i].depth.min(matched))
            .max()
            .unwrap_or(0);
        matched.saturating_sub(pinned)
    }

    /// Longest cached prefix. Splits a node when the match ends inside its
    /// edge and refreshes access time along the matched path.
    pub fn match_prefix(&mut self, tokens: &[Token], now: SimTime) -> PrefixMatch {
        let (len, node) = self.tree.match_split(tokens);
        self.tree.touch_path(node, now);
        PrefixMatch {
            len,
            node: self.node_ref(node),
        }
    }

    /// Caches the full path of `tokens`, evicting unpinned leaves if the
    /// budget requires it. The existing prefix of the path is never evicted.
    pub fn insert(&mut self, tokens: &[Token], now: SimTime) -> Result<Inserted, CacheFull> {
        let (matched, node) = self.tree.match_split(tokens);
        let new = (tokens.len() as u32 - matched) as u64;
        let mut evicted = Vec::new();
        let over = (self.used_tokens() + new).saturating_sub(self.capacity);
        if over > 0 {
            self.pin_idx(node);
            evicted = self.evict_lru(over);
            self.unpin_idx(node);
            let still = (self.used_tokens() + new).saturating_sub(self.capacity);
            if still > 0 {
                return Err(CacheFull { needed: still, evicted });
            }
        }
        let leaf = if new > 0 {
            let leaf = self.tree.add_leaf(node, &tokens[matched as usize..], now);
            self.evictable += new;
            leaf
        } else {
            node
        };
        self.tree.touch_path(leaf, now);
        Ok(Inserted {
            node: self.node_ref(leaf),
            newly_cached: new as u32,
            evicted,
        })
    }

    pub fn pin(&mut self, node: NodeRef) {
        self.check(node);
        self.pin_idx(node.idx);
    }

    pub fn unpin(&mut self, node: NodeRef) {
        self.check(node);
        self.unpin_idx(node.idx);
    }

    fn check(&self, node: NodeRef) {
        let n = &self.tree.nodes[node.idx];
        assert!(n.alive && n.created == node.created, "stale radix node handle");
    }

    fn node_ref(&self, idx: usize) -> NodeRef {
        NodeRef {
            idx,
            created: self.tree.nodes[idx].created,
        }
    }

    fn pin_idx(&mut self, idx: usize) {
        for i in self.tree.path_to_root(idx) {
            let n = &mut self.tree.nodes[i];
            if n.ref_count == 0 {
                self.evictable -= n.key.len() as u64;
            }
            n.ref_count += 1;
        }
    }

    fn unpin_idx(&mut self, idx: usize) {
        for i in self.tree.path_to_root(idx) {
            let n = &mut self.tree.nodes[i];
            assert!(n.ref_count > 0, "unpin of an unpinned node");
            n.ref_count -= 1;
            if n.ref_count == 0 {
                self.evictable += n.key.len() as u64;
            }
        }
    }

    /// Evicts least-recently-used unpinned leaves (ties: oldest node first)
    /// until `needed` tokens are freed or nothing evictable remains.
    pub fn evict_lru(&mut self, needed: u64) -> Vec<Evicted> {
        let mut out = Vec::new();
        if needed == 0 {
            return out;
        }
        let mut heap: BinaryHeap<Reverse<(SimTime, u64, usize)>> = BinaryHeap::new();
        for (i, n) in self.tree.nodes.iter().enumerate() {
            if i != ROOT && n.alive && n.children.is_empty() && n.ref_count == 0 {
                heap.push(Reverse((n.last_access, n.created, i)));
            }
        }
        let mut freed = 0u64;
        while freed < needed {
            let Some(Reverse((_, _, idx))) = heap.pop() else {
                break;
            };
            let parent = self.tree.nodes[idx].parent;
            let len = self.tree.nodes[idx].key.len() as u32;
            out.push(Evicted {
                path: self.tree.path_tokens(idx).into(),
                tokens: len,
                retained: self.tree.nodes[parent].depth,
            });
            self.tree.remove_leaf(idx);
            self.evictable -= u64::from(len);
            freed += u64::from(len);
            let p = &self.tree.nodes[parent];
            if parent != ROOT && p.children.is_empty() && p.ref_count == 0 {
                heap.push(Reverse((p.last_access, p.created, parent)));
            }
        }
        out
    }

    /// Deterministic pre-order dump for golden tests.
    pub fn dump(&self) -> Vec<DumpEntry> {
        self.tree.dump()
    }

    /// Structural self-check used by tests: budget conservation, prefix
    /// consistency, sibling uniqueness and evictable accounting.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut sum = 0u64;
        let mut unpinned = 0u64;
        for i in self.tree.preorder() {
            let n = &self.tree.nodes[i];
            if n.key.is_empty() {
                return Err(format!("empty edge at node {i}"));
            }
            let p = &self.tree.nodes[n.parent];
            if n.depth != p.depth + n.key.len() as u32 {
                return Err(format!("depth mismatch at node {i}"));
            }
            if p.children.get(&n.key[0]) != Some(&i) {
                return Err(format!("child index mismatch at node {i}"));
            }
            if n.parent != ROOT && n.ref_count > p.ref_count {
                return Err(format!("child pinned more than parent at node {i}"));
            }
            sum += n.key.len() as u64;
            if n.ref_count == 0 {
                unpinned += n.key.len() as u64;
            }
        }
        if sum != self.tree.total_tokens {
            return Err(format!("budget drift: nodes hold {sum}, counter says {}", self.tree.total_tokens));
        }
        if unpinned != self.evictable {
            return Err(format!("evictable drift: {unpinned} vs {}", self.evictable));
        }
        Ok(())
    }
}

/// The dispatcher's prefix index: which workers hold which prefixes.
#[derive(Debug, Clone)]
pub struct GlobalIndex {
    tree: Tree,
}

impl Default for GlobalIndex {
    fn default() -> Self {
        Self::new()
    }
}

impl GlobalIndex {
    pub fn new() -> Self {
        GlobalIndex { tree: Tree::new() }
    }

    /// Match length and the worker set of the deepest matched node.
    pub fn longest_match_workers(&self, tokens: &[Token]) -> (u32, BTreeSet<WorkerId>) {
        let w = self.tree.walk(tokens);
        if w.matched == 0 {
            return (0, BTreeSet::new());
        }
        let deepest = match w.partial {
            Some((idx, k)) if k > 0 => idx,
            _ => *w.full.last().expect("matched > 0"),
        };
        (w.matched, self.tree.nodes[deepest].workers.keys().copied().collect())
    }

    /// Longest match per worker (for routers that rank by match length).
    pub fn match_per_worker(&self, tokens: &[Token]) -> BTreeMap<WorkerId, u32> {
        let w = self.tree.walk(tokens);
        let mut out = BTreeMap::new();
        let steps = w
            .full
            .iter()
            .map(|&i| (i, self.tree.nodes[i].depth))
            .chain(w.partial.filter(|(_, k)| *k > 0).map(|(i, k)| (i, self.tree.nodes[i].start() + k)));
        for (i, reach) in steps {
            for wk in self.tree.nodes[i].workers.keys() {
                out.insert(*wk, reach);
            }
        }
        out
    }

    /// Records a dispatch of `tokens` to `worker`.
    pub fn insert(&mut self, tokens: &[Token], worker: WorkerId) {
        let (matched, node) = self.tree.match_split(tokens);
        let leaf = if (matched as usize) < tokens.len() {
            self.tree.add_leaf(node, &tokens[matched as usize..], SimTime::ZERO)
        } else {
            node
        };
        for i in self.tree.path_to_root(leaf) {
            self.tree.nodes[i].workers.entry(worker).or_default().in_flight += 1;
        }
    }

    /// Records that a request with input `tokens` finished at `worker`.
    pub fn release(&mut self, tokens: &[Token], worker: WorkerId, now: SimTime) {
        let w = self.tree.walk(tokens);
        for i in w.full.iter().copied().chain(w.partial.map(|(i, _)| i)) {
            if let Some(m) = self.tree.nodes[i].workers.get_mut(&worker) {
                m.in_flight = m.in_flight.saturating_sub(1);
                m.last_finish = Some(m.last_finish.map_or(now, |t| t.max(now)));
            }
        }
    }

    /// Applies an eviction notice: `worker` dropped the tokens of `path`
    /// past `retained` at time `evicted_at`. The worker is removed from the
    /// covering nodes and everything below them, except where a request
    /// dispatched to that worker still covers the node (in flight, or
    /// finished after the eviction, meaning it re-cached the prefix).
    /// Nodes left without workers are pruned. Unknown paths are a no-op.
    /// Returns the number of nodes the worker was removed from.
    pub fn evict_notify(&mut self, path: &[Token], retained: u32, worker: WorkerId, evicted_at: SimTime) -> u32 {
        let end = path.len() as u32;
        if retained >= end {
            return 0;
        }
        let w = self.tree.walk(path);
        if w.matched <= retained {
            return 0;
        }
        // Cut node boundaries at `retained` and at the matched end.
        let mut chain: Vec<usize> = w.full.clone();
        if let Some((idx, k)) = w.partial {
            if k > 0 {
                chain.push(self.tree.split(idx, k));
            }
        }
        let mut targets = Vec::new();
        for &idx in &chain {
            let (start, depth) = (self.tree.nodes[idx].start(), self.tree.nodes[idx].depth);
            if depth <= retained {
                continue;
            }
            if start < retained {
                self.tree.split(idx, retained - start);
            }
            targets.push(idx);
        }
        // Everything below the end of the matched path.
        if w.matched == end {
            if let Some(&last) = chain.last() {
                let mut stack: Vec<usize> = self.tree.nodes[last].children.values().copied().collect();
                while let Some(i) = stack.pop() {
                    targets.push(i);
                    stack.extend(self.tree.nodes[i].children.values().copied());
                }
            }
        }
        let mut cleared = 0;
        for idx in targets {
            let workers = &mut self.tree.nodes[idx].workers;
            let protected = workers
                .get(&worker)
                .is_some_and(|m| m.in_flight > 0 || m.last_finish.is_some_and(|t| t > evicted_at));
            if !protected && workers.remove(&worker).is_some() {
                cleared += 1;
            }
        }
        self.prune();
        cleared
    }

    fn prune(&mut self) {
        let order = self.tree.preorder();
        for &i in order.iter().rev() {
            let n = &self.tree.nodes[i];
            if n.alive && n.workers.is_empty() && n.children.is_empty() {
                self.tree.remove_leaf(i);
            }
        }
    }

    /// Workers believed to hold each full node path, pre-order.
    pub fn dump(&self) -> Vec<DumpEntry> {
        self.tree.dump()
    }

    /// Every token prefix `worker` is believed to hold, as path-length marks
    /// along each root-to-leaf path. Used by coherence checks.
    pub fn holds(&self, tokens: &[Token], worker: WorkerId) -> u32 {
        let w = self.tree.walk(tokens);
        let mut held = 0;
        for i in w.full.iter().copied() {
            if self.tree.nodes[i].workers.contains_key(&worker) {
                held = self.tree.nodes[i].depth;
            } else {
                break;
            }
        }
        held
    }

    pub fn node_count(&self) -> usize {
        self.tree.preorder().len()
    }
}
