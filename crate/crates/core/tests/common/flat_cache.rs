//! Brute-force prefix cache: a flat map from node path to node metadata.
//! Same observable rules as the radix cache (split on partial match, LRU
//! leaf eviction by (last access, creation order)), none of the structure.

use std::collections::BTreeMap;

use dlpm_core::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Meta {
    pub created: u64,
    pub last_access: SimTime,
    pub refs: u32,
}

#[derive(Debug, Clone, Default)]
pub struct FlatCache {
    pub nodes: BTreeMap<Vec<u32>, Meta>,
    next: u64,
    pub capacity: u64,
}

fn lcp(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl FlatCache {
    pub fn new(capacity: u64) -> Self {
        FlatCache { nodes: BTreeMap::new(), next: 1, capacity }
    }

    fn parent_len(&self, path: &[u32]) -> usize {
        (0..path.len()).rev().find(|&k| k == 0 || self.nodes.contains_key(&path[..k])).unwrap_or(0)
    }

    fn edge(&self, path: &[u32]) -> u64 {
        (path.len() - self.parent_len(path)) as u64
    }

    pub fn used(&self) -> u64 {
        self.nodes.keys().map(|p| self.edge(p)).sum()
    }

    pub fn peek(&self, t: &[u32]) -> usize {
        self.nodes.keys().map(|p| lcp(p, t)).max().unwrap_or(0)
    }

    fn split(&mut self, t: &[u32]) -> usize {
        let m = self.peek(t);
        if m > 0 && !self.nodes.contains_key(&t[..m]) {
            let host = self
                .nodes
                .iter()
                .filter(|(p, _)| p.len() > m && p[..m] == t[..m])
                .min_by_key(|(p, _)| p.len())
                .map(|(_, meta)| *meta)
                .expect("a longer node covers the match");
            let created = self.next;
            self.next += 1;
            self.nodes.insert(t[..m].to_vec(), Meta { created, ..host });
        }
        m
    }

    fn touch(&mut self, t: &[u32], now: SimTime) {
        for (p, meta) in self.nodes.iter_mut() {
            if p.len() <= t.len() && p[..] == t[..p.len()] {
                meta.last_access = now;
            }
        }
    }

    pub fn match_prefix(&mut self, t: &[u32], now: SimTime) -> usize {
        let m = self.split(t);
        self.touch(&t[..m], now);
        m
    }

    pub fn pin(&mut self, path: &[u32], delta: i32) {
        for (p, meta) in self.nodes.iter_mut() {
            if p.len() <= path.len() && p[..] == path[..p.len()] {
                meta.refs = (meta.refs as i32 + delta) as u32;
            }
        }
    }

    /// Evicts leaves; returns (path, edge tokens) in eviction order.
    pub fn evict(&mut self, needed: u64) -> Vec<(Vec<u32>, u64)> {
        let mut out = Vec::new();
        let mut freed = 0;
        while freed < needed {
            let victim = self
                .nodes
                .iter()
                .filter(|(p, meta)| {
                    meta.refs == 0 && !self.nodes.keys().any(|q| q.len() > p.len() && q[..p.len()] == p[..])
                })
                .min_by_key(|(_, meta)| (meta.last_access, meta.created))
                .map(|(p, _)| p.clone());
            let Some(v) = victim else { break };
            let e = self.edge(&v);
            self.nodes.remove(&v);
            freed += e;
            out.push((v, e));
        }
        out
    }

    /// Insert with eviction; `None` when the budget cannot be met.
    pub fn insert(&mut self, t: &[u32], now: SimTime) -> Option<u64> {
        let m = self.split(t);
        let new = (t.len() - m) as u64;
        let over = (self.used() + new).saturating_sub(self.capacity);
        if over > 0 {
            self.pin(&t[..m], 1);
            self.evict(over);
            self.pin(&t[..m], -1);
            if self.used() + new > self.capacity {
                return None;
            }
        }
        if new > 0 {
            let created = self.next;
            self.next += 1;
            self.nodes.insert(t.to_vec(), Meta { created, last_access: now, refs: 0 });
        }
        self.touch(t, now);
        Some(new)
    }
}
