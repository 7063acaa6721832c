//! Straight-line DLPM on one worker: the deficit loop written out step
//! by step over the brute-force cache. Every request arrives at time
//! zero; the step counter stands in for the clock (only the order of
//! cache accesses matters).

use std::collections::BTreeMap;

use dlpm_core::sim::SimTime;

use super::flat_cache::FlatCache;

#[derive(Debug, Clone)]
pub struct RefRequest {
    pub id: u64,
    pub client: u32,
    pub input: Vec<u32>,
    pub output: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct RefParams {
    pub pool: u64,
    pub l_output: u32,
    pub w_e: i64,
    pub w_q: i64,
    pub quantum: i64,
}

struct Running {
    client: u32,
    path: Vec<u32>,
    generated: u32,
    target: u32,
}

/// Admissions in order, with the admitted client's counter afterwards.
pub fn run(requests: &[RefRequest], p: RefParams) -> Vec<(u64, i64)> {
    let reserve = u64::from(p.l_output);
    let mut cache = FlatCache::new(p.pool);
    let mut private = 0u64;
    let mut batch: Vec<Running> = Vec::new();
    let mut admitted = Vec::new();

    // monitoring stream: every request arrives before the first step
    let mut l: Vec<u32> = Vec::new();
    let mut q: BTreeMap<u32, i64> = BTreeMap::new();
    let mut queue: Vec<RefRequest> = Vec::new();
    for r in requests {
        if !l.contains(&r.client) {
            q.insert(r.client, 0);
            l.push(r.client);
        }
        queue.push(r.clone());
    }

    let evictable = |cache: &FlatCache| -> u64 {
        cache
            .nodes
            .keys()
            .filter(|k| cache.nodes[*k].refs == 0)
            .map(|k| edge(cache, k))
            .sum()
    };

    let mut step = 0u64;
    loop {
        let now = SimTime(step);
        // sort by matched prefix, longest first; ties by arrival (= id)
        let mut keyed: Vec<(usize, RefRequest)> = queue.drain(..).map(|r| (cache.peek(&r.input), r)).collect();
        keyed.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
        queue = keyed.into_iter().map(|(_, r)| r).collect();

        // "while not Queue.empty()", left once a whole pass changes nothing
        while !queue.is_empty() {
            let mut changed = false;
            let mut i = 0;
            while i < queue.len() {
                let r = queue[i].clone();
                let c = r.client;
                if q[&c] <= 0 {
                    // CheckRefill(l, Queue)
                    let blocked = queue.iter().all(|x| q[&x.client] <= 0);
                    if blocked {
                        for j in &l {
                            if q[j] <= 0 {
                                *q.get_mut(j).unwrap() += p.quantum;
                            }
                        }
                        changed = true;
                    }
                }
                let can_add = {
                    let m = cache.peek(&r.input);
                    let extend = (r.input.len() - m) as u64;
                    // matched tokens held by unpinned nodes, token by token
                    let on_path = (0..m)
                        .filter(|&j| {
                            let holder = cache
                                .nodes
                                .iter()
                                .filter(|(k, _)| k.len() > j && k[..=j] == r.input[..=j])
                                .min_by_key(|(k, _)| k.len())
                                .expect("matched token is cached");
                            holder.1.refs == 0
                        })
                        .count() as u64;
                    let free = p.pool as i64 - (cache.used() + private) as i64;
                    (extend + reserve) as i64 <= free + (evictable(&cache) - on_path) as i64
                };
                if q[&c] > 0 && can_add {
                    let m = cache.match_prefix(&r.input, now);
                    cache.capacity = p.pool - private - reserve;
                    cache.insert(&r.input, now).expect("can_add said it fits");
                    cache.pin(&r.input, 1);
                    private += reserve;
                    *q.get_mut(&c).unwrap() -= p.w_e * (r.input.len() - m) as i64;
                    admitted.push((r.id, q[&c]));
                    batch.push(Running {
                        client: c,
                        path: r.input.clone(),
                        generated: 0,
                        target: r.output.min(p.l_output).max(1),
                    });
                    queue.remove(i);
                    changed = true;
                } else {
                    i += 1;
                }
            }
            if !changed {
                break;
            }
        }

        if batch.is_empty() {
            assert!(queue.is_empty(), "an empty batch always admits something");
            return admitted;
        }
        // ForwardStep(B): every running request produces one token
        step += 1;
        let mut per_client: BTreeMap<u32, i64> = BTreeMap::new();
        for r in &mut batch {
            r.generated += 1;
            *per_client.entry(r.client).or_default() += 1;
        }
        for (c, n) in per_client {
            *q.get_mut(&c).unwrap() -= p.w_q * n;
        }
        batch.retain(|r| {
            let done = r.generated >= r.target;
            if done {
                cache.pin(&r.path, -1);
                private -= reserve;
            }
            !done
        });
    }
}

fn edge(cache: &FlatCache, path: &[u32]) -> u64 {
    let parent = (0..path.len())
        .rev()
        .find(|&k| k == 0 || cache.nodes.contains_key(&path[..k]))
        .unwrap_or(0);
    (path.len() - parent) as u64
}
