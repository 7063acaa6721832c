use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::SimTime;
use crate::SimError;

/// Event classes, in the order they fire when they share a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RequestArrival,
    StepComplete,
    RequestFinished,
    EvictionNotice,
}

impl EventKind {
    fn rank(self) -> u8 {
        match self {
            EventKind::RequestArrival => 0,
            EventKind::StepComplete => 1,
            EventKind::RequestFinished => 2,
            EventKind::EvictionNotice => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle(u64);

/// A popped event.
#[derive(Debug, Clone)]
pub struct Event<P> {
    pub time: SimTime,
    pub sequence: u64,
    pub kind: EventKind,
    pub payload: P,
}

#[derive(Debug)]
struct Entry<P> {
    key: (SimTime, u8, u64),
    kind: EventKind,
    payload: P,
}

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}
impl<P> Eq for Entry<P> {}
impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Entry<P> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

/// Virtual clock plus a pending-event heap ordered by
/// (time, kind rank, insertion sequence).
#[derive(Debug)]
pub struct EventQueue<P> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Reverse<Entry<P>>>,
    cancelled: BTreeSet<u64>,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            cancelled: BTreeSet::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(&mut self, time: SimTime, kind: EventKind, payload: P) -> Result<EventHandle, SimError> {
        if time < self.now {
            return Err(SimError::ScheduleInPast { at: time, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry {
            key: (time, kind.rank(), seq),
            kind,
            payload,
        }));
        Ok(EventHandle(seq))
    }

    /// Cancels a pending event. Returns false if it already fired or was
    /// cancelled before.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_seq {
            return false;
        }
        let pending = self.heap.iter().any(|Reverse(e)| e.key.2 == handle.0);
        pending && self.cancelled.insert(handle.0)
    }

    pub fn is_empty(&self) -> bool {
        self.heap.len() == self.cancelled.len()
    }

    pub fn len(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    fn drop_cancelled_head(&mut self) {
        while let Some(Reverse(top)) = self.heap.peek() {
            let seq = top.key.2;
            if self.cancelled.remove(&seq) {
                self.heap.pop();
            } else {
                break;
            }
        }
    }

    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.drop_cancelled_head();
        self.heap.peek().map(|Reverse(e)| e.key.0)
    }

    /// Pops the next event if it fires no later than `limit`, advancing the clock.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<Event<P>> {
        self.drop_cancelled_head();
        match self.heap.peek() {
            Some(Reverse(top)) if top.key.0 <= limit => {}
            _ => return None,
        }
        let Reverse(entry) = self.heap.pop().expect("peeked");
        self.now = entry.key.0;
        Some(Event {
            time: entry.key.0,
            sequence: entry.key.2,
            kind: entry.kind,
            payload: entry.payload,
        })
    }

    pub fn pop(&mut self) -> Option<Event<P>> {
        self.pop_until(SimTime::MAX)
    }

    /// Moves the clock forward without firing anything. Never moves it back.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }
}
