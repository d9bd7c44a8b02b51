//! Deterministic event queue: events run in `(time, priority, seq)` order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Same-instant ordering. Link deliveries land before publication steps, and
/// steps before timers, so a message that arrives exactly on a step boundary
/// is eligible for that step.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum Priority {
    Delivery = 0,
    Step = 1,
    Timer = 2,
}

struct Entry<E> {
    time: u64,
    priority: Priority,
    seq: u64,
    event: E,
}

impl<E> Entry<E> {
    fn key(&self) -> (u64, Priority, u64) {
        (self.time, self.priority, self.seq)
    }
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

pub struct EventQueue<E> {
    now: u64,
    next_seq: u64,
    heap: BinaryHeap<Entry<E>>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            now: 0,
            next_seq: 0,
            heap: BinaryHeap::new(),
        }
    }

    /// Virtual time of the event being processed, in ms.
    pub fn now(&self) -> u64 {
        self.now
    }

    /// Schedules `event`; times in the past are clamped to now.
    pub fn schedule(&mut self, time: u64, priority: Priority, event: E) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry {
            time: time.max(self.now),
            priority,
            seq,
            event,
        });
    }

    pub fn pop(&mut self) -> Option<(u64, E)> {
        let e = self.heap.pop()?;
        self.now = e.time;
        Some((e.time, e.event))
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Drops every pending event that fails `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&E) -> bool) {
        let entries = std::mem::take(&mut self.heap).into_vec();
        self.heap = entries.into_iter().filter(|e| keep(&e.event)).collect();
    }

    pub fn iter(&self) -> impl Iterator<Item = &E> {
        self.heap.iter().map(|e| &e.event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_time_then_priority_then_insertion() {
        let mut q = EventQueue::new();
        q.schedule(5, Priority::Timer, "t5");
        q.schedule(5, Priority::Delivery, "d5a");
        q.schedule(3, Priority::Timer, "t3");
        q.schedule(5, Priority::Step, "s5");
        q.schedule(5, Priority::Delivery, "d5b");
        let order: Vec<_> = std::iter::from_fn(|| q.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, ["t3", "d5a", "d5b", "s5", "t5"]);
    }

    #[test]
    fn past_times_clamp_to_now() {
        let mut q = EventQueue::new();
        q.schedule(10, Priority::Timer, 1);
        q.pop();
        q.schedule(2, Priority::Timer, 2);
        assert_eq!(q.pop(), Some((10, 2)));
    }
}
