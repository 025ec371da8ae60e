//! Time-ordered event queue.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::predictor::RequestId;
use crate::workflow::{AgentId, ModelIndex};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    StageComplete {
        request: RequestId,
        agent: AgentId,
        model: ModelIndex,
    },
    PredictionComplete {
        request: RequestId,
    },
    Arrival {
        request: RequestId,
    },
    RoundTrigger,
}

impl EventKind {
    /// Same-instant order: freed slots and newly ready requests are visible
    /// to the round that fires at that instant.
    fn priority(&self) -> u8 {
        match self {
            EventKind::StageComplete { .. } => 0,
            EventKind::PredictionComplete { .. } => 1,
            EventKind::Arrival { .. } => 2,
            EventKind::RoundTrigger => 3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    seq: u64,
}

impl Event {
    fn key(&self) -> (f64, u8, u64) {
        (self.time, self.kind.priority(), self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        let (ta, pa, sa) = self.key();
        let (tb, pb, sb) = other.key();
        tb.total_cmp(&ta).then(pb.cmp(&pa)).then(sb.cmp(&sa))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, kind: EventKind) {
        debug_assert!(time.is_finite());
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, kind, seq });
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_time_then_priority_then_sequence() {
        let mut q = EventQueue::new();
        q.push(1.0, EventKind::RoundTrigger);
        q.push(1.0, EventKind::Arrival { request: 7 });
        q.push(0.5, EventKind::RoundTrigger);
        q.push(1.0, EventKind::StageComplete { request: 1, agent: 0, model: 0 });
        q.push(1.0, EventKind::Arrival { request: 3 });
        q.push(1.0, EventKind::PredictionComplete { request: 2 });
        let got: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| (e.time, e.kind)).collect();
        assert_eq!(
            got,
            vec![
                (0.5, EventKind::RoundTrigger),
                (1.0, EventKind::StageComplete { request: 1, agent: 0, model: 0 }),
                (1.0, EventKind::PredictionComplete { request: 2 }),
                (1.0, EventKind::Arrival { request: 7 }),
                (1.0, EventKind::Arrival { request: 3 }),
                (1.0, EventKind::RoundTrigger),
            ]
        );
    }
}
