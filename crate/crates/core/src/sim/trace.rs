//! Run traces, serialized as JSON lines: one header, one record per request,
//! one per dispatching round, and a closing invariant summary.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::baselines::PolicyKind;
use crate::error::{Error, Result};
use crate::predictor::RequestId;
use crate::workflow::{AgentId, Configuration, ModelIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub scenario: String,
    pub policy: PolicyKind,
    pub rate: f64,
    pub seed: u64,
    /// `None` when the run drained.
    pub horizon: Option<f64>,
    pub beam_width: usize,
    pub arrivals: usize,
    /// Virtual time of the last processed event (the horizon, if hard).
    pub end_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub agent: AgentId,
    pub model: ModelIndex,
    pub dispatch: f64,
    pub complete: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTimeline {
    pub request: RequestId,
    pub arrival: f64,
    pub prediction_start: Option<f64>,
    pub prediction_end: Option<f64>,
    pub router_evals: u64,
    /// Viable-set size on entering the queue.
    pub viable: usize,
    /// In dispatch order.
    pub stages: Vec<StageRecord>,
    pub completion: Option<f64>,
    pub configuration: Option<Configuration>,
    /// Whether the executed configuration is labeled accurate.
    pub accurate: Option<bool>,
}

impl RequestTimeline {
    pub fn new(request: RequestId, arrival: f64) -> Self {
        Self {
            request,
            arrival,
            prediction_start: None,
            prediction_end: None,
            router_evals: 0,
            viable: 0,
            stages: Vec::new(),
            completion: None,
            configuration: None,
            accurate: None,
        }
    }

    pub fn latency(&self) -> Option<f64> {
        self.completion.map(|c| c - self.arrival)
    }

    pub fn prediction_latency(&self) -> f64 {
        match (self.prediction_start, self.prediction_end) {
            (Some(s), Some(e)) => e - s,
            _ => 0.0,
        }
    }

    pub fn first_dispatch(&self) -> Option<f64> {
        self.stages.first().map(|s| s.dispatch)
    }

    /// Arrival, prediction, each dispatch and completion are ordered.
    pub fn is_monotone(&self) -> bool {
        let mut t = self.arrival;
        let mut ok = |x: Option<f64>| match x {
            Some(v) if v < t => false,
            Some(v) => {
                t = v;
                true
            }
            None => true,
        };
        if !ok(self.prediction_start) || !ok(self.prediction_end) {
            return false;
        }
        let floor = t;
        let dispatches_ordered = self.stages.windows(2).all(|w| w[0].dispatch <= w[1].dispatch);
        let stages_ok = self
            .stages
            .iter()
            .all(|s| s.dispatch >= floor && s.complete.is_none_or(|c| c >= s.dispatch));
        let end_ok = match self.completion {
            Some(c) => self.stages.iter().all(|s| s.complete.is_some_and(|x| x <= c)),
            None => true,
        };
        dispatches_ordered && stages_ok && end_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub time: f64,
    /// Ready `(request, agent)` pairs at round start.
    pub ready: usize,
    /// Applied `(request, agent, model)` triples.
    pub dispatched: Vec<(RequestId, AgentId, ModelIndex)>,
    pub skips: usize,
    pub utilization: f64,
    pub flexibility: f64,
    /// Engine occupancy after the round.
    pub occupancy: Vec<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantCounters {
    pub rounds: u64,
    pub fifo_violations: u64,
    pub capacity_violations: u64,
    pub prefix_violations: u64,
    pub work_conservation_violations: u64,
    pub stale_drops: u64,
}

impl InvariantCounters {
    pub fn total_violations(&self) -> u64 {
        self.fifo_violations + self.capacity_violations + self.prefix_violations + self.work_conservation_violations
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub requests: Vec<RequestTimeline>,
    pub rounds: Vec<RoundRecord>,
    pub invariants: InvariantCounters,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Header(TraceHeader),
    Request(RequestTimeline),
    Round(RoundRecord),
    Invariants(InvariantCounters),
}

impl RunTrace {
    pub fn completed(&self) -> impl Iterator<Item = &RequestTimeline> {
        self.requests.iter().filter(|r| r.completion.is_some())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let mut put = |line: &Line| -> Result<()> {
            serde_json::to_writer(&mut out, line)?;
            out.write_all(b"\n")?;
            Ok(())
        };
        put(&Line::Header(self.header.clone()))?;
        for r in &self.requests {
            put(&Line::Request(r.clone()))?;
        }
        for r in &self.rounds {
            put(&Line::Round(r.clone()))?;
        }
        put(&Line::Invariants(self.invariants))
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut header = None;
        let mut requests = Vec::new();
        let mut rounds = Vec::new();
        let mut invariants = None;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(&line).map_err(|e| Error::Parse(format!("trace line {}: {e}", i + 1)))?;
            match parsed {
                Line::Header(h) if header.is_none() => header = Some(h),
                Line::Header(_) => return Err(Error::Parse(format!("trace line {}: second header", i + 1))),
                Line::Request(r) => requests.push(r),
                Line::Round(r) => rounds.push(r),
                Line::Invariants(c) => invariants = Some(c),
            }
        }
        Ok(Self {
            header: header.ok_or_else(|| Error::Parse("trace has no header".into()))?,
            requests,
            rounds,
            invariants: invariants.ok_or_else(|| Error::Parse("trace has no invariant record".into()))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunTrace {
        let mut r = RequestTimeline::new(0, 0.25);
        r.prediction_start = Some(0.25);
        r.prediction_end = Some(0.3);
        r.router_evals = 3;
        r.viable = 2;
        r.stages.push(StageRecord {
            agent: 0,
            model: 1,
            dispatch: 0.3,
            complete: Some(1.1),
        });
        r.completion = Some(1.1);
        r.configuration = Some(Configuration::new(vec![1]));
        r.accurate = Some(true);
        RunTrace {
            header: TraceHeader {
                scenario: "t".into(),
                policy: PolicyKind::Stagewise,
                rate: 1.0 / 3.0,
                seed: 9,
                horizon: None,
                beam_width: 4,
                arrivals: 1,
                end_time: 1.1,
            },
            requests: vec![r, RequestTimeline::new(1, 0.9)],
            rounds: vec![RoundRecord {
                time: 0.3,
                ready: 1,
                dispatched: vec![(0, 0, 1)],
                skips: 0,
                utilization: 0.5,
                flexibility: 0.5,
                occupancy: vec![0, 1],
            }],
            invariants: InvariantCounters {
                rounds: 1,
                ..Default::default()
            },
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let t = sample();
        let bytes = t.to_jsonl_bytes();
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 5);
        let back = RunTrace::read_jsonl(&bytes[..]).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_jsonl_bytes(), bytes);
    }

    #[test]
    fn rejects_incomplete_traces() {
        assert!(matches!(RunTrace::read_jsonl(&b""[..]), Err(Error::Parse(_))));
        assert!(matches!(RunTrace::read_jsonl(&b"{\"record\":\"nope\"}\n"[..]), Err(Error::Parse(_))));
    }

    #[test]
    fn timeline_monotonicity() {
        let t = sample();
        assert!(t.requests[0].is_monotone());
        let mut bad = t.requests[0].clone();
        bad.stages[0].dispatch = 0.2;
        assert!(!bad.is_monotone());
        assert_eq!(t.requests[0].latency(), Some(1.1 - 0.25));
        assert!((t.requests[0].prediction_latency() - 0.05).abs() < 1e-12);
    }
}
