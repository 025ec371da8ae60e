//! Discrete-event serving simulation.
//!
//! Arrivals enter a router lane (unless the policy needs no routing), become
//! schedulable when their prediction finishes, and are dispatched stage by
//! stage by event-driven scheduling rounds. The loop is single-threaded;
//! independent runs can execute in parallel.

pub mod engine;
mod events;
pub mod scenario;
pub mod trace;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::baselines::{per_input_policy, per_workflow_policy, PerInputKind, PolicyKind, RuntimeCostEstimator};
use crate::error::Result;
use crate::predictor::{ChainMode, NoisyRouter, OracleRouter, Predictor, PredictorBudget, RequestId};
use crate::rng;
use crate::scheduler::{apply_assignment, beam_schedule, fifo_violations, Request, SchedulerParams, StageStatus};
use crate::workflow::Configuration;
use crate::workload::{generate_accuracy_table, AccuracyTable, ArrivalProcess};

use engine::EngineState;
use events::{EventKind, EventQueue};
pub use scenario::{Horizon, Scenario};
use trace::{InvariantCounters, RequestTimeline, RoundRecord, RunTrace, StageRecord, TraceHeader};

/// Everything that varies between runs of one scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub policy: PolicyKind,
    pub rate: f64,
    pub seed: u64,
    pub horizon: Horizon,
    pub scheduler: SchedulerParams,
}

impl RunSpec {
    /// The scenario's own rate, seed, horizon and scheduler settings.
    pub fn new(scenario: &Scenario, policy: PolicyKind) -> Self {
        Self {
            policy,
            rate: scenario.rate,
            seed: scenario.seed,
            horizon: scenario.horizon,
            scheduler: scenario.scheduler,
        }
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.rate = rate;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_horizon(mut self, horizon: Horizon) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_beam_width(mut self, beam_width: usize) -> Self {
        self.scheduler.beam_width = beam_width;
        self
    }
}

/// Arrivals and ground-truth labels for one run.
#[derive(Debug, Clone)]
pub struct Workload {
    pub arrivals: Vec<f64>,
    pub table: Arc<AccuracyTable>,
}

/// A trace file fixes arrivals and labels (rate and seed are then ignored);
/// otherwise both are drawn from `(rate, seed)`.
pub fn workload(scenario: &Scenario, rate: f64, seed: u64, horizon: Horizon) -> Result<Workload> {
    if let Some(trace) = &scenario.trace {
        let (arrivals, table) = trace.as_ref();
        let arrivals = match horizon {
            Horizon::Drain => arrivals.clone(),
            Horizon::Hard(h) => arrivals.iter().copied().take_while(|&t| t < h).collect(),
        };
        return Ok(Workload {
            arrivals,
            table: Arc::new(table.clone()),
        });
    }
    let process = ArrivalProcess::new(rate, seed)?;
    let arrivals = match horizon {
        Horizon::Drain => process.times(scenario.requests),
        Horizon::Hard(h) => process.times_within(h),
    };
    let table = generate_accuracy_table(
        &scenario.space,
        &scenario.table_params,
        arrivals.len(),
        rng::derive_seed(&[seed, rng::TAG_TABLE]),
    )?;
    Ok(Workload {
        arrivals,
        table: Arc::new(table),
    })
}

pub fn run(scenario: &Scenario, spec: &RunSpec) -> Result<RunTrace> {
    let load = workload(scenario, spec.rate, spec.seed, spec.horizon)?;
    run_with_workload(scenario, spec, &load)
}

/// Simulates `load` under `spec`. Deterministic in its inputs.
pub fn run_with_workload(scenario: &Scenario, spec: &RunSpec, load: &Workload) -> Result<RunTrace> {
    spec.scheduler.validate()?;
    Sim::new(scenario, spec, load)?.run()
}

struct Sim<'a> {
    scenario: &'a Scenario,
    spec: &'a RunSpec,
    load: &'a Workload,
    service: engine::ServiceTimeModel,
    router: NoisyRouter,
    predictor: Predictor,
    budget: PredictorBudget,
    per_workflow: Option<Configuration>,
    lanes: Vec<f64>,
    engines: Vec<EngineState>,
    events: EventQueue,
    /// Requests that finished prediction and still have work.
    active: BTreeMap<RequestId, Request>,
    /// Requests whose prediction is still running.
    routing: BTreeMap<RequestId, Request>,
    pending_round: Option<f64>,
    timelines: Vec<RequestTimeline>,
    rounds: Vec<RoundRecord>,
    counters: InvariantCounters,
    now: f64,
}

impl<'a> Sim<'a> {
    fn new(scenario: &'a Scenario, spec: &'a RunSpec, load: &'a Workload) -> Result<Self> {
        let space = &scenario.space;
        let r = &scenario.router;
        let oracle = OracleRouter::new(load.table.clone(), r.latency);
        let router = NoisyRouter::new(
            oracle,
            r.false_positive,
            r.false_negative,
            rng::derive_seed(&[spec.seed, rng::TAG_ROUTER_NOISE]),
        )?;
        let per_workflow = match spec.policy {
            PolicyKind::PerWorkflow if !load.table.is_empty() => {
                Some(per_workflow_policy(&load.table, space, scenario.per_workflow_tolerance)?)
            }
            _ => None,
        };
        let catalog = space.catalog();
        let engines = (0..catalog.len())
            .map(|m| EngineState::new(m as u8, scenario.slots[m], catalog.throughput_weight(m as u8)))
            .collect();
        Ok(Self {
            scenario,
            spec,
            load,
            service: scenario.service_model(spec.seed),
            router,
            predictor: Predictor::new(space.clone(), ChainMode::auto(space, r.chain_cap)),
            budget: PredictorBudget::new(r.ema_alpha, r.min_budget)?,
            per_workflow,
            lanes: vec![0.0; r.lanes],
            engines,
            events: EventQueue::new(),
            active: BTreeMap::new(),
            routing: BTreeMap::new(),
            pending_round: None,
            timelines: load
                .arrivals
                .iter()
                .enumerate()
                .map(|(i, &t)| RequestTimeline::new(i as RequestId, t))
                .collect(),
            rounds: Vec::new(),
            counters: InvariantCounters::default(),
            now: 0.0,
        })
    }

    fn horizon(&self) -> Option<f64> {
        match self.spec.horizon {
            Horizon::Drain => None,
            Horizon::Hard(h) => Some(h),
        }
    }

    fn run(mut self) -> Result<RunTrace> {
        for (i, &t) in self.load.arrivals.iter().enumerate() {
            if self.horizon().is_none_or(|h| t < h) {
                self.events.push(t, EventKind::Arrival { request: i as RequestId });
            }
        }
        while let Some(t) = self.events.peek_time() {
            if self.horizon().is_some_and(|h| t > h) {
                break;
            }
            let ev = self.events.pop().expect("peeked");
            self.now = ev.time;
            match ev.kind {
                EventKind::Arrival { request } => self.on_arrival(request),
                EventKind::PredictionComplete { request } => self.on_prediction(request),
                EventKind::StageComplete { request, agent, model } => self.on_stage_complete(request, agent, model)?,
                EventKind::RoundTrigger => self.on_round()?,
            }
        }
        let end_time = self.horizon().unwrap_or(self.now);
        Ok(RunTrace {
            header: TraceHeader {
                scenario: self.scenario.name.clone(),
                policy: self.spec.policy,
                rate: self.spec.rate,
                seed: self.spec.seed,
                horizon: self.horizon(),
                beam_width: self.spec.scheduler.beam_width,
                arrivals: self.timelines.len(),
                end_time,
            },
            requests: self.timelines,
            rounds: self.rounds,
            invariants: self.counters,
        })
    }

    fn trigger_round(&mut self) {
        let iv = self.scenario.round_interval;
        let at = if iv > 0.0 { ((self.now / iv).ceil() * iv).max(self.now) } else { self.now };
        if self.pending_round != Some(at) {
            self.pending_round = Some(at);
            self.events.push(at, EventKind::RoundTrigger);
        }
    }

    fn on_arrival(&mut self, id: RequestId) {
        let space = &self.scenario.space;
        let graph = space.graph().clone();
        let arrival = self.now;
        if let Some(config) = &self.per_workflow {
            self.enqueue(Request::pinned(id, arrival, graph, config.clone()));
            return;
        }

        let prediction = self.predictor.predict(id, &self.router, self.budget.budget());
        let lane = (0..self.lanes.len())
            .min_by(|&a, &b| self.lanes[a].total_cmp(&self.lanes[b]))
            .expect("at least one lane");
        let start = self.lanes[lane].max(arrival);
        let end = start + prediction.latency;
        self.lanes[lane] = end;
        let tl = &mut self.timelines[id as usize];
        tl.prediction_start = Some(start);
        tl.prediction_end = Some(end);
        tl.router_evals = prediction.router_eval_count();

        // The per-input baselines pay the same routing time but choose from
        // the true labels.
        let catalog = space.catalog();
        let request = match self.spec.policy {
            PolicyKind::Stagewise => Request::new(id, arrival, graph, prediction.viable),
            PolicyKind::PerInputStatic => {
                let c = per_input_policy(id, &self.load.table, catalog, PerInputKind::Static);
                Request::pinned(id, arrival, graph, c)
            }
            PolicyKind::PerInputRuntime => {
                let est = RuntimeCostEstimator::new(&self.service, self.stages_ahead(), self.scenario.slots.clone());
                let c = per_input_policy(id, &self.load.table, catalog, PerInputKind::RuntimeCost(&est));
                Request::pinned(id, arrival, graph, c)
            }
            PolicyKind::PerWorkflow => unreachable!("handled above"),
        };
        self.routing.insert(id, request);
        self.events.push(end, EventKind::PredictionComplete { request: id });
    }

    /// Per engine: stages in flight plus waiting stages that can only run there.
    fn stages_ahead(&self) -> Vec<u32> {
        let mut ahead: Vec<u32> = self.engines.iter().map(|e| e.occupancy()).collect();
        for r in self.active.values() {
            for a in r.ready_agents() {
                if let [m] = r.candidate_models(a) {
                    ahead[*m as usize] += 1;
                }
            }
        }
        ahead
    }

    fn on_prediction(&mut self, id: RequestId) {
        let request = self.routing.remove(&id).expect("prediction for a routed request");
        self.enqueue(request);
    }

    fn enqueue(&mut self, request: Request) {
        self.timelines[request.id as usize].viable = request.viable().len();
        self.active.insert(request.id, request);
        self.trigger_round();
    }

    fn on_stage_complete(&mut self, id: RequestId, agent: usize, model: u8) -> Result<()> {
        self.engines[model as usize].complete(id, agent)?;
        let request = self.active.get_mut(&id).expect("in-flight request is active");
        request.complete(agent)?;
        let tl = &mut self.timelines[id as usize];
        if let Some(s) = tl.stages.iter_mut().find(|s| s.agent == agent) {
            s.complete = Some(self.now);
        }
        if request.is_finished() {
            let request = self.active.remove(&id).expect("present");
            let config = request.executed_configuration().expect("every stage bound");
            tl.accurate = Some(self.load.table.is_accurate(id, &config));
            tl.configuration = Some(config);
            tl.completion = Some(self.now);
        }
        self.trigger_round();
        Ok(())
    }

    fn on_round(&mut self) -> Result<()> {
        self.pending_round = None;
        let queue: Vec<&Request> = self.active.values().filter(|r| r.has_ready_agents()).collect();
        if queue.is_empty() {
            return Ok(());
        }
        self.counters.rounds += 1;
        let snapshots: Vec<_> = self.engines.iter().map(|e| e.snapshot()).collect();
        let assignment = beam_schedule(&queue, &snapshots, &self.spec.scheduler);
        let ready = queue.iter().map(|r| r.ready_agents().len()).sum();

        let arrivals = &self.load.arrivals;
        self.counters.fifo_violations += fifo_violations(&assignment, &snapshots, |r| arrivals[r as usize]) as u64;
        if assignment.assigned_count() == 0 {
            let could_place = queue.iter().any(|r| {
                r.ready_agents()
                    .into_iter()
                    .any(|a| r.candidate_models(a).iter().any(|&m| snapshots[m as usize].free_slots > 0))
            });
            if could_place {
                self.counters.work_conservation_violations += 1;
            }
            return Ok(());
        }

        let service = &self.service;
        let dispatches = apply_assignment(&assignment, &mut self.active, &mut self.engines, self.now, |r, a, m| {
            service.sample(r, a, m)
        });
        self.counters.stale_drops += (assignment.assigned_count() - dispatches.len()) as u64;
        for e in &self.engines {
            if e.occupancy() > e.max_slots {
                self.counters.capacity_violations += 1;
            }
        }
        for d in &dispatches {
            let request = &self.active[&d.request];
            if !request.prefix_consistent() || request.status(d.agent) != StageStatus::InFlight {
                self.counters.prefix_violations += 1;
            }
            let tl = &mut self.timelines[d.request as usize];
            if tl.stages.is_empty() {
                // Queueing delay before the first stage feeds the routing deadline.
                self.budget.update(self.now - tl.arrival)?;
            }
            tl.stages.push(StageRecord {
                agent: d.agent,
                model: d.model,
                dispatch: d.start,
                complete: None,
            });
            self.events.push(
                d.completion,
                EventKind::StageComplete {
                    request: d.request,
                    agent: d.agent,
                    model: d.model,
                },
            );
        }
        self.rounds.push(RoundRecord {
            time: self.now,
            ready,
            dispatched: dispatches.iter().map(|d| (d.request, d.agent, d.model)).collect(),
            skips: assignment.skips,
            utilization: assignment.score.utilization,
            flexibility: assignment.score.flexibility,
            occupancy: self.engines.iter().map(|e| e.occupancy()).collect(),
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::TableParams;
    use proptest::prelude::*;

    fn scenario(extra: &str) -> Scenario {
        let text = format!(
            r#"
            name = "t"
            [workflow]
            agents = ["a", "b", "c"]
            edges = [["a", "b"], ["a", "c"]]
            [[models]]
            name = "s"
            static_cost = 1.0
            throughput_weight = 2.0
            slots = 2
            service = {{ mu = -1.0, sigma = 0.3, floor = 0.05 }}
            [[models]]
            name = "l"
            static_cost = 4.0
            throughput_weight = 1.0
            slots = 3
            service = {{ mu = -0.3, sigma = 0.3, floor = 0.1 }}
            [router]
            latency = 0.01
            min_budget = 1.0
            [workload]
            rate = 3.0
            requests = 150
            {extra}
            "#
        );
        Scenario::from_toml(&text, None).unwrap()
    }

    fn single(router_latency: f64) -> Scenario {
        let text = format!(
            r#"
            name = "one"
            [workflow]
            agents = ["only"]
            [[models]]
            name = "s"
            static_cost = 1.0
            throughput_weight = 2.0
            slots = 1
            service = {{ mu = -1.0, sigma = 0.3 }}
            [[models]]
            name = "l"
            static_cost = 2.0
            throughput_weight = 1.0
            slots = 1
            service = {{ mu = 0.0, sigma = 0.3 }}
            [router]
            latency = {router_latency}
            min_budget = 1.0
            [workload]
            rate = 1.0
            requests = 1
            [[workload.table.tiers]]
            name = "hard"
            weight = 1.0
            base_prob = 0.0
            generators = 0
            level_floor = 0
            "#
        );
        Scenario::from_toml(&text, None).unwrap()
    }

    fn check_trace(t: &RunTrace, drained: bool) {
        assert_eq!(t.invariants.total_violations(), 0, "{:?}", t.invariants);
        for r in &t.requests {
            assert!(r.is_monotone(), "{r:?}");
            if drained {
                assert!(r.completion.is_some(), "request {} never finished", r.request);
            }
            if let Some(c) = &r.configuration {
                assert_eq!(r.stages.len(), c.len());
            }
        }
        for round in &t.rounds {
            assert!(!round.dispatched.is_empty());
        }
    }

    #[test]
    fn zero_requests_is_an_empty_run() {
        let mut s = scenario("");
        s.requests = 0;
        let t = run(&s, &RunSpec::new(&s, PolicyKind::Stagewise)).unwrap();
        assert!(t.requests.is_empty() && t.rounds.is_empty());
        assert_eq!(t.header.end_time, 0.0);
    }

    #[test]
    fn lone_request_pays_routing_then_service() {
        for latency in [0.0, 0.05] {
            let s = single(latency);
            let spec = RunSpec::new(&s, PolicyKind::Stagewise);
            let t = run(&s, &spec).unwrap();
            let r = &t.requests[0];
            // Only c* is accurate: the two-element chain costs one probe.
            let routing = r.prediction_latency();
            assert!((routing - latency * r.router_evals as f64).abs() < 1e-12);
            let service = s.service_model(spec.seed).sample(0, 0, 1);
            assert!((r.latency().unwrap() - (routing + service)).abs() < 1e-12);
            assert_eq!(r.configuration.as_ref().unwrap().models(), &[1]);
        }
    }

    #[test]
    fn per_workflow_skips_the_router() {
        let s = single(0.05);
        let t = run(&s, &RunSpec::new(&s, PolicyKind::PerWorkflow)).unwrap();
        let r = &t.requests[0];
        assert_eq!((r.prediction_start, r.router_evals), (None, 0));
        let service = s.service_model(s.seed).sample(0, 0, 1);
        assert!((r.latency().unwrap() - service).abs() < 1e-12);
    }

    #[test]
    fn every_policy_drains_with_invariants_and_accuracy() {
        let s = scenario("");
        for p in PolicyKind::ALL {
            let t = run(&s, &RunSpec::new(&s, p)).unwrap();
            check_trace(&t, true);
            assert!(t.requests.iter().all(|r| r.accurate == Some(true)), "{p}");
        }
    }

    #[test]
    fn hard_horizon_truncates() {
        let s = scenario("");
        let spec = RunSpec::new(&s, PolicyKind::Stagewise).with_rate(20.0).with_horizon(Horizon::Hard(10.0));
        let t = run(&s, &spec).unwrap();
        check_trace(&t, false);
        assert_eq!(t.header.end_time, 10.0);
        assert!(t.requests.iter().all(|r| r.arrival < 10.0));
        assert!(t.requests.iter().filter_map(|r| r.completion).all(|c| c <= 10.0));
        assert!(t.requests.iter().any(|r| r.completion.is_none()), "overloaded run should leave a backlog");
    }

    #[test]
    fn same_inputs_same_bytes() {
        let s = scenario("");
        for p in PolicyKind::ALL {
            let spec = RunSpec::new(&s, p).with_seed(11);
            let a = run(&s, &spec).unwrap().to_jsonl_bytes();
            let b = run(&s, &spec).unwrap().to_jsonl_bytes();
            assert_eq!(a, b);
            let c = run(&s, &spec.with_seed(12)).unwrap().to_jsonl_bytes();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn occupancy_never_exceeds_slots() {
        let s = scenario("");
        let t = run(&s, &RunSpec::new(&s, PolicyKind::Stagewise).with_rate(15.0)).unwrap();
        for round in &t.rounds {
            for (m, &o) in round.occupancy.iter().enumerate() {
                assert!(o <= s.slots[m]);
            }
        }
    }

    #[test]
    fn round_interval_puts_rounds_on_a_grid() {
        let s = scenario("[scheduler]\nround_interval = 0.5");
        let t = run(&s, &RunSpec::new(&s, PolicyKind::Stagewise)).unwrap();
        check_trace(&t, true);
        for round in &t.rounds {
            let k = round.time / 0.5;
            assert!((k - k.round()).abs() < 1e-9, "round at {}", round.time);
        }
    }

    #[test]
    fn noisy_router_keeps_served_accuracy() {
        let mut s2 = scenario("");
        s2.router.false_negative = 0.3;
        let t = run(&s2, &RunSpec::new(&s2, PolicyKind::Stagewise)).unwrap();
        check_trace(&t, true);
        assert!(t.requests.iter().all(|r| r.accurate == Some(true)));
    }

    #[test]
    fn trace_workload_overrides_generation() {
        let s = scenario("");
        let table = generate_accuracy_table(&s.space, &TableParams::default(), 3, 5).unwrap();
        let mut buf = Vec::new();
        crate::workload::write_trace(&mut buf, &s.space, &[0.5, 0.5, 2.0], &table).unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("w.jsonl"), &buf).unwrap();
        let text = std::fs::read_to_string(dir.path().join("w.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 3);
        let mut file = s.file.clone();
        file.workload.trace = Some("w.jsonl".into());
        let with_trace = Scenario::from_file(file, Some(dir.path())).unwrap();
        let load = workload(&with_trace, 99.0, 1, Horizon::Drain).unwrap();
        assert_eq!(load.arrivals, vec![0.5, 0.5, 2.0]);
        let t = run_with_workload(&with_trace, &RunSpec::new(&with_trace, PolicyKind::Stagewise), &load).unwrap();
        check_trace(&t, true);
        let hard = workload(&with_trace, 99.0, 1, Horizon::Hard(1.0)).unwrap();
        assert_eq!(hard.arrivals.len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        // Every arrival is completed, in flight or queued; drained runs finish all.
        #[test]
        fn conservation_and_capacity(seed in any::<u64>(), rate in 0.5f64..30.0, policy in 0usize..4, horizon in 2.0f64..20.0) {
            let s = scenario("");
            let spec = RunSpec::new(&s, PolicyKind::ALL[policy]).with_seed(seed).with_rate(rate);
            let t = run(&s, &spec.with_horizon(Horizon::Hard(horizon))).unwrap();
            check_trace(&t, false);
            let done = t.requests.iter().filter(|r| r.completion.is_some()).count();
            let started = t.requests.iter().filter(|r| !r.stages.is_empty()).count();
            prop_assert!(done <= started && started <= t.requests.len());
            let t = run(&s, &spec).unwrap();
            check_trace(&t, true);
        }
    }
}
