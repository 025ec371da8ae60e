//! Run reports, rate sweeps, policy comparisons and the desk-scale studies
//! (pruning reduction, beam quality, beam size).

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::baselines::PolicyKind;
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::predictor::{ChainMode, OracleRouter, Predictor, ViableSet};
use crate::rng;
use crate::scheduler::{beam_schedule, brute_force_schedule, EngineSnapshot, Request, SchedulerParams};
use crate::sim::trace::RunTrace;
use crate::sim::{self, Horizon, RunSpec, Scenario};
use crate::workflow::{ConfigSpace, Configuration, WorkflowGraph};
use crate::workload::{generate_accuracy_table, TableParams};

/// Nearest-rank percentile of ascending `sorted`: the value at rank
/// `ceil(p / 100 * n)`, with rank at least 1.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil().clamp(1.0, n as f64) as usize;
    Some(sorted[rank - 1])
}

pub const RUNTIME_ESTIMATOR: &str = "sum over stages of (stages ahead / slots + 1) * mean service, frozen at arrival";

/// Summary of one run, or the mean over several seeds. Absent values (no
/// completed requests, no routing) are empty CSV fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub policy: PolicyKind,
    pub rate: f64,
    pub beam_width: usize,
    /// Space-separated seeds averaged into this row.
    pub seeds: String,
    pub horizon: Option<f64>,
    pub arrivals: f64,
    pub completed: f64,
    /// Arrivals over the arrival window (horizon, or last arrival).
    pub offered_rate: f64,
    pub makespan: f64,
    pub throughput: f64,
    pub latency_mean: Option<f64>,
    pub latency_p25: Option<f64>,
    pub latency_p50: Option<f64>,
    pub latency_p90: Option<f64>,
    pub latency_p95: Option<f64>,
    pub served_accuracy: Option<f64>,
    /// Routing time over end-to-end latency, summed over completed requests.
    pub router_share: Option<f64>,
    pub router_evals_total: f64,
    pub router_evals_mean: Option<f64>,
    pub viable_mean: Option<f64>,
    pub rounds: f64,
    pub dispatched_per_round: Option<f64>,
    pub skips_per_round: Option<f64>,
    pub flexibility_mean: Option<f64>,
    pub invariant_violations: u64,
    pub estimator: String,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl RunReport {
    pub fn from_trace(trace: &RunTrace) -> Self {
        let h = &trace.header;
        let mut latencies: Vec<f64> = trace.requests.iter().filter_map(|r| r.latency()).collect();
        latencies.sort_by(f64::total_cmp);
        let completed = latencies.len();
        let makespan = match h.horizon {
            Some(hz) => hz,
            None => trace.completed().filter_map(|r| r.completion).fold(0.0, f64::max),
        };
        let window = match h.horizon {
            Some(hz) => hz,
            None => trace.requests.iter().map(|r| r.arrival).fold(0.0, f64::max),
        };
        let routed = h.policy.uses_router();
        let total_latency: f64 = latencies.iter().sum();
        let routing: f64 = trace.completed().map(|r| r.prediction_latency()).sum();
        let router_evals_total: u64 = trace.requests.iter().map(|r| r.router_evals).sum();
        let queued: Vec<&_> = trace.requests.iter().filter(|r| r.viable > 0).collect();
        let rounds = trace.rounds.len();
        Self {
            scenario: h.scenario.clone(),
            policy: h.policy,
            rate: h.rate,
            beam_width: h.beam_width,
            seeds: h.seed.to_string(),
            horizon: h.horizon,
            arrivals: h.arrivals as f64,
            completed: completed as f64,
            offered_rate: if window > 0.0 { h.arrivals as f64 / window } else { 0.0 },
            makespan,
            throughput: if makespan > 0.0 { completed as f64 / makespan } else { 0.0 },
            latency_mean: mean(latencies.iter().copied()),
            latency_p25: nearest_rank(&latencies, 25.0),
            latency_p50: nearest_rank(&latencies, 50.0),
            latency_p90: nearest_rank(&latencies, 90.0),
            latency_p95: nearest_rank(&latencies, 95.0),
            served_accuracy: mean(trace.completed().map(|r| f64::from(u8::from(r.accurate == Some(true))))),
            router_share: (routed && total_latency > 0.0).then(|| routing / total_latency),
            router_evals_total: router_evals_total as f64,
            router_evals_mean: if routed {
                mean(trace.requests.iter().filter(|r| r.prediction_end.is_some()).map(|r| r.router_evals as f64))
            } else {
                None
            },
            viable_mean: mean(queued.iter().map(|r| r.viable as f64)),
            rounds: rounds as f64,
            dispatched_per_round: mean(trace.rounds.iter().map(|r| r.dispatched.len() as f64)),
            skips_per_round: mean(trace.rounds.iter().map(|r| r.skips as f64)),
            flexibility_mean: mean(trace.rounds.iter().map(|r| r.flexibility)),
            invariant_violations: trace.invariants.total_violations(),
            estimator: if h.policy == PolicyKind::PerInputRuntime {
                RUNTIME_ESTIMATOR.to_string()
            } else {
                String::new()
            },
        }
    }

    /// Field-wise mean over runs of the same (scenario, policy, rate, beam
    /// width); violations are summed.
    pub fn aggregate(reports: &[RunReport]) -> Result<RunReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::validation("nothing to aggregate"))?;
        if reports.iter().any(|r| {
            r.scenario != first.scenario
                || r.policy != first.policy
                || r.rate != first.rate
                || r.beam_width != first.beam_width
                || r.horizon != first.horizon
        }) {
            return Err(Error::validation("reports disagree on scenario, policy, rate or beam width"));
        }
        let avg = |f: fn(&RunReport) -> f64| mean(reports.iter().map(f)).expect("nonempty");
        let opt = |f: fn(&RunReport) -> Option<f64>| mean(reports.iter().filter_map(f));
        Ok(RunReport {
            scenario: first.scenario.clone(),
            policy: first.policy,
            rate: first.rate,
            beam_width: first.beam_width,
            seeds: reports.iter().map(|r| r.seeds.as_str()).collect::<Vec<_>>().join(" "),
            horizon: first.horizon,
            arrivals: avg(|r| r.arrivals),
            completed: avg(|r| r.completed),
            offered_rate: avg(|r| r.offered_rate),
            makespan: avg(|r| r.makespan),
            throughput: avg(|r| r.throughput),
            latency_mean: opt(|r| r.latency_mean),
            latency_p25: opt(|r| r.latency_p25),
            latency_p50: opt(|r| r.latency_p50),
            latency_p90: opt(|r| r.latency_p90),
            latency_p95: opt(|r| r.latency_p95),
            served_accuracy: opt(|r| r.served_accuracy),
            router_share: opt(|r| r.router_share),
            router_evals_total: avg(|r| r.router_evals_total),
            router_evals_mean: opt(|r| r.router_evals_mean),
            viable_mean: opt(|r| r.viable_mean),
            rounds: avg(|r| r.rounds),
            dispatched_per_round: opt(|r| r.dispatched_per_round),
            skips_per_round: opt(|r| r.skips_per_round),
            flexibility_mean: opt(|r| r.flexibility_mean),
            invariant_violations: reports.iter().map(|r| r.invariant_violations).sum(),
            estimator: first.estimator.clone(),
        })
    }
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned, R: Read>(input: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn to_csv_string<T: Serialize>(rows: &[T]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn run_report(scenario: &Scenario, spec: &RunSpec) -> Result<RunReport> {
    Ok(RunReport::from_trace(&sim::run(scenario, spec)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub policy: PolicyKind,
    pub beam_width: usize,
    /// One seed-averaged report per rate, rates ascending.
    pub reports: Vec<RunReport>,
    /// Highest throughput across the sweep.
    pub saturation: f64,
}

fn check_rates(rates: &[f64], seeds: &[u64]) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::validation("a sweep needs at least one rate"));
    }
    if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::validation("rates must be positive"));
    }
    if rates.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("rates must be strictly increasing"));
    }
    if seeds.is_empty() {
        return Err(Error::validation("a sweep needs at least one seed"));
    }
    Ok(())
}

fn collect_sweep(spec: &RunSpec, rates: &[f64], seeds: &[u64], runs: &[RunReport]) -> Result<SweepResult> {
    let reports = runs
        .chunks(seeds.len())
        .map(RunReport::aggregate)
        .collect::<Result<Vec<_>>>()?;
    debug_assert_eq!(reports.len(), rates.len());
    let saturation = reports.iter().map(|r| r.throughput).fold(0.0, f64::max);
    Ok(SweepResult {
        policy: spec.policy,
        beam_width: spec.scheduler.beam_width,
        reports,
        saturation,
    })
}

/// Runs every (rate, seed) pair under `spec`'s policy, scheduler and horizon.
/// Sweeps normally use a hard horizon so that throughput can saturate.
pub fn sweep(scenario: &Scenario, spec: &RunSpec, rates: &[f64], seeds: &[u64], exec: Exec) -> Result<SweepResult> {
    check_rates(rates, seeds)?;
    let jobs: Vec<RunSpec> = rates
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| spec.with_rate(r).with_seed(s)))
        .collect();
    let runs = exec
        .map(&jobs, |j| run_report(scenario, j))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    collect_sweep(spec, rates, seeds, &runs)
}

/// The scenario's sweep settings: its rates, seeds and sweep horizon.
pub fn default_sweep(scenario: &Scenario, policy: PolicyKind, exec: Exec) -> Result<SweepResult> {
    let spec = RunSpec::new(scenario, policy).with_horizon(Horizon::Hard(scenario.sweep_horizon));
    let rates = if scenario.sweep_rates.is_empty() {
        vec![scenario.rate]
    } else {
        scenario.sweep_rates.clone()
    };
    sweep(scenario, &spec, &rates, &scenario.seeds, exec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationRow {
    pub policy: PolicyKind,
    pub saturation: f64,
    /// Stagewise saturation divided by this policy's.
    pub stagewise_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// One sweep per policy, in [`PolicyKind::ALL`] order.
    pub sweeps: Vec<SweepResult>,
}

impl Comparison {
    pub fn sweep(&self, policy: PolicyKind) -> &SweepResult {
        self.sweeps.iter().find(|s| s.policy == policy).expect("every policy is swept")
    }

    pub fn saturation(&self, policy: PolicyKind) -> f64 {
        self.sweep(policy).saturation
    }

    pub fn summary(&self) -> Vec<SaturationRow> {
        let ours = self.saturation(PolicyKind::Stagewise);
        self.sweeps
            .iter()
            .map(|s| SaturationRow {
                policy: s.policy,
                saturation: s.saturation,
                stagewise_ratio: if s.saturation > 0.0 { ours / s.saturation } else { f64::INFINITY },
            })
            .collect()
    }

    pub fn reports(&self) -> Vec<RunReport> {
        self.sweeps.iter().flat_map(|s| s.reports.iter().cloned()).collect()
    }
}

/// Sweeps all four policies over the same rates and seeds. Every
/// (policy, rate, seed) run is an independent job.
pub fn compare_policies(scenario: &Scenario, spec: &RunSpec, rates: &[f64], seeds: &[u64], exec: Exec) -> Result<Comparison> {
    check_rates(rates, seeds)?;
    let specs: Vec<RunSpec> = PolicyKind::ALL.iter().map(|&p| RunSpec { policy: p, ..*spec }).collect();
    let jobs: Vec<RunSpec> = specs
        .iter()
        .flat_map(|s| {
            rates
                .iter()
                .flat_map(move |&r| seeds.iter().map(move |&seed| s.with_rate(r).with_seed(seed)))
        })
        .collect();
    let runs = exec
        .map(&jobs, |j| run_report(scenario, j))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let per_policy = rates.len() * seeds.len();
    let sweeps = specs
        .iter()
        .zip(runs.chunks(per_policy))
        .map(|(s, chunk)| collect_sweep(s, rates, seeds, chunk))
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { sweeps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningRow {
    pub instance: usize,
    pub agents: usize,
    pub models: usize,
    pub exhaustive_evals: u64,
    pub pruned_evals: u64,
    pub reduction_pct: f64,
    /// Some chain's boundary lies strictly inside the chain.
    pub interior_boundary: bool,
    /// Pruned result equals the exhaustive result.
    pub exact: bool,
}

/// Router evaluations with chain pruning versus routing every configuration,
/// on random monotone tables over every `N <= 4, M <= 3` lattice (cycled).
pub fn pruning_reduction(instances: usize, params: &TableParams, seed: u64, exec: Exec) -> Result<Vec<PruningRow>> {
    let shapes: Vec<(usize, usize)> = (1..=4).flat_map(|n| (2..=3).map(move |m| (n, m))).collect();
    let predictors: Vec<Predictor> = shapes
        .iter()
        .map(|&(n, m)| {
            let space = ConfigSpace::uniform(n, m)?;
            Ok(Predictor::new(space, ChainMode::Exhaustive))
        })
        .collect::<Result<_>>()?;
    let ids: Vec<usize> = (0..instances).collect();
    exec.map(&ids, |&i| {
        let p = &predictors[i % shapes.len()];
        let space = p.space();
        let table = generate_accuracy_table(space, params, 1, rng::derive_seed(&[seed, rng::TAG_PROFILE, i as u64]))?;
        let router = OracleRouter::new(Arc::new(table), 1.0);
        let pruned = p.predict(0, &router, f64::INFINITY);
        let full = p.predict_exhaustive(0, &router);
        let interior = p.chains().iter().any(|chain| {
            let b = crate::predictor::boundary_search_by(chain, |c| router.table().is_accurate(0, c));
            b > 0 && b < chain.len() - 1
        });
        let (e, q) = (full.router_eval_count(), pruned.router_eval_count());
        Ok(PruningRow {
            instance: i,
            agents: space.n_agents(),
            models: space.n_models(),
            exhaustive_evals: e,
            pruned_evals: q,
            reduction_pct: 100.0 * (e as f64 - q as f64) / e as f64,
            interior_boundary: interior,
            exact: pruned.viable == full.viable,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamQualityRow {
    pub snapshot: usize,
    pub requests: usize,
    pub ready_pairs: usize,
    pub beam: f64,
    pub greedy: f64,
    pub brute_force: f64,
    pub beam_flexibility: f64,
    pub brute_force_flexibility: f64,
}

/// Most ready pairs in one random snapshot; keeps brute force under its cap.
pub const SNAPSHOT_MAX_PAIRS: usize = 8;

/// A random scheduling snapshot: up to six fresh requests on small chain or
/// fan-in workflows (at most [`SNAPSHOT_MAX_PAIRS`] ready pairs), random
/// viable sets, and two to four engines with random free slots.
pub fn random_snapshot(seed: u64, index: u64) -> (Vec<Request>, Vec<EngineSnapshot>) {
    let mut rng = rng::stream(&[seed, rng::TAG_SNAPSHOT, index]);
    let m = rng.random_range(2..=4usize);
    let chain = Arc::new(WorkflowGraph::chain(2).expect("valid"));
    let fan = Arc::new(
        WorkflowGraph::build(&["left", "right", "join"], &[("left", "join"), ("right", "join")]).expect("valid"),
    );
    let mut weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..2.0)).collect();
    weights.sort_by(|a, b| b.total_cmp(a));
    let engines: Vec<EngineSnapshot> = weights
        .iter()
        .map(|&w| EngineSnapshot {
            free_slots: rng.random_range(0..=3),
            weight: w,
        })
        .collect();

    let n_requests = rng.random_range(1..=6usize);
    let mut requests = Vec::new();
    let mut pairs = 0;
    for id in 0..n_requests as u64 {
        let graph = if pairs + 2 <= SNAPSHOT_MAX_PAIRS && rng.random_bool(0.4) {
            fan.clone()
        } else if pairs < SNAPSHOT_MAX_PAIRS {
            chain.clone()
        } else {
            break;
        };
        pairs += graph.sources().count();
        let space = ConfigSpace::uniform(graph.len(), m).expect("valid");
        let all: Vec<Configuration> = space.iter().collect();
        let k = rng.random_range(1..=all.len().min(6));
        let picked: Vec<Configuration> = all.choose_multiple(&mut rng, k).cloned().collect();
        let viable = ViableSet::new(id, picked, space.top());
        requests.push(Request::new(id, id as f64, graph, viable));
    }
    (requests, engines)
}

/// Beam (`B = 4`), greedy (`B = 1`) and brute-force utilization on random
/// snapshots.
pub fn beam_quality(snapshots: usize, seed: u64, exec: Exec) -> Result<Vec<BeamQualityRow>> {
    let ids: Vec<usize> = (0..snapshots).collect();
    exec.map(&ids, |&i| {
        let (requests, engines) = random_snapshot(seed, i as u64);
        let queue: Vec<&Request> = requests.iter().collect();
        let params = SchedulerParams::default();
        let beam = beam_schedule(&queue, &engines, &params);
        let greedy = beam_schedule(&queue, &engines, &SchedulerParams { beam_width: 1, ..params });
        let best = brute_force_schedule(&queue, &engines, &params)?;
        Ok(BeamQualityRow {
            snapshot: i,
            requests: requests.len(),
            ready_pairs: beam.decisions.len(),
            beam: beam.score.utilization,
            greedy: greedy.score.utilization,
            brute_force: best.score.utilization,
            beam_flexibility: beam.score.flexibility,
            brute_force_flexibility: best.score.flexibility,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamSizeRow {
    pub beam_width: usize,
    pub saturation: f64,
}

/// Stagewise saturation throughput for each beam width, over the scenario's
/// sweep rates and seeds.
pub fn beam_size(scenario: &Scenario, widths: &[usize], exec: Exec) -> Result<Vec<BeamSizeRow>> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::validation("beam widths must be >= 1"));
    }
    let rates = if scenario.sweep_rates.is_empty() {
        vec![scenario.rate]
    } else {
        scenario.sweep_rates.clone()
    };
    let seeds = &scenario.seeds;
    check_rates(&rates, seeds)?;
    let base = RunSpec::new(scenario, PolicyKind::Stagewise).with_horizon(Horizon::Hard(scenario.sweep_horizon));
    let jobs: Vec<RunSpec> = widths
        .iter()
        .flat_map(|&b| {
            let rates = &rates;
            rates
                .iter()
                .flat_map(move |&r| seeds.iter().map(move |&s| base.with_beam_width(b).with_rate(r).with_seed(s)))
        })
        .collect();
    let runs = exec
        .map(&jobs, |j| run_report(scenario, j))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    widths
        .iter()
        .zip(runs.chunks(rates.len() * seeds.len()))
        .map(|(&b, chunk)| {
            let s = collect_sweep(&base.with_beam_width(b), &rates, seeds, chunk)?;
            Ok(BeamSizeRow {
                beam_width: b,
                saturation: s.saturation,
            })
        })
        .collect()
}
