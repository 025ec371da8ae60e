//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use jitroute::baselines::PolicyKind;
use jitroute::metrics::{self, Comparison, RunReport};
use jitroute::par::Exec;
use jitroute::predictor::{ChainMode, NoisyRouter, OracleRouter, Predictor};
use jitroute::rng;
use jitroute::sim::trace::RunTrace;
use jitroute::sim::{self, Horizon, RunSpec, Scenario};
use jitroute::workflow::{ConfigSpace, Configuration};
use jitroute::workload::{generate_accuracy_table, TableParams};

fn scenario(file: &str) -> Scenario {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(file);
    Scenario::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// FIFO and other invariant counts from every end-to-end run the suite makes.
#[derive(Default)]
struct Tally {
    runs: u64,
    rounds: u64,
    fifo: u64,
    other: u64,
}

impl Tally {
    fn trace(&mut self, t: &RunTrace) {
        self.runs += 1;
        self.rounds += t.invariants.rounds;
        self.fifo += t.invariants.fifo_violations;
        self.other += t.invariants.total_violations() - t.invariants.fifo_violations;
    }

    fn reports<'a>(&mut self, rs: impl IntoIterator<Item = &'a RunReport>) {
        for r in rs {
            self.runs += r.seeds.split(' ').count() as u64;
            self.other += r.invariant_violations;
        }
    }
}

fn shapes() -> Vec<(usize, usize)> {
    (1..=4).flat_map(|n| (2..=3).map(move |m| (n, m))).collect()
}

struct LatticeInstance {
    models: usize,
    agents: usize,
    exact: bool,
    evals: u64,
    interior: bool,
}

/// Pruned prediction against a brute-force scan of the ground-truth labels.
fn lattice_instances(count: usize) -> Vec<LatticeInstance> {
    let predictors: Vec<Predictor> = shapes()
        .into_iter()
        .map(|(n, m)| Predictor::new(ConfigSpace::uniform(n, m).unwrap(), ChainMode::Exhaustive))
        .collect();
    let params = TableParams::default();
    (0..count)
        .map(|i| {
            let p = &predictors[i % predictors.len()];
            let space = p.space();
            let table = generate_accuracy_table(space, &params, 1, rng::derive_seed(&[0xacce, i as u64])).unwrap();
            let truth: BTreeSet<Configuration> = space.iter().filter(|c| table.is_accurate(0, c)).collect();
            let router = OracleRouter::new(Arc::new(table), 1.0);
            let pred = p.predict(0, &router, f64::INFINITY);
            let got: BTreeSet<Configuration> = pred.viable.configs().iter().cloned().collect();
            // Linear scan for the first accurate element of each chain.
            let interior = p.chains().iter().any(|chain| {
                let first = chain.iter().position(|c| router.table().is_accurate(0, c)).unwrap_or(chain.len());
                first > 0 && first < chain.len() - 1
            });
            LatticeInstance {
                models: space.n_models(),
                agents: space.n_agents(),
                exact: got == truth,
                evals: pred.router_eval_count(),
                interior,
            }
        })
        .collect()
}

fn criterion_1(inst: &[LatticeInstance], secs: f64) -> Outcome {
    let mismatches = inst.iter().filter(|i| !i.exact).count();
    outcome(
        inst.len() == 500 && mismatches == 0 && secs <= 60.0,
        format!("{} instances, {mismatches} mismatches, {secs:.2}s", inst.len()),
    )
}

fn criterion_2(inst: &[LatticeInstance]) -> Outcome {
    let mut red: Vec<f64> = Vec::new();
    let mut bad = 0;
    for i in inst {
        let full = (i.models as u64).pow(i.agents as u32);
        if i.interior && i.evals >= full {
            bad += 1;
        }
        red.push(100.0 * (full as f64 - i.evals as f64) / full as f64);
    }
    let mean = red.iter().sum::<f64>() / red.len() as f64;
    red.sort_by(f64::total_cmp);
    let q = |p: f64| metrics::nearest_rank(&red, p).unwrap();
    let interior = inst.iter().filter(|i| i.interior).count();
    outcome(
        bad == 0 && mean >= 25.0,
        format!(
            "mean reduction {mean:.1}% (min {:.1}, p25 {:.1}, p50 {:.1}, p75 {:.1}, max {:.1}); {interior} interior instances, {bad} without savings",
            q(0.0),
            q(25.0),
            q(50.0),
            q(75.0),
            q(100.0)
        ),
    )
}

fn criterion_3(reference: &Scenario, tally: &mut Tally) -> Outcome {
    let predictor = Predictor::new(reference.space.clone(), ChainMode::auto(&reference.space, reference.router.chain_cap));
    let n = 10_000;
    let table = Arc::new(generate_accuracy_table(&reference.space, &reference.table_params, n, 31).unwrap());
    let mut inaccurate = 0;
    let mut sizes = Vec::new();
    for fnr in [0.1, 0.3] {
        let router = NoisyRouter::new(OracleRouter::new(table.clone(), 0.002), 0.0, fnr, 17).unwrap();
        let mut total = 0;
        for r in 0..n as u64 {
            let pred = predictor.predict(r, &router, f64::INFINITY);
            total += pred.viable.len();
            inaccurate += pred.viable.configs().iter().filter(|c| !table.is_accurate(r, c)).count();
        }
        sizes.push(total as f64 / n as f64);
    }
    let truth = (0..n as u64).map(|r| table.accurate_set(r).len()).sum::<usize>() as f64 / n as f64;

    let mut served = Vec::new();
    for fnr in [0.1, 0.3] {
        let mut s = reference.clone();
        s.router.false_negative = fnr;
        let t = sim::run(&s, &RunSpec::new(&s, PolicyKind::Stagewise)).unwrap();
        tally.trace(&t);
        served.push(RunReport::from_trace(&t).served_accuracy);
    }
    outcome(
        inaccurate == 0 && served.iter().all(|&a| a == Some(1.0)),
        format!(
            "{inaccurate} inaccurate in 2x{n} predictions; mean viable {:.2}/{:.2} (fn 0.1/0.3) vs {truth:.2} true; served accuracy {served:?}",
            sizes[0], sizes[1]
        ),
    )
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let rows = metrics::beam_quality(1000, 1, Exec::Parallel).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let near = rows.iter().filter(|r| r.beam >= 0.95 * r.brute_force - 1e-9).count();
    let vs_greedy = rows.iter().filter(|r| r.beam >= r.greedy - 1e-9).count();
    let bounded = rows.iter().all(|r| r.requests <= 6);
    let frac = near as f64 / rows.len() as f64;
    outcome(
        rows.len() == 1000 && bounded && frac >= 0.95 && vs_greedy == rows.len() && secs <= 120.0,
        format!("{near}/1000 within 95% of brute force, {vs_greedy}/1000 >= greedy, {secs:.2}s"),
    )
}

fn criterion_5(reference: &Scenario, tally: &mut Tally) -> Outcome {
    let rows = metrics::beam_size(reference, &[1, 2, 4, 8], Exec::Parallel).unwrap();
    let s: Vec<f64> = rows.iter().map(|r| r.saturation).collect();
    let nondecreasing = s.windows(2).all(|w| w[1] >= w[0]);
    let (d12, d48) = (s[1] - s[0], s[3] - s[2]);
    tally.runs += (rows.len() * reference.sweep_rates.len() * reference.seeds.len()) as u64;
    outcome(
        nondecreasing && d48 <= d12,
        format!("saturation B=1,2,4,8: {s:.3?}; delta(1->2) {d12:.4}, delta(4->8) {d48:.4}"),
    )
}

fn reference_comparison(reference: &Scenario) -> Comparison {
    let spec = RunSpec::new(reference, PolicyKind::Stagewise).with_horizon(Horizon::Hard(reference.sweep_horizon));
    metrics::compare_policies(reference, &spec, &reference.sweep_rates, &reference.seeds, Exec::Parallel).unwrap()
}

fn criterion_6(reference: &Scenario, cmp: &Comparison) -> Outcome {
    let sat = |p| cmp.saturation(p);
    let (a, s, w) = (
        sat(PolicyKind::Stagewise),
        sat(PolicyKind::PerInputStatic),
        sat(PolicyKind::PerWorkflow),
    );
    outcome(
        reference.sweep_rates.len() >= 6 && reference.seeds.len() == 3 && a > s && s > w && a >= 1.3 * s,
        format!(
            "stagewise {a:.3} > per-input-static {s:.3} > per-workflow {w:.3} (per-input-runtime {:.3}); ratio {:.2} over {} rates x {} seeds",
            sat(PolicyKind::PerInputRuntime),
            a / s,
            reference.sweep_rates.len(),
            reference.seeds.len()
        ),
    )
}

fn criterion_7(tally: &Tally) -> Outcome {
    outcome(
        tally.fifo == 0 && tally.other == 0,
        format!(
            "{} runs ({} traced rounds): {} FIFO violations, {} other invariant violations",
            tally.runs, tally.rounds, tally.fifo, tally.other
        ),
    )
}

fn trace_bytes(s: &Scenario, p: PolicyKind, seed: u64, tally: &mut Tally) -> (Vec<u8>, String) {
    let t = sim::run(s, &RunSpec::new(s, p).with_seed(seed)).unwrap();
    tally.trace(&t);
    (t.to_jsonl_bytes(), metrics::to_csv_string(&[RunReport::from_trace(&t)]))
}

fn criterion_8(scenarios: &[&Scenario], tally: &mut Tally) -> Outcome {
    let pools: Vec<rayon::ThreadPool> = [1, 4]
        .iter()
        .map(|&k| rayon::ThreadPoolBuilder::new().num_threads(k).build().unwrap())
        .collect();
    let mut pairs = 0;
    let mut differing = Vec::new();
    for s in scenarios {
        for p in PolicyKind::ALL {
            for &seed in &s.seeds {
                pairs += 1;
                let a = trace_bytes(s, p, seed, tally);
                let b = trace_bytes(s, p, seed, tally);
                if a != b {
                    differing.push(format!("{}/{}/{seed}", s.name, p.name()));
                }
            }
        }
        // Parallel sweeps under different pool sizes, and sequentially.
        let spec = RunSpec::new(s, PolicyKind::Stagewise).with_horizon(Horizon::Hard(60.0));
        let rates: Vec<f64> = if s.sweep_rates.is_empty() {
            vec![s.rate]
        } else {
            s.sweep_rates.iter().copied().take(3).collect()
        };
        let csv: Vec<String> = pools
            .iter()
            .map(|pool| pool.install(|| metrics::compare_policies(s, &spec, &rates, &s.seeds, Exec::Parallel)))
            .chain(std::iter::once(metrics::compare_policies(s, &spec, &rates, &s.seeds, Exec::Sequential)))
            .map(|c| {
                let c = c.unwrap();
                tally.reports(c.reports().iter());
                metrics::to_csv_string(&c.reports())
            })
            .collect();
        if csv.iter().any(|c| c != &csv[0]) {
            differing.push(format!("{} sweep CSV across pools", s.name));
        }
    }
    outcome(
        differing.is_empty(),
        format!("{pairs} (scenario, policy, seed) pairs traced twice, sweeps on 1/4-thread pools and sequential; differing: {differing:?}"),
    )
}

fn criterion_9(s: &Scenario, tally: &mut Tally) -> Outcome {
    let t = sim::run(s, &RunSpec::new(s, PolicyKind::Stagewise)).unwrap();
    tally.trace(&t);
    let lat: Vec<f64> = t.requests.iter().filter_map(|r| r.latency()).collect();
    let end = t.requests.iter().filter_map(|r| r.completion).fold(0.0, f64::max);
    // Time-average number in system over [0, end]: every request completes
    // by `end`, so the integral of N(t) is the sum of sojourn times.
    let l = lat.iter().sum::<f64>() / end;
    let w = lat.iter().sum::<f64>() / lat.len() as f64;
    let lambda = s.rate;
    let load = lambda / s.capacity_for(s.space.top());
    let err = (l - lambda * w).abs() / (lambda * w);
    outcome(
        lat.len() == 10_000 && (load - 0.5).abs() < 0.01 && err <= 0.15,
        format!("L {l:.4}, lambda*W {:.4} (W {w:.4}, lambda {lambda}), relative error {:.2}%, load {load:.2}", lambda * w, 100.0 * err),
    )
}

fn criterion_10(cmp: &Comparison) -> Outcome {
    let sweep = cmp.sweep(PolicyKind::Stagewise);
    let shares: Vec<f64> = sweep.reports.iter().map(|r| r.router_share.unwrap_or(f64::NAN)).collect();
    let decreasing = shares.windows(2).all(|w| w[1] < w[0]);
    let last = *shares.last().unwrap();
    outcome(
        decreasing && last < 0.05,
        format!("router share by rate: {shares:.4?}"),
    )
}

fn main() {
    let reference = scenario("self_refine.toml");
    let degenerate = scenario("degenerate.toml");
    let littles = scenario("littles_law.toml");
    let mut tally = Tally::default();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {:<26} {}  {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    let t0 = Instant::now();
    let inst = lattice_instances(500);
    let secs = t0.elapsed().as_secs_f64();
    report(1, "lattice/pruning equivalence", criterion_1(&inst, secs));
    report(2, "pruning economy", criterion_2(&inst));
    report(3, "precision safety", criterion_3(&reference, &mut tally));
    report(4, "beam quality", criterion_4());
    report(5, "beam-size monotonicity", criterion_5(&reference, &mut tally));
    let cmp = reference_comparison(&reference);
    tally.reports(cmp.reports().iter());
    report(6, "policy ordering", criterion_6(&reference, &cmp));
    let c8 = criterion_8(&[&reference, &degenerate, &littles], &mut tally);
    let c9 = criterion_9(&littles, &mut tally);
    report(7, "FIFO fairness", criterion_7(&tally));
    report(8, "determinism", c8);
    report(9, "queueing sanity", c9);
    report(10, "routing overhead share", criterion_10(&cmp));

    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| !o.pass).map(|(n, _, _)| *n).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
