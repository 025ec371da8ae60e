use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use jitroute::baselines::PolicyKind;
use jitroute::metrics::{self, RunReport};
use jitroute::sim::trace::RunTrace;
use jitroute::sim::{self, Horizon, RunSpec, Scenario};

fn shipped() -> Vec<Scenario> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    assert!(paths.len() >= 3);
    paths.iter().map(|p| Scenario::load(p).unwrap()).collect()
}

#[test]
fn traces_and_reports_survive_files() {
    let dir = tempfile::tempdir().unwrap();
    for s in shipped() {
        for p in PolicyKind::ALL {
            let spec = RunSpec::new(&s, p).with_horizon(Horizon::Hard(40.0));
            let trace = sim::run(&s, &spec).unwrap();
            assert_eq!(trace.invariants.total_violations(), 0, "{} {}", s.name, p.name());
            assert!(trace.requests.iter().all(|r| r.is_monotone()));

            let path = dir.path().join(format!("{}-{}.jsonl", s.name, p.name()));
            trace.write_jsonl(BufWriter::new(File::create(&path).unwrap())).unwrap();
            let back = RunTrace::read_jsonl(BufReader::new(File::open(&path).unwrap())).unwrap();
            assert_eq!(back, trace);

            let report = RunReport::from_trace(&trace);
            let csv = dir.path().join("r.csv");
            metrics::write_csv(&[report.clone()], File::create(&csv).unwrap()).unwrap();
            let rows: Vec<RunReport> = metrics::read_csv(File::open(&csv).unwrap()).unwrap();
            assert_eq!(rows, vec![report]);
        }
    }
}

#[test]
fn low_load_throughput_tracks_offered_rate() {
    let s = shipped().into_iter().find(|s| s.name == "self-refine").unwrap();
    let spec = RunSpec::new(&s, PolicyKind::Stagewise).with_rate(0.5).with_horizon(Horizon::Hard(400.0));
    let r = metrics::run_report(&s, &spec).unwrap();
    assert!(r.throughput <= r.offered_rate + 1e-12);
    assert!((r.throughput - r.offered_rate).abs() / r.offered_rate < 0.05, "{r:?}");
}

#[test]
fn degenerate_workload_equalizes_policies() {
    let s = shipped().into_iter().find(|s| s.name == "degenerate").unwrap();
    let spec = RunSpec::new(&s, PolicyKind::Stagewise).with_horizon(Horizon::Hard(200.0));
    let cmp = metrics::compare_policies(&s, &spec, &[2.5, 3.0], &[1], jitroute::par::Exec::Parallel).unwrap();
    let sats: Vec<f64> = cmp.summary().iter().map(|r| r.saturation).collect();
    let (lo, hi) = sats.iter().fold((f64::MAX, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(hi - lo <= 0.05 * hi, "{sats:?}");
}
