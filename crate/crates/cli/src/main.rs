use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use jitroute::baselines::PolicyKind;
use jitroute::metrics::{self, RunReport};
use jitroute::par::Exec;
use jitroute::sim::{self, Horizon, RunSpec, Scenario};
use jitroute::workload::TableParams;
use jitroute::Error;

#[derive(Parser)]
#[command(name = "jitroute", version, about = "Simulate just-in-time configuration routing for agentic workflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one run and report it
    Run(RunArgs),
    /// Sweep arrival rates for one policy
    Sweep(SweepArgs),
    /// Sweep every policy over the same rates and seeds
    Compare(SweepArgs),
    /// Produce the CSV for one of the reproduction studies
    Figure(FigureArgs),
    /// Parse and validate a scenario file
    ValidateScenario {
        scenario: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML)
    scenario: PathBuf,
    /// Override the scenario's beam width
    #[arg(long)]
    beam_width: Option<usize>,
    /// Directory for CSV and trace output; CSV goes to stdout when absent
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, short, default_value = "stagewise", value_parser = parse_policy)]
    policy: PolicyKind,
    /// Arrival rate (requests/s); defaults to the scenario's
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop at this virtual time instead of draining
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Ignored by `compare`, which runs every policy
    #[arg(long, short, default_value = "stagewise", value_parser = parse_policy)]
    policy: PolicyKind,
    /// Comma-separated, strictly increasing; defaults to the scenario's
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Hard horizon per run; defaults to the scenario's sweep horizon
    #[arg(long)]
    horizon: Option<f64>,
    /// Run jobs one at a time
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Figure {
    PruningReduction,
    BeamQuality,
    BeamSize,
}

#[derive(Args)]
struct FigureArgs {
    #[arg(value_enum)]
    name: Figure,
    /// Scenario for beam-size
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Instances (pruning-reduction) or snapshots (beam-quality)
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Beam widths for beam-size
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    widths: Vec<usize>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn horizon(h: Option<f64>) -> jitroute::Result<Option<Horizon>> {
    match h {
        None => Ok(None),
        Some(h) if h > 0.0 && h.is_finite() => Ok(Some(Horizon::Hard(h))),
        Some(h) => Err(Error::Validation(format!("horizon must be positive, got {h}"))),
    }
}

fn load(common: &Common) -> jitroute::Result<(Scenario, Option<usize>)> {
    let s = Scenario::load(&common.scenario)?;
    if common.beam_width == Some(0) {
        return Err(Error::Validation("beam width must be >= 1".into()));
    }
    Ok((s, common.beam_width))
}

/// Writes `csv` to `dir/name`, or to stdout without a directory.
fn emit(out: Option<&Path>, name: &str, csv: &str) -> jitroute::Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), csv)?;
            eprintln!("wrote {}", dir.join(name).display());
        }
        None => io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn summarize(r: &RunReport) {
    eprintln!(
        "{:<18} rate {:>6.2}  thr {:>7.3}/s  mean {:>8}  p50 {:>8}  p95 {:>8}  acc {:>6}  router {:>6}",
        r.policy.name(),
        r.rate,
        r.throughput,
        fmt_opt(r.latency_mean),
        fmt_opt(r.latency_p50),
        fmt_opt(r.latency_p95),
        fmt_opt(r.served_accuracy),
        fmt_opt(r.router_share),
    );
}

fn cmd_run(a: RunArgs) -> jitroute::Result<()> {
    let (scenario, bw) = load(&a.common)?;
    let mut spec = RunSpec::new(&scenario, a.policy);
    if let Some(r) = a.rate {
        spec = spec.with_rate(r);
    }
    if let Some(s) = a.seed {
        spec = spec.with_seed(s);
    }
    if let Some(h) = horizon(a.horizon)? {
        spec = spec.with_horizon(h);
    }
    if let Some(b) = bw {
        spec = spec.with_beam_width(b);
    }
    let trace = sim::run(&scenario, &spec)?;
    let report = RunReport::from_trace(&trace);
    summarize(&report);
    let out = a.common.out.as_deref();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}-{}-trace.jsonl", scenario.name, a.policy.name()));
        trace.write_jsonl(io::BufWriter::new(fs::File::create(&path)?))?;
        eprintln!("wrote {}", path.display());
    }
    emit(out, "report.csv", &metrics::to_csv_string(&[report]))
}

fn sweep_inputs(a: &SweepArgs) -> jitroute::Result<(Scenario, RunSpec, Vec<f64>, Vec<u64>)> {
    let (scenario, bw) = load(&a.common)?;
    let h = horizon(a.horizon)?.unwrap_or(Horizon::Hard(scenario.sweep_horizon));
    let mut spec = RunSpec::new(&scenario, a.policy).with_horizon(h);
    if let Some(b) = bw {
        spec = spec.with_beam_width(b);
    }
    let rates = a.rates.clone().unwrap_or_else(|| {
        if scenario.sweep_rates.is_empty() {
            vec![scenario.rate]
        } else {
            scenario.sweep_rates.clone()
        }
    });
    let seeds = a.seeds.clone().unwrap_or_else(|| scenario.seeds.clone());
    Ok((scenario, spec, rates, seeds))
}

fn cmd_sweep(a: SweepArgs) -> jitroute::Result<()> {
    let (scenario, spec, rates, seeds) = sweep_inputs(&a)?;
    let result = metrics::sweep(&scenario, &spec, &rates, &seeds, exec(a.sequential))?;
    result.reports.iter().for_each(summarize);
    eprintln!("saturation throughput: {:.3}/s", result.saturation);
    emit(a.common.out.as_deref(), "sweep.csv", &metrics::to_csv_string(&result.reports))
}

fn cmd_compare(a: SweepArgs) -> jitroute::Result<()> {
    let (scenario, spec, rates, seeds) = sweep_inputs(&a)?;
    let cmp = metrics::compare_policies(&scenario, &spec, &rates, &seeds, exec(a.sequential))?;
    for row in cmp.summary() {
        eprintln!(
            "{:<18} saturation {:>7.3}/s  stagewise/this {:>6.3}",
            row.policy.name(),
            row.saturation,
            row.stagewise_ratio
        );
    }
    let out = a.common.out.as_deref();
    emit(out, "compare.csv", &metrics::to_csv_string(&cmp.reports()))?;
    emit(out, "saturation.csv", &metrics::to_csv_string(&cmp.summary()))
}

fn cmd_figure(a: FigureArgs) -> jitroute::Result<()> {
    let ex = exec(a.sequential);
    let out = a.out.as_deref();
    match a.name {
        Figure::PruningReduction => {
            let rows = metrics::pruning_reduction(a.count.unwrap_or(500), &TableParams::default(), a.seed, ex)?;
            let mean = rows.iter().map(|r| r.reduction_pct).sum::<f64>() / rows.len().max(1) as f64;
            eprintln!("mean reduction {mean:.1}% over {} instances", rows.len());
            emit(out, "pruning-reduction.csv", &metrics::to_csv_string(&rows))
        }
        Figure::BeamQuality => {
            let rows = metrics::beam_quality(a.count.unwrap_or(1000), a.seed, ex)?;
            let near = rows.iter().filter(|r| r.beam >= 0.95 * r.brute_force - 1e-9).count();
            eprintln!("beam within 95% of brute force on {near}/{} snapshots", rows.len());
            emit(out, "beam-quality.csv", &metrics::to_csv_string(&rows))
        }
        Figure::BeamSize => {
            let path = a
                .scenario
                .ok_or_else(|| Error::Validation("beam-size needs --scenario".into()))?;
            let scenario = Scenario::load(path)?;
            let rows = metrics::beam_size(&scenario, &a.widths, ex)?;
            for r in &rows {
                eprintln!("B = {:<2} saturation {:.3}/s", r.beam_width, r.saturation);
            }
            emit(out, "beam-size.csv", &metrics::to_csv_string(&rows))
        }
    }
}

fn cmd_validate(path: &Path) -> jitroute::Result<()> {
    let s = Scenario::load(path)?;
    println!(
        "{}: {} agents, {} models, {} configurations, slots {:?}",
        s.name,
        s.space.n_agents(),
        s.space.n_models(),
        s.space.cardinality().unwrap_or(u64::MAX),
        s.slots
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Figure(a) => cmd_figure(a),
        Command::ValidateScenario { scenario } => cmd_validate(&scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
