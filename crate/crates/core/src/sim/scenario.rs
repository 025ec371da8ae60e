//! Scenario files (TOML) and their validated in-memory form.
//!
//! ```toml
//! name = "example"
//!
//! [workflow]
//! agents = ["generate", "refine"]
//! edges = [["generate", "refine"]]
//!
//! [[models]]
//! name = "small"
//! static_cost = 1.0
//! throughput_weight = 1.0
//! slots = 4
//! service = { mu = 0.0, sigma = 0.3, floor = 0.1 }
//!
//! [[models]]
//! name = "large"
//! static_cost = 4.0
//! throughput_weight = 0.4
//! slots = 4
//! service = { mu = 0.8, sigma = 0.3, floor = 0.2 }
//!
//! [workload]
//! rate = 2.0
//! requests = 500
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{PredictorBudget, DEFAULT_CHAIN_CAP};
use crate::scheduler::SchedulerParams;
use crate::sim::engine::{ServiceDist, ServiceTimeModel};
use crate::workflow::{ConfigSpace, ModelCatalog, ModelSpec, WorkflowGraph};
use crate::workload::{read_trace, AccuracyTable, TableParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub workflow: WorkflowSection,
    pub models: Vec<ModelSection>,
    #[serde(default)]
    pub service_overrides: Vec<ServiceOverride>,
    #[serde(default)]
    pub router: RouterSection,
    pub workload: WorkloadSection,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSection {
    pub agents: Vec<String>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub static_cost: f64,
    pub throughput_weight: f64,
    pub slots: u32,
    /// Default service distribution for every agent on this model.
    pub service: ServiceDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceOverride {
    pub agent: String,
    pub model: String,
    pub mu: f64,
    pub sigma: f64,
    #[serde(default)]
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterSection {
    /// Seconds per binary-router evaluation.
    pub latency: f64,
    pub false_positive: f64,
    pub false_negative: f64,
    /// Predictions that may run at once.
    pub lanes: usize,
    pub ema_alpha: f64,
    /// Defaults to one evaluation's latency.
    pub min_budget: Option<f64>,
    pub chain_cap: usize,
}

impl Default for RouterSection {
    fn default() -> Self {
        Self {
            latency: 0.002,
            false_positive: 0.0,
            false_negative: 0.0,
            lanes: 1,
            ema_alpha: PredictorBudget::DEFAULT_ALPHA,
            min_budget: None,
            chain_cap: DEFAULT_CHAIN_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    /// Default arrival rate (requests/s); the CLI may override it.
    pub rate: f64,
    /// Request count for drain-mode runs.
    #[serde(default = "default_requests")]
    pub requests: usize,
    #[serde(default)]
    pub table: Option<TableParams>,
    /// Trace file with arrivals and accurate sets; replaces generation.
    #[serde(default)]
    pub trace: Option<PathBuf>,
    /// Tolerance for the per-workflow policy.
    #[serde(default)]
    pub per_workflow_tolerance: f64,
}

fn default_requests() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub beam_width: usize,
    pub brute_force_cap: u64,
    /// Rounds fire on a grid of this many seconds; 0 runs one at every event.
    pub round_interval: f64,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        let p = SchedulerParams::default();
        Self {
            beam_width: p.beam_width,
            brute_force_cap: p.brute_force_cap,
            round_interval: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Hard horizon in seconds; absent means drain.
    pub horizon: Option<f64>,
    /// Horizon used by rate sweeps.
    pub sweep_horizon: f64,
    pub sweep_rates: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 1,
            horizon: None,
            sweep_horizon: 600.0,
            sweep_rates: Vec::new(),
            seeds: vec![1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouterConfig {
    pub latency: f64,
    pub false_positive: f64,
    pub false_negative: f64,
    pub lanes: usize,
    pub ema_alpha: f64,
    pub min_budget: f64,
    pub chain_cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    /// Run until every arrival completes.
    Drain,
    /// Stop at this instant; only arrivals before it are generated.
    Hard(f64),
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub space: ConfigSpace,
    pub slots: Vec<u32>,
    service: Vec<ServiceDist>,
    pub router: RouterConfig,
    pub rate: f64,
    pub requests: usize,
    pub table_params: TableParams,
    pub trace: Option<Arc<(Vec<f64>, AccuracyTable)>>,
    pub per_workflow_tolerance: f64,
    pub scheduler: SchedulerParams,
    pub round_interval: f64,
    pub seed: u64,
    pub horizon: Horizon,
    pub sweep_horizon: f64,
    pub sweep_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub file: ScenarioFile,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, path.parent())
    }

    /// `base_dir` resolves a relative trace path.
    pub fn from_toml(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_file(file, base_dir)
    }

    pub fn from_file(file: ScenarioFile, base_dir: Option<&Path>) -> Result<Self> {
        let graph = Arc::new(WorkflowGraph::build(
            &file.workflow.agents,
            &file
                .workflow
                .edges
                .iter()
                .map(|(a, b)| (a.clone(), b.clone()))
                .collect::<Vec<_>>(),
        )?);
        let catalog = Arc::new(ModelCatalog::new(
            file.models
                .iter()
                .map(|m| ModelSpec {
                    name: m.name.clone(),
                    static_cost: m.static_cost,
                    throughput_weight: m.throughput_weight,
                })
                .collect(),
        )?);
        let space = ConfigSpace::new(graph.clone(), catalog.clone());
        if space.cardinality().is_none() {
            return Err(Error::validation("configuration space does not fit in 64 bits"));
        }

        let n_models = catalog.len();
        let mut service = Vec::with_capacity(graph.len() * n_models);
        for _ in 0..graph.len() {
            for m in &file.models {
                m.service.validate()?;
                service.push(m.service);
            }
        }
        for o in &file.service_overrides {
            let a = graph
                .agent(&o.agent)
                .ok_or_else(|| Error::validation(format!("service override: unknown agent `{}`", o.agent)))?;
            let m = catalog
                .index_of(&o.model)
                .ok_or_else(|| Error::validation(format!("service override: unknown model `{}`", o.model)))?;
            let d = ServiceDist {
                mu: o.mu,
                sigma: o.sigma,
                floor: o.floor,
            };
            d.validate()?;
            service[a * n_models + m as usize] = d;
        }

        let slots: Vec<u32> = file.models.iter().map(|m| m.slots).collect();
        if slots.iter().all(|&s| s == 0) {
            return Err(Error::validation("at least one engine needs a slot"));
        }
        if slots[n_models - 1] == 0 {
            return Err(Error::validation("the largest model's engine needs at least one slot"));
        }

        let r = &file.router;
        if !(r.latency >= 0.0 && r.latency.is_finite()) {
            return Err(Error::validation("router latency must be >= 0"));
        }
        if r.lanes == 0 {
            return Err(Error::validation("router needs at least one lane"));
        }
        if r.chain_cap == 0 {
            return Err(Error::validation("chain cap must be >= 1"));
        }
        let min_budget = r.min_budget.unwrap_or(r.latency);
        PredictorBudget::new(r.ema_alpha, min_budget)?;
        for (name, v) in [("false_positive", r.false_positive), ("false_negative", r.false_negative)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::validation(format!("router {name} rate outside [0, 1)")));
            }
        }
        let router = RouterConfig {
            latency: r.latency,
            false_positive: r.false_positive,
            false_negative: r.false_negative,
            lanes: r.lanes,
            ema_alpha: r.ema_alpha,
            min_budget,
            chain_cap: r.chain_cap,
        };

        let w = &file.workload;
        if !(w.rate > 0.0 && w.rate.is_finite()) {
            return Err(Error::validation("workload rate must be positive"));
        }
        if !(0.0..=1.0).contains(&w.per_workflow_tolerance) {
            return Err(Error::validation("per-workflow tolerance outside [0, 1]"));
        }
        let table_params = w.table.clone().unwrap_or_default();
        table_params.validate()?;
        let trace = match &w.trace {
            Some(p) => {
                let full = match base_dir {
                    Some(dir) if p.is_relative() => dir.join(p),
                    _ => p.clone(),
                };
                let reader = std::io::BufReader::new(std::fs::File::open(&full)?);
                Some(Arc::new(read_trace(reader, &space)?))
            }
            None => None,
        };

        let scheduler = SchedulerParams {
            beam_width: file.scheduler.beam_width,
            brute_force_cap: file.scheduler.brute_force_cap,
        };
        scheduler.validate()?;
        let round_interval = file.scheduler.round_interval;
        if !(round_interval >= 0.0 && round_interval.is_finite()) {
            return Err(Error::validation("round interval must be >= 0"));
        }

        let run = &file.run;
        let horizon = match run.horizon {
            None => Horizon::Drain,
            Some(h) if h > 0.0 && h.is_finite() => Horizon::Hard(h),
            Some(h) => return Err(Error::validation(format!("horizon must be positive, got {h}"))),
        };
        if !(run.sweep_horizon > 0.0 && run.sweep_horizon.is_finite()) {
            return Err(Error::validation("sweep horizon must be positive"));
        }
        if run.sweep_rates.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::validation("sweep rates must be positive"));
        }
        if run.sweep_rates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("sweep rates must be strictly increasing"));
        }
        if run.seeds.is_empty() {
            return Err(Error::validation("at least one seed is required"));
        }

        Ok(Self {
            name: file.name.clone(),
            space,
            slots,
            service,
            router,
            rate: w.rate,
            requests: w.requests,
            table_params,
            trace,
            per_workflow_tolerance: w.per_workflow_tolerance,
            scheduler,
            round_interval,
            seed: run.seed,
            horizon,
            sweep_horizon: run.sweep_horizon,
            sweep_rates: run.sweep_rates.clone(),
            seeds: run.seeds.clone(),
            file,
        })
    }

    pub fn graph(&self) -> &Arc<WorkflowGraph> {
        self.space.graph()
    }

    pub fn catalog(&self) -> &Arc<ModelCatalog> {
        self.space.catalog()
    }

    pub fn service_model(&self, seed: u64) -> ServiceTimeModel {
        ServiceTimeModel::new(self.graph().len(), self.catalog().len(), self.service.clone(), seed)
            .expect("validated at load")
    }

    /// Stages per second the engines sustain if every stage of every request
    /// ran on `config`'s models: the bottleneck engine's slots over its work.
    pub fn capacity_for(&self, config: &crate::workflow::Configuration) -> f64 {
        let service = self.service_model(0);
        let mut work = vec![0.0; self.catalog().len()];
        for (a, &m) in config.models().iter().enumerate() {
            work[m as usize] += service.mean(a, m);
        }
        work.iter()
            .zip(&self.slots)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, &s)| s as f64 / w)
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        name = "mini"
        [workflow]
        agents = ["a", "b"]
        edges = [["a", "b"]]
        [[models]]
        name = "s"
        static_cost = 1.0
        throughput_weight = 1.0
        slots = 2
        service = { mu = 0.0, sigma = 0.2 }
        [[models]]
        name = "l"
        static_cost = 3.0
        throughput_weight = 0.5
        slots = 2
        service = { mu = 0.5, sigma = 0.2, floor = 0.1 }
        [workload]
        rate = 1.5
    "#;

    #[test]
    fn parses_minimal_scenario_with_defaults() {
        let s = Scenario::from_toml(MINIMAL, None).unwrap();
        assert_eq!(s.name, "mini");
        assert_eq!(s.space.n_agents(), 2);
        assert_eq!(s.slots, vec![2, 2]);
        assert_eq!(s.router.min_budget, s.router.latency);
        assert_eq!(s.scheduler.beam_width, 4);
        assert_eq!(s.horizon, Horizon::Drain);
        assert_eq!(s.requests, 1000);
    }

    #[test]
    fn overrides_apply_per_agent() {
        let text = format!(
            "{MINIMAL}\n[[service_overrides]]\nagent = \"b\"\nmodel = \"l\"\nmu = 2.0\nsigma = 0.0\n"
        );
        let s = Scenario::from_toml(&text, None).unwrap();
        let svc = s.service_model(0);
        assert!((svc.mean(1, 1) - 2f64.exp()).abs() < 1e-12);
        assert!((svc.mean(0, 1) - (0.1 + (0.5f64 + 0.02).exp())).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Scenario::from_toml("name = 1", None), Err(Error::Parse(_))));
        let unknown = MINIMAL.replace("rate = 1.5", "rate = 1.5\nbogus = 1");
        assert!(matches!(Scenario::from_toml(&unknown, None), Err(Error::Parse(_))));
        let cyclic = MINIMAL.replace(r#"edges = [["a", "b"]]"#, r#"edges = [["a", "b"], ["b", "a"]]"#);
        assert!(matches!(Scenario::from_toml(&cyclic, None), Err(Error::Cycle(_))));
        let bad_rate = MINIMAL.replace("rate = 1.5", "rate = 0.0");
        assert!(Scenario::from_toml(&bad_rate, None).unwrap_err().is_validation());
        let no_top_slots = MINIMAL.replacen("slots = 2\n        service = { mu = 0.5", "slots = 0\n        service = { mu = 0.5", 1);
        assert!(Scenario::from_toml(&no_top_slots, None).is_err());
        let missing_trace = MINIMAL.replace("rate = 1.5", "rate = 1.5\ntrace = \"/nonexistent/trace.jsonl\"");
        assert!(matches!(Scenario::from_toml(&missing_trace, None), Err(Error::Io(_))));
    }
}
