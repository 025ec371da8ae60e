//! Per-request prediction of the viable configuration set.
//!
//! The lattice is covered by upgrade chains running from the all-smallest
//! configuration to `c*`. Along each chain a binary search locates the first
//! configuration the router accepts; everything from there up the chain is a
//! candidate. Candidates are then verified one by one, cheapest first, until
//! the time budget runs out. `c*` is accurate by definition and never routed.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::workflow::{ConfigSpace, Configuration};
use crate::workload::AccuracyTable;

pub type RequestId = u64;

/// Lattices at most this large are covered exhaustively by chains.
pub const EXHAUSTIVE_CHAIN_LIMIT: u64 = 4096;

pub const DEFAULT_CHAIN_CAP: usize = 256;

/// A binary accuracy classifier: is `config` as accurate as `c*` for this request?
pub trait RouterBackend: Send + Sync {
    fn evaluate(&self, request: RequestId, config: &Configuration) -> bool;

    /// Simulated seconds per evaluation.
    fn latency(&self) -> f64;
}

/// Returns the ground-truth label.
#[derive(Debug, Clone)]
pub struct OracleRouter {
    table: Arc<AccuracyTable>,
    latency: f64,
}

impl OracleRouter {
    pub fn new(table: Arc<AccuracyTable>, latency: f64) -> Self {
        Self { table, latency }
    }

    pub fn table(&self) -> &Arc<AccuracyTable> {
        &self.table
    }
}

impl RouterBackend for OracleRouter {
    fn evaluate(&self, request: RequestId, config: &Configuration) -> bool {
        self.table.is_accurate(request, config)
    }

    fn latency(&self) -> f64 {
        self.latency
    }
}

/// Flips oracle labels with fixed false-positive / false-negative rates. The
/// flip for a `(request, configuration)` pair is a pure function of the seed.
#[derive(Debug, Clone)]
pub struct NoisyRouter {
    oracle: OracleRouter,
    false_positive: f64,
    false_negative: f64,
    seed: u64,
}

impl NoisyRouter {
    pub fn new(oracle: OracleRouter, false_positive: f64, false_negative: f64, seed: u64) -> Result<Self> {
        for (name, r) in [("false-positive", false_positive), ("false-negative", false_negative)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::validation(format!("{name} rate {r} outside [0, 1)")));
            }
        }
        Ok(Self {
            oracle,
            false_positive,
            false_negative,
            seed,
        })
    }
}

impl RouterBackend for NoisyRouter {
    fn evaluate(&self, request: RequestId, config: &Configuration) -> bool {
        let truth = self.oracle.evaluate(request, config);
        let mut key = vec![self.seed, rng::TAG_ROUTER_NOISE, request, config.len() as u64];
        key.extend(config.models().iter().map(|&m| m as u64));
        let u = rng::unit_interval(rng::derive_seed(&key));
        if truth {
            u >= self.false_negative
        } else {
            u < self.false_positive
        }
    }

    fn latency(&self) -> f64 {
        self.oracle.latency()
    }
}

/// Deadline for one prediction, tracked as an EMA of observed first-stage
/// queueing delays and floored at `min_budget`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorBudget {
    pub ema: f64,
    pub alpha: f64,
    pub min_budget: f64,
}

impl PredictorBudget {
    pub const DEFAULT_ALPHA: f64 = 0.2;

    pub fn new(alpha: f64, min_budget: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::validation(format!("EMA alpha {alpha} outside (0, 1]")));
        }
        if !(min_budget >= 0.0) {
            return Err(Error::validation("minimum budget must be >= 0"));
        }
        Ok(Self {
            ema: 0.0,
            alpha,
            min_budget,
        })
    }

    pub fn budget(&self) -> f64 {
        self.ema.max(self.min_budget)
    }

    pub fn update(&mut self, observed_delay: f64) -> Result<()> {
        if !(observed_delay >= 0.0) {
            return Err(Error::validation(format!("queue delay must be >= 0, got {observed_delay}")));
        }
        self.ema = self.alpha * observed_delay + (1.0 - self.alpha) * self.ema;
        Ok(())
    }
}

/// Predicted accurate configurations for one request. Always holds `c*`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViableSet {
    pub request: RequestId,
    configs: Vec<Configuration>,
}

impl ViableSet {
    /// Sorts, dedups and adds `top` if missing.
    pub fn new(request: RequestId, mut configs: Vec<Configuration>, top: &Configuration) -> Self {
        configs.push(top.clone());
        configs.sort();
        configs.dedup();
        Self { request, configs }
    }

    pub fn configs(&self) -> &[Configuration] {
        &self.configs
    }

    pub fn into_configs(self) -> Vec<Configuration> {
        self.configs
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn contains(&self, c: &Configuration) -> bool {
        self.configs.binary_search(c).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainMode {
    /// Chains cover every configuration.
    Exhaustive,
    /// Stop after this many chains; uncovered configurations are never offered.
    Capped(usize),
}

impl ChainMode {
    /// Exhaustive for lattices up to [`EXHAUSTIVE_CHAIN_LIMIT`], capped above.
    pub fn auto(space: &ConfigSpace, cap: usize) -> Self {
        match space.cardinality() {
            Some(s) if s <= EXHAUSTIVE_CHAIN_LIMIT => ChainMode::Exhaustive,
            _ => ChainMode::Capped(cap),
        }
    }
}

/// Builds upgrade chains from the all-smallest configuration to `c*`.
///
/// Each chain is steered through the first configuration (in lexicographic
/// order) that no earlier chain visited; the depth-first walks below and above
/// it prefer unvisited successors. Every chain has `N (M - 1) + 1` elements.
pub fn build_chains(space: &ConfigSpace, mode: ChainMode) -> Vec<Vec<Configuration>> {
    let cap = match mode {
        ChainMode::Exhaustive => usize::MAX,
        ChainMode::Capped(cap) => cap,
    };
    let base = space.base();
    let top = space.top().clone();
    let mut covered: HashSet<Configuration> = HashSet::new();
    let mut chains = Vec::new();
    let mut scan = space.iter();
    while chains.len() < cap {
        let Some(target) = scan.by_ref().find(|c| !covered.contains(c)) else {
            break;
        };
        let mut chain = walk_up(space, &base, &target, &covered);
        chain.pop();
        chain.extend(walk_up(space, &target, &top, &covered));
        covered.extend(chain.iter().cloned());
        chains.push(chain);
    }
    chains
}

fn walk_up(
    space: &ConfigSpace,
    from: &Configuration,
    to: &Configuration,
    covered: &HashSet<Configuration>,
) -> Vec<Configuration> {
    let mut path = vec![from.clone()];
    let mut current = from.clone();
    while &current != to {
        let steps: Vec<Configuration> = space
            .successors(&current)
            .into_iter()
            .filter(|s| s.is_below(to))
            .collect();
        let next = steps
            .iter()
            .find(|s| !covered.contains(*s))
            .unwrap_or(&steps[0])
            .clone();
        path.push(next.clone());
        current = next;
    }
    path
}

/// Smallest index whose verdict is `true`, or `chain.len()` when none is.
/// Assumes verdicts are monotone along the chain; on non-monotone input the
/// result is the boundary of some monotone completion of the probed verdicts.
pub fn boundary_search_by<F>(chain: &[Configuration], mut verdict: F) -> usize
where
    F: FnMut(&Configuration) -> bool,
{
    let (mut lo, mut hi) = (0, chain.len());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if verdict(&chain[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// [`boundary_search_by`] against a router; also returns the evaluation count.
pub fn boundary_search(
    chain: &[Configuration],
    router: &dyn RouterBackend,
    request: RequestId,
) -> (usize, u64) {
    let mut evals = 0;
    let b = boundary_search_by(chain, |c| {
        evals += 1;
        router.evaluate(request, c)
    });
    (b, evals)
}

/// Outcome and instrumentation of one prediction run.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub viable: ViableSet,
    pub search_evaluations: u64,
    pub verify_evaluations: u64,
    /// Simulated router time consumed.
    pub latency: f64,
    /// True when the budget stopped the run before it finished.
    pub truncated: bool,
}

impl Prediction {
    pub fn router_eval_count(&self) -> u64 {
        self.search_evaluations + self.verify_evaluations
    }
}

/// Chains are a property of the lattice, so they are built once and shared.
#[derive(Debug, Clone)]
pub struct Predictor {
    space: ConfigSpace,
    chains: Vec<Vec<Configuration>>,
}

struct Session<'a> {
    router: &'a dyn RouterBackend,
    request: RequestId,
    budget: f64,
    spent: f64,
    evals: u64,
    verdicts: HashMap<Configuration, bool>,
    exhausted: bool,
}

impl Session<'_> {
    /// Cached verdict, a fresh router call, or `None` once the budget is spent.
    fn verdict(&mut self, c: &Configuration) -> Option<bool> {
        if let Some(&v) = self.verdicts.get(c) {
            return Some(v);
        }
        if self.exhausted || !(self.spent < self.budget) {
            self.exhausted = true;
            return None;
        }
        let v = self.router.evaluate(self.request, c);
        self.spent += self.router.latency();
        self.evals += 1;
        self.verdicts.insert(c.clone(), v);
        Some(v)
    }
}

impl Predictor {
    pub fn new(space: ConfigSpace, mode: ChainMode) -> Self {
        let chains = build_chains(&space, mode);
        Self { space, chains }
    }

    pub fn space(&self) -> &ConfigSpace {
        &self.space
    }

    pub fn chains(&self) -> &[Vec<Configuration>] {
        &self.chains
    }

    /// Binary search along every chain, then verification of the candidates.
    /// Router evaluations stop once the simulated time spent reaches `budget`;
    /// only router-confirmed configurations (and `c*`) are returned.
    pub fn predict(&self, request: RequestId, router: &dyn RouterBackend, budget: f64) -> Prediction {
        let top = self.space.top();
        let mut s = Session {
            router,
            request,
            budget,
            spent: 0.0,
            evals: 0,
            verdicts: HashMap::from([(top.clone(), true)]),
            exhausted: false,
        };

        let mut candidates: Vec<Configuration> = Vec::new();
        let mut seen: HashSet<&Configuration> = HashSet::new();
        'chains: for chain in &self.chains {
            let mut aborted = false;
            let b = boundary_search_by(chain, |c| match s.verdict(c) {
                Some(v) => v,
                None => {
                    aborted = true;
                    // Any answer ends the search quickly; the result is discarded.
                    true
                }
            });
            if aborted {
                break 'chains;
            }
            for c in &chain[b..] {
                if seen.insert(c) {
                    candidates.push(c.clone());
                }
            }
        }
        let search_evaluations = s.evals;

        let catalog = self.space.catalog();
        candidates.sort_by(|a, b| {
            a.static_cost(catalog)
                .total_cmp(&b.static_cost(catalog))
                .then_with(|| a.cmp(b))
        });
        for c in &candidates {
            if s.verdict(c).is_none() {
                break;
            }
        }

        let accepted: Vec<Configuration> = s
            .verdicts
            .iter()
            .filter(|(_, &v)| v)
            .map(|(c, _)| c.clone())
            .collect();
        Prediction {
            viable: ViableSet::new(request, accepted, top),
            search_evaluations,
            verify_evaluations: s.evals - search_evaluations,
            latency: s.spent,
            truncated: s.exhausted,
        }
    }

    /// Naive reference: route every configuration of the lattice.
    pub fn predict_exhaustive(&self, request: RequestId, router: &dyn RouterBackend) -> Prediction {
        let top = self.space.top();
        let mut evals = 0;
        let accepted: Vec<Configuration> = self
            .space
            .iter()
            .filter(|c| {
                evals += 1;
                router.evaluate(request, c)
            })
            .collect();
        Prediction {
            viable: ViableSet::new(request, accepted, top),
            search_evaluations: 0,
            verify_evaluations: evals,
            latency: evals as f64 * router.latency(),
            truncated: false,
        }
    }
}
