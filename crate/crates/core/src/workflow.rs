//! Workflow DAGs, model catalogs and the configuration lattice.
//!
//! Agents are stored in canonical order: a topological order of the DAG with
//! ties broken by declaration order. An [`AgentId`] is a position in that
//! order and every [`Configuration`] is indexed the same way.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position of an agent in the canonical order of its graph.
pub type AgentId = usize;

/// Index into a [`ModelCatalog`]; 0 is the smallest model.
pub type ModelIndex = u8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// FLOPs proxy in arbitrary units.
    pub static_cost: f64,
    /// Requests per second that a single batch slot sustains.
    pub throughput_weight: f64,
}

/// Candidate models ordered from smallest to largest.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCatalog {
    models: Vec<ModelSpec>,
}

impl ModelCatalog {
    pub fn new(models: Vec<ModelSpec>) -> Result<Self> {
        if models.len() < 2 {
            return Err(Error::validation("model catalog needs at least 2 models"));
        }
        if models.len() > ModelIndex::MAX as usize {
            return Err(Error::validation("model catalog is too large"));
        }
        let mut names = HashSet::new();
        for m in &models {
            if !names.insert(m.name.as_str()) {
                return Err(Error::validation(format!("duplicate model name `{}`", m.name)));
            }
            if !(m.static_cost > 0.0 && m.static_cost.is_finite()) {
                return Err(Error::validation(format!("model `{}`: static cost must be positive", m.name)));
            }
            if !(m.throughput_weight > 0.0 && m.throughput_weight.is_finite()) {
                return Err(Error::validation(format!(
                    "model `{}`: throughput weight must be positive",
                    m.name
                )));
            }
        }
        for pair in models.windows(2) {
            if pair[1].static_cost <= pair[0].static_cost {
                return Err(Error::validation(format!(
                    "static cost must strictly increase with model index (`{}` -> `{}`)",
                    pair[0].name, pair[1].name
                )));
            }
            if pair[1].throughput_weight >= pair[0].throughput_weight {
                return Err(Error::validation(format!(
                    "throughput weight must strictly decrease with model index (`{}` -> `{}`)",
                    pair[0].name, pair[1].name
                )));
            }
        }
        Ok(Self { models })
    }

    /// `m` models with static costs 1, 2, 4, ... and weights 1, 1/2, 1/4, ...
    pub fn geometric(m: usize) -> Result<Self> {
        Self::new(
            (0..m)
                .map(|i| ModelSpec {
                    name: format!("m{i}"),
                    static_cost: (1u64 << i) as f64,
                    throughput_weight: 1.0 / (1u64 << i) as f64,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn largest(&self) -> ModelIndex {
        (self.models.len() - 1) as ModelIndex
    }

    pub fn spec(&self, m: ModelIndex) -> &ModelSpec {
        &self.models[m as usize]
    }

    pub fn static_cost(&self, m: ModelIndex) -> f64 {
        self.models[m as usize].static_cost
    }

    pub fn throughput_weight(&self, m: ModelIndex) -> f64 {
        self.models[m as usize].throughput_weight
    }

    pub fn index_of(&self, name: &str) -> Option<ModelIndex> {
        self.models.iter().position(|m| m.name == name).map(|i| i as ModelIndex)
    }

    pub fn models(&self) -> &[ModelSpec] {
        &self.models
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowGraph {
    names: Vec<String>,
    declaration: Vec<usize>,
    preds: Vec<Vec<AgentId>>,
    succs: Vec<Vec<AgentId>>,
    depth: Vec<u32>,
}

impl WorkflowGraph {
    /// Validates the DAG, fixes the canonical order and computes depths.
    pub fn build<S: AsRef<str>>(agents: &[S], edges: &[(S, S)]) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::validation("workflow needs at least one agent"));
        }
        let mut by_name: HashMap<&str, usize> = HashMap::new();
        for (i, a) in agents.iter().enumerate() {
            let a = a.as_ref();
            if a.is_empty() {
                return Err(Error::validation("agent identifiers must be non-empty"));
            }
            if by_name.insert(a, i).is_some() {
                return Err(Error::validation(format!("duplicate agent `{a}`")));
            }
        }
        let n = agents.len();
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut seen = HashSet::new();
        for (from, to) in edges {
            let (from, to) = (from.as_ref(), to.as_ref());
            let f = *by_name
                .get(from)
                .ok_or_else(|| Error::validation(format!("edge references undeclared agent `{from}`")))?;
            let t = *by_name
                .get(to)
                .ok_or_else(|| Error::validation(format!("edge references undeclared agent `{to}`")))?;
            if seen.insert((f, t)) {
                out[f].push(t);
            }
        }

        // Kahn's algorithm; the min-heap on declaration index gives the tie-break.
        let mut indegree = vec![0usize; n];
        for targets in &out {
            for &t in targets {
                indegree[t] += 1;
            }
        }
        let mut heap: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(v)) = heap.pop() {
            order.push(v);
            for &t in &out[v] {
                indegree[t] -= 1;
                if indegree[t] == 0 {
                    heap.push(Reverse(t));
                }
            }
        }
        if order.len() < n {
            let cycle = find_cycle(&out, &indegree);
            return Err(Error::Cycle(cycle.into_iter().map(|i| agents[i].as_ref().to_string()).collect()));
        }

        let mut position = vec![0usize; n];
        for (pos, &decl) in order.iter().enumerate() {
            position[decl] = pos;
        }
        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        for (f, targets) in out.iter().enumerate() {
            for &t in targets {
                succs[position[f]].push(position[t]);
                preds[position[t]].push(position[f]);
            }
        }
        for list in preds.iter_mut().chain(succs.iter_mut()) {
            list.sort_unstable();
        }
        let mut depth = vec![0u32; n];
        for a in (0..n).rev() {
            depth[a] = succs[a].iter().map(|&s| depth[s] + 1).max().unwrap_or(0);
        }
        Ok(Self {
            names: order.iter().map(|&i| agents[i].as_ref().to_string()).collect(),
            declaration: order,
            preds,
            succs,
            depth,
        })
    }

    /// A linear chain `a0 -> a1 -> ... -> a{n-1}`.
    pub fn chain(n: usize) -> Result<Self> {
        let agents: Vec<String> = (0..n).map(|i| format!("a{i}")).collect();
        let edges: Vec<(String, String)> =
            (1..n).map(|i| (agents[i - 1].clone(), agents[i].clone())).collect();
        Self::build(&agents, &edges)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Agent names in canonical (topological) order.
    pub fn topo_order(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, a: AgentId) -> &str {
        &self.names[a]
    }

    pub fn agent(&self, name: &str) -> Option<AgentId> {
        self.names.iter().position(|n| n == name)
    }

    /// Position of the agent in the original declaration list.
    pub fn declaration_index(&self, a: AgentId) -> usize {
        self.declaration[a]
    }

    /// Longest path length from `a` to any leaf.
    pub fn depth(&self, a: AgentId) -> u32 {
        self.depth[a]
    }

    pub fn predecessors(&self, a: AgentId) -> &[AgentId] {
        &self.preds[a]
    }

    pub fn successors(&self, a: AgentId) -> &[AgentId] {
        &self.succs[a]
    }

    pub fn sources(&self) -> impl Iterator<Item = AgentId> + '_ {
        (0..self.len()).filter(|&a| self.preds[a].is_empty())
    }
}

// Walks forward inside the residual graph (nodes Kahn could not remove) until a
// node repeats; every residual node has a residual successor.
fn find_cycle(out: &[Vec<usize>], indegree: &[usize]) -> Vec<usize> {
    let residual = |v: usize| indegree[v] > 0;
    let start = (0..out.len()).find(|&v| residual(v)).expect("cycle exists");
    let mut path = vec![start];
    let mut index: HashMap<usize, usize> = HashMap::from([(start, 0)]);
    let mut v = start;
    loop {
        let next = *out[v].iter().find(|&&t| residual(t)).expect("residual successor");
        if let Some(&i) = index.get(&next) {
            let mut cycle = path[i..].to_vec();
            cycle.push(next);
            return cycle;
        }
        index.insert(next, path.len());
        path.push(next);
        v = next;
    }
}

/// Result of comparing two configurations under the upgrade order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpgradeOrder {
    Equal,
    /// Every entry of the left side is at most the right side.
    Below,
    Above,
    Incomparable,
}

/// One model index per agent, in canonical agent order.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(Vec<ModelIndex>);

impl Configuration {
    pub fn new(models: Vec<ModelIndex>) -> Self {
        Self(models)
    }

    pub fn uniform(n_agents: usize, model: ModelIndex) -> Self {
        Self(vec![model; n_agents])
    }

    pub fn models(&self) -> &[ModelIndex] {
        &self.0
    }

    pub fn model(&self, a: AgentId) -> ModelIndex {
        self.0[a]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn compare(&self, other: &Self) -> Result<UpgradeOrder> {
        if self.len() != other.len() {
            return Err(Error::validation(format!(
                "cannot compare configurations of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        let mut below = false;
        let mut above = false;
        for (x, y) in self.0.iter().zip(&other.0) {
            below |= x < y;
            above |= x > y;
        }
        Ok(match (below, above) {
            (false, false) => UpgradeOrder::Equal,
            (true, false) => UpgradeOrder::Below,
            (false, true) => UpgradeOrder::Above,
            (true, true) => UpgradeOrder::Incomparable,
        })
    }

    /// `self <= other` in the upgrade order. Lengths must match.
    pub fn is_below(&self, other: &Self) -> bool {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).all(|(x, y)| x <= y)
    }

    /// All configurations one single-agent, single-step upgrade above `self`.
    pub fn upgrade_successors(&self, n_models: usize) -> Vec<Configuration> {
        let top = (n_models - 1) as ModelIndex;
        (0..self.len())
            .filter(|&a| self.0[a] < top)
            .map(|a| {
                let mut next = self.0.clone();
                next[a] += 1;
                Configuration(next)
            })
            .collect()
    }

    /// Sum of per-agent static model costs. Computed from per-model counts so
    /// permutations of the same multiset cost exactly the same.
    pub fn static_cost(&self, catalog: &ModelCatalog) -> f64 {
        let mut counts = vec![0u32; catalog.len()];
        for &m in &self.0 {
            counts[m as usize] += 1;
        }
        counts
            .iter()
            .enumerate()
            .map(|(m, &c)| c as f64 * catalog.static_cost(m as ModelIndex))
            .sum()
    }

    /// Position in the lexicographic enumeration (agent 0 most significant).
    pub fn rank(&self, n_models: usize) -> u64 {
        self.0.iter().fold(0u64, |acc, &m| acc * n_models as u64 + m as u64)
    }

    pub fn from_rank(mut rank: u64, n_agents: usize, n_models: usize) -> Self {
        let mut models = vec![0; n_agents];
        for slot in models.iter_mut().rev() {
            *slot = (rank % n_models as u64) as ModelIndex;
            rank /= n_models as u64;
        }
        Self(models)
    }
}

impl fmt::Debug for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, m) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{m}")?;
        }
        write!(f, ")")
    }
}

impl From<Vec<ModelIndex>> for Configuration {
    fn from(v: Vec<ModelIndex>) -> Self {
        Self(v)
    }
}

/// The `M^N` lattice of configurations for one workflow and catalog.
#[derive(Debug, Clone)]
pub struct ConfigSpace {
    graph: Arc<WorkflowGraph>,
    catalog: Arc<ModelCatalog>,
    top: Configuration,
}

impl ConfigSpace {
    pub fn new(graph: Arc<WorkflowGraph>, catalog: Arc<ModelCatalog>) -> Self {
        let top = Configuration::uniform(graph.len(), catalog.largest());
        Self { graph, catalog, top }
    }

    /// Chain workflow of `n_agents` over a geometric catalog of `n_models`.
    pub fn uniform(n_agents: usize, n_models: usize) -> Result<Self> {
        Ok(Self::new(
            Arc::new(WorkflowGraph::chain(n_agents)?),
            Arc::new(ModelCatalog::geometric(n_models)?),
        ))
    }

    pub fn graph(&self) -> &Arc<WorkflowGraph> {
        &self.graph
    }

    pub fn catalog(&self) -> &Arc<ModelCatalog> {
        &self.catalog
    }

    pub fn n_agents(&self) -> usize {
        self.graph.len()
    }

    pub fn n_models(&self) -> usize {
        self.catalog.len()
    }

    /// `M^N`, or `None` when it does not fit in a `u64`.
    pub fn cardinality(&self) -> Option<u64> {
        (self.n_models() as u64).checked_pow(self.n_agents() as u32)
    }

    /// The all-largest configuration `c*`.
    pub fn top(&self) -> &Configuration {
        &self.top
    }

    /// The all-smallest configuration.
    pub fn base(&self) -> Configuration {
        Configuration::uniform(self.n_agents(), 0)
    }

    pub fn validate(&self, c: &Configuration) -> Result<()> {
        if c.len() != self.n_agents() {
            return Err(Error::validation(format!(
                "configuration has {} entries, workflow has {} agents",
                c.len(),
                self.n_agents()
            )));
        }
        if let Some(&m) = c.models().iter().find(|&&m| m as usize >= self.n_models()) {
            return Err(Error::validation(format!("model index {m} is outside the catalog")));
        }
        Ok(())
    }

    pub fn static_cost(&self, c: &Configuration) -> f64 {
        c.static_cost(&self.catalog)
    }

    pub fn successors(&self, c: &Configuration) -> Vec<Configuration> {
        c.upgrade_successors(self.n_models())
    }

    /// Number of single-step upgrade edges in the lattice: `N (M-1) M^(N-1)`.
    pub fn upgrade_edge_count(&self) -> u64 {
        let (n, m) = (self.n_agents() as u64, self.n_models() as u64);
        n * (m - 1) * m.pow(self.n_agents() as u32 - 1)
    }

    /// Lazily enumerates the lattice in lexicographic order.
    pub fn iter(&self) -> ConfigIter {
        ConfigIter {
            next: Some(self.base()),
            top: self.catalog.largest(),
        }
    }
}

/// Odometer over the lattice; the last agent varies fastest.
pub struct ConfigIter {
    next: Option<Configuration>,
    top: ModelIndex,
}

impl Iterator for ConfigIter {
    type Item = Configuration;

    fn next(&mut self) -> Option<Configuration> {
        let current = self.next.take()?;
        let mut digits = current.0.clone();
        for i in (0..digits.len()).rev() {
            if digits[i] < self.top {
                digits[i] += 1;
                self.next = Some(Configuration(digits));
                return Some(current);
            }
            digits[i] = 0;
        }
        Some(current)
    }
}
