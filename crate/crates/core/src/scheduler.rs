//! Stage-wise joint scheduling of ready workflow stages onto model engines.
//!
//! Each round walks the ready `(request, agent)` pairs in two-level order
//! (arrival first, then critical-path depth) and keeps the `B` best partial
//! assignments. A pair is skipped only when none of its candidate models has a
//! free slot in that partial assignment, so later requests can never take a
//! slot the skipped request could have used.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{RequestId, ViableSet};
use crate::sim::engine::EngineState;
use crate::workflow::{AgentId, Configuration, ModelIndex, WorkflowGraph};

pub const DEFAULT_BEAM_WIDTH: usize = 4;
pub const DEFAULT_BRUTE_FORCE_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageStatus {
    Waiting,
    InFlight,
    Done,
}

/// One workflow execution in flight.
#[derive(Debug, Clone)]
pub struct Request {
    pub id: RequestId,
    pub arrival: f64,
    graph: Arc<WorkflowGraph>,
    viable: Vec<Configuration>,
    prefix: Vec<Option<ModelIndex>>,
    status: Vec<StageStatus>,
    candidates: Vec<Vec<ModelIndex>>,
}

impl Request {
    pub fn new(id: RequestId, arrival: f64, graph: Arc<WorkflowGraph>, viable: ViableSet) -> Self {
        let n = graph.len();
        let mut r = Self {
            id,
            arrival,
            graph,
            viable: viable.into_configs(),
            prefix: vec![None; n],
            status: vec![StageStatus::Waiting; n],
            candidates: Vec::new(),
        };
        r.refresh_candidates();
        r
    }

    /// A request whose whole configuration was fixed up front (the baselines).
    pub fn pinned(id: RequestId, arrival: f64, graph: Arc<WorkflowGraph>, config: Configuration) -> Self {
        let n = graph.len();
        let mut r = Self {
            id,
            arrival,
            graph,
            viable: vec![config],
            prefix: vec![None; n],
            status: vec![StageStatus::Waiting; n],
            candidates: Vec::new(),
        };
        r.refresh_candidates();
        r
    }

    fn refresh_candidates(&mut self) {
        let n = self.graph.len();
        let mut cands = vec![Vec::new(); n];
        for (a, list) in cands.iter_mut().enumerate() {
            if self.prefix[a].is_some() {
                continue;
            }
            list.extend(self.viable.iter().map(|c| c.model(a)));
            list.sort_unstable();
            list.dedup();
        }
        self.candidates = cands;
    }

    pub fn graph(&self) -> &Arc<WorkflowGraph> {
        &self.graph
    }

    pub fn viable(&self) -> &[Configuration] {
        &self.viable
    }

    /// Models already bound to agents (dispatched or completed).
    pub fn prefix(&self) -> &[Option<ModelIndex>] {
        &self.prefix
    }

    pub fn status(&self, agent: AgentId) -> StageStatus {
        self.status[agent]
    }

    /// Waiting agents whose predecessors have all completed, in canonical order.
    pub fn ready_agents(&self) -> Vec<AgentId> {
        (0..self.graph.len())
            .filter(|&a| {
                self.status[a] == StageStatus::Waiting
                    && self
                        .graph
                        .predecessors(a)
                        .iter()
                        .all(|&p| self.status[p] == StageStatus::Done)
            })
            .collect()
    }

    pub fn has_ready_agents(&self) -> bool {
        !self.ready_agents().is_empty()
    }

    /// Models some viable configuration assigns to `agent`. Sorted ascending.
    pub fn candidate_models(&self, agent: AgentId) -> &[ModelIndex] {
        &self.candidates[agent]
    }

    /// Viable configurations that also agree with the extra bindings.
    pub fn consistent_count(&self, extra: &[(AgentId, ModelIndex)]) -> usize {
        self.viable
            .iter()
            .filter(|c| extra.iter().all(|&(a, m)| c.model(a) == m))
            .count()
    }

    /// Binds `agent` to `model`, marks it in flight and prunes the viable set
    /// to configurations with the new prefix.
    pub fn dispatch(&mut self, agent: AgentId, model: ModelIndex) -> Result<()> {
        if self.status[agent] != StageStatus::Waiting {
            return Err(Error::validation(format!(
                "request {}: agent {agent} is not waiting",
                self.id
            )));
        }
        if !self.candidates[agent].contains(&model) {
            return Err(Error::validation(format!(
                "request {}: model {model} is not viable for agent {agent}",
                self.id
            )));
        }
        self.prefix[agent] = Some(model);
        self.status[agent] = StageStatus::InFlight;
        self.viable.retain(|c| c.model(agent) == model);
        self.refresh_candidates();
        Ok(())
    }

    pub fn complete(&mut self, agent: AgentId) -> Result<()> {
        if self.status[agent] != StageStatus::InFlight {
            return Err(Error::validation(format!(
                "request {}: agent {agent} is not in flight",
                self.id
            )));
        }
        self.status[agent] = StageStatus::Done;
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        self.status.iter().all(|&s| s == StageStatus::Done)
    }

    /// The configuration actually executed, once every agent is bound.
    pub fn executed_configuration(&self) -> Option<Configuration> {
        self.prefix
            .iter()
            .copied()
            .collect::<Option<Vec<_>>>()
            .map(Configuration::new)
    }

    /// Every viable configuration agrees with the executed prefix.
    pub fn prefix_consistent(&self) -> bool {
        !self.viable.is_empty()
            && self.viable.iter().all(|c| {
                self.prefix
                    .iter()
                    .enumerate()
                    .all(|(a, p)| p.is_none_or(|m| c.model(a) == m))
            })
    }
}

/// What the scheduler sees of one engine at round start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub free_slots: u32,
    /// Per-slot throughput weight.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerParams {
    pub beam_width: usize,
    pub brute_force_cap: u64,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        Self {
            beam_width: DEFAULT_BEAM_WIDTH,
            brute_force_cap: DEFAULT_BRUTE_FORCE_CAP,
        }
    }
}

impl SchedulerParams {
    pub fn with_beam_width(beam_width: usize) -> Result<Self> {
        let p = Self {
            beam_width,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::validation("beam width must be >= 1"));
        }
        Ok(())
    }
}

/// Ranking of a partial assignment: utilization first, flexibility second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub utilization: f64,
    pub flexibility: f64,
}

impl Score {
    pub const EMPTY: Score = Score {
        utilization: 0.0,
        flexibility: 1.0,
    };

    // Quantized so that equal sums reached in different orders tie exactly.
    fn key(&self) -> (i64, i64) {
        (
            (self.utilization * 1e9).round() as i64,
            (self.flexibility * 1e12).round() as i64,
        )
    }

    /// Lexicographic comparison on (utilization, flexibility).
    pub fn rank_cmp(&self, other: &Score) -> Ordering {
        self.key().cmp(&other.key())
    }
}

/// One step of the round: a ready pair and what was decided for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub request: RequestId,
    pub agent: AgentId,
    /// Candidate models at round start.
    pub candidates: Vec<ModelIndex>,
    /// `None` means skipped.
    pub model: Option<ModelIndex>,
}

/// The chosen partial assignment for one round, with every ready pair's fate
/// listed in two-level order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub decisions: Vec<Decision>,
    pub score: Score,
    pub skips: usize,
}

impl Assignment {
    pub fn empty() -> Self {
        Self {
            decisions: Vec::new(),
            score: Score::EMPTY,
            skips: 0,
        }
    }

    pub fn triples(&self) -> impl Iterator<Item = (RequestId, AgentId, ModelIndex)> + '_ {
        self.decisions
            .iter()
            .filter_map(|d| d.model.map(|m| (d.request, d.agent, m)))
    }

    pub fn assigned_count(&self) -> usize {
        self.decisions.iter().filter(|d| d.model.is_some()).count()
    }
}

/// Ready pairs sorted by request arrival, then descending agent depth, then
/// agent declaration order.
pub fn two_level_order(queue: &[&Request]) -> Vec<(RequestId, AgentId)> {
    let mut reqs: Vec<&&Request> = queue.iter().collect();
    reqs.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id)));
    let mut out = Vec::new();
    for r in reqs {
        let mut ready = r.ready_agents();
        let g = r.graph();
        ready.sort_by_key(|&a| (std::cmp::Reverse(g.depth(a)), g.declaration_index(a)));
        out.extend(ready.into_iter().map(|a| (r.id, a)));
    }
    out
}

/// Recomputes the score of a set of triples from scratch.
pub fn score(
    triples: &[(RequestId, AgentId, ModelIndex)],
    engines: &[EngineSnapshot],
    queue: &[&Request],
) -> Score {
    let utilization = triples.iter().map(|&(_, _, m)| engines[m as usize].weight).sum();
    let mut per_request: BTreeMap<RequestId, Vec<(AgentId, ModelIndex)>> = BTreeMap::new();
    for &(r, a, m) in triples {
        per_request.entry(r).or_default().push((a, m));
    }
    if per_request.is_empty() {
        return Score {
            utilization,
            flexibility: 1.0,
        };
    }
    let total: f64 = per_request
        .iter()
        .map(|(id, pairs)| {
            let r = queue.iter().find(|r| r.id == *id).expect("request in queue");
            r.consistent_count(pairs) as f64 / r.viable().len() as f64
        })
        .sum();
    Score {
        utilization,
        flexibility: total / per_request.len() as f64,
    }
}

struct Item<'a> {
    request: &'a Request,
    agent: AgentId,
    candidates: &'a [ModelIndex],
    /// Some candidate had a free slot at round start.
    live: bool,
}

#[derive(Clone)]
struct State {
    choices: Vec<Option<ModelIndex>>,
    used: Vec<u32>,
    utilization: f64,
    skips: usize,
    flex_sum: f64,
    flex_count: usize,
    current: Option<usize>,
    current_pairs: Vec<(AgentId, ModelIndex)>,
    current_ratio: f64,
}

impl State {
    fn new(n_engines: usize) -> Self {
        Self {
            choices: Vec::new(),
            used: vec![0; n_engines],
            utilization: 0.0,
            skips: 0,
            flex_sum: 0.0,
            flex_count: 0,
            current: None,
            current_pairs: Vec::new(),
            current_ratio: 0.0,
        }
    }

    fn score(&self) -> Score {
        let (sum, count) = if self.current_pairs.is_empty() {
            (self.flex_sum, self.flex_count)
        } else {
            (self.flex_sum + self.current_ratio, self.flex_count + 1)
        };
        Score {
            utilization: self.utilization,
            flexibility: if count == 0 { 1.0 } else { sum / count as f64 },
        }
    }

    fn free(&self, engines: &[EngineSnapshot], m: ModelIndex) -> bool {
        self.used[m as usize] < engines[m as usize].free_slots
    }

    fn enter(&mut self, item_request: usize) {
        if self.current != Some(item_request) {
            if !self.current_pairs.is_empty() {
                self.flex_sum += self.current_ratio;
                self.flex_count += 1;
            }
            self.current = Some(item_request);
            self.current_pairs.clear();
            self.current_ratio = 0.0;
        }
    }

    fn extend(&self, item: &Item, request_index: usize, choice: Option<ModelIndex>, engines: &[EngineSnapshot]) -> State {
        let mut next = self.clone();
        next.enter(request_index);
        next.choices.push(choice);
        match choice {
            None => next.skips += 1,
            Some(m) => {
                next.used[m as usize] += 1;
                next.utilization += engines[m as usize].weight;
                next.current_pairs.push((item.agent, m));
                next.current_ratio = item.request.consistent_count(&next.current_pairs) as f64
                    / item.request.viable().len() as f64;
            }
        }
        next
    }

    /// No remaining item can use any engine this state still has room on.
    fn dead(&self, engines: &[EngineSnapshot], last_use: &[Option<usize>], next_item: usize) -> bool {
        (0..engines.len()).all(|m| {
            self.used[m] >= engines[m].free_slots || last_use[m].is_none_or(|last| last < next_item)
        })
    }
}

// Higher score first, then fewer skips, then the lexicographically smallest
// choice vector.
fn rank(a: &State, b: &State) -> Ordering {
    b.score()
        .rank_cmp(&a.score())
        .then(a.skips.cmp(&b.skips))
        .then_with(|| a.choices.cmp(&b.choices))
}

struct Round<'a> {
    items: Vec<Item<'a>>,
    request_index: Vec<usize>,
    order: Vec<(RequestId, AgentId)>,
    /// Positions of live items in `items`.
    live: Vec<usize>,
    last_use: Vec<Option<usize>>,
}

impl<'a> Round<'a> {
    fn new(queue: &'a [&'a Request], engines: &[EngineSnapshot]) -> Self {
        let order = two_level_order(queue);
        let by_id: BTreeMap<RequestId, (usize, &'a Request)> =
            queue.iter().enumerate().map(|(i, r)| (r.id, (i, *r))).collect();
        let mut items = Vec::with_capacity(order.len());
        let mut request_index = Vec::with_capacity(order.len());
        for &(id, agent) in &order {
            let (idx, r) = by_id[&id];
            let candidates = r.candidate_models(agent);
            let live = candidates
                .iter()
                .any(|&m| engines.get(m as usize).is_some_and(|e| e.free_slots > 0));
            items.push(Item {
                request: r,
                agent,
                candidates,
                live,
            });
            request_index.push(idx);
        }
        let live: Vec<usize> = (0..items.len()).filter(|&i| items[i].live).collect();
        let mut last_use = vec![None; engines.len()];
        for (k, &i) in live.iter().enumerate() {
            for &m in items[i].candidates {
                if let Some(slot) = last_use.get_mut(m as usize) {
                    *slot = Some(k);
                }
            }
        }
        Self {
            items,
            request_index,
            order,
            live,
            last_use,
        }
    }

    fn finish(&self, best: &State) -> Assignment {
        let mut chosen = vec![None; self.items.len()];
        for (k, &c) in best.choices.iter().enumerate() {
            chosen[self.live[k]] = c;
        }
        let decisions: Vec<Decision> = self
            .items
            .iter()
            .zip(&self.order)
            .zip(chosen)
            .map(|((item, &(request, agent)), model)| Decision {
                request,
                agent,
                candidates: item.candidates.to_vec(),
                model,
            })
            .collect();
        let skips = decisions.iter().filter(|d| d.model.is_none()).count();
        Assignment {
            decisions,
            score: best.score(),
            skips,
        }
    }

    fn extensions(&self, state: &State, k: usize, engines: &[EngineSnapshot]) -> Vec<State> {
        let i = self.live[k];
        let item = &self.items[i];
        let feasible: Vec<ModelIndex> = item
            .candidates
            .iter()
            .copied()
            .filter(|&m| (m as usize) < engines.len() && state.free(engines, m))
            .collect();
        if feasible.is_empty() {
            vec![state.extend(item, self.request_index[i], None, engines)]
        } else {
            feasible
                .into_iter()
                .map(|m| state.extend(item, self.request_index[i], Some(m), engines))
                .collect()
        }
    }
}

/// Beam search over the round. `beam_width = 1` is greedy.
pub fn beam_schedule(queue: &[&Request], engines: &[EngineSnapshot], params: &SchedulerParams) -> Assignment {
    let round = Round::new(queue, engines);
    let width = params.beam_width.max(1);
    let mut beam = vec![State::new(engines.len())];
    for k in 0..round.live.len() {
        if beam.iter().all(|s| s.dead(engines, &round.last_use, k)) {
            break;
        }
        let mut next: Vec<State> = beam
            .iter()
            .flat_map(|s| round.extensions(s, k, engines))
            .collect();
        next.sort_by(rank);
        next.truncate(width);
        beam = next;
    }
    round.finish(&beam[0])
}

/// Exhaustive search over the same expansion tree. Refuses when the number of
/// leaves could exceed `params.brute_force_cap`.
pub fn brute_force_schedule(
    queue: &[&Request],
    engines: &[EngineSnapshot],
    params: &SchedulerParams,
) -> Result<Assignment> {
    let round = Round::new(queue, engines);
    let bound = round.live.iter().try_fold(1u128, |acc, &i| {
        let n = round.items[i].candidates.len().max(1) as u128;
        acc.checked_mul(n).filter(|&v| v <= params.brute_force_cap as u128)
    });
    if bound.is_none() {
        let states = round
            .live
            .iter()
            .map(|&i| round.items[i].candidates.len().max(1) as u128)
            .fold(1u128, |a, n| a.saturating_mul(n));
        return Err(Error::SearchSpaceTooLarge {
            states,
            cap: params.brute_force_cap,
        });
    }

    fn dfs(round: &Round, engines: &[EngineSnapshot], state: State, k: usize, best: &mut Option<State>) {
        if k == round.live.len() || state.dead(engines, &round.last_use, k) {
            if best.as_ref().is_none_or(|b| rank(&state, b) == Ordering::Less) {
                *best = Some(state);
            }
            return;
        }
        for next in round.extensions(&state, k, engines) {
            dfs(round, engines, next, k + 1, best);
        }
    }

    let mut best = None;
    dfs(&round, engines, State::new(engines.len()), 0, &mut best);
    Ok(round.finish(&best.expect("at least one leaf")))
}

/// A stage handed to an engine by [`apply_assignment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub request: RequestId,
    pub agent: AgentId,
    pub model: ModelIndex,
    pub start: f64,
    pub completion: f64,
}

/// Submits every assigned stage. A triple whose engine is full, or whose
/// request can no longer take it, is dropped and stays queued.
pub fn apply_assignment<F>(
    assignment: &Assignment,
    requests: &mut BTreeMap<RequestId, Request>,
    engines: &mut [EngineState],
    now: f64,
    mut service_time: F,
) -> Vec<Dispatch>
where
    F: FnMut(RequestId, AgentId, ModelIndex) -> f64,
{
    let mut out = Vec::new();
    for (rid, agent, model) in assignment.triples() {
        let Some(engine) = engines.get_mut(model as usize) else {
            continue;
        };
        let Some(request) = requests.get_mut(&rid) else {
            continue;
        };
        if engine.slots_available() == 0
            || request.status(agent) != StageStatus::Waiting
            || !request.candidate_models(agent).contains(&model)
        {
            continue;
        }
        let duration = service_time(rid, agent, model);
        let completion = engine
            .submit(rid, agent, now, duration)
            .expect("free slot checked above");
        request.dispatch(agent, model).expect("candidate checked above");
        out.push(Dispatch {
            request: rid,
            agent,
            model,
            start: now,
            completion,
        });
    }
    out
}

/// Checks the look-ahead FIFO predicate for one round: a pair skipped because
/// every candidate engine was full must not see a later-arriving request
/// placed on any of those engines in the same round. Returns the number of
/// violating placements.
pub fn fifo_violations(assignment: &Assignment, engines: &[EngineSnapshot], arrival: impl Fn(RequestId) -> f64) -> usize {
    let mut used = vec![0u32; engines.len()];
    // Per engine, the earliest arrival among pairs skipped while waiting for it.
    let mut blocked_since = vec![f64::INFINITY; engines.len()];
    let mut violations = 0;
    for d in &assignment.decisions {
        let Some(m) = d.model else {
            let saturated = d
                .candidates
                .iter()
                .all(|&m| engines.get(m as usize).is_none_or(|e| used[m as usize] >= e.free_slots));
            if !saturated {
                // Skipped while a slot was available.
                violations += 1;
            }
            let t = arrival(d.request);
            for &m in &d.candidates {
                if let Some(b) = blocked_since.get_mut(m as usize) {
                    *b = b.min(t);
                }
            }
            continue;
        };
        let Some(u) = used.get_mut(m as usize) else {
            violations += 1;
            continue;
        };
        if arrival(d.request) > blocked_since[m as usize] {
            violations += 1;
        }
        *u += 1;
        if *u > engines[m as usize].free_slots {
            violations += 1;
        }
    }
    violations
}
