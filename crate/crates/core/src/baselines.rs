//! Comparison policies that bind a whole configuration before execution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::RequestId;
use crate::sim::engine::ServiceTimeModel;
use crate::workflow::{ConfigSpace, Configuration, ModelCatalog};
use crate::workload::AccuracyTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Predict the viable set on arrival, bind models stage by stage.
    Stagewise,
    /// One configuration for every request.
    PerWorkflow,
    /// Cheapest accurate configuration per request by static cost.
    PerInputStatic,
    /// Accurate configuration with the lowest estimated completion time at arrival.
    PerInputRuntime,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Stagewise,
        PolicyKind::PerInputRuntime,
        PolicyKind::PerInputStatic,
        PolicyKind::PerWorkflow,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Stagewise => "stagewise",
            PolicyKind::PerWorkflow => "per-workflow",
            PolicyKind::PerInputStatic => "per-input-static",
            PolicyKind::PerInputRuntime => "per-input-runtime",
        }
    }

    /// Policies that pay for a router pass on arrival.
    pub fn uses_router(&self) -> bool {
        !matches!(self, PolicyKind::PerWorkflow)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown policy `{s}`")))
    }
}

fn cheapest<'a, F>(set: impl IntoIterator<Item = &'a Configuration>, cost: F) -> Option<Configuration>
where
    F: Fn(&Configuration) -> f64,
{
    set.into_iter()
        .map(|c| (cost(c), c))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
        .map(|(_, c)| c.clone())
}

/// Cheapest configuration accurate on at least `1 - tolerance` of the sample.
/// `c*` always qualifies.
pub fn per_workflow_policy(sample: &AccuracyTable, space: &ConfigSpace, tolerance: f64) -> Result<Configuration> {
    if sample.is_empty() {
        return Err(Error::validation("per-workflow selection needs a nonempty sample"));
    }
    if !(0.0..=1.0).contains(&tolerance) {
        return Err(Error::validation(format!("tolerance {tolerance} outside [0, 1]")));
    }
    let n = sample.len();
    let required = ((1.0 - tolerance) * n as f64 - 1e-9).ceil().max(0.0) as usize;
    let qualifying: Vec<Configuration> = space
        .iter()
        .filter(|c| c == space.top() || (0..n as u64).filter(|&r| sample.is_accurate(r, c)).count() >= required)
        .collect();
    Ok(cheapest(&qualifying, |c| space.static_cost(c)).expect("c* qualifies"))
}

/// Completion-time estimate frozen at arrival: per stage,
/// `(queue depth ahead / slots) * mean service + mean service`.
#[derive(Debug, Clone)]
pub struct RuntimeCostEstimator<'a> {
    service: &'a ServiceTimeModel,
    /// Stages running or waiting on each engine.
    ahead: Vec<f64>,
    slots: Vec<f64>,
}

impl<'a> RuntimeCostEstimator<'a> {
    pub fn new(service: &'a ServiceTimeModel, ahead: Vec<u32>, slots: Vec<u32>) -> Self {
        Self {
            service,
            ahead: ahead.into_iter().map(f64::from).collect(),
            slots: slots.into_iter().map(f64::from).collect(),
        }
    }

    pub fn estimate(&self, c: &Configuration) -> f64 {
        c.models()
            .iter()
            .enumerate()
            .map(|(agent, &m)| {
                let mean = self.service.mean(agent, m);
                let i = m as usize;
                (self.ahead[i] / self.slots[i]) * mean + mean
            })
            .sum()
    }
}

pub enum PerInputKind<'a> {
    Static,
    RuntimeCost(&'a RuntimeCostEstimator<'a>),
}

/// Per-request choice from the request's accurate set. Ties go to the
/// lexicographically smallest configuration.
pub fn per_input_policy(
    request: RequestId,
    table: &AccuracyTable,
    catalog: &ModelCatalog,
    kind: PerInputKind<'_>,
) -> Configuration {
    let set = table.accurate_set(request);
    match kind {
        PerInputKind::Static => cheapest(set, |c| c.static_cost(catalog)),
        PerInputKind::RuntimeCost(est) => cheapest(set, |c| est.estimate(c)),
    }
    .expect("accurate sets are nonempty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::engine::ServiceDist;
    use crate::workload::{generate_accuracy_table, TableParams};
    use proptest::prelude::*;

    fn cfg(v: &[u8]) -> Configuration {
        Configuration::new(v.to_vec())
    }

    fn space() -> ConfigSpace {
        ConfigSpace::uniform(3, 3).unwrap()
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(p.name().parse::<PolicyKind>().unwrap(), p);
        }
        assert!("nope".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn per_workflow_examples() {
        let s = space();
        let everything: Vec<_> = s.iter().collect();
        let t = AccuracyTable::new(&s, vec![everything.clone(), everything.clone()]).unwrap();
        assert_eq!(per_workflow_policy(&t, &s, 0.0).unwrap(), s.base());

        let t = AccuracyTable::new(&s, vec![everything.clone(), vec![s.top().clone()]]).unwrap();
        assert_eq!(&per_workflow_policy(&t, &s, 0.0).unwrap(), s.top());
        // Half the sample may miss at tolerance 0.5.
        assert_eq!(per_workflow_policy(&t, &s, 0.5).unwrap(), s.base());
    }

    #[test]
    fn per_input_examples() {
        let s = space();
        let everything: Vec<_> = s.iter().collect();
        let tied = vec![cfg(&[0, 1, 2]), cfg(&[2, 1, 0]), s.top().clone()];
        let t = AccuracyTable::new(&s, vec![vec![s.top().clone()], everything, tied]).unwrap();
        let cat = s.catalog();
        assert_eq!(&per_input_policy(0, &t, cat, PerInputKind::Static), s.top());
        assert_eq!(per_input_policy(1, &t, cat, PerInputKind::Static), s.base());
        assert_eq!(per_input_policy(2, &t, cat, PerInputKind::Static), cfg(&[0, 1, 2]));
    }

    #[test]
    fn runtime_cost_prefers_idle_engines() {
        let s = ConfigSpace::uniform(1, 2).unwrap();
        let d = ServiceDist { mu: 0.0, sigma: 0.0, floor: 0.0 };
        let service = ServiceTimeModel::new(1, 2, vec![d, d], 0).unwrap();
        let t = AccuracyTable::new(&s, vec![vec![cfg(&[0]), cfg(&[1])]]).unwrap();
        let busy_small = RuntimeCostEstimator::new(&service, vec![8, 0], vec![2, 2]);
        assert_eq!(busy_small.estimate(&cfg(&[0])), 5.0);
        assert_eq!(
            per_input_policy(0, &t, s.catalog(), PerInputKind::RuntimeCost(&busy_small)),
            cfg(&[1])
        );
        let idle = RuntimeCostEstimator::new(&service, vec![0, 0], vec![2, 2]);
        assert_eq!(per_input_policy(0, &t, s.catalog(), PerInputKind::RuntimeCost(&idle)), cfg(&[0]));
    }

    // Brute force: intersect every set, then take the cheapest member.
    fn intersection_min(s: &ConfigSpace, t: &AccuracyTable) -> Configuration {
        let mut members: Vec<Configuration> = s
            .iter()
            .filter(|c| t.sets().iter().all(|set| set.contains(c)))
            .collect();
        members.sort_by(|a, b| s.static_cost(a).total_cmp(&s.static_cost(b)).then(a.cmp(b)));
        members.remove(0)
    }

    proptest! {
        #[test]
        fn per_workflow_is_min_cost_over_intersection(seed in any::<u64>(), n in 1usize..8) {
            let s = space();
            let t = generate_accuracy_table(&s, &TableParams::default(), n, seed).unwrap();
            prop_assert_eq!(per_workflow_policy(&t, &s, 0.0).unwrap(), intersection_min(&s, &t));
        }

        #[test]
        fn per_workflow_never_cheaper_than_per_input(seed in any::<u64>(), n in 1usize..8) {
            let s = space();
            let t = generate_accuracy_table(&s, &TableParams::default(), n, seed).unwrap();
            let wf = per_workflow_policy(&t, &s, 0.0).unwrap();
            for r in 0..n as u64 {
                let pi = per_input_policy(r, &t, s.catalog(), PerInputKind::Static);
                prop_assert!(s.static_cost(&wf) >= s.static_cost(&pi));
                prop_assert!(t.is_accurate(r, &wf));
                prop_assert!(t.is_accurate(r, &pi));
            }
        }
    }
}
