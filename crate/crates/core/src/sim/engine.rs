//! Per-model serving engines with a fixed number of batch slots.

use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::RequestId;
use crate::rng;
use crate::scheduler::EngineSnapshot;
use crate::workflow::{AgentId, ModelIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InFlight {
    pub request: RequestId,
    pub agent: AgentId,
    pub completion: f64,
}

/// One model's engine. A stage holds one slot for its whole service time.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub model: ModelIndex,
    pub max_slots: u32,
    pub weight: f64,
    in_flight: Vec<InFlight>,
}

impl EngineState {
    pub fn new(model: ModelIndex, max_slots: u32, weight: f64) -> Self {
        Self {
            model,
            max_slots,
            weight,
            in_flight: Vec::new(),
        }
    }

    pub fn occupancy(&self) -> u32 {
        self.in_flight.len() as u32
    }

    /// `S_m(t)`: free slots right now.
    pub fn slots_available(&self) -> u32 {
        self.max_slots - self.occupancy()
    }

    pub fn in_flight(&self) -> &[InFlight] {
        &self.in_flight
    }

    pub fn snapshot(&self) -> EngineSnapshot {
        EngineSnapshot {
            free_slots: self.slots_available(),
            weight: self.weight,
        }
    }

    /// Occupies a slot until `now + duration`; returns the completion time.
    pub fn submit(&mut self, request: RequestId, agent: AgentId, now: f64, duration: f64) -> Result<f64> {
        if self.slots_available() == 0 {
            return Err(Error::Capacity {
                model: self.model as usize,
            });
        }
        let completion = now + duration;
        self.in_flight.push(InFlight {
            request,
            agent,
            completion,
        });
        Ok(completion)
    }

    /// Releases the slot held by `(request, agent)`.
    pub fn complete(&mut self, request: RequestId, agent: AgentId) -> Result<()> {
        let pos = self
            .in_flight
            .iter()
            .position(|f| f.request == request && f.agent == agent)
            .ok_or_else(|| {
                Error::validation(format!(
                    "engine {}: request {request} agent {agent} is not in flight",
                    self.model
                ))
            })?;
        self.in_flight.swap_remove(pos);
        Ok(())
    }
}

/// `floor + LogNormal(mu, sigma)` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceDist {
    pub mu: f64,
    pub sigma: f64,
    #[serde(default)]
    pub floor: f64,
}

impl ServiceDist {
    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() || !(self.sigma >= 0.0 && self.sigma.is_finite()) || !(self.floor >= 0.0) {
            return Err(Error::validation(format!(
                "invalid service distribution (mu {}, sigma {}, floor {})",
                self.mu, self.sigma, self.floor
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.floor + (self.mu + self.sigma * self.sigma / 2.0).exp()
    }
}

/// Service-time distribution for every (agent, model) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceTimeModel {
    n_models: usize,
    dists: Vec<ServiceDist>,
    seed: u64,
}

impl ServiceTimeModel {
    /// `dists[agent * n_models + model]`.
    pub fn new(n_agents: usize, n_models: usize, dists: Vec<ServiceDist>, seed: u64) -> Result<Self> {
        if dists.len() != n_agents * n_models {
            return Err(Error::validation("service table must cover every (agent, model) pair"));
        }
        for d in &dists {
            d.validate()?;
        }
        Ok(Self { n_models, dists, seed })
    }

    pub fn dist(&self, agent: AgentId, model: ModelIndex) -> &ServiceDist {
        &self.dists[agent * self.n_models + model as usize]
    }

    pub fn mean(&self, agent: AgentId, model: ModelIndex) -> f64 {
        self.dist(agent, model).mean()
    }

    /// Pure function of `(seed, request, agent, model)`; always positive.
    pub fn sample(&self, request: RequestId, agent: AgentId, model: ModelIndex) -> f64 {
        let d = self.dist(agent, model);
        let mut rng = rng::stream(&[self.seed, rng::TAG_SERVICE, request, agent as u64, model as u64]);
        let x = LogNormal::new(d.mu, d.sigma).expect("validated").sample(&mut rng);
        (d.floor + x).max(f64::MIN_POSITIVE)
    }
}

/// Reserves a slot on `engine` and returns the completion instant.
pub fn submit_stage(
    engine: &mut EngineState,
    request: RequestId,
    agent: AgentId,
    now: f64,
    service: &ServiceTimeModel,
) -> Result<f64> {
    let duration = service.sample(request, agent, engine.model);
    engine.submit(request, agent, now, duration)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn service(seed: u64) -> ServiceTimeModel {
        let d = ServiceDist {
            mu: 0.0,
            sigma: 0.5,
            floor: 0.1,
        };
        ServiceTimeModel::new(2, 2, vec![d; 4], seed).unwrap()
    }

    #[test]
    fn fill_to_capacity_then_reject() {
        let s = service(1);
        let mut e = EngineState::new(0, 2, 1.0);
        submit_stage(&mut e, 0, 0, 0.0, &s).unwrap();
        assert_eq!(e.slots_available(), 1);
        submit_stage(&mut e, 1, 0, 0.0, &s).unwrap();
        assert_eq!(e.occupancy(), e.max_slots);
        assert!(matches!(submit_stage(&mut e, 2, 0, 0.0, &s), Err(Error::Capacity { model: 0 })));
    }

    #[test]
    fn slot_accounting() {
        let mut e = EngineState::new(1, 8, 0.5);
        assert_eq!(e.slots_available(), 8);
        for r in 0..3 {
            e.submit(r, 0, 0.0, 1.0).unwrap();
        }
        assert_eq!(e.slots_available(), 5);
        e.complete(1, 0).unwrap();
        assert_eq!(e.slots_available(), 6);
        assert!(e.complete(1, 0).is_err());
    }

    #[test]
    fn samples_are_pure_and_positive() {
        let a = service(7);
        let b = service(7);
        for r in 0..100 {
            let x = a.sample(r, 1, 0);
            assert_eq!(x, b.sample(r, 1, 0));
            assert!(x > 0.1);
        }
        assert_ne!(a.sample(3, 1, 0), a.sample(3, 1, 1));
        assert_ne!(a.sample(3, 1, 0), service(8).sample(3, 1, 0));
    }

    #[test]
    fn sample_mean_matches_closed_form() {
        let s = service(3);
        let n = 40_000;
        let mean = (0..n).map(|r| s.sample(r, 0, 0)).sum::<f64>() / n as f64;
        let expected = s.mean(0, 0);
        assert!((mean - expected).abs() / expected < 0.02, "{mean} vs {expected}");
    }
}
