//! Just-in-time configuration routing for agentic workflow serving.
//!
//! A request's set of accuracy-preserving configurations is predicted once on
//! arrival ([`predictor`]); a beam-search scheduler then binds models stage by
//! stage against live engine occupancy ([`scheduler`]). The [`sim`] module
//! provides the discrete-event serving environment, [`workload`] and
//! [`baselines`] the synthetic inputs and comparison policies, and [`metrics`]
//! the reports, sweeps and reproduction harnesses.

pub mod baselines;
pub mod error;
pub mod metrics;
pub mod par;
pub mod predictor;
pub mod rng;
pub mod scheduler;
pub mod sim;
pub mod workflow;
pub mod workload;

pub use error::{Error, Result};
