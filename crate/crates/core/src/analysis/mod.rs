//! Metrics, rollouts and dynamical-systems experiments.

pub mod cluster;
pub mod metrics;
pub mod phase;
pub mod resilience;
pub mod rollout;
pub mod symmetry;
