//! Corruption sweeps of the belief field and attention/diffusion op counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::metrics::mse;
use crate::analysis::phase::smooth_field;
use crate::belief::{corrupt, evolve, relative_distance, BeliefParams, BeliefState, CorruptionMode};
use crate::bio::BioConfig;
use crate::dynamics::IntegrationConfig;
use crate::error::{FluidError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResilienceConfig {
    pub modes: Vec<CorruptionMode>,
    pub ratios: Vec<f64>,
    pub channels: usize,
    pub size: usize,
    /// Evolve steps before the corruption is applied.
    pub warmup_steps: usize,
    /// Evolve steps after the corruption.
    pub steps: usize,
    pub intensity: f64,
    /// Relative distance below which the state counts as recovered.
    pub threshold: f64,
    /// Independent corruption draws averaged per cell.
    pub trials: usize,
    pub seed: u64,
}

impl Default for ResilienceConfig {
    fn default() -> Self {
        Self {
            modes: CorruptionMode::ALL.to_vec(),
            ratios: (1..=9).map(|i| i as f64 / 10.0).collect(),
            channels: 16,
            size: 8,
            warmup_steps: 2,
            steps: 10,
            intensity: 1.0,
            threshold: 0.05,
            trials: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResilienceRow {
    pub mode: CorruptionMode,
    pub ratio: f64,
    /// Mean over trials.
    pub residual_mse: f64,
    /// First step after corruption at which the trial-mean relative distance
    /// falls below the threshold.
    pub recovery_steps: Option<usize>,
}

/// Evolution of the belief without new observations.
#[derive(Clone, Copy)]
pub struct FreeEvolution<'a> {
    pub params: &'a BeliefParams<f64>,
    pub integration: &'a IntegrationConfig,
    pub bio: &'a BioConfig,
}

impl FreeEvolution<'_> {
    pub fn run(&self, state: &BeliefState<f64>, steps: usize) -> Vec<BeliefState<f64>> {
        let mut out = vec![state.clone()];
        for _ in 0..steps {
            let next = evolve(out.last().unwrap(), self.params, self.integration, self.bio);
            out.push(next);
        }
        out
    }
}

/// Relative distance between corrupted and clean trajectories, starting at
/// the moment of corruption.
pub fn repair_trajectory(
    dynamics: FreeEvolution,
    state: &BeliefState<f64>,
    mode: CorruptionMode,
    ratio: f64,
    intensity: f64,
    seed: u64,
    steps: usize,
) -> Vec<f64> {
    let clean = dynamics.run(state, steps);
    let damaged = dynamics.run(&corrupt(state, mode, ratio, intensity, seed), steps);
    clean.iter().zip(&damaged).map(|(c, d)| relative_distance(&d.s, &c.s)).collect()
}

/// Seeded smooth belief state warmed up by `warmup_steps` free evolutions.
pub fn warm_belief(dynamics: FreeEvolution, channels: usize, size: usize, warmup_steps: usize, seed: u64) -> BeliefState<f64> {
    let mut state = BeliefState::new(channels, size, size, dynamics.bio);
    state.s = smooth_field(channels, size, size, seed);
    dynamics.run(&state, warmup_steps).pop().unwrap()
}

/// Every (mode, ratio) cell, mode-major. Within a mode, trial `k` uses the
/// same corruption seed at every ratio, so larger ratios damage a superset
/// of entries.
pub fn resilience_sweep(dynamics: FreeEvolution, cfg: &ResilienceConfig) -> Result<Vec<ResilienceRow>> {
    if cfg.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(FluidError::Config("corruption ratios must lie in [0, 1]".into()));
    }
    if cfg.trials == 0 {
        return Err(FluidError::Config("at least one trial per cell".into()));
    }
    if dynamics.params.evolve.dim() != cfg.channels {
        return Err(FluidError::Config("belief width does not match the sweep channels".into()));
    }
    let start = warm_belief(dynamics, cfg.channels, cfg.size, cfg.warmup_steps, cfg.seed);
    let clean = dynamics.run(&start, cfg.steps);
    let cells: Vec<(usize, CorruptionMode, f64)> =
        cfg.modes.iter().enumerate().flat_map(|(m, &mode)| cfg.ratios.iter().map(move |&r| (m, mode, r))).collect();
    Ok(cells
        .par_iter()
        .map(|&(m, mode, ratio)| {
            let mut distance = vec![0.0; cfg.steps + 1];
            let mut residual_mse = 0.0;
            for k in 0..cfg.trials {
                let seed = cfg.seed.wrapping_add(1 + (m * cfg.trials + k) as u64);
                let damaged = dynamics.run(&corrupt(&start, mode, ratio, cfg.intensity, seed), cfg.steps);
                for (acc, (c, d)) in distance.iter_mut().zip(clean.iter().zip(&damaged)) {
                    *acc += relative_distance(&d.s, &c.s) / cfg.trials as f64;
                }
                residual_mse += mse(&damaged.last().unwrap().s, &clean.last().unwrap().s) / cfg.trials as f64;
            }
            let recovery_steps = distance.iter().position(|&d| d < cfg.threshold);
            ResilienceRow { mode, ratio, residual_mse, recovery_steps }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub tokens: u64,
    pub attention_ops: u64,
    pub diffusion_ops: u64,
    pub ratio: u64,
}

/// Pairwise attention costs `N^2` against `N` for a local stencil.
pub fn op_count_scaling(tokens: &[u64]) -> Vec<ScalingRow> {
    tokens.iter().map(|&n| ScalingRow { tokens: n, attention_ops: n * n, diffusion_ops: n, ratio: n }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LayerParams;

    fn diffusion_belief(d: usize) -> BeliefParams<f64> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut p = BeliefParams::init(d, &mut rng);
        p.evolve = LayerParams::pure_diffusion(d, [0.2, 0.0, 0.0], 0.2);
        p
    }

    #[test]
    fn table_rows() {
        let rows = op_count_scaling(&[1, 256, 16384]);
        assert_eq!(rows[0], ScalingRow { tokens: 1, attention_ops: 1, diffusion_ops: 1, ratio: 1 });
        assert_eq!(rows[1].attention_ops, 65_536);
        assert_eq!(rows[2].attention_ops, 268_435_456);
        assert_eq!(rows[2].ratio, 16_384);
    }

    #[test]
    fn zero_ratio_is_harmless_and_sweep_is_deterministic() {
        let p = diffusion_belief(4);
        let integ = IntegrationConfig { normalize: false, ..Default::default() };
        let bio = BioConfig::disabled();
        let dynamics = FreeEvolution { params: &p, integration: &integ, bio: &bio };
        let cfg = ResilienceConfig { channels: 4, ratios: vec![0.0, 0.5], steps: 4, ..Default::default() };
        let rows = resilience_sweep(dynamics, &cfg).unwrap();
        assert_eq!(rows.len(), 8);
        for r in rows.iter().filter(|r| r.ratio == 0.0) {
            assert_eq!(r.residual_mse, 0.0);
            assert_eq!(r.recovery_steps, Some(0));
        }
        assert_eq!(rows, resilience_sweep(dynamics, &cfg).unwrap());
    }
}
