//! Analytic gradients against central differences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::belief::BeliefState;
use crate::error::Result;
use crate::field::FieldGrid;
use crate::model::{bind, window_graph, Buffers, ModelConfig, ModelParams};
use crate::training::loss::LossWeights;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// One window of a model with everything needed to evaluate its loss.
pub struct GradSample<'a> {
    pub cfg: &'a ModelConfig,
    pub weights: &'a LossWeights,
    pub frames: &'a [FieldGrid<f64>],
    pub state: &'a BeliefState<f64>,
}

/// Loss and full analytic gradient, plus the recorded buffers.
pub fn loss_and_grad(params: &ModelParams<f64>, s: &GradSample) -> Result<(f64, Vec<f64>, Buffers<f64>)> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params);
    let mut buffers = Buffers::record();
    let g = window_graph(&mut tape, &vars, s.frames, s.state, s.cfg, s.weights, &mut buffers)?;
    let grads = tape.param_grads(g.loss)?;
    Ok((tape.scalar(g.loss), grads, buffers))
}

fn loss_replay(params: &ModelParams<f64>, s: &GradSample, buffers: &Buffers<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params);
    let mut replay = buffers.clone().into_replay();
    let g = window_graph(&mut tape, &vars, s.frames, s.state, s.cfg, s.weights, &mut replay)?;
    Ok(tape.scalar(g.loss))
}

/// `|a - n| / max(|a|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1e-8)
}

/// Compares analytic and central-difference gradients at `indices`. Running
/// statistics (fatigue health, Hebbian maps) are held at their recorded values.
pub fn check_gradients(params: &ModelParams<f64>, s: &GradSample, indices: &[usize], h: f64) -> Result<GradCheckReport> {
    let (_, grads, buffers) = loss_and_grad(params, s)?;
    let base = params.flatten();
    let layout = params.layout();
    let mut work = params.clone();
    let mut entries = Vec::with_capacity(indices.len());
    for &index in indices {
        let mut eval = |delta: f64| -> Result<f64> {
            let mut flat = base.clone();
            flat[index] += delta;
            work.unflatten(&flat)?;
            loss_replay(&work, s, &buffers)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let analytic = grads[index];
        let name = layout.iter().find(|(_, o, n)| index >= *o && index < o + n).map(|e| e.0.clone()).unwrap_or_default();
        entries.push(GradCheckEntry { index, name, analytic, numeric, rel_error: relative_error(analytic, numeric) });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_error, tolerance: GRADCHECK_TOLERANCE, passed: max_rel_error < GRADCHECK_TOLERANCE })
}

/// At least `per_tensor` random indices from every tensor (fewer if it is
/// smaller), topped up with uniform draws to `min_total`. Sorted and unique.
pub fn sample_indices(params: &ModelParams<f64>, per_tensor: usize, min_total: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, offset, len) in params.layout() {
        let mut local: Vec<usize> = (0..len).collect();
        local.shuffle(&mut rng);
        out.extend(local.into_iter().take(per_tensor).map(|i| offset + i));
    }
    let n = params.num_params();
    while out.len() < min_total.min(n) {
        let i = rng.random_range(0..n);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Random frames in [0, 1] for gradient checks.
pub fn random_frames(n: usize, channels: usize, h: usize, w: usize, seed: u64) -> Vec<FieldGrid<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| FieldGrid::from_fn(channels, h, w, |_, _, _| rng.random_range(0.0..1.0))).collect()
}

/// Belief state after a warm-up window, so that decay and Hebbian terms are exercised.
pub fn warm_state(params: &ModelParams<f64>, cfg: &ModelConfig, frames: &[FieldGrid<f64>]) -> Result<BeliefState<f64>> {
    let (_, h, w) = frames[0].shape();
    let mut state = crate::model::initial_state(cfg, h, w);
    for f in frames {
        crate::model::observe_and_predict(params, cfg, &mut state, f, true)?;
    }
    Ok(state)
}
