//! Truncated-BPTT training over windows of synthetic disc videos.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::belief::BeliefState;
use crate::datagen::{generate_sequence, SceneConfig};
use crate::error::{FluidError, Result};
use crate::field::FieldGrid;
use crate::model::{bind, initial_state, window_graph, Buffers, ModelConfig, ModelParams};
use crate::training::loss::{LossTerms, LossWeights};
use crate::training::optim::{lr_at, optimizer_step, OptimConfig, OptimState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of windows, one optimizer step each.
    pub steps: usize,
    pub batch: usize,
    /// Transitions per window.
    pub window: usize,
    pub frame_size: usize,
    pub n_objects: usize,
    pub object_radius: f64,
    pub speed: f64,
    /// Windows per generated sequence before a slot starts a new one.
    pub sequence_windows: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 4,
            window: 4,
            frame_size: 16,
            n_objects: 2,
            object_radius: 2.0,
            speed: 1.0,
            sequence_windows: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.window == 0 || self.sequence_windows == 0 {
            return Err(FluidError::Config("batch, window and sequence_windows must be positive".into()));
        }
        self.scene(0).validate()
    }

    /// Scene for the given sequence seed.
    pub fn scene(&self, seed: u64) -> SceneConfig {
        SceneConfig {
            width: self.frame_size,
            height: self.frame_size,
            n_objects: self.n_objects,
            object_radius: self.object_radius,
            speed: self.speed,
            n_frames: self.sequence_windows * self.window + 1,
            seed,
        }
    }
}

/// One batch element: `T + 1` frames and the belief state entering the window.
#[derive(Clone, Debug)]
pub struct WindowSample {
    pub frames: Vec<FieldGrid<f64>>,
    pub state: BeliefState<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    /// Optimizer step after this window.
    pub step: u64,
    /// Batch mean of the window losses.
    pub terms: LossTerms,
    pub grad_norm: f64,
    pub lr: f64,
}

struct SampleResult {
    terms: LossTerms,
    grads: Vec<f64>,
    state: BeliefState<f64>,
}

fn run_sample(params: &ModelParams<f64>, cfg: &ModelConfig, weights: &LossWeights, s: &WindowSample) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params);
    let mut buffers = Buffers::record();
    let g = window_graph(&mut tape, &vars, &s.frames, &s.state, cfg, weights, &mut buffers)?;
    let grads = tape.param_grads(g.loss)?;
    Ok(SampleResult { terms: g.terms, grads, state: g.state })
}

/// One optimizer step on a batch of windows. Returns the metrics and the
/// detached belief state after each window, in batch order.
pub fn train_window(
    params: &mut ModelParams<f64>,
    opt: &mut OptimState<f64>,
    cfg: &ModelConfig,
    optim: &OptimConfig,
    weights: &LossWeights,
    batch: &[WindowSample],
) -> Result<(WindowMetrics, Vec<BeliefState<f64>>)> {
    if batch.is_empty() {
        return Err(FluidError::Config("empty batch".into()));
    }
    let snapshot: &ModelParams<f64> = params;
    let results: Vec<Result<SampleResult>> = batch.par_iter().map(|s| run_sample(snapshot, cfg, weights, s)).collect();
    let inv = 1.0 / batch.len() as f64;
    let mut grads = vec![0.0; params.num_params()];
    let mut terms = LossTerms::default();
    let mut states = Vec::with_capacity(batch.len());
    for r in results {
        let r = r?;
        for (g, v) in grads.iter_mut().zip(&r.grads) {
            *g += v * inv;
        }
        terms.accumulate(&r.terms, inv);
        states.push(r.state);
    }
    let mut flat = params.flatten();
    let grad_norm = optimizer_step(&mut flat, &grads, opt, optim);
    params.unflatten(&flat)?;
    if let Some(index) = flat.iter().position(|v| !v.is_finite()) {
        return Err(FluidError::NonFinite { index });
    }
    Ok((WindowMetrics { step: opt.step, terms, grad_norm, lr: lr_at(opt.step, optim) }, states))
}

struct Slot {
    frames: Vec<FieldGrid<f64>>,
    cursor: usize,
    episode: u64,
    state: BeliefState<f64>,
}

/// Owns parameters, optimizer state and one video stream per batch slot.
pub struct Trainer {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub params: ModelParams<f64>,
    pub opt: OptimState<f64>,
    pub history: Vec<WindowMetrics>,
    slots: Vec<Slot>,
}

fn sequence_seed(seed: u64, slot: usize, episode: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((slot as u64) << 40) ^ episode
}

impl Trainer {
    pub fn new(model: ModelConfig, optim: OptimConfig, weights: LossWeights, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        optim.validate()?;
        weights.validate()?;
        train.validate()?;
        if train.frame_size % model.patch_size != 0 {
            return Err(FluidError::Config("frame size must be a multiple of the patch size".into()));
        }
        let params = ModelParams::init(&model, train.seed);
        let opt = OptimState::new(params.num_params());
        let mut t = Self { model, optim, weights, train, params, opt, history: Vec::new(), slots: Vec::new() };
        for i in 0..t.train.batch {
            let slot = t.new_slot(i, 0)?;
            t.slots.push(slot);
        }
        Ok(t)
    }

    fn new_slot(&self, index: usize, episode: u64) -> Result<Slot> {
        let frames = generate_sequence(&self.train.scene(sequence_seed(self.train.seed, index, episode)))?;
        let state = initial_state(&self.model, self.train.frame_size, self.train.frame_size);
        Ok(Slot { frames, cursor: 0, episode, state })
    }

    fn next_batch(&mut self) -> Result<Vec<WindowSample>> {
        let t = self.train.window;
        for i in 0..self.slots.len() {
            if self.slots[i].cursor + t >= self.slots[i].frames.len() {
                let episode = self.slots[i].episode + 1;
                self.slots[i] = self.new_slot(i, episode)?;
            }
        }
        Ok(self
            .slots
            .iter()
            .map(|s| WindowSample { frames: s.frames[s.cursor..=s.cursor + t].to_vec(), state: s.state.clone() })
            .collect())
    }

    /// Trains on the next window of every slot.
    pub fn step(&mut self) -> Result<WindowMetrics> {
        let batch = self.next_batch()?;
        let (metrics, states) = train_window(&mut self.params, &mut self.opt, &self.model, &self.optim, &self.weights, &batch)?;
        for (slot, state) in self.slots.iter_mut().zip(states) {
            slot.state = state;
            slot.cursor += self.train.window;
        }
        self.history.push(metrics);
        Ok(metrics)
    }

    pub fn checkpoint(&self) -> crate::training::checkpoint::Checkpoint {
        crate::training::checkpoint::Checkpoint {
            model: self.model.clone(),
            optim: self.optim.clone(),
            train: Some(self.train.clone()),
            params: self.params.clone(),
            state: self.opt.clone(),
        }
    }

    /// Runs the configured number of windows, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&WindowMetrics)) -> Result<()> {
        while self.history.len() < self.train.steps {
            let m = self.step()?;
            on_step(&m);
        }
        Ok(())
    }
}
