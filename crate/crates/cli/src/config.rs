//! Run configuration: one JSON document with a block per experiment.

use std::path::Path;

use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use fluidlab::analysis::phase::{InitKind, PhaseConfig};
use fluidlab::analysis::resilience::ResilienceConfig;
use fluidlab::analysis::symmetry::SymmetryConfig;
use fluidlab::belief::BeliefParams;
use fluidlab::bio::BioConfig;
use fluidlab::datagen::SceneConfig;
use fluidlab::dynamics::{IntegrationConfig, LayerParams};
use fluidlab::model::ModelConfig;
use fluidlab::training::loss::LossWeights;
use fluidlab::training::optim::OptimConfig;
use fluidlab::training::trainer::TrainConfig;

use crate::output::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-size model and optimizer settings.
    #[default]
    Full,
    /// d = 16, 16x16 frames, 1000 windows.
    Desk,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResilienceDynamics {
    /// Diffusion-only belief evolution without normalization or bio terms.
    #[default]
    Diffusion,
    /// Seeded random belief parameters with the default integration.
    Random,
    /// Belief dynamics of a checkpoint (set by `--checkpoint`).
    Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutBlock {
    pub horizon: usize,
    pub n_sequences: usize,
    /// Sequences whose predicted frames are written as PGM.
    pub save_frames: usize,
}

impl Default for RolloutBlock {
    fn default() -> Self {
        Self { horizon: 20, n_sequences: 50, save_frames: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryBlock {
    pub fit_steps: usize,
}

impl Default for RecoveryBlock {
    fn default() -> Self {
        Self { fit_steps: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyBlock {
    pub init: InitKind,
    pub normalize: bool,
    pub steps: usize,
    pub channels: usize,
    pub size: usize,
    pub reaction_gain: f64,
    pub dt: f64,
}

impl Default for EnergyBlock {
    fn default() -> Self {
        Self { init: InitKind::Random, normalize: true, steps: 200, channels: 16, size: 16, reaction_gain: 1.0, dt: 0.35 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingBlock {
    pub tokens: Vec<u64>,
}

impl Default for ScalingBlock {
    fn default() -> Self {
        Self { tokens: vec![256, 1024, 4096, 16384] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckBlock {
    /// Model under test; independent of the trained model.
    pub model: ModelConfig,
    /// Minimum number of parameter indices.
    pub samples: usize,
    /// Indices drawn from every tensor before topping up.
    pub per_tensor: usize,
    pub window: usize,
    pub warmup_frames: usize,
    pub frame_size: usize,
    /// Central-difference step.
    pub step: f64,
    pub loss: LossWeights,
}

impl Default for GradcheckBlock {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            samples: 120,
            per_tensor: 2,
            window: 2,
            warmup_frames: 2,
            frame_size: 8,
            step: 1e-5,
            loss: LossWeights { w_edge: 0.3, w_freq: 0.2, ..LossWeights::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataBlock {
    pub n_sequences: usize,
}

impl Default for GenDataBlock {
    fn default() -> Self {
        Self { n_sequences: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub rollout: RolloutBlock,
    pub recovery: RecoveryBlock,
    pub phase: PhaseConfig,
    pub energy: EnergyBlock,
    pub symmetry: SymmetryConfig,
    pub resilience: ResilienceConfig,
    pub resilience_dynamics: ResilienceDynamics,
    pub scaling: ScalingBlock,
    pub gradcheck: GradcheckBlock,
    pub gen_data: GenDataBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, optim, train) = match preset {
            Preset::Full => (
                ModelConfig::default(),
                OptimConfig::default(),
                TrainConfig { steps: 8000, batch: 16, frame_size: 64, object_radius: 6.0, speed: 3.0, ..TrainConfig::default() },
            ),
            Preset::Desk => (ModelConfig::desk(), OptimConfig::desk(), TrainConfig::default()),
        };
        Self {
            preset,
            seed: 0,
            model,
            optim,
            loss: LossWeights::default(),
            train,
            scene: SceneConfig::default(),
            rollout: RolloutBlock::default(),
            recovery: RecoveryBlock::default(),
            phase: PhaseConfig::default(),
            energy: EnergyBlock::default(),
            symmetry: SymmetryConfig::default(),
            resilience: ResilienceConfig::default(),
            resilience_dynamics: ResilienceDynamics::default(),
            scaling: ScalingBlock::default(),
            gradcheck: GradcheckBlock::default(),
            gen_data: GenDataBlock::default(),
        }
    }

    /// Layers the file over the preset named by `preset`, else by the
    /// file's own `preset` key, else the full preset.
    pub fn from_file(path: &Path, preset: Option<Preset>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text, preset)
    }

    pub fn from_json(text: &str, preset: Option<Preset>) -> Result<Self, CliError> {
        let user: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        let file_preset = match user.get("preset") {
            Some(v) => Some(serde_json::from_value::<Preset>(v.clone()).map_err(|e| CliError::config(format!("preset: {e}")))?),
            None => None,
        };
        let chosen = preset.or(file_preset).unwrap_or_default();
        let mut base = serde_json::to_value(Self::preset(chosen)).expect("config serializes");
        merge(&mut base, user);
        base["preset"] = serde_json::to_value(chosen).expect("preset serializes");
        let cfg: Self = serde_path_to_error::deserialize(base).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Objects merge recursively; everything else in `over` replaces `base`.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let p = e.path().to_string();
        CliError::config(format!("{p}: {}", e.into_inner()))
    })
}

/// Belief dynamics for sweeps run without a checkpoint.
pub fn sweep_dynamics(cfg: &RunConfig) -> (BeliefParams<f64>, IntegrationConfig, BioConfig) {
    let d = cfg.resilience.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = BeliefParams::init(d, &mut rng);
    match cfg.resilience_dynamics {
        ResilienceDynamics::Random | ResilienceDynamics::Checkpoint => (params, IntegrationConfig::default(), BioConfig::default()),
        ResilienceDynamics::Diffusion => {
            params.evolve = LayerParams::pure_diffusion(d, [0.25; 3], 0.1);
            (params, IntegrationConfig { normalize: false, ..IntegrationConfig::default() }, BioConfig::disabled())
        }
    }
}
