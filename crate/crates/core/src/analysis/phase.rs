//! Free-running layer trajectories: phase diagram, Lyapunov exponents and energy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    diffusion_term, pde_step, update_global_memory, update_local_memory, IntegrationConfig, LayerParams,
    LOCAL_MEMORY_RES, RMS_EPS,
};
use crate::error::{FluidError, Result};
use crate::field::{energy, rms_norm, spatial_mean, ChannelVector, FieldGrid};

/// Growth rates within this band of zero are critical.
pub const PHASE_THRESHOLD: f64 = 1e-3;
pub const LYAPUNOV_TRANSIENT: usize = 10;

/// Steps a layer indefinitely with the same update as `integrate_layer`:
/// memories updated before every step, RMS normalization on even steps.
#[derive(Clone, Debug)]
pub struct LayerRunner<'a> {
    params: &'a LayerParams<f64>,
    normalize: bool,
    h_g: ChannelVector<f64>,
    h_l: FieldGrid<f64>,
    gains: ChannelVector<f64>,
    pub u: FieldGrid<f64>,
    pub tau: usize,
}

impl<'a> LayerRunner<'a> {
    pub fn new(u0: FieldGrid<f64>, params: &'a LayerParams<f64>, normalize: bool) -> Self {
        let d = u0.channels();
        assert_eq!(d, params.dim(), "field channels must equal layer width");
        Self {
            params,
            normalize,
            h_g: ChannelVector::zeros(d),
            h_l: FieldGrid::zeros(d, LOCAL_MEMORY_RES, LOCAL_MEMORY_RES),
            gains: ChannelVector::new(params.norm_gains.clone()),
            u: u0,
            tau: 0,
        }
    }

    pub fn step(&mut self) -> &FieldGrid<f64> {
        self.tau += 1;
        self.h_g = update_global_memory(&self.h_g, &spatial_mean(&self.u), self.params);
        self.h_l = update_local_memory(&self.h_l, &self.u, self.params);
        let mut next = pde_step(&self.u, self.params, &self.h_g, &self.h_l, None);
        if self.normalize && self.tau % 2 == 0 {
            next = rms_norm(&next, &self.gains, RMS_EPS);
        }
        self.u = next;
        &self.u
    }
}

/// `steps + 1` states starting with `u0`.
pub fn trajectory(u0: &FieldGrid<f64>, params: &LayerParams<f64>, steps: usize, normalize: bool) -> Vec<FieldGrid<f64>> {
    let mut runner = LayerRunner::new(u0.clone(), params, normalize);
    let mut out = vec![u0.clone()];
    for _ in 0..steps {
        out.push(runner.step().clone());
    }
    out
}

pub fn random_field(c: usize, h: usize, w: usize, seed: u64) -> FieldGrid<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FieldGrid::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Per-channel offset plus one long-wavelength cosine, all seeded.
pub fn smooth_field(c: usize, h: usize, w: usize, seed: u64) -> FieldGrid<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 5]> = (0..c)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(0.2..0.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    FieldGrid::from_fn(c, h, w, |ch, y, x| {
        let [offset, amp, ky, kx, phase] = waves[ch];
        let arg = std::f64::consts::PI * (ky * y as f64 / h as f64 + kx * x as f64 / w as f64) + phase;
        offset + amp * arg.cos()
    })
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Sub,
    Critical,
    Super,
}

impl Regime {
    pub fn classify(growth_rate: f64) -> Self {
        if growth_rate > PHASE_THRESHOLD {
            Regime::Super
        } else if growth_rate < -PHASE_THRESHOLD {
            Regime::Sub
        } else {
            Regime::Critical
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regime::Sub => "sub",
            Regime::Critical => "critical",
            Regime::Super => "super",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    #[serde(rename = "D")]
    pub d: f64,
    pub dt: f64,
    pub growth_rate: f64,
    pub regime: Regime,
}

/// Reaction used by the phase sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReactionModel {
    /// Seeded random position-wise MLP with weights scaled by `gain`.
    Mlp { gain: f64 },
    /// `R(u) = rate * u` with no memory terms.
    Linear { rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub d_values: Vec<f64>,
    pub dt_values: Vec<f64>,
    pub steps: usize,
    pub channels: usize,
    pub size: usize,
    pub seed: u64,
    pub reaction: ReactionModel,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            d_values: linspace(0.01, 1.0, 15),
            dt_values: linspace(0.02, 0.35, 15),
            steps: 50,
            channels: 8,
            size: 16,
            seed: 0,
            reaction: ReactionModel::Mlp { gain: 1.0 },
        }
    }
}

/// `ln(E_end / E_start) / steps` without normalization. A run whose energy
/// overflows is measured at the last finite step.
pub fn growth_rate(u0: &FieldGrid<f64>, d: f64, dt: f64, reaction: &ReactionModel, steps: usize, seed: u64) -> f64 {
    let e0 = energy(u0);
    let mut last = (0usize, e0);
    match *reaction {
        ReactionModel::Mlp { gain } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = LayerParams::init_with_gain(u0.channels(), gain, &mut rng);
            p.set_diffusion([d; 3]);
            p.set_dt(dt);
            let mut runner = LayerRunner::new(u0.clone(), &p, false);
            for t in 1..=steps {
                let e = energy(runner.step());
                if !e.is_finite() || e > 1e280 {
                    break;
                }
                last = (t, e);
            }
        }
        ReactionModel::Linear { rate } => {
            let p = LayerParams::<f64>::pure_diffusion(u0.channels(), [d; 3], dt);
            let dt = p.dt();
            let mut u = u0.clone();
            for t in 1..=steps {
                let mut rhs = diffusion_term(&u, &p, None);
                rhs.axpy(rate, &u);
                u.axpy(dt, &rhs);
                let e = energy(&u);
                if !e.is_finite() || e > 1e280 {
                    break;
                }
                last = (t, e);
            }
        }
    }
    if last.0 == 0 {
        return if steps == 0 { 0.0 } else { f64::INFINITY };
    }
    (last.1 / e0).ln() / last.0 as f64
}

/// Growth rate on every `(D, dt)` pair, D-major. All cells share the
/// reaction weights and initial field drawn from `cfg.seed`.
pub fn phase_sweep(cfg: &PhaseConfig) -> Result<Vec<PhasePoint>> {
    if cfg.d_values.iter().chain(&cfg.dt_values).any(|&v| !(v > 0.0)) {
        return Err(FluidError::Config("phase ranges must be positive".into()));
    }
    let u0 = random_field(cfg.channels, cfg.size, cfg.size, cfg.seed.wrapping_add(1));
    let cells: Vec<(f64, f64)> = cfg.d_values.iter().flat_map(|&d| cfg.dt_values.iter().map(move |&dt| (d, dt))).collect();
    Ok(cells
        .par_iter()
        .map(|&(d, dt)| {
            let g = growth_rate(&u0, d, dt, &cfg.reaction, cfg.steps, cfg.seed);
            PhasePoint { d, dt, growth_rate: g, regime: Regime::classify(g) }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub mean: f64,
    pub std: f64,
    /// `ln(d_t / delta0)` per map application after the transient.
    pub increments: Vec<f64>,
}

/// Benettin estimate for an arbitrary map: the perturbed copy is
/// renormalized to `delta0` after every application.
pub fn benettin(
    map: impl Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    steps: usize,
    delta0: f64,
    transient: usize,
    seed: u64,
) -> Result<LyapunovEstimate> {
    if steps <= transient {
        return Err(FluidError::Config(format!("need more than {transient} steps")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: Vec<f64> = x0.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = x0.to_vec();
    let mut y: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + delta0 * b / norm).collect();
    let mut increments = Vec::with_capacity(steps - transient);
    for t in 0..steps {
        x = map(&x);
        y = map(&y);
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if !dist.is_finite() || dist == 0.0 {
            return Err(FluidError::Config("perturbation collapsed or diverged".into()));
        }
        if t >= transient {
            increments.push((dist / delta0).ln());
        }
        let s = delta0 / dist;
        y = x.iter().zip(&y).map(|(a, b)| a + (b - a) * s).collect();
    }
    let n = increments.len() as f64;
    let mean = increments.iter().sum::<f64>() / n;
    let std = (increments.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(LyapunovEstimate { mean, std, increments })
}

/// Lyapunov exponent of one normalized double step of a layer on a
/// seeded 16x16 field, per map application.
pub fn lyapunov(params: &LayerParams<f64>, seed: u64, steps: usize, delta0: f64) -> Result<LyapunovEstimate> {
    let d = params.dim();
    let (h, w) = (16, 16);
    let u0 = random_field(d, h, w, seed);
    let cfg = IntegrationConfig { max_steps: 2, adaptive: false, normalize: true, ..Default::default() };
    let map = |x: &[f64]| {
        let u = FieldGrid::from_vec(d, h, w, x.to_vec()).expect("state shape");
        crate::dynamics::integrate_layer(&u, params, &cfg, None).0.into_values()
    };
    benettin(map, u0.values(), steps, delta0, LYAPUNOV_TRANSIENT, seed.wrapping_add(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Every entry 1.
    Uniform,
    /// Seeded uniform in [-1, 1].
    Random,
    /// Horizontal ramp from -1 to 1, identical across channels.
    Gradient,
}

impl InitKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "uniform" => Some(InitKind::Uniform),
            "random" => Some(InitKind::Random),
            "gradient" => Some(InitKind::Gradient),
            _ => None,
        }
    }
}

pub fn initial_field(kind: InitKind, c: usize, h: usize, w: usize, seed: u64) -> FieldGrid<f64> {
    match kind {
        InitKind::Uniform => FieldGrid::filled(c, h, w, 1.0),
        InitKind::Random => random_field(c, h, w, seed),
        InitKind::Gradient => {
            FieldGrid::from_fn(c, h, w, |_, _, x| if w > 1 { -1.0 + 2.0 * x as f64 / (w - 1) as f64 } else { 0.0 })
        }
    }
}

/// Energy of the initial field and after every step.
pub fn energy_experiment(init: &FieldGrid<f64>, params: &LayerParams<f64>, steps: usize, normalize: bool) -> Vec<f64> {
    let mut runner = LayerRunner::new(init.clone(), params, normalize);
    let mut out = vec![energy(init)];
    for _ in 0..steps {
        out.push(energy(runner.step()));
    }
    out
}
