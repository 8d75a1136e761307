//! One reaction-diffusion layer: the Euler update with multi-scale diffusion,
//! a position-wise reaction MLP, global and local memories, periodic RMS
//! normalization and probe-based early stopping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bio::{effective_diffusion, HebbianMap};
use crate::field::{
    avg_pool, bilinear_resize, broadcast, energy, laplacian, rms_norm, spatial_mean, ChannelVector, FieldGrid,
};
use crate::matrix::{channel_matmul, Matrix};
use crate::scalar::{exp_clamped, gelu, sigmoid, softplus, softplus_inv, Scalar};

/// Stencil dilations of the three diffusion scales.
pub const DILATIONS: [usize; 3] = [1, 4, 16];
pub const DT_MIN: f64 = 0.005;
pub const DT_MAX: f64 = 0.35;
/// Side length of the pooled local-memory grid.
pub const LOCAL_MEMORY_RES: usize = 4;
pub const RMS_EPS: f64 = 1e-6;

/// Learnable quantities of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    /// `DILATIONS.len() * d` logits, scale-major.
    pub diffusion_logits: Vec<T>,
    pub reaction_w1: Matrix<T>,
    pub reaction_b1: Vec<T>,
    pub reaction_w2: Matrix<T>,
    pub reaction_b2: Vec<T>,
    pub gmem_gate: Matrix<T>,
    pub gmem_val: Matrix<T>,
    pub lmem_gate: Matrix<T>,
    pub lmem_val: Matrix<T>,
    pub alpha_g_logit: T,
    pub alpha_l_logit: T,
    pub dt_logit: T,
    pub norm_gains: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    /// Trained-operating-point initialization: D = 0.25, dt = 0.1, memory
    /// gains 0.1, weights uniform in +-1/sqrt(fan_in), zero biases, unit gains.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self::init_with_gain(d, 1.0, rng)
    }

    /// As [`LayerParams::init`] with reaction weights scaled by `reaction_gain`.
    pub fn init_with_gain<R: Rng + ?Sized>(d: usize, reaction_gain: f64, rng: &mut R) -> Self {
        let w1 = Matrix::uniform_fan_in(2 * d, d, reaction_gain, rng);
        let w2 = Matrix::uniform_fan_in(d, 2 * d, reaction_gain, rng);
        let gmem_gate = Matrix::uniform_fan_in(d, d, 1.0, rng);
        let gmem_val = Matrix::uniform_fan_in(d, d, 1.0, rng);
        let lmem_gate = Matrix::uniform_fan_in(d, d, 1.0, rng);
        let lmem_val = Matrix::uniform_fan_in(d, d, 1.0, rng);
        Self {
            diffusion_logits: vec![softplus_inv(T::lit(0.25)); DILATIONS.len() * d],
            reaction_w1: w1,
            reaction_b1: vec![T::zero(); 2 * d],
            reaction_w2: w2,
            reaction_b2: vec![T::zero(); d],
            gmem_gate,
            gmem_val,
            lmem_gate,
            lmem_val,
            alpha_g_logit: softplus_inv(T::lit(0.1)),
            alpha_l_logit: softplus_inv(T::lit(0.1)),
            dt_logit: T::lit(0.1f64.ln()),
            norm_gains: vec![T::one(); d],
        }
    }

    /// No reaction, no memory input, D = 0.25 at every scale, dt = 0.1.
    pub fn zero_dynamics(d: usize) -> Self {
        Self {
            diffusion_logits: vec![softplus_inv(T::lit(0.25)); DILATIONS.len() * d],
            reaction_w1: Matrix::zeros(2 * d, d),
            reaction_b1: vec![T::zero(); 2 * d],
            reaction_w2: Matrix::zeros(d, 2 * d),
            reaction_b2: vec![T::zero(); d],
            gmem_gate: Matrix::zeros(d, d),
            gmem_val: Matrix::zeros(d, d),
            lmem_gate: Matrix::zeros(d, d),
            lmem_val: Matrix::zeros(d, d),
            alpha_g_logit: softplus_inv(T::lit(0.1)),
            alpha_l_logit: softplus_inv(T::lit(0.1)),
            dt_logit: T::lit(0.1f64.ln()),
            norm_gains: vec![T::one(); d],
        }
    }

    /// Pure diffusion with coefficient `per_scale[k]` at dilation `DILATIONS[k]`
    /// for every channel. A zero coefficient switches that scale off exactly.
    pub fn pure_diffusion(d: usize, per_scale: [f64; 3], dt: f64) -> Self {
        let mut p = Self::zero_dynamics(d);
        p.set_diffusion(per_scale);
        p.set_dt(dt);
        p
    }

    pub fn dim(&self) -> usize {
        self.norm_gains.len()
    }

    pub fn set_diffusion(&mut self, per_scale: [f64; 3]) {
        let d = self.dim();
        for (k, &dk) in per_scale.iter().enumerate() {
            let logit = if dk > 0.0 { softplus_inv(T::lit(dk)) } else { T::neg_infinity() };
            self.diffusion_logits[k * d..(k + 1) * d].iter_mut().for_each(|v| *v = logit);
        }
    }

    pub fn set_dt(&mut self, dt: f64) {
        self.dt_logit = T::lit(dt.ln());
    }

    /// Effective per-channel coefficients of scale `k`.
    pub fn diffusion(&self, k: usize) -> Vec<T> {
        let d = self.dim();
        self.diffusion_logits[k * d..(k + 1) * d].iter().map(|&l| softplus(l)).collect()
    }

    pub fn dt(&self) -> T {
        exp_clamped(self.dt_logit, T::lit(DT_MIN), T::lit(DT_MAX)).0
    }

    pub fn alpha_g(&self) -> T {
        softplus(self.alpha_g_logit)
    }

    pub fn alpha_l(&self) -> T {
        softplus(self.alpha_l_logit)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopCriterion {
    pub epsilon: f64,
    pub patience: usize,
    pub probe_h: usize,
    pub probe_w: usize,
    pub eps_prime: f64,
}

impl Default for StopCriterion {
    fn default() -> Self {
        Self { epsilon: 0.08, patience: 2, probe_h: 8, probe_w: 8, eps_prime: 1e-6 }
    }
}

/// How a layer is integrated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrationConfig {
    pub max_steps: usize,
    pub stop: StopCriterion,
    /// Early exit on a converged probe; off during training.
    pub adaptive: bool,
    /// RMS normalization after every second step.
    pub normalize: bool,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self { max_steps: 6, stop: StopCriterion::default(), adaptive: false, normalize: true }
    }
}

impl IntegrationConfig {
    pub fn steps(max_steps: usize) -> Self {
        Self { max_steps, ..Self::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub steps_used: usize,
    /// Mean absolute change of the state at each step.
    pub turbulence_per_step: Vec<f64>,
    pub energy_per_step: Vec<f64>,
}

/// Position-wise MLP `W2 gelu(W1 u + b1) + b2`.
pub fn reaction<T: Scalar>(field: &FieldGrid<T>, params: &LayerParams<T>) -> FieldGrid<T> {
    let hidden = channel_matmul(field, &params.reaction_w1, Some(&params.reaction_b1)).map(gelu);
    channel_matmul(&hidden, &params.reaction_w2, Some(&params.reaction_b2))
}

fn gated_increment<T: Scalar>(input: &[T], gate: &Matrix<T>, val: &Matrix<T>) -> Vec<T> {
    gate.matvec(input).into_iter().zip(val.matvec(input)).map(|(g, v)| sigmoid(g) * v.tanh()).collect()
}

/// `h_g + sigmoid(W_gate u_bar) * tanh(W_val u_bar)`.
pub fn update_global_memory<T: Scalar>(
    h_g: &ChannelVector<T>,
    u_bar: &ChannelVector<T>,
    params: &LayerParams<T>,
) -> ChannelVector<T> {
    let inc = gated_increment(&u_bar.values, &params.gmem_gate, &params.gmem_val);
    ChannelVector::new(h_g.values.iter().zip(inc).map(|(&h, i)| h + i).collect())
}

/// Gated recurrence of the global memory applied per cell of the 4x4-pooled field.
pub fn update_local_memory<T: Scalar>(h_l: &FieldGrid<T>, u: &FieldGrid<T>, params: &LayerParams<T>) -> FieldGrid<T> {
    let pooled = avg_pool(u, h_l.height(), h_l.width());
    let gate = channel_matmul(&pooled, &params.lmem_gate, None);
    let val = channel_matmul(&pooled, &params.lmem_val, None);
    let inc = gate.zip_map(&val, |g, v| sigmoid(g) * v.tanh());
    h_l.add(&inc)
}

/// Sum over scales of `D_k * laplacian(u, dil_k)`, optionally modulated per position.
pub fn diffusion_term<T: Scalar>(u: &FieldGrid<T>, params: &LayerParams<T>, multiplier: Option<&FieldGrid<T>>) -> FieldGrid<T> {
    let (d, h, w) = u.shape();
    let mut acc = FieldGrid::zeros(d, h, w);
    for (k, &dil) in DILATIONS.iter().enumerate() {
        let coeffs = params.diffusion(k);
        if coeffs.iter().all(|&c| c == T::zero()) {
            continue;
        }
        acc.add_assign(&laplacian(u, dil).scale_channels(&coeffs));
    }
    match multiplier {
        Some(m) => acc.mul(m),
        None => acc,
    }
}

/// One explicit Euler step given already-updated memories.
pub fn pde_step<T: Scalar>(
    u: &FieldGrid<T>,
    params: &LayerParams<T>,
    h_g: &ChannelVector<T>,
    h_l: &FieldGrid<T>,
    hebbian: Option<&HebbianMap<T>>,
) -> FieldGrid<T> {
    let (_, h, w) = u.shape();
    let multiplier = hebbian.map(effective_diffusion);
    let mut rhs = diffusion_term(u, params, multiplier.as_ref());
    rhs.add_assign(&reaction(u, params));
    rhs.axpy(params.alpha_g(), &broadcast(h_g, h, w));
    rhs.axpy(params.alpha_l(), &bilinear_resize(h_l, h, w));
    let mut next = u.clone();
    next.axpy(params.dt(), &rhs);
    next
}

/// Relative L1 change of the probe is below `epsilon`.
pub fn should_stop<T: Scalar>(probe_prev: &FieldGrid<T>, probe_curr: &FieldGrid<T>, crit: &StopCriterion) -> bool {
    assert!(probe_prev.same_shape(probe_curr));
    let diff = probe_curr.sub(probe_prev).l1_norm();
    let rel = diff / (probe_prev.l1_norm() + T::lit(crit.eps_prime));
    rel < T::lit(crit.epsilon)
}

/// Integrates one layer from `u0`. Memories start at zero on every call.
pub fn integrate_layer<T: Scalar>(
    u0: &FieldGrid<T>,
    params: &LayerParams<T>,
    cfg: &IntegrationConfig,
    hebbian: Option<&HebbianMap<T>>,
) -> (FieldGrid<T>, LayerDiagnostics) {
    let d = u0.channels();
    assert_eq!(d, params.dim(), "field channels must equal layer width");
    let mut h_g = ChannelVector::zeros(d);
    let mut h_l = FieldGrid::zeros(d, LOCAL_MEMORY_RES, LOCAL_MEMORY_RES);
    let gains = ChannelVector::new(params.norm_gains.clone());
    let eps = T::lit(RMS_EPS);
    let mut u = u0.clone();
    let mut diag = LayerDiagnostics { steps_used: cfg.max_steps, ..Default::default() };
    let mut probe_prev = cfg.adaptive.then(|| avg_pool(u0, cfg.stop.probe_h, cfg.stop.probe_w));
    let mut streak = 0usize;
    let inv_n = 1.0 / u0.len() as f64;

    for tau in 1..=cfg.max_steps {
        h_g = update_global_memory(&h_g, &spatial_mean(&u), params);
        h_l = update_local_memory(&h_l, &u, params);
        let mut next = pde_step(&u, params, &h_g, &h_l, hebbian);
        if cfg.normalize && tau % 2 == 0 {
            next = rms_norm(&next, &gains, eps);
        }
        let turbulence: f64 =
            next.values().iter().zip(u.values()).map(|(a, b)| (*a - *b).abs().to_f64_lossy()).sum::<f64>() * inv_n;
        diag.turbulence_per_step.push(turbulence);
        diag.energy_per_step.push(energy(&next).to_f64_lossy());
        u = next;

        if let Some(prev) = probe_prev.as_mut() {
            let probe = avg_pool(&u, cfg.stop.probe_h, cfg.stop.probe_w);
            if should_stop(prev, &probe, &cfg.stop) {
                streak += 1;
            } else {
                streak = 0;
            }
            *prev = probe;
            if streak >= cfg.stop.patience {
                diag.steps_used = tau;
                break;
            }
        }
    }
    (u, diag)
}
