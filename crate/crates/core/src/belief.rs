//! Persistent latent state: gated write, PDE evolution and interpolated read.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bio::{hebbian_update, lateral_inhibition, synaptic_fatigue, BioConfig, FatigueState, HebbianMap};
use crate::dynamics::{integrate_layer, IntegrationConfig, LayerParams};
use crate::field::{bilinear_resize, FieldGrid};
use crate::matrix::{channel_matmul, Matrix};
use crate::scalar::{exp_clamped, sigmoid, Scalar};

pub const GAMMA_MIN: f64 = 0.5;
pub const GAMMA_MAX: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefParams<T> {
    pub write_gate: Matrix<T>,
    pub write_val: Matrix<T>,
    pub gamma_logit: T,
    pub evolve: LayerParams<T>,
    /// Integration steps per evolve (not learned).
    pub n_evolve: usize,
}

impl<T: Scalar> BeliefParams<T> {
    /// Decay 0.95, three evolve steps.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            write_gate: Matrix::uniform_fan_in(d, d, 1.0, rng),
            write_val: Matrix::uniform_fan_in(d, d, 1.0, rng),
            gamma_logit: T::lit(0.95f64.ln()),
            evolve: LayerParams::init(d, rng),
            n_evolve: 3,
        }
    }

    pub fn gamma(&self) -> T {
        exp_clamped(self.gamma_logit, T::lit(GAMMA_MIN), T::lit(GAMMA_MAX)).0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefState<T> {
    pub s: FieldGrid<T>,
    pub fatigue: FatigueState<T>,
    pub hebbian: HebbianMap<T>,
}

impl<T: Scalar> BeliefState<T> {
    /// Empty belief, rested channels, empty Hebbian map.
    pub fn new(d: usize, height: usize, width: usize, bio: &BioConfig) -> Self {
        Self {
            s: FieldGrid::zeros(d, height, width),
            fatigue: FatigueState::new(d, bio),
            hebbian: HebbianMap::new(d, height, width, bio),
        }
    }
}

/// `s' = gamma s + sigmoid(W_g z) * tanh(W_v z)`, channel mixing per position.
pub fn write<T: Scalar>(state: &BeliefState<T>, z: &FieldGrid<T>, params: &BeliefParams<T>) -> BeliefState<T> {
    assert!(state.s.same_shape(z), "observation shape must match belief shape");
    let gate = channel_matmul(z, &params.write_gate, None);
    let val = channel_matmul(z, &params.write_val, None);
    let gamma = params.gamma();
    let inc = gate.zip_map(&val, |g, v| sigmoid(g) * v.tanh());
    let s = state.s.zip_map(&inc, |s, i| gamma * s + i);
    BeliefState { s, ..state.clone() }
}

/// Runs `n_evolve` integration steps on the belief, then refreshes the Hebbian map.
pub fn evolve<T: Scalar>(
    state: &BeliefState<T>,
    params: &BeliefParams<T>,
    integration: &IntegrationConfig,
    bio: &BioConfig,
) -> BeliefState<T> {
    if params.n_evolve == 0 {
        return state.clone();
    }
    let cfg = IntegrationConfig { max_steps: params.n_evolve, ..*integration };
    let heb = bio.hebbian.then_some(&state.hebbian);
    let (mut s, _) = integrate_layer(&state.s, &params.evolve, &cfg, heb);
    let hebbian = if bio.hebbian { hebbian_update(&state.hebbian, &s) } else { state.hebbian.clone() };
    let mut fatigue = state.fatigue.clone();
    if bio.apply_post_evolve {
        if bio.inhibition {
            s = lateral_inhibition(&s, T::lit(bio.inhibition_beta), T::lit(bio.inhibition_min_factor));
        }
        if bio.fatigue {
            let (out, f) = synaptic_fatigue(&s, &fatigue);
            s = out;
            fatigue = f;
        }
    }
    BeliefState { s, fatigue, hebbian }
}

/// Belief resampled to `out_h x out_w`.
pub fn read<T: Scalar>(state: &BeliefState<T>, out_h: usize, out_w: usize) -> FieldGrid<T> {
    bilinear_resize(&state.s, out_h, out_w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    ZeroChannels,
    GaussianNoise,
    ChannelMask,
    SpatialShuffle,
}

impl CorruptionMode {
    pub const ALL: [CorruptionMode; 4] = [
        CorruptionMode::ZeroChannels,
        CorruptionMode::GaussianNoise,
        CorruptionMode::ChannelMask,
        CorruptionMode::SpatialShuffle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionMode::ZeroChannels => "zero_channels",
            CorruptionMode::GaussianNoise => "gaussian_noise",
            CorruptionMode::ChannelMask => "channel_mask",
            CorruptionMode::SpatialShuffle => "spatial_shuffle",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

/// `ceil(ratio * n)` without picking up an extra element from rounding noise.
fn fraction_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Damages the belief field. The affected subset for a given seed is a prefix
/// of one seeded ordering, so higher ratios corrupt a superset of lower ones.
pub fn corrupt<T: Scalar>(
    state: &BeliefState<T>,
    mode: CorruptionMode,
    ratio: f64,
    intensity: f64,
    rng_seed: u64,
) -> BeliefState<T> {
    assert!((0.0..=1.0).contains(&ratio), "ratio must lie in [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut s = state.s.clone();
    let d = s.channels();
    let p = s.plane();
    match mode {
        CorruptionMode::ZeroChannels | CorruptionMode::ChannelMask => {
            let mut order: Vec<usize> = (0..d).collect();
            order.shuffle(&mut rng);
            for &c in &order[..fraction_count(ratio, d)] {
                s.channel_mut(c).iter_mut().for_each(|v| *v = T::zero());
            }
        }
        CorruptionMode::GaussianNoise => {
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.shuffle(&mut rng);
            let normal = Normal::new(0.0, intensity.abs()).expect("finite intensity");
            let values = s.values_mut();
            for &i in &order[..fraction_count(ratio, values.len())] {
                values[i] += T::lit(normal.sample(&mut rng));
            }
        }
        CorruptionMode::SpatialShuffle => {
            let mut order: Vec<usize> = (0..d).collect();
            order.shuffle(&mut rng);
            for &c in &order[..fraction_count(ratio, d)] {
                let mut perm: Vec<usize> = (0..p).collect();
                perm.shuffle(&mut rng);
                let src = s.channel(c).to_vec();
                for (dst, &j) in s.channel_mut(c).iter_mut().zip(&perm) {
                    *dst = src[j];
                }
            }
        }
    }
    BeliefState { s, ..state.clone() }
}

/// `||a - b|| / ||b||`, zero when both vanish.
pub fn relative_distance<T: Scalar>(a: &FieldGrid<T>, b: &FieldGrid<T>) -> f64 {
    let num: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (*x - *y).to_f64_lossy().powi(2)).sum();
    let den: f64 = b.values().iter().map(|y| y.to_f64_lossy().powi(2)).sum();
    if num == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(d: usize) -> (BeliefState<f64>, BeliefParams<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let bio = BioConfig::default();
        let mut st = BeliefState::new(d, 4, 4, &bio);
        st.s = FieldGrid::from_fn(d, 4, 4, |_, _, _| rng.random_range(-1.0..1.0));
        (st, BeliefParams::init(d, &mut rng))
    }

    #[test]
    fn gamma_clamps() {
        let (_, mut p) = setup(2);
        assert!((p.gamma() - 0.95).abs() < 1e-12);
        p.gamma_logit = 0.0;
        assert_eq!(p.gamma(), 0.99);
        p.gamma_logit = -3.0;
        assert_eq!(p.gamma(), 0.5);
    }

    #[test]
    fn zero_observation_decays_by_gamma() {
        let (st, p) = setup(3);
        let z = FieldGrid::zeros(3, 4, 4);
        let mut cur = st.clone();
        for k in 1..=4 {
            cur = write(&cur, &z, &p);
            let expected = (crate::field::energy(&st.s)).sqrt() * p.gamma().powi(k);
            assert!((crate::field::energy(&cur.s).sqrt() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn write_matches_per_position_oracle() {
        let (st, p) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = FieldGrid::from_fn(4, 4, 4, |_, _, _| rng.random_range(-2.0..2.0));
        let out = write(&st, &z, &p);
        for y in 0..4 {
            for x in 0..4 {
                let col: Vec<f64> = (0..4).map(|c| z.get(c, y, x)).collect();
                for c in 0..4 {
                    let g: f64 = (0..4).map(|i| p.write_gate.get(c, i) * col[i]).sum();
                    let v: f64 = (0..4).map(|i| p.write_val.get(c, i) * col[i]).sum();
                    let e = p.gamma() * st.s.get(c, y, x) + 1.0 / (1.0 + (-g).exp()) * v.tanh();
                    assert!((out.s.get(c, y, x) - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn evolve_zero_steps_is_identity_and_deterministic() {
        let (st, mut p) = setup(2);
        let bio = BioConfig::default();
        let integ = IntegrationConfig::default();
        assert_eq!(evolve(&st, &p, &integ, &bio), evolve(&st, &p, &integ, &bio));
        p.n_evolve = 0;
        assert_eq!(evolve(&st, &p, &integ, &bio), st);
    }

    #[test]
    fn evolve_fixed_point_before_normalization() {
        let bio = BioConfig::default();
        let mut st = BeliefState::<f64>::new(2, 4, 4, &bio);
        st.s = FieldGrid::filled(2, 4, 4, 0.3);
        let p = BeliefParams {
            write_gate: Matrix::zeros(2, 2),
            write_val: Matrix::zeros(2, 2),
            gamma_logit: 0.0,
            evolve: LayerParams::zero_dynamics(2),
            n_evolve: 1,
        };
        let out = evolve(&st, &p, &IntegrationConfig::default(), &bio);
        assert_eq!(out.s, st.s);
    }

    #[test]
    fn read_resizes() {
        let (st, _) = setup(2);
        assert_eq!(read(&st, 4, 4), st.s);
        assert_eq!(read(&st, 8, 8), bilinear_resize(&st.s, 8, 8));
    }

    #[test]
    fn corruption_edges() {
        let (st, _) = setup(6);
        for mode in CorruptionMode::ALL {
            assert_eq!(corrupt(&st, mode, 0.0, 1.0, 3).s, st.s);
        }
        let z = corrupt(&st, CorruptionMode::ZeroChannels, 1.0, 0.0, 3);
        assert!(z.s.values().iter().all(|&v| v == 0.0));
        let sh = corrupt(&st, CorruptionMode::SpatialShuffle, 1.0, 0.0, 3);
        for c in 0..6 {
            let mut a = st.s.channel(c).to_vec();
            let mut b = sh.s.channel(c).to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
        assert_eq!(
            corrupt(&st, CorruptionMode::GaussianNoise, 0.5, 0.3, 9),
            corrupt(&st, CorruptionMode::GaussianNoise, 0.5, 0.3, 9)
        );
    }

    #[test]
    fn corruption_subsets_are_nested() {
        let (st, _) = setup(10);
        let lo = corrupt(&st, CorruptionMode::ZeroChannels, 0.3, 0.0, 4);
        let hi = corrupt(&st, CorruptionMode::ZeroChannels, 0.6, 0.0, 4);
        for c in 0..10 {
            if lo.s.channel(c).iter().all(|&v| v == 0.0) {
                assert!(hi.s.channel(c).iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(fraction_count(0.3, 10), 3);
    }
}
