//! Lateral inhibition, synaptic fatigue and Hebbian diffusion modulation.

use serde::{Deserialize, Serialize};

use crate::field::{box_smooth3, spatial_mean, ChannelVector, FieldGrid};
use crate::scalar::Scalar;

/// Guard added to the per-position channel maximum in lateral inhibition.
pub const INHIBITION_EPS: f64 = 1e-6;

/// Which mechanisms are active and their constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BioConfig {
    pub inhibition: bool,
    pub inhibition_beta: f64,
    pub inhibition_min_factor: f64,
    pub fatigue: bool,
    pub fatigue_kappa: f64,
    pub fatigue_rho: f64,
    pub fatigue_h_min: f64,
    pub hebbian: bool,
    pub hebbian_lambda: f64,
    pub hebbian_eta: f64,
    pub hebbian_gain: f64,
    /// Also apply inhibition and fatigue to the evolved belief state.
    pub apply_post_evolve: bool,
}

impl Default for BioConfig {
    fn default() -> Self {
        Self {
            inhibition: true,
            inhibition_beta: 0.3,
            inhibition_min_factor: 0.2,
            fatigue: true,
            fatigue_kappa: 0.1,
            fatigue_rho: 0.02,
            fatigue_h_min: 0.1,
            hebbian: true,
            hebbian_lambda: 0.99,
            hebbian_eta: 0.01,
            hebbian_gain: 0.5,
            apply_post_evolve: false,
        }
    }
}

impl BioConfig {
    pub fn disabled() -> Self {
        Self { inhibition: false, fatigue: false, hebbian: false, ..Self::default() }
    }
}

/// Per-channel inhibition factors at one position, before multiplying.
pub fn inhibition_factors<T: Scalar>(column: &[T], beta: T, min_factor: T) -> Vec<T> {
    let max = column.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let denom = max + T::lit(INHIBITION_EPS);
    column
        .iter()
        .map(|v| (T::one() - beta * (T::one() - v.abs() / denom)).max(min_factor))
        .collect()
}

/// Scales each channel at a position by
/// `max(min_factor, 1 - beta (1 - |z_c| / (max_c |z_c| + eps)))`.
pub fn lateral_inhibition<T: Scalar>(field: &FieldGrid<T>, beta: T, min_factor: T) -> FieldGrid<T> {
    let (c_n, h, w) = field.shape();
    let p = h * w;
    let mut out = field.values().to_vec();
    let mut column = vec![T::zero(); c_n];
    for pos in 0..p {
        for c in 0..c_n {
            column[c] = out[c * p + pos];
        }
        let f = inhibition_factors(&column, beta, min_factor);
        for c in 0..c_n {
            out[c * p + pos] = column[c] * f[c];
        }
    }
    FieldGrid::from_parts(c_n, h, w, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FatigueState<T> {
    pub health: ChannelVector<T>,
    pub kappa: T,
    pub rho: T,
    pub h_min: T,
}

impl<T: Scalar> FatigueState<T> {
    /// Fully rested channels.
    pub fn new(dim: usize, cfg: &BioConfig) -> Self {
        Self {
            health: ChannelVector::filled(dim, T::one()),
            kappa: T::lit(cfg.fatigue_kappa),
            rho: T::lit(cfg.fatigue_rho),
            h_min: T::lit(cfg.fatigue_h_min),
        }
    }

    /// Health after observing channel means `z_bar`.
    pub fn updated_health(&self, z_bar: &[T]) -> Vec<T> {
        self.health
            .values
            .iter()
            .zip(z_bar)
            .map(|(&h, &m)| (h - self.kappa * m.abs() + self.rho).max(self.h_min).min(T::one()))
            .collect()
    }
}

/// Updates channel health from the spatial means of `field` and scales each
/// channel by its new health.
pub fn synaptic_fatigue<T: Scalar>(field: &FieldGrid<T>, state: &FatigueState<T>) -> (FieldGrid<T>, FatigueState<T>) {
    assert_eq!(state.health.dim(), field.channels());
    let z_bar = spatial_mean(field);
    let health = state.updated_health(&z_bar.values);
    let out = field.scale_channels(&health);
    (out, FatigueState { health: ChannelVector::new(health), ..state.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HebbianMap<T> {
    pub map: FieldGrid<T>,
    pub lambda: T,
    pub eta: T,
    pub gain: T,
}

impl<T: Scalar> HebbianMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, cfg: &BioConfig) -> Self {
        Self {
            map: FieldGrid::zeros(channels, height, width),
            lambda: T::lit(cfg.hebbian_lambda),
            eta: T::lit(cfg.hebbian_eta),
            gain: T::lit(cfg.hebbian_gain),
        }
    }
}

/// `M' = lambda M + eta max(0, u * smooth(u))` with a 3x3 replicate-padded box mean.
pub fn hebbian_update<T: Scalar>(state: &HebbianMap<T>, u: &FieldGrid<T>) -> HebbianMap<T> {
    assert!(state.map.same_shape(u), "hebbian map and field shapes differ");
    let smooth = box_smooth3(u);
    let coact = u.zip_map(&smooth, |a, b| (a * b).max(T::zero()));
    let map = state.map.zip_map(&coact, |m, c| state.lambda * m + state.eta * c);
    HebbianMap { map, ..state.clone() }
}

/// Per-position diffusion multiplier `1 + gain * M`.
pub fn effective_diffusion<T: Scalar>(state: &HebbianMap<T>) -> FieldGrid<T> {
    state.map.map(|m| T::one() + state.gain * m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(vals: &[f64]) -> FieldGrid<f64> {
        FieldGrid::from_vec(vals.len(), 1, 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn inhibition_equal_magnitudes_unchanged() {
        let f = column(&[2.0, -2.0, 2.0]);
        let g = lateral_inhibition(&f, 0.3, 0.2);
        for (a, b) in f.values().iter().zip(g.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn inhibition_hand_values() {
        let g = lateral_inhibition(&column(&[2.0, 1.0]), 0.3, 0.2);
        assert!((g.values()[0] - 2.0).abs() < 1e-6);
        assert!((g.values()[1] - 0.85).abs() < 1e-6);
        let f = inhibition_factors(&[10.0, 1e-12], 0.9, 0.2);
        assert_eq!(f[1], 0.2);
    }

    #[test]
    fn fatigue_examples() {
        let cfg = BioConfig::default();
        let rested = FatigueState::<f64>::new(2, &cfg);
        let z = FieldGrid::zeros(2, 3, 3);
        let (out, st) = synaptic_fatigue(&z, &rested);
        assert_eq!(st.health.values, vec![1.0, 1.0]);
        assert_eq!(out, z);

        let ones = FieldGrid::<f64>::filled(1, 2, 2, 1.0);
        let (out, st) = synaptic_fatigue(&ones, &FatigueState::new(1, &cfg));
        assert!((st.health.values[0] - 0.92).abs() < 1e-15);
        assert!(out.values().iter().all(|&v| (v - 0.92).abs() < 1e-15));

        let tired: FatigueState<f64> = FatigueState { health: ChannelVector::filled(1, 0.1), ..FatigueState::new(1, &cfg) };
        let (out, st) = synaptic_fatigue(&FieldGrid::<f64>::filled(1, 2, 2, 5.0), &tired);
        assert_eq!(st.health.values[0], 0.1);
        assert!(out.values().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn hebbian_examples() {
        let cfg = BioConfig::default();
        let m0 = HebbianMap::<f64>::new(1, 3, 3, &cfg);
        let m1 = hebbian_update(&m0, &FieldGrid::filled(1, 3, 3, -1.0));
        assert!(m1.map.values().iter().all(|&v| (v - 0.01).abs() < 1e-15));
        let m2 = hebbian_update(&m1, &FieldGrid::zeros(1, 3, 3));
        assert!(m2.map.values().iter().all(|&v| (v - 0.0099).abs() < 1e-15));

        // a lone positive cell among negatives: product with its smoothed value is negative
        let mut u = FieldGrid::filled(1, 3, 3, -1.0);
        u.set(0, 1, 1, 1.0);
        let m3 = hebbian_update(&m1, &u);
        assert!((m3.map.get(0, 1, 1) - 0.99 * 0.01).abs() < 1e-15);
    }

    #[test]
    fn effective_diffusion_multiplier() {
        let cfg = BioConfig::default();
        let mut m = HebbianMap::<f64>::new(1, 2, 2, &cfg);
        assert!(effective_diffusion(&m).values().iter().all(|&v| v == 1.0));
        m.map.set(0, 0, 1, 2.0);
        assert_eq!(effective_diffusion(&m).get(0, 0, 1), 2.0);
    }
}
