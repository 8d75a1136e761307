//! Spontaneous symmetry breaking from a nearly uniform field.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::cluster::best_kmeans;
use crate::analysis::phase::{random_field, LayerRunner};
use crate::dynamics::LayerParams;
use crate::error::{FluidError, Result};
use crate::field::FieldGrid;

/// Variance floor of the quadrant correlation: fields whose quadrant
/// variance is far below it count as symmetric.
pub const SYMMETRY_VAR_FLOOR: f64 = 1e-6;
pub const ENTROPY_BINS: usize = 32;

/// Quadrant `q` (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right)
/// of a single plane, mirrored into the orientation of the top-left one.
fn quadrant(plane: &FieldGrid<f64>, q: usize) -> Vec<f64> {
    let (_, h, w) = plane.shape();
    let (qh, qw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(qh * qw);
    for y in 0..qh {
        for x in 0..qw {
            let yy = if q >= 2 { h - 1 - y } else { y };
            let xx = if q % 2 == 1 { w - 1 - x } else { x };
            out.push(plane.get(0, yy, xx));
        }
    }
    out
}

fn floored_correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    let f = SYMMETRY_VAR_FLOOR;
    (cov / n + f) / ((va / n + f) * (vb / n + f)).sqrt()
}

/// Mean of the six pairwise correlations between the mirrored quadrants of
/// the channel-averaged field. A mirror-symmetric field scores 1.
pub fn symmetry_index(field: &FieldGrid<f64>) -> f64 {
    let plane = field.channel_average();
    let q: Vec<Vec<f64>> = (0..4).map(|i| quadrant(&plane, i)).collect();
    let mut total = 0.0;
    for i in 0..4 {
        for j in i + 1..4 {
            total += floored_correlation(&q[i], &q[j]);
        }
    }
    total / 6.0
}

/// Shannon entropy in bits of the channel-averaged magnitudes over 32 equal bins.
pub fn spatial_entropy(field: &FieldGrid<f64>) -> f64 {
    let mags: Vec<f64> = field.channel_average().values().iter().map(|v| v.abs()).collect();
    let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 0.0) {
        return 0.0;
    }
    let mut counts = [0usize; ENTROPY_BINS];
    for m in &mags {
        let b = (((m - lo) / (hi - lo)) * ENTROPY_BINS as f64) as usize;
        counts[b.min(ENTROPY_BINS - 1)] += 1;
    }
    let n = mags.len() as f64;
    counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum()
}

/// Number of clusters among per-position channel vectors, k in 2..=6 by silhouette.
pub fn cluster_count(field: &FieldGrid<f64>, seed: u64) -> usize {
    let (d, h, w) = field.shape();
    let points: Vec<Vec<f64>> = (0..h * w).map(|i| (0..d).map(|c| field.channel(c)[i]).collect()).collect();
    best_kmeans(&points, 2..=6, seed, 50).0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SymmetryConfig {
    pub channels: usize,
    pub size: usize,
    pub base: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,
    pub reaction_gain: f64,
    pub dt: f64,
    pub normalize: bool,
}

impl Default for SymmetryConfig {
    fn default() -> Self {
        Self { channels: 16, size: 16, base: 0.0, epsilon: 1e-4, steps: 20, seed: 0, reaction_gain: 3.0, dt: 0.35, normalize: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryStep {
    pub step: usize,
    pub symmetry_index: f64,
    pub entropy: f64,
    pub clusters: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymmetryTrace {
    pub steps: Vec<SymmetryStep>,
    /// Field after every step, starting with the initial one.
    pub fields: Vec<FieldGrid<f64>>,
}

/// Layer whose reaction weights are drawn from `seed` and scaled by `gain`.
pub fn seeded_layer(channels: usize, gain: f64, dt: f64, seed: u64) -> LayerParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = LayerParams::init_with_gain(channels, gain, &mut rng);
    p.set_dt(dt);
    p
}

pub fn symmetry_experiment(cfg: &SymmetryConfig) -> Result<SymmetryTrace> {
    if cfg.size < 2 || cfg.channels == 0 {
        return Err(FluidError::Config("symmetry experiment needs at least a 2x2 field".into()));
    }
    let noise = random_field(cfg.channels, cfg.size, cfg.size, cfg.seed.wrapping_add(1));
    let u0 = noise.map(|v| cfg.base + cfg.epsilon * v);
    let params = seeded_layer(cfg.channels, cfg.reaction_gain, cfg.dt, cfg.seed);
    let mut runner = LayerRunner::new(u0.clone(), &params, cfg.normalize);
    let mut fields = vec![u0];
    for _ in 0..cfg.steps {
        fields.push(runner.step().clone());
    }
    let steps = fields
        .iter()
        .enumerate()
        .map(|(step, f)| SymmetryStep {
            step,
            symmetry_index: symmetry_index(f),
            entropy: spatial_entropy(f),
            clusters: cluster_count(f, cfg.seed),
        })
        .collect();
    Ok(SymmetryTrace { steps, fields })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_symmetric_field_scores_one() {
        let f = FieldGrid::from_fn(3, 8, 8, |c, y, x| {
            let (yy, xx) = (y.min(7 - y) as f64, x.min(7 - x) as f64);
            (c as f64 + 1.0) * (yy * 1.3 + xx * xx * 0.2).sin()
        });
        assert!((symmetry_index(&f) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_field_has_zero_entropy() {
        let f = FieldGrid::filled(2, 6, 6, 0.4);
        assert_eq!(spatial_entropy(&f), 0.0);
        assert!((symmetry_index(&f) - 1.0).abs() < 1e-12);
        assert_eq!(cluster_count(&f, 0), 1);
    }

    #[test]
    fn entropy_of_two_equal_halves_is_one_bit() {
        let f = FieldGrid::from_fn(1, 4, 4, |_, _, x| if x < 2 { 0.0 } else { 1.0 });
        assert!((spatial_entropy(&f) - 1.0).abs() < 1e-12);
    }
}
