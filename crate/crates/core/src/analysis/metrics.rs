//! Representation and image-quality metrics.

use serde::{Deserialize, Serialize};

use crate::field::FieldGrid;
use crate::scalar::Scalar;

pub const DEAD_DIM_THRESHOLD: f64 = 0.1;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub spatial_std: f64,
    pub effective_rank: f64,
    pub dead_dims: usize,
    pub feature_std: f64,
    pub mse: f64,
    pub ssim: f64,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Population std of every channel over positions.
pub fn channel_stds<T: Scalar>(z: &FieldGrid<T>) -> Vec<f64> {
    (0..z.channels()).map(|c| mean_std(z.channel(c).iter().map(|v| v.to_f64_lossy())).1).collect()
}

/// Per-channel spatial std averaged over channels.
pub fn spatial_std<T: Scalar>(z: &FieldGrid<T>) -> f64 {
    let s = channel_stds(z);
    s.iter().sum::<f64>() / s.len() as f64
}

/// Population std over all entries.
pub fn feature_std<T: Scalar>(z: &FieldGrid<T>) -> f64 {
    mean_std(z.values().iter().map(|v| v.to_f64_lossy())).1
}

/// Channels whose spatial std falls below `threshold`.
pub fn dead_dims<T: Scalar>(z: &FieldGrid<T>, threshold: f64) -> usize {
    channel_stds(z).into_iter().filter(|&s| s < threshold).count()
}

/// Singular values of a row-major `rows x cols` matrix by one-sided Jacobi,
/// in descending order.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(data.len(), rows * cols);
    // Orthogonalize the columns of whichever orientation has fewer of them.
    let (m, n, at): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if cols <= rows {
        (rows, cols, Box::new(|i, j| data[i * cols + j]))
    } else {
        (cols, rows, Box::new(|i, j| data[j * cols + i]))
    };
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| at(i, j)).collect()).collect();
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = a[p].iter().zip(&a[q]).fold((0.0, 0.0, 0.0), |(x, y, z), (u, v)| {
                    (x + u * u, y + v * v, z + u * v)
                });
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (u, v) = (a[p][i], a[q][i]);
                    a[p][i] = c * u - s * v;
                    a[q][i] = s * u + c * v;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = a.iter().map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// `exp(entropy)` of the normalized singular-value distribution.
pub fn effective_rank_of(singular: &[f64]) -> f64 {
    let total: f64 = singular.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    let h: f64 = singular.iter().filter(|&&s| s > 0.0).map(|&s| s / total).map(|p| -p * p.ln()).sum();
    h.exp()
}

/// Effective rank of `z` viewed as positions x channels with centred columns.
pub fn effective_rank<T: Scalar>(z: &FieldGrid<T>) -> f64 {
    let (d, h, w) = z.shape();
    let rows = h * w;
    let mut data = vec![0.0; rows * d];
    for c in 0..d {
        let ch = z.channel(c);
        let mean = ch.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / rows as f64;
        for (r, v) in ch.iter().enumerate() {
            data[r * d + c] = v.to_f64_lossy() - mean;
        }
    }
    effective_rank_of(&singular_values(&data, rows, d))
}

pub fn mse<T: Scalar>(a: &FieldGrid<T>, b: &FieldGrid<T>) -> f64 {
    assert!(a.same_shape(b));
    let s: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (*x - *y).to_f64_lossy().powi(2)).sum();
    s / a.len() as f64
}

/// Normalized 1D Gaussian taps of length `n`.
pub fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let centre = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - centre).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Structural similarity with a Gaussian window (7x7, sigma 1.5, shrunk to
/// the image when smaller), dynamic range 1, averaged over every fully
/// contained window and every channel.
pub fn ssim<T: Scalar>(a: &FieldGrid<T>, b: &FieldGrid<T>) -> f64 {
    assert!(a.same_shape(b), "ssim needs equal shapes");
    let (ch, h, w) = a.shape();
    let wh = SSIM_WINDOW.min(h);
    let ww = SSIM_WINDOW.min(w);
    let gy = gaussian_taps(wh, SSIM_SIGMA);
    let gx = gaussian_taps(ww, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        let pa = a.channel(c);
        let pb = b.channel(c);
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, wy) in gy.iter().enumerate() {
                    for (dx, wx) in gx.iter().enumerate() {
                        let k = wy * wx;
                        let i = (y0 + dy) * w + x0 + dx;
                        let (u, v) = (pa[i].to_f64_lossy(), pb[i].to_f64_lossy());
                        ma += k * u;
                        mb += k * v;
                        saa += k * u * u;
                        sbb += k * v * v;
                        sab += k * u * v;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Representation statistics of `z` plus reconstruction quality of `recon` against `target`.
pub fn metrics_record<T: Scalar>(z: &FieldGrid<T>, recon: &FieldGrid<T>, target: &FieldGrid<T>) -> MetricsRecord {
    MetricsRecord {
        spatial_std: spatial_std(z),
        effective_rank: effective_rank(z),
        dead_dims: dead_dims(z, DEAD_DIM_THRESHOLD),
        feature_std: feature_std(z),
        mse: mse(recon, target),
        ssim: ssim(recon, target),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(c: usize, h: usize, w: usize, seed: u64) -> FieldGrid<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        FieldGrid::from_fn(c, h, w, |_, _, _| r.random_range(0.0..1.0))
    }

    #[test]
    fn spatial_std_examples() {
        assert_eq!(spatial_std(&FieldGrid::<f64>::filled(3, 4, 4, 2.5)), 0.0);
        let alt = FieldGrid::<f64>::from_fn(2, 4, 4, |_, y, x| if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
        assert!((spatial_std(&alt) - 1.0).abs() < 1e-15);
        let z = random(3, 5, 6, 1);
        let mut acc = 0.0;
        for c in 0..3 {
            let ch = z.channel(c);
            let m: f64 = ch.iter().sum::<f64>() / 30.0;
            acc += (ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 30.0).sqrt();
        }
        assert!((spatial_std(&z) - acc / 3.0).abs() < 1e-14);
    }

    #[test]
    fn dead_dims_examples() {
        assert_eq!(dead_dims(&FieldGrid::<f64>::filled(5, 3, 3, 1.0), 0.1), 5);
        let f = FieldGrid::<f64>::from_fn(4, 2, 2, |c, y, x| {
            let s = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            [0.0, 0.05, 0.5, 2.0][c] * s
        });
        assert_eq!(dead_dims(&f, 0.1), 2);
        assert_eq!(dead_dims(&f, 0.01), 1);
    }

    #[test]
    fn effective_rank_uniform_spectrum() {
        // Orthogonal centred columns with equal norms: k equal singular values.
        let k = 3;
        let z = FieldGrid::<f64>::from_fn(k, 4, 4, |c, y, x| {
            let i = y * 4 + x;
            match c {
                0 => if i % 2 == 0 { 1.0 } else { -1.0 },
                1 => if (i / 2) % 2 == 0 { 1.0 } else { -1.0 },
                _ => if (i / 4) % 2 == 0 { 1.0 } else { -1.0 },
            }
        });
        assert!((effective_rank(&z) - 3.0).abs() < 1e-12);
        let rank1 = FieldGrid::<f64>::from_fn(4, 3, 3, |c, y, x| (c as f64 + 1.0) * (y * 3 + x) as f64);
        assert!((effective_rank(&rank1) - 1.0).abs() < 1e-9);
        assert_eq!(effective_rank(&FieldGrid::<f64>::filled(4, 3, 3, 0.3)), 1.0);
    }

    #[test]
    fn singular_values_of_wide_and_tall_agree() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..35).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut at = vec![0.0; 35];
        for i in 0..5 {
            for j in 0..7 {
                at[j * 5 + i] = a[i * 7 + j];
            }
        }
        let s1 = singular_values(&a, 5, 7);
        let s2 = singular_values(&at, 7, 5);
        for (x, y) in s1.iter().zip(&s2) {
            assert!((x - y).abs() < 1e-12);
        }
        let frob: f64 = a.iter().map(|v| v * v).sum();
        assert!((s1.iter().map(|s| s * s).sum::<f64>() - frob).abs() < 1e-12);
    }

    #[test]
    fn ssim_examples() {
        let a = random(2, 9, 10, 3);
        assert!((ssim(&a, &a) - 1.0).abs() < 1e-15);
        let zero = FieldGrid::<f64>::filled(1, 8, 8, 0.0);
        let one = FieldGrid::<f64>::filled(1, 8, 8, 1.0);
        let c1 = 1e-4;
        assert!((ssim(&zero, &one) - c1 / (1.0 + c1)).abs() < 1e-12);
        let b = random(2, 9, 10, 4);
        assert!((ssim(&a, &b) - ssim(&b, &a)).abs() < 1e-12);
        assert!(ssim(&a, &b) < 0.5);
    }

    #[test]
    fn gaussian_taps_are_symmetric_and_normalized() {
        let g = gaussian_taps(7, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[6]);
        assert!(g[3] > g[2]);
    }
}
