//! Frame <-> latent mapping.
//!
//! The encoder is a strided patch projection followed by three reaction-diffusion
//! layers with a skip connection around them and optional inhibition/fatigue.
//! The decoder is the symmetric upsampling path:
//!
//! | stage                          | output              |
//! |--------------------------------|---------------------|
//! | 1x1 conv                       | `mid x h x w`       |
//! | ResBlock                       | `mid x h x w`       |
//! | bilinear x2 + 3x3 conv         | `mid x 2h x 2w`     |
//! | GroupNorm + ResBlock           | `mid x 2h x 2w`     |
//! | bilinear x2 + 3x3 conv         | `mid/2 x 4h x 4w`   |
//! | GroupNorm + ResBlock           | `mid/2 x 4h x 4w`   |
//! | 3x3 conv                       | `C_in x 4h x 4w`    |
//!
//! ResBlocks are `x + GN(conv(gelu(GN(conv(x)))))`. Convolutions feeding a
//! GroupNorm carry no bias, since the normalization cancels it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bio::{lateral_inhibition, synaptic_fatigue, BioConfig, FatigueState};
use crate::dynamics::{integrate_layer, IntegrationConfig, LayerParams};
use crate::error::{FluidError, Result};
use crate::field::{bilinear_resize, FieldGrid};
use crate::matrix::{channel_matmul, Matrix};
use crate::scalar::{gelu, Scalar};

pub const GROUP_NORM_GROUPS: usize = 8;
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Square convolution, `[out][in][ky][kx]` weights, replicate-padded "same" output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<T> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub weights: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn init<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, kernel: usize, with_bias: bool, rng: &mut R) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights = (0..out_ch * fan_in).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
        Self { out_ch, in_ch, kernel, weights, bias: with_bias.then(|| vec![T::zero(); out_ch]) }
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize, with_bias: bool) -> Self {
        Self {
            out_ch,
            in_ch,
            kernel,
            weights: vec![T::zero(); out_ch * in_ch * kernel * kernel],
            bias: with_bias.then(|| vec![T::zero(); out_ch]),
        }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.weights[((o * self.in_ch + i) * self.kernel + ky) * self.kernel + kx]
    }
}

/// Replicate-clamped source index for every output index at kernel offset `off`.
fn clamped_offsets(n: usize, off: isize) -> Vec<usize> {
    (0..n).map(|i| (i as isize + off).clamp(0, n as isize - 1) as usize).collect()
}

fn offset_tables(kernel: usize, n: usize) -> Vec<Vec<usize>> {
    let r = (kernel / 2) as isize;
    (0..kernel).map(|k| clamped_offsets(n, k as isize - r)).collect()
}

pub fn conv2d<T: Scalar>(x: &FieldGrid<T>, conv: &Conv2d<T>) -> FieldGrid<T> {
    let (c_in, h, w) = x.shape();
    assert_eq!(c_in, conv.in_ch, "conv input channels");
    let rows = offset_tables(conv.kernel, h);
    let cols = offset_tables(conv.kernel, w);
    let p = h * w;
    let mut out = vec![T::zero(); conv.out_ch * p];
    for o in 0..conv.out_ch {
        let dst = &mut out[o * p..(o + 1) * p];
        if let Some(b) = &conv.bias {
            dst.iter_mut().for_each(|v| *v = b[o]);
        }
        for i in 0..c_in {
            let src = x.channel(i);
            for (ky, ry) in rows.iter().enumerate() {
                for (kx, rx) in cols.iter().enumerate() {
                    let wt = conv.w(o, i, ky, kx);
                    for y in 0..h {
                        let srow = &src[ry[y] * w..ry[y] * w + w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        for (d, &sx) in drow.iter_mut().zip(rx.iter()) {
                            *d += wt * srow[sx];
                        }
                    }
                }
            }
        }
    }
    FieldGrid::from_parts(conv.out_ch, h, w, out)
}

/// Gradients of [`conv2d`] w.r.t. input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &FieldGrid<T>,
    conv: &Conv2d<T>,
    grad_out: &FieldGrid<T>,
) -> (FieldGrid<T>, Vec<T>, Option<Vec<T>>) {
    let (c_in, h, w) = x.shape();
    let rows = offset_tables(conv.kernel, h);
    let cols = offset_tables(conv.kernel, w);
    let k = conv.kernel;
    let mut gx = FieldGrid::zeros(c_in, h, w);
    let mut gw = vec![T::zero(); conv.weights.len()];
    for o in 0..conv.out_ch {
        let g = grad_out.channel(o);
        for i in 0..c_in {
            let src = x.channel(i);
            for (ky, ry) in rows.iter().enumerate() {
                for (kx, rx) in cols.iter().enumerate() {
                    let wt = conv.w(o, i, ky, kx);
                    let mut acc = T::zero();
                    let gdst = gx.channel_mut(i);
                    for y in 0..h {
                        let base = ry[y] * w;
                        for x_ in 0..w {
                            let gv = g[y * w + x_];
                            let si = base + rx[x_];
                            acc += gv * src[si];
                            gdst[si] += wt * gv;
                        }
                    }
                    gw[((o * c_in + i) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
    let gb = conv.bias.as_ref().map(|_| (0..conv.out_ch).map(|o| grad_out.channel(o).iter().copied().sum()).collect());
    (gx, gw, gb)
}

/// Per-channel affine GroupNorm parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupNorm<T> {
    pub groups: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "{channels} channels not divisible into {groups} groups");
        Self { groups, gamma: vec![T::one(); channels], beta: vec![T::zero(); channels] }
    }
}

/// Normalized values (before the affine map) and per-group inverse std.
pub fn group_norm_stats<T: Scalar>(x: &FieldGrid<T>, groups: usize) -> (FieldGrid<T>, Vec<T>) {
    let (c_n, h, w) = x.shape();
    let per = c_n / groups;
    let n = T::count(per * h * w);
    let eps = T::lit(GROUP_NORM_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let range = g * per * h * w..(g + 1) * per * h * w;
        let vals = &x.values()[range.clone()];
        let mean = vals.iter().copied().sum::<T>() / n;
        let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for v in &mut xhat.values_mut()[range] {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

pub fn group_norm<T: Scalar>(x: &FieldGrid<T>, gn: &GroupNorm<T>) -> FieldGrid<T> {
    let (xhat, _) = group_norm_stats(x, gn.groups);
    affine_channels(&xhat, &gn.gamma, &gn.beta)
}

/// `gamma[c] * x + beta[c]`.
pub fn affine_channels<T: Scalar>(x: &FieldGrid<T>, gamma: &[T], beta: &[T]) -> FieldGrid<T> {
    let p = x.plane();
    let mut out = x.clone();
    for c in 0..x.channels() {
        for v in &mut out.values_mut()[c * p..(c + 1) * p] {
            *v = gamma[c] * *v + beta[c];
        }
    }
    out
}

/// Gradient of the normalized values w.r.t. the input, given the gradient
/// w.r.t. the normalized values.
pub fn group_norm_input_grad<T: Scalar>(xhat: &FieldGrid<T>, inv_std: &[T], grad_xhat: &FieldGrid<T>) -> FieldGrid<T> {
    let groups = inv_std.len();
    let size = xhat.len() / groups;
    let n = T::count(size);
    let mut gx = grad_xhat.clone();
    for (g, &inv) in inv_std.iter().enumerate() {
        let range = g * size..(g + 1) * size;
        let xh = &xhat.values()[range.clone()];
        let gh = &grad_xhat.values()[range.clone()];
        let mean_g = gh.iter().copied().sum::<T>() / n;
        let mean_gx = gh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((out, &a), &b) in gx.values_mut()[range].iter_mut().zip(gh).zip(xh) {
            *out = inv * (a - mean_g - b * mean_gx);
        }
    }
    gx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResBlock<T> {
    pub conv_a: Conv2d<T>,
    pub norm_a: GroupNorm<T>,
    pub conv_b: Conv2d<T>,
    pub norm_b: GroupNorm<T>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn init<R: Rng + ?Sized>(ch: usize, groups: usize, rng: &mut R) -> Self {
        Self {
            conv_a: Conv2d::init(ch, ch, 3, false, rng),
            norm_a: GroupNorm::new(ch, groups),
            conv_b: Conv2d::init(ch, ch, 3, false, rng),
            norm_b: GroupNorm::new(ch, groups),
        }
    }
}

pub fn res_block<T: Scalar>(x: &FieldGrid<T>, rb: &ResBlock<T>) -> FieldGrid<T> {
    let a = group_norm(&conv2d(x, &rb.conv_a), &rb.norm_a).map(gelu);
    let b = group_norm(&conv2d(&a, &rb.conv_b), &rb.norm_b);
    x.add(&b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams<T> {
    pub proj: Conv2d<T>,
    pub res1: ResBlock<T>,
    pub up1: Conv2d<T>,
    pub norm1: GroupNorm<T>,
    pub res2: ResBlock<T>,
    pub up2: Conv2d<T>,
    pub norm2: GroupNorm<T>,
    pub res3: ResBlock<T>,
    pub out: Conv2d<T>,
}

impl<T: Scalar> DecoderParams<T> {
    /// `mid` must be a multiple of `2 * GROUP_NORM_GROUPS`.
    pub fn init<R: Rng + ?Sized>(d: usize, mid: usize, out_channels: usize, rng: &mut R) -> Self {
        let g = GROUP_NORM_GROUPS;
        let half = mid / 2;
        Self {
            proj: Conv2d::init(mid, d, 1, true, rng),
            res1: ResBlock::init(mid, g, rng),
            up1: Conv2d::init(mid, mid, 3, false, rng),
            norm1: GroupNorm::new(mid, g),
            res2: ResBlock::init(mid, g, rng),
            up2: Conv2d::init(half, mid, 3, false, rng),
            norm2: GroupNorm::new(half, g),
            res3: ResBlock::init(half, g, rng),
            out: Conv2d::init(out_channels, half, 3, true, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecParams<T> {
    pub patch: usize,
    /// `d x (C_in * patch * patch)`.
    pub patch_weights: Matrix<T>,
    pub patch_bias: Vec<T>,
    pub encoder_layers: Vec<LayerParams<T>>,
    pub decoder: DecoderParams<T>,
}

impl<T: Scalar> CodecParams<T> {
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        d: usize,
        patch: usize,
        n_layers: usize,
        decoder_mid: usize,
        rng: &mut R,
    ) -> Self {
        let patch_weights = Matrix::uniform_fan_in(d, in_channels * patch * patch, 1.0, rng);
        let encoder_layers = (0..n_layers).map(|_| LayerParams::init(d, rng)).collect();
        let decoder = DecoderParams::init(d, decoder_mid, in_channels, rng);
        Self { patch, patch_weights, patch_bias: vec![T::zero(); d], encoder_layers, decoder }
    }

    pub fn latent_dim(&self) -> usize {
        self.patch_weights.rows
    }

    pub fn in_channels(&self) -> usize {
        self.patch_weights.cols / (self.patch * self.patch)
    }
}

/// Gathers each non-overlapping `p x p` patch into the channel axis:
/// channel `(c * p + py) * p + px` at patch `(Y, X)` holds pixel `(c, Y p + py, X p + px)`.
pub fn space_to_depth<T: Scalar>(frame: &FieldGrid<T>, p: usize) -> Result<FieldGrid<T>> {
    let (c_n, h, w) = frame.shape();
    if h % p != 0 || w % p != 0 {
        return Err(FluidError::Shape(format!("{h}x{w} frame not divisible by patch {p}")));
    }
    Ok(FieldGrid::from_fn(c_n * p * p, h / p, w / p, |ch, y, x| {
        let c = ch / (p * p);
        let py = (ch / p) % p;
        let px = ch % p;
        frame.get(c, y * p + py, x * p + px)
    }))
}

pub fn depth_to_space<T: Scalar>(grid: &FieldGrid<T>, p: usize) -> FieldGrid<T> {
    let (cp, h, w) = grid.shape();
    let c_n = cp / (p * p);
    FieldGrid::from_fn(c_n, h * p, w * p, |c, y, x| grid.get((c * p + y % p) * p + x % p, y / p, x / p))
}

/// Non-overlapping patch projection to `d x H/p x W/p`.
pub fn patch_embed<T: Scalar>(frame: &FieldGrid<T>, params: &CodecParams<T>) -> Result<FieldGrid<T>> {
    let patches = space_to_depth(frame, params.patch)?;
    if patches.channels() != params.patch_weights.cols {
        return Err(FluidError::Shape(format!(
            "frame has {} channels, codec expects {}",
            frame.channels(),
            params.in_channels()
        )));
    }
    Ok(channel_matmul(&patches, &params.patch_weights, Some(&params.patch_bias)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<T> {
    /// Encoder output after skip connection and bio regularization.
    pub z: FieldGrid<T>,
    pub u0: FieldGrid<T>,
    pub u_pde: FieldGrid<T>,
    pub fatigue: Option<FatigueState<T>>,
}

/// Patch embedding, sequential PDE layers, skip connection, then inhibition
/// and fatigue when enabled. Fatigue needs the running health state.
pub fn encode<T: Scalar>(
    frame: &FieldGrid<T>,
    params: &CodecParams<T>,
    integration: &IntegrationConfig,
    bio: &BioConfig,
    fatigue: Option<&FatigueState<T>>,
) -> Result<Encoded<T>> {
    let u0 = patch_embed(frame, params)?;
    let mut u = u0.clone();
    for layer in &params.encoder_layers {
        u = integrate_layer(&u, layer, integration, None).0;
    }
    let mut z = u.add(&u0);
    if bio.inhibition {
        z = lateral_inhibition(&z, T::lit(bio.inhibition_beta), T::lit(bio.inhibition_min_factor));
    }
    let mut next_fatigue = None;
    if bio.fatigue {
        if let Some(state) = fatigue {
            let (out, f) = synaptic_fatigue(&z, state);
            z = out;
            next_fatigue = Some(f);
        }
    }
    Ok(Encoded { z, u0, u_pde: u, fatigue: next_fatigue })
}

/// Latent to output logits (no sigmoid).
pub fn decode<T: Scalar>(z: &FieldGrid<T>, params: &CodecParams<T>) -> FieldGrid<T> {
    let dec = &params.decoder;
    let (_, h, w) = z.shape();
    let x = conv2d(z, &dec.proj);
    let x = res_block(&x, &dec.res1);
    let x = conv2d(&bilinear_resize(&x, 2 * h, 2 * w), &dec.up1);
    let x = res_block(&group_norm(&x, &dec.norm1), &dec.res2);
    let x = conv2d(&bilinear_resize(&x, 4 * h, 4 * w), &dec.up2);
    let x = res_block(&group_norm(&x, &dec.norm2), &dec.res3);
    conv2d(&x, &dec.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_field(c: usize, h: usize, w: usize, seed: u64) -> FieldGrid<f64> {
        let mut r = rng(seed);
        FieldGrid::from_fn(c, h, w, |_, _, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn full_scale_shapes() {
        let mut r = rng(0);
        let params = CodecParams::<f64>::init(1, 128, 4, 3, 64, &mut r);
        let frame = FieldGrid::filled(1, 64, 64, 0.5);
        let u0 = patch_embed(&frame, &params).unwrap();
        assert_eq!(u0.shape(), (128, 16, 16));
    }

    #[test]
    fn patch_embed_bias_broadcast_and_oracle() {
        let mut r = rng(1);
        let mut params = CodecParams::<f64>::init(1, 2, 4, 0, 16, &mut r);
        params.patch_bias = vec![0.5, -1.5];
        let frame = random_field(1, 8, 8, 2);
        let out = patch_embed(&frame, &params).unwrap();
        for o in 0..2 {
            for py in 0..2 {
                for px in 0..2 {
                    let mut acc = params.patch_bias[o];
                    for dy in 0..4 {
                        for dx in 0..4 {
                            acc += params.patch_weights.get(o, dy * 4 + dx) * frame.get(0, py * 4 + dy, px * 4 + dx);
                        }
                    }
                    assert!((out.get(o, py, px) - acc).abs() < 1e-12);
                }
            }
        }
        params.patch_weights = Matrix::zeros(2, 16);
        let out = patch_embed(&frame, &params).unwrap();
        assert!(out.channel(0).iter().all(|&v| v == 0.5));
        assert!(patch_embed(&random_field(1, 6, 8, 3), &params).is_err());
    }

    #[test]
    fn space_depth_round_trip() {
        let f = random_field(3, 8, 12, 4);
        assert_eq!(depth_to_space(&space_to_depth(&f, 4).unwrap(), 4), f);
    }

    #[test]
    fn encoder_skip_identity() {
        let mut r = rng(5);
        let params = CodecParams::<f64>::init(1, 8, 4, 3, 16, &mut r);
        let frame = random_field(1, 16, 16, 6).map(|v| v.abs());
        let enc = encode(&frame, &params, &IntegrationConfig::steps(6), &BioConfig::disabled(), None).unwrap();
        assert_eq!(enc.z.shape(), (8, 4, 4));
        let diff = enc.z.sub(&enc.u_pde);
        for (a, b) in diff.values().iter().zip(enc.u0.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let again = encode(&frame, &params, &IntegrationConfig::steps(6), &BioConfig::disabled(), None).unwrap();
        assert_eq!(enc, again);
    }

    #[test]
    fn decoder_shape_chain_and_zero_weights() {
        let mut r = rng(7);
        let params = CodecParams::<f64>::init(3, 8, 4, 0, 16, &mut r);
        let z = random_field(8, 4, 4, 8);
        let out = decode(&z, &params);
        assert_eq!(out.shape(), (3, 16, 16));
        assert!(out.is_finite());

        let mut zero = params.clone();
        let dec = &mut zero.decoder;
        for conv in [&mut dec.proj, &mut dec.up1, &mut dec.up2, &mut dec.out] {
            conv.weights.iter_mut().for_each(|v| *v = 0.0);
        }
        for rb in [&mut dec.res1, &mut dec.res2, &mut dec.res3] {
            rb.conv_a.weights.iter_mut().for_each(|v| *v = 0.0);
            rb.conv_b.weights.iter_mut().for_each(|v| *v = 0.0);
        }
        dec.out.bias = Some(vec![0.1, -0.2, 0.3]);
        let out = decode(&z, &zero);
        for c in 0..3 {
            assert!(out.channel(c).iter().all(|&v| v == [0.1, -0.2, 0.3][c]));
        }
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let x = random_field(16, 5, 5, 9).map(|v| 3.0 * v + 1.0);
        let (xhat, _) = group_norm_stats(&x, 8);
        let per = 2 * 25;
        for g in 0..8 {
            let vals = &xhat.values()[g * per..(g + 1) * per];
            let mean: f64 = vals.iter().sum::<f64>() / per as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut r = rng(10);
        let conv = Conv2d::<f64>::init(2, 3, 3, true, &mut r);
        let x = random_field(3, 4, 5, 11);
        let out = conv2d(&x, &conv);
        for o in 0..2 {
            for y in 0..4 {
                for xx in 0..5 {
                    let mut acc = conv.bias.as_ref().unwrap()[o];
                    for i in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = (y as isize + ky as isize - 1).clamp(0, 3) as usize;
                                let sx = (xx as isize + kx as isize - 1).clamp(0, 4) as usize;
                                acc += conv.w(o, i, ky, kx) * x.get(i, sy, sx);
                            }
                        }
                    }
                    assert!((out.get(o, y, xx) - acc).abs() < 1e-12);
                }
            }
        }
    }
}
