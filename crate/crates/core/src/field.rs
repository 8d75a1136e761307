//! Channel-major grids and the deterministic stencil, pooling, resampling and
//! spectral operations the rest of the crate is built from.

use serde::{Deserialize, Serialize};

use crate::error::{FluidError, Result};
use crate::scalar::Scalar;

/// A `C x H x W` grid stored row-major in (channel, row, column) order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid<T> {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<T>,
}

/// A length-`d` vector of per-channel quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelVector<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> ChannelVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![T::zero(); dim] }
    }

    pub fn filled(dim: usize, v: T) -> Self {
        Self { values: vec![v; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }
}

impl<T: Scalar> FieldGrid<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: T) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "grid dimensions must be positive");
        Self { channels, height, width, values: vec![v; channels * height * width] }
    }

    /// Builds a grid, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(FluidError::Shape(format!("zero dimension in {channels}x{height}x{width}")));
        }
        if values.len() != channels * height * width {
            return Err(FluidError::Shape(format!(
                "{} values for a {channels}x{height}x{width} grid",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(FluidError::NonFinite { index });
        }
        Ok(Self { channels, height, width, values })
    }

    /// Like [`FieldGrid::from_vec`] but panics on malformed input; for internal
    /// construction where the shape is known to be right.
    pub(crate) fn from_parts(channels: usize, height: usize, width: usize, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), channels * height * width);
        Self { channels, height, width, values }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut values = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, values }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }
    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.values[self.idx(c, y, x)]
    }
    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(c, y, x);
        self.values[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.values[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.values[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.channels, self.height, self.width, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert!(self.same_shape(other), "shape mismatch {:?} vs {:?}", self.shape(), other.shape());
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self::from_parts(self.channels, self.height, self.width, values)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other));
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Self) {
        assert!(self.same_shape(other));
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    /// Multiplies every value of channel `c` by `scales[c]`.
    pub fn scale_channels(&self, scales: &[T]) -> Self {
        assert_eq!(scales.len(), self.channels);
        let p = self.plane();
        let mut out = self.clone();
        for (c, &s) in scales.iter().enumerate() {
            for v in &mut out.values[c * p..(c + 1) * p] {
                *v *= s;
            }
        }
        out
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn l1_norm(&self) -> T {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> T {
        self.sum() / T::count(self.len())
    }

    pub fn channel_sums(&self) -> Vec<T> {
        (0..self.channels).map(|c| self.channel(c).iter().copied().sum()).collect()
    }

    /// Mean over channels at every position, as a `1 x H x W` grid.
    pub fn channel_average(&self) -> Self {
        let p = self.plane();
        let inv = T::one() / T::count(self.channels);
        let mut out = vec![T::zero(); p];
        for c in 0..self.channels {
            for (o, &v) in out.iter_mut().zip(self.channel(c)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        Self::from_parts(1, self.height, self.width, out)
    }

    /// Converts element type.
    pub fn cast<U: Scalar>(&self) -> FieldGrid<U> {
        FieldGrid::from_parts(
            self.channels,
            self.height,
            self.width,
            self.values.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        )
    }
}

/// Neighbor offset along one axis with zero-flux boundaries: `None` when the
/// tap leaves the grid, in which case the tap contributes no flux.
#[inline]
fn tap(i: usize, delta: isize, n: usize) -> Option<usize> {
    let j = i as isize + delta;
    if j < 0 || j >= n as isize {
        None
    } else {
        Some(j as usize)
    }
}

/// Dilated 5-point Laplacian `u(y-k,x) + u(y+k,x) + u(y,x-k) + u(y,x+k) - 4u(y,x)`.
///
/// A tap that falls outside the grid is replaced by the centre cell itself, so
/// that pair exchanges no flux. At dilation 1 this coincides with replicate
/// padding; for every dilation the operator is symmetric and sums to zero.
pub fn laplacian<T: Scalar>(field: &FieldGrid<T>, dilation: usize) -> FieldGrid<T> {
    assert!(dilation >= 1, "dilation must be positive");
    let (c_n, h, w) = field.shape();
    let k = dilation as isize;
    let mut out = vec![T::zero(); field.len()];
    for c in 0..c_n {
        let src = field.channel(c);
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let up = tap(y, -k, h);
            let down = tap(y, k, h);
            for x in 0..w {
                let centre = src[y * w + x];
                let mut acc = T::zero();
                if let Some(yy) = up {
                    acc += src[yy * w + x] - centre;
                }
                if let Some(yy) = down {
                    acc += src[yy * w + x] - centre;
                }
                if let Some(xx) = tap(x, -k, w) {
                    acc += src[y * w + xx] - centre;
                }
                if let Some(xx) = tap(x, k, w) {
                    acc += src[y * w + xx] - centre;
                }
                dst[y * w + x] = acc;
            }
        }
    }
    FieldGrid::from_parts(c_n, h, w, out)
}

/// Per-position RMS normalization across channels followed by per-channel gains.
pub fn rms_norm<T: Scalar>(field: &FieldGrid<T>, gains: &ChannelVector<T>, eps: T) -> FieldGrid<T> {
    assert_eq!(gains.dim(), field.channels(), "one gain per channel");
    let (c_n, h, w) = field.shape();
    let p = h * w;
    let inv_c = T::one() / T::count(c_n);
    let mut out = field.values().to_vec();
    for pos in 0..p {
        let mut ms = T::zero();
        for c in 0..c_n {
            let v = out[c * p + pos];
            ms += v * v;
        }
        let inv = T::one() / (ms * inv_c + eps).sqrt();
        for c in 0..c_n {
            out[c * p + pos] = out[c * p + pos] * inv * gains.values[c];
        }
    }
    FieldGrid::from_parts(c_n, h, w, out)
}

/// Adaptive pooling window `[start, end)` for output index `i`.
#[inline]
pub(crate) fn pool_window(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let start = (i * n_in) / n_out;
    let end = ((i + 1) * n_in).div_ceil(n_out);
    (start, end.max(start + 1))
}

/// Adaptive average pooling. Output sizes larger than the input are allowed;
/// windows then overlap and each holds at least one cell.
pub fn avg_pool<T: Scalar>(field: &FieldGrid<T>, out_h: usize, out_w: usize) -> FieldGrid<T> {
    assert!(out_h > 0 && out_w > 0);
    let (c_n, h, w) = field.shape();
    let mut out = Vec::with_capacity(c_n * out_h * out_w);
    for c in 0..c_n {
        let src = field.channel(c);
        for oy in 0..out_h {
            let (y0, y1) = pool_window(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = pool_window(ox, w, out_w);
                let mut acc = T::zero();
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += src[y * w + x];
                    }
                }
                out.push(acc / T::count((y1 - y0) * (x1 - x0)));
            }
        }
    }
    FieldGrid::from_parts(c_n, out_h, out_w, out)
}

/// Transpose of [`avg_pool`]: spreads each pooled gradient over its window.
pub fn avg_pool_adjoint<T: Scalar>(grad_out: &FieldGrid<T>, in_h: usize, in_w: usize) -> FieldGrid<T> {
    let (c_n, out_h, out_w) = grad_out.shape();
    let mut out = FieldGrid::zeros(c_n, in_h, in_w);
    for c in 0..c_n {
        for oy in 0..out_h {
            let (y0, y1) = pool_window(oy, in_h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = pool_window(ox, in_w, out_w);
                let g = grad_out.get(c, oy, ox) / T::count((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    for x in x0..x1 {
                        let i = out.idx(c, y, x);
                        out.values[i] += g;
                    }
                }
            }
        }
    }
    out
}

/// Half-pixel-centre sample taps along one axis: `(lo, hi, weight_hi)`.
pub(crate) fn bilinear_taps<T: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    (0..n_out)
        .map(|i| {
            if n_in == n_out {
                return (i, i, T::zero());
            }
            let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, T::lit(frac))
        })
        .collect()
}

/// Bilinear resampling with half-pixel centres and border clamping.
pub fn bilinear_resize<T: Scalar>(field: &FieldGrid<T>, out_h: usize, out_w: usize) -> FieldGrid<T> {
    assert!(out_h > 0 && out_w > 0);
    let (c_n, h, w) = field.shape();
    if (h, w) == (out_h, out_w) {
        return field.clone();
    }
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let mut out = Vec::with_capacity(c_n * out_h * out_w);
    for c in 0..c_n {
        let src = field.channel(c);
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    FieldGrid::from_parts(c_n, out_h, out_w, out)
}

/// Transpose of [`bilinear_resize`].
pub fn bilinear_resize_adjoint<T: Scalar>(grad_out: &FieldGrid<T>, in_h: usize, in_w: usize) -> FieldGrid<T> {
    let (c_n, out_h, out_w) = grad_out.shape();
    if (in_h, in_w) == (out_h, out_w) {
        return grad_out.clone();
    }
    let ty = bilinear_taps::<T>(in_h, out_h);
    let tx = bilinear_taps::<T>(in_w, out_w);
    let mut out = FieldGrid::zeros(c_n, in_h, in_w);
    let p = in_h * in_w;
    for c in 0..c_n {
        let g = grad_out.channel(c);
        let dst = &mut out.values[c * p..(c + 1) * p];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                dst[y0 * in_w + x0] += top * (T::one() - fx);
                dst[y0 * in_w + x1] += top * fx;
                dst[y1 * in_w + x0] += bot * (T::one() - fx);
                dst[y1 * in_w + x1] += bot * fx;
            }
        }
    }
    out
}

pub fn spatial_mean<T: Scalar>(field: &FieldGrid<T>) -> ChannelVector<T> {
    let inv = T::one() / T::count(field.plane());
    ChannelVector::new((0..field.channels()).map(|c| field.channel(c).iter().copied().sum::<T>() * inv).collect())
}

/// Repeats a channel vector over an `h x w` plane.
pub fn broadcast<T: Scalar>(v: &ChannelVector<T>, h: usize, w: usize) -> FieldGrid<T> {
    FieldGrid::from_fn(v.dim(), h, w, |c, _, _| v.values[c])
}

/// Forward differences along x and y; the trailing column (row) is zero.
pub fn finite_diff_grads<T: Scalar>(image: &FieldGrid<T>) -> (FieldGrid<T>, FieldGrid<T>) {
    let (c_n, h, w) = image.shape();
    assert!(h >= 2 && w >= 2, "finite differences need at least 2x2");
    let mut gx = FieldGrid::zeros(c_n, h, w);
    let mut gy = FieldGrid::zeros(c_n, h, w);
    for c in 0..c_n {
        for y in 0..h {
            for x in 0..w {
                let v = image.get(c, y, x);
                if x + 1 < w {
                    gx.set(c, y, x, image.get(c, y, x + 1) - v);
                }
                if y + 1 < h {
                    gy.set(c, y, x, image.get(c, y + 1, x) - v);
                }
            }
        }
    }
    (gx, gy)
}

/// Sum of squares over every entry.
pub fn energy<T: Scalar>(field: &FieldGrid<T>) -> T {
    field.values().iter().map(|&v| v * v).sum()
}

/// 3x3 box mean with replicate padding.
pub fn box_smooth3<T: Scalar>(field: &FieldGrid<T>) -> FieldGrid<T> {
    let (c_n, h, w) = field.shape();
    let ninth = T::one() / T::lit(9.0);
    FieldGrid::from_fn(c_n, h, w, |c, y, x| {
        let mut acc = T::zero();
        for dy in -1isize..=1 {
            let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            for dx in -1isize..=1 {
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                acc += field.get(c, yy, xx);
            }
        }
        acc * ninth
    })
}

/// Unnormalized 2D DFT of one `h x w` plane, returned as (re, im).
pub fn dft2<T: Scalar>(plane: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let (cos_w, sin_w) = twiddles::<T>(w);
    let (cos_h, sin_h) = twiddles::<T>(h);
    // rows first
    let mut re1 = vec![T::zero(); h * w];
    let mut im1 = vec![T::zero(); h * w];
    for y in 0..h {
        for kx in 0..w {
            let mut sr = T::zero();
            let mut si = T::zero();
            for x in 0..w {
                let t = (kx * x) % w;
                let v = plane[y * w + x];
                sr += v * cos_w[t];
                si -= v * sin_w[t];
            }
            re1[y * w + kx] = sr;
            im1[y * w + kx] = si;
        }
    }
    let mut re = vec![T::zero(); h * w];
    let mut im = vec![T::zero(); h * w];
    for ky in 0..h {
        for kx in 0..w {
            let mut sr = T::zero();
            let mut si = T::zero();
            for y in 0..h {
                let t = (ky * y) % h;
                let (a, b) = (re1[y * w + kx], im1[y * w + kx]);
                let (c, s) = (cos_h[t], sin_h[t]);
                // (a + ib)(c - is)
                sr += a * c + b * s;
                si += b * c - a * s;
            }
            re[ky * w + kx] = sr;
            im[ky * w + kx] = si;
        }
    }
    (re, im)
}

fn twiddles<T: Scalar>(n: usize) -> (Vec<T>, Vec<T>) {
    (0..n)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            (T::lit(a.cos()), T::lit(a.sin()))
        })
        .unzip()
}

/// Signed frequency of DFT bin `k` on an axis of length `n`.
#[inline]
pub(crate) fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Squared DFT magnitude inside and outside the centred disc of radius
/// `radius_fraction * min(H, W) / 2`, summed over channels.
pub fn spectral_split<T: Scalar>(field: &FieldGrid<T>, radius_fraction: T) -> (T, T) {
    assert!(radius_fraction > T::zero() && radius_fraction < T::one());
    let (c_n, h, w) = field.shape();
    let radius = radius_fraction.to_f64_lossy() * h.min(w) as f64 / 2.0;
    let mut low = T::zero();
    let mut high = T::zero();
    for c in 0..c_n {
        let (re, im) = dft2(field.channel(c), h, w);
        for ky in 0..h {
            let fy = signed_freq(ky, h);
            for kx in 0..w {
                let fx = signed_freq(kx, w);
                let i = ky * w + kx;
                let p = re[i] * re[i] + im[i] * im[i];
                if (fy * fy + fx * fx).sqrt() <= radius {
                    low += p;
                } else {
                    high += p;
                }
            }
        }
    }
    (low, high)
}
