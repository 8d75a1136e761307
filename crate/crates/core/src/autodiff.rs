//! Reverse-mode differentiation over whole fields.
//!
//! Every node holds a [`FieldGrid`] value; vectors and scalars are stored as
//! `n x 1 x 1` grids. Parameters are leaves registered with [`Tape::param`] and
//! their gradients are returned in registration order.

use crate::codec::{conv2d, conv2d_backward, group_norm_input_grad, group_norm_stats, Conv2d};
use crate::error::{FluidError, Result};
use crate::field::{
    avg_pool, avg_pool_adjoint, bilinear_resize, bilinear_resize_adjoint, dft2, finite_diff_grads, laplacian,
    FieldGrid,
};
use crate::matrix::{channel_matmul, Matrix};
use crate::scalar::{gelu, gelu_grad, sigmoid, softplus, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Sigmoid,
    Tanh,
    Softplus,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    ChannelScale(Var, Var),
    MulConst(Var, FieldGrid<T>),
    Slice(Var, usize),
    Reshape(Var),
    Laplacian(Var, usize),
    Matmul { x: Var, w: Var, b: Option<Var>, rows: usize, cols: usize },
    Conv { x: Var, w: Var, b: Option<Var>, out_ch: usize, kernel: usize },
    Unary(Var, Unary),
    ExpClamp { x: Var, active: bool },
    SpatialMean(Var),
    Broadcast(Var),
    AvgPool(Var),
    Resize(Var),
    RmsNorm { x: Var, gains: Var, eps: T },
    GroupNorm { x: Var, gamma: Var, beta: Var, xhat: FieldGrid<T>, inv_std: Vec<T> },
    Inhibition { x: Var, beta: T, min_factor: T },
    SigmoidMse { logits: Var, target: FieldGrid<T> },
    VarianceHinge { x: Var, sigma: T },
    GradL1 { x: Var, target: FieldGrid<T> },
    SobelL1 { x: Var, target: FieldGrid<T> },
    SpectralL1 { x: Var, target: FieldGrid<T> },
}

struct Node<T> {
    value: FieldGrid<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, String)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn column<T: Scalar>(values: Vec<T>) -> FieldGrid<T> {
    let n = values.len();
    FieldGrid::from_parts(n, 1, 1, values)
}

fn scalar_grid<T: Scalar>(v: T) -> FieldGrid<T> {
    FieldGrid::from_parts(1, 1, 1, vec![v])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: FieldGrid<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &FieldGrid<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.values()[0]
    }

    /// A leaf that receives no gradient report.
    pub fn constant(&mut self, value: FieldGrid<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable leaf holding `values` as an `n x 1 x 1` grid.
    pub fn param(&mut self, name: impl Into<String>, values: &[T]) -> Var {
        let v = self.push(column(values.to_vec()), Op::Leaf);
        self.params.push((v, name.into()));
        v
    }

    pub fn params(&self) -> impl Iterator<Item = (Var, &str)> {
        self.params.iter().map(|(v, n)| (*v, n.as_str()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// `a * s` with `s` a one-element node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a).scale(self.scalar(s));
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn channel_scale(&mut self, a: Var, scales: Var) -> Var {
        let v = self.value(a).scale_channels(self.value(scales).values());
        self.push(v, Op::ChannelScale(a, scales))
    }

    pub fn mul_const(&mut self, a: Var, c: FieldGrid<T>) -> Var {
        let v = self.value(a).mul(&c);
        self.push(v, Op::MulConst(a, c))
    }

    /// Per-channel constant scaling.
    pub fn channel_scale_const(&mut self, a: Var, scales: &[T]) -> Var {
        let (c, h, w) = self.value(a).shape();
        let grid = FieldGrid::from_fn(c, h, w, |ch, _, _| scales[ch]);
        self.mul_const(a, grid)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = column(self.value(a).values()[start..start + len].to_vec());
        self.push(v, Op::Slice(a, start))
    }

    /// Same values under a new shape.
    pub fn reshape(&mut self, a: Var, c: usize, h: usize, w: usize) -> Var {
        let v = FieldGrid::from_parts(c, h, w, self.value(a).values().to_vec());
        self.push(v, Op::Reshape(a))
    }

    pub fn laplacian(&mut self, a: Var, dilation: usize) -> Var {
        let v = laplacian(self.value(a), dilation);
        self.push(v, Op::Laplacian(a, dilation))
    }

    /// Per-position channel mixing by the `rows x cols` matrix stored in `w`.
    pub fn matmul(&mut self, x: Var, w: Var, b: Option<Var>, rows: usize, cols: usize) -> Var {
        let m = Matrix::from_vec(rows, cols, self.value(w).values().to_vec());
        let bias = b.map(|b| self.value(b).values().to_vec());
        let v = channel_matmul(self.value(x), &m, bias.as_deref());
        self.push(v, Op::Matmul { x, w, b, rows, cols })
    }

    fn conv_from(&self, w: Var, b: Option<Var>, out_ch: usize, in_ch: usize, kernel: usize) -> Conv2d<T> {
        Conv2d {
            out_ch,
            in_ch,
            kernel,
            weights: self.value(w).values().to_vec(),
            bias: b.map(|b| self.value(b).values().to_vec()),
        }
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, out_ch: usize, kernel: usize) -> Var {
        let in_ch = self.value(x).channels();
        let conv = self.conv_from(w, b, out_ch, in_ch, kernel);
        let v = conv2d(self.value(x), &conv);
        self.push(v, Op::Conv { x, w, b, out_ch, kernel })
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Gelu => gelu,
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => |x: T| x.tanh(),
            Unary::Softplus => softplus,
        };
        let v = self.value(a).map(f);
        self.push(v, Op::Unary(a, kind))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    /// `exp(x)` clamped to `[lo, hi]`, zero gradient outside.
    pub fn exp_clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let (v, active) = crate::scalar::exp_clamped(self.scalar(x), lo, hi);
        self.push(scalar_grid(v), Op::ExpClamp { x, active })
    }

    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let v = column(crate::field::spatial_mean(self.value(a)).values);
        self.push(v, Op::SpatialMean(a))
    }

    pub fn broadcast(&mut self, a: Var, h: usize, w: usize) -> Var {
        let src = self.value(a);
        let v = FieldGrid::from_fn(src.channels(), h, w, |c, _, _| src.values()[c]);
        self.push(v, Op::Broadcast(a))
    }

    pub fn avg_pool(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = avg_pool(self.value(a), h, w);
        self.push(v, Op::AvgPool(a))
    }

    pub fn resize(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = bilinear_resize(self.value(a), h, w);
        self.push(v, Op::Resize(a))
    }

    pub fn rms_norm(&mut self, x: Var, gains: Var, eps: T) -> Var {
        let g = crate::field::ChannelVector::new(self.value(gains).values().to_vec());
        let v = crate::field::rms_norm(self.value(x), &g, eps);
        self.push(v, Op::RmsNorm { x, gains, eps })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (xhat, inv_std) = group_norm_stats(self.value(x), groups);
        let v = crate::codec::affine_channels(&xhat, self.value(gamma).values(), self.value(beta).values());
        self.push(v, Op::GroupNorm { x, gamma, beta, xhat, inv_std })
    }

    pub fn lateral_inhibition(&mut self, x: Var, beta: T, min_factor: T) -> Var {
        let v = crate::bio::lateral_inhibition(self.value(x), beta, min_factor);
        self.push(v, Op::Inhibition { x, beta, min_factor })
    }

    /// `mean((sigmoid(logits) - target)^2)`.
    pub fn sigmoid_mse(&mut self, logits: Var, target: &FieldGrid<T>) -> Var {
        let v = sigmoid_mse(self.value(logits), target);
        self.push(scalar_grid(v), Op::SigmoidMse { logits, target: target.clone() })
    }

    pub fn variance_hinge(&mut self, x: Var, sigma: T) -> Var {
        let v = variance_loss(self.value(x), sigma);
        self.push(scalar_grid(v), Op::VarianceHinge { x, sigma })
    }

    pub fn grad_l1(&mut self, x: Var, target: &FieldGrid<T>) -> Var {
        let v = gradient_loss(self.value(x), target);
        self.push(scalar_grid(v), Op::GradL1 { x, target: target.clone() })
    }

    pub fn sobel_l1(&mut self, x: Var, target: &FieldGrid<T>) -> Var {
        let v = sobel_loss(self.value(x), target);
        self.push(scalar_grid(v), Op::SobelL1 { x, target: target.clone() })
    }

    pub fn spectral_l1(&mut self, x: Var, target: &FieldGrid<T>) -> Var {
        let v = spectral_loss(self.value(x), target);
        self.push(scalar_grid(v), Op::SpectralL1 { x, target: target.clone() })
    }

    /// Gradients of the scalar `loss` w.r.t. every node that influences it.
    pub fn backward(&self, loss: Var) -> Vec<Option<FieldGrid<T>>> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<FieldGrid<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(scalar_grid(T::one()));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        grads
    }

    /// Parameter gradients concatenated in registration order.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<T>> {
        let grads = self.backward(loss);
        let mut flat = Vec::new();
        for (v, name) in &self.params {
            let n = self.value(*v).len();
            match &grads[v.0] {
                Some(g) => {
                    if let Some(k) = g.values().iter().position(|x| !x.is_finite()) {
                        return Err(FluidError::NanGradient { index: flat.len() + k, name: name.clone() });
                    }
                    flat.extend_from_slice(g.values());
                }
                None => flat.extend(std::iter::repeat_n(T::zero(), n)),
            }
        }
        Ok(flat)
    }

    fn backward_node(&self, i: usize, g: &FieldGrid<T>, grads: &mut [Option<FieldGrid<T>>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(val(*b)));
                accumulate(grads, *b, g.mul(val(*a)));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::MulScalar(a, s) => {
                let sv = val(*s).values()[0];
                let ds: T = g.values().iter().zip(val(*a).values()).map(|(&x, &y)| x * y).sum();
                accumulate(grads, *a, g.scale(sv));
                accumulate(grads, *s, scalar_grid(ds));
            }
            Op::ChannelScale(a, s) => {
                let scales = val(*s).values();
                accumulate(grads, *a, g.scale_channels(scales));
                let prod = g.mul(val(*a));
                accumulate(grads, *s, column(prod.channel_sums()));
            }
            Op::MulConst(a, c) => accumulate(grads, *a, g.mul(c)),
            Op::Slice(a, start) => {
                let mut full = vec![T::zero(); val(*a).len()];
                full[*start..*start + g.len()].copy_from_slice(g.values());
                let (c, h, w) = val(*a).shape();
                accumulate(grads, *a, FieldGrid::from_parts(c, h, w, full));
            }
            Op::Reshape(a) => {
                let (c, h, w) = val(*a).shape();
                accumulate(grads, *a, FieldGrid::from_parts(c, h, w, g.values().to_vec()));
            }
            Op::Laplacian(a, dil) => accumulate(grads, *a, laplacian(g, *dil)),
            Op::Matmul { x, w, b, rows, cols } => {
                let m = Matrix::from_vec(*rows, *cols, val(*w).values().to_vec());
                accumulate(grads, *x, channel_matmul(g, &m.transpose(), None));
                let xv = val(*x);
                let mut gw = vec![T::zero(); rows * cols];
                for o in 0..*rows {
                    let go = g.channel(o);
                    for c in 0..*cols {
                        gw[o * cols + c] = go.iter().zip(xv.channel(c)).map(|(&p, &q)| p * q).sum();
                    }
                }
                accumulate(grads, *w, column(gw));
                if let Some(b) = b {
                    accumulate(grads, *b, column(g.channel_sums()));
                }
            }
            Op::Conv { x, w, b, out_ch, kernel } => {
                let conv = self.conv_from(*w, *b, *out_ch, val(*x).channels(), *kernel);
                let (gx, gw, gb) = conv2d_backward(val(*x), &conv, g);
                accumulate(grads, *x, gx);
                accumulate(grads, *w, column(gw));
                if let (Some(b), Some(gb)) = (b, gb) {
                    accumulate(grads, *b, column(gb));
                }
            }
            Op::Unary(a, kind) => {
                let d = match kind {
                    Unary::Gelu => val(*a).map(gelu_grad),
                    Unary::Sigmoid => out.map(|y| y * (T::one() - y)),
                    Unary::Tanh => out.map(|y| T::one() - y * y),
                    Unary::Softplus => val(*a).map(sigmoid),
                };
                accumulate(grads, *a, g.mul(&d));
            }
            Op::ExpClamp { x, active } => {
                let d = if *active { out.values()[0] * g.values()[0] } else { T::zero() };
                accumulate(grads, *x, scalar_grid(d));
            }
            Op::SpatialMean(a) => {
                let (c, h, w) = val(*a).shape();
                let inv = T::one() / T::count(h * w);
                accumulate(grads, *a, FieldGrid::from_fn(c, h, w, |ch, _, _| g.values()[ch] * inv));
            }
            Op::Broadcast(a) => accumulate(grads, *a, column(g.channel_sums())),
            Op::AvgPool(a) => {
                let (_, h, w) = val(*a).shape();
                accumulate(grads, *a, avg_pool_adjoint(g, h, w));
            }
            Op::Resize(a) => {
                let (_, h, w) = val(*a).shape();
                accumulate(grads, *a, bilinear_resize_adjoint(g, h, w));
            }
            Op::RmsNorm { x, gains, eps } => {
                let (gx, gg) = rms_norm_backward(val(*x), val(*gains).values(), *eps, g);
                accumulate(grads, *x, gx);
                accumulate(grads, *gains, column(gg));
            }
            Op::GroupNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = val(*gamma).values();
                let ggamma = column(g.mul(xhat).channel_sums());
                let gbeta = column(g.channel_sums());
                let gxhat = g.scale_channels(gam);
                accumulate(grads, *x, group_norm_input_grad(xhat, inv_std, &gxhat));
                accumulate(grads, *gamma, ggamma);
                accumulate(grads, *beta, gbeta);
            }
            Op::Inhibition { x, beta, min_factor } => {
                accumulate(grads, *x, inhibition_backward(val(*x), *beta, *min_factor, g));
            }
            Op::SigmoidMse { logits, target } => {
                let s = g.values()[0] * T::lit(2.0) / T::count(target.len());
                let d = val(*logits).zip_map(target, |l, t| {
                    let y = sigmoid(l);
                    s * (y - t) * y * (T::one() - y)
                });
                accumulate(grads, *logits, d);
            }
            Op::VarianceHinge { x, sigma } => {
                accumulate(grads, *x, variance_loss_grad(val(*x), *sigma).scale(g.values()[0]));
            }
            Op::GradL1 { x, target } => {
                accumulate(grads, *x, gradient_loss_grad(val(*x), target).scale(g.values()[0]));
            }
            Op::SobelL1 { x, target } => {
                accumulate(grads, *x, sobel_loss_grad(val(*x), target).scale(g.values()[0]));
            }
            Op::SpectralL1 { x, target } => {
                accumulate(grads, *x, spectral_loss_grad(val(*x), target).scale(g.values()[0]));
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<FieldGrid<T>>], v: Var, g: FieldGrid<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn rms_norm_backward<T: Scalar>(x: &FieldGrid<T>, gains: &[T], eps: T, g: &FieldGrid<T>) -> (FieldGrid<T>, Vec<T>) {
    let (c_n, h, w) = x.shape();
    let p = h * w;
    let inv_c = T::one() / T::count(c_n);
    let xv = x.values();
    let gv = g.values();
    let mut gx = vec![T::zero(); xv.len()];
    let mut gg = vec![T::zero(); c_n];
    for pos in 0..p {
        let ms: T = (0..c_n).map(|c| xv[c * p + pos] * xv[c * p + pos]).sum::<T>() * inv_c;
        let r = T::one() / (ms + eps).sqrt();
        let dot: T = (0..c_n).map(|c| gv[c * p + pos] * gains[c] * xv[c * p + pos]).sum();
        let k = r * r * r * inv_c * dot;
        for c in 0..c_n {
            let i = c * p + pos;
            gg[c] += gv[i] * xv[i] * r;
            gx[i] = gains[c] * r * gv[i] - xv[i] * k;
        }
    }
    (FieldGrid::from_parts(c_n, h, w, gx), gg)
}

fn inhibition_backward<T: Scalar>(x: &FieldGrid<T>, beta: T, min_factor: T, g: &FieldGrid<T>) -> FieldGrid<T> {
    let (c_n, h, w) = x.shape();
    let p = h * w;
    let xv = x.values();
    let gv = g.values();
    let eps = T::lit(crate::bio::INHIBITION_EPS);
    let mut out = vec![T::zero(); xv.len()];
    for pos in 0..p {
        let mut arg = 0;
        let mut max = T::zero();
        for c in 0..c_n {
            let a = xv[c * p + pos].abs();
            if a > max {
                max = a;
                arg = c;
            }
        }
        let denom = max + eps;
        let mut to_max = T::zero();
        for c in 0..c_n {
            let i = c * p + pos;
            let z = xv[i];
            let raw = T::one() - beta * (T::one() - z.abs() / denom);
            if raw > min_factor {
                let sign = z.signum();
                out[i] += gv[i] * (raw + z * beta * sign / denom);
                to_max -= gv[i] * z * beta * z.abs() / (denom * denom);
            } else {
                out[i] += gv[i] * min_factor;
            }
        }
        if max > T::zero() {
            out[arg * p + pos] += to_max * xv[arg * p + pos].signum();
        }
    }
    FieldGrid::from_parts(c_n, h, w, out)
}

pub fn sigmoid_mse<T: Scalar>(logits: &FieldGrid<T>, target: &FieldGrid<T>) -> T {
    assert!(logits.same_shape(target));
    let s: T = logits.values().iter().zip(target.values()).map(|(&l, &t)| (sigmoid(l) - t) * (sigmoid(l) - t)).sum();
    s / T::count(target.len())
}

pub fn mse<T: Scalar>(a: &FieldGrid<T>, b: &FieldGrid<T>) -> T {
    assert!(a.same_shape(b));
    a.values().iter().zip(b.values()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / T::count(a.len())
}

fn channel_std<T: Scalar>(ch: &[T]) -> (T, T) {
    let n = T::count(ch.len());
    let mean = ch.iter().copied().sum::<T>() / n;
    let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

/// `(1/d) sum_c max(0, sigma - std(z_c))` with population std over positions.
pub fn variance_loss<T: Scalar>(z: &FieldGrid<T>, sigma: T) -> T {
    let d = z.channels();
    (0..d).map(|c| (sigma - channel_std(z.channel(c)).1).max(T::zero())).sum::<T>() / T::count(d)
}

fn variance_loss_grad<T: Scalar>(z: &FieldGrid<T>, sigma: T) -> FieldGrid<T> {
    let d = z.channels();
    let n = T::count(z.plane());
    let mut out = FieldGrid::zeros(z.channels(), z.height(), z.width());
    for c in 0..d {
        let (mean, std) = channel_std(z.channel(c));
        if std >= sigma || std <= T::zero() {
            continue;
        }
        let k = -T::one() / (T::count(d) * n * std);
        for (o, &v) in out.channel_mut(c).iter_mut().zip(z.channel(c)) {
            *o = k * (v - mean);
        }
    }
    out
}

/// Mean over entries of `|dx(a) - dx(b)| + |dy(a) - dy(b)|`.
pub fn gradient_loss<T: Scalar>(pred: &FieldGrid<T>, target: &FieldGrid<T>) -> T {
    assert!(pred.same_shape(target));
    let (px, py) = finite_diff_grads(pred);
    let (tx, ty) = finite_diff_grads(target);
    let s: T = px.values().iter().zip(tx.values()).map(|(&a, &b)| (a - b).abs()).sum::<T>()
        + py.values().iter().zip(ty.values()).map(|(&a, &b)| (a - b).abs()).sum::<T>();
    s / T::count(pred.len())
}

fn gradient_loss_grad<T: Scalar>(pred: &FieldGrid<T>, target: &FieldGrid<T>) -> FieldGrid<T> {
    let (c_n, h, w) = pred.shape();
    let (px, py) = finite_diff_grads(pred);
    let (tx, ty) = finite_diff_grads(target);
    let inv = T::one() / T::count(pred.len());
    let mut out = FieldGrid::zeros(c_n, h, w);
    for c in 0..c_n {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    let s = (px.get(c, y, x) - tx.get(c, y, x)).signum() * inv;
                    let s = if px.get(c, y, x) == tx.get(c, y, x) { T::zero() } else { s };
                    out.set(c, y, x + 1, out.get(c, y, x + 1) + s);
                    out.set(c, y, x, out.get(c, y, x) - s);
                }
                if y + 1 < h {
                    let s = (py.get(c, y, x) - ty.get(c, y, x)).signum() * inv;
                    let s = if py.get(c, y, x) == ty.get(c, y, x) { T::zero() } else { s };
                    out.set(c, y + 1, x, out.get(c, y + 1, x) + s);
                    out.set(c, y, x, out.get(c, y, x) - s);
                }
            }
        }
    }
    out
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

fn sobel_kernel<T: Scalar>(k: &[f64; 9]) -> Conv2d<T> {
    Conv2d { out_ch: 1, in_ch: 1, kernel: 3, weights: k.iter().map(|&v| T::lit(v)).collect(), bias: None }
}

fn plane_grid<T: Scalar>(f: &FieldGrid<T>, c: usize) -> FieldGrid<T> {
    FieldGrid::from_parts(1, f.height(), f.width(), f.channel(c).to_vec())
}

/// Sobel responses (replicate border) per channel.
pub fn sobel<T: Scalar>(f: &FieldGrid<T>) -> (FieldGrid<T>, FieldGrid<T>) {
    let (kx, ky) = (sobel_kernel::<T>(&SOBEL_X), sobel_kernel::<T>(&SOBEL_Y));
    let (c_n, h, w) = f.shape();
    let mut gx = Vec::with_capacity(f.len());
    let mut gy = Vec::with_capacity(f.len());
    for c in 0..c_n {
        let p = plane_grid(f, c);
        gx.extend_from_slice(conv2d(&p, &kx).values());
        gy.extend_from_slice(conv2d(&p, &ky).values());
    }
    (FieldGrid::from_parts(c_n, h, w, gx), FieldGrid::from_parts(c_n, h, w, gy))
}

/// Mean over entries of the L1 difference of both Sobel responses.
pub fn sobel_loss<T: Scalar>(pred: &FieldGrid<T>, target: &FieldGrid<T>) -> T {
    let (px, py) = sobel(pred);
    let (tx, ty) = sobel(target);
    let s: T = px.values().iter().zip(tx.values()).map(|(&a, &b)| (a - b).abs()).sum::<T>()
        + py.values().iter().zip(ty.values()).map(|(&a, &b)| (a - b).abs()).sum::<T>();
    s / T::count(pred.len())
}

fn sign_or_zero<T: Scalar>(v: T) -> T {
    if v == T::zero() {
        T::zero()
    } else {
        v.signum()
    }
}

fn sobel_loss_grad<T: Scalar>(pred: &FieldGrid<T>, target: &FieldGrid<T>) -> FieldGrid<T> {
    let (kx, ky) = (sobel_kernel::<T>(&SOBEL_X), sobel_kernel::<T>(&SOBEL_Y));
    let (px, py) = sobel(pred);
    let (tx, ty) = sobel(target);
    let inv = T::one() / T::count(pred.len());
    let sx = px.zip_map(&tx, |a, b| sign_or_zero(a - b) * inv);
    let sy = py.zip_map(&ty, |a, b| sign_or_zero(a - b) * inv);
    let (c_n, h, w) = pred.shape();
    let mut out = Vec::with_capacity(pred.len());
    for c in 0..c_n {
        let p = plane_grid(pred, c);
        let (gx, _, _) = conv2d_backward(&p, &kx, &plane_grid(&sx, c));
        let (gy, _, _) = conv2d_backward(&p, &ky, &plane_grid(&sy, c));
        out.extend_from_slice(gx.add(&gy).values());
    }
    FieldGrid::from_parts(c_n, h, w, out)
}

fn log_magnitudes<T: Scalar>(f: &FieldGrid<T>, c: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (re, im) = dft2(f.channel(c), f.height(), f.width());
    let mag: Vec<T> = re.iter().zip(&im).map(|(&a, &b)| (a * a + b * b).sqrt()).collect();
    (re, im, mag)
}

/// Mean over bins of `|log(1 + |F(pred)|) - log(1 + |F(target)|)|`, per channel.
pub fn spectral_loss<T: Scalar>(pred: &FieldGrid<T>, target: &FieldGrid<T>) -> T {
    assert!(pred.same_shape(target));
    let mut s = T::zero();
    for c in 0..pred.channels() {
        let (_, _, mp) = log_magnitudes(pred, c);
        let (_, _, mt) = log_magnitudes(target, c);
        s += mp.iter().zip(&mt).map(|(&a, &b)| (a.ln_1p() - b.ln_1p()).abs()).sum::<T>();
    }
    s / T::count(pred.len())
}

fn spectral_loss_grad<T: Scalar>(pred: &FieldGrid<T>, target: &FieldGrid<T>) -> FieldGrid<T> {
    let (c_n, h, w) = pred.shape();
    let inv = T::one() / T::count(pred.len());
    let two_pi = T::lit(2.0 * std::f64::consts::PI);
    let mut out = FieldGrid::zeros(c_n, h, w);
    for c in 0..c_n {
        let (re, im, mp) = log_magnitudes(pred, c);
        let (_, _, mt) = log_magnitudes(target, c);
        // dL/dRe, dL/dIm per bin
        let mut g_re = vec![T::zero(); h * w];
        let mut g_im = vec![T::zero(); h * w];
        for k in 0..h * w {
            if mp[k] <= T::zero() {
                continue;
            }
            let s = sign_or_zero(mp[k].ln_1p() - mt[k].ln_1p()) * inv / ((T::one() + mp[k]) * mp[k]);
            g_re[k] = s * re[k];
            g_im[k] = s * im[k];
        }
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for ky in 0..h {
                    for kx in 0..w {
                        let theta = two_pi
                            * (T::count((ky * y) % h) / T::count(h) + T::count((kx * x) % w) / T::count(w));
                        let k = ky * w + kx;
                        acc += g_re[k] * theta.cos() - g_im[k] * theta.sin();
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(c: usize, h: usize, w: usize, seed: u64) -> FieldGrid<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        FieldGrid::from_fn(c, h, w, |_, _, _| r.random_range(-1.0..1.0))
    }

    /// Checks d(loss)/d(input) of a one-input graph against central differences.
    fn check_unary_graph(x0: &FieldGrid<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.param("x", x0.values());
        let loss = build(&mut tape, x);
        let g = tape.param_grads(loss).unwrap();
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut v = x0.values().to_vec();
                v[i] += delta;
                let mut t = Tape::new();
                let x = t.param("x", &v);
                let l = build(&mut t, x);
                t.scalar(l)
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (g[i] - num).abs() / g[i].abs().max(1e-8);
            assert!(err < tol || (g[i] - num).abs() < 1e-9, "index {i}: analytic {} numeric {num}", g[i]);
        }
    }

    fn shaped(t: &mut Tape<f64>, x: Var, c: usize, h: usize, w: usize) -> Var {
        t.reshape(x, c, h, w)
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", &[3.0]);
        let y = tape.mul(x, x);
        assert_eq!(tape.param_grads(y).unwrap(), vec![6.0]);
    }

    #[test]
    fn elementwise_and_reduction_ops() {
        let x0 = random_field(1, 1, 24, 1);
        check_unary_graph(
            &x0,
            |t, x| {
                let a = t.gelu(x);
                let b = t.tanh(a);
                let c = t.softplus(b);
                let d = t.sigmoid(c);
                let e = t.mul(d, x);
                let f = t.scale(e, 0.7);
                t.variance_hinge(f, 2.0)
            },
            1e-6,
        );
    }

    #[test]
    fn spatial_ops() {
        let x0 = random_field(8, 6, 6, 2);
        check_unary_graph(
            &x0,
            |t, x| {
                let f = shaped(t, x, 8, 6, 6);
                let l = t.laplacian(f, 1);
                let l4 = t.laplacian(f, 4);
                let s = t.add(l, l4);
                let p = t.avg_pool(s, 4, 4);
                let r = t.resize(p, 6, 6);
                let m = t.spatial_mean(r);
                let b = t.broadcast(m, 6, 6);
                let q = t.mul(b, f);
                let gains = t.constant(FieldGrid::from_fn(8, 1, 1, |c, _, _| 0.5 + 0.1 * c as f64));
                let n = t.rms_norm(q, gains, 1e-6);
                let gn_g = t.constant(FieldGrid::filled(8, 1, 1, 1.3));
                let gn_b = t.constant(FieldGrid::filled(8, 1, 1, 0.1));
                let gn = t.group_norm(n, gn_g, gn_b, 4);
                let i = t.lateral_inhibition(gn, 0.3, 0.2);
                let sg = t.sigmoid(i);
                let target = FieldGrid::filled(8, 6, 6, 0.4);
                let a = t.grad_l1(sg, &target);
                let b2 = t.sobel_l1(sg, &target);
                let c = t.spectral_l1(sg, &target);
                let d = t.sigmoid_mse(i, &target);
                let ab = t.add(a, b2);
                let cd = t.add(c, d);
                t.add(ab, cd)
            },
            1e-5,
        );
    }

    #[test]
    fn parameterized_ops() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x0 = random_field(3, 5, 5, 4);
        let w_mat: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let w_conv: Vec<f64> = (0..2 * 2 * 9).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut all = x0.values().to_vec();
        all.extend(&w_mat);
        all.extend(&w_conv);
        all.extend([0.3, -0.2, 0.1, -1.2]);
        let all = FieldGrid::from_vec(all.len(), 1, 1, all).unwrap();
        check_unary_graph(
            &all,
            |t, p| {
                let x = t.slice(p, 0, 75);
                let x = t.reshape(x, 3, 5, 5);
                let w = t.slice(p, 75, 6);
                let cw = t.slice(p, 81, 36);
                let b = t.slice(p, 117, 2);
                let s = t.slice(p, 119, 1);
                let dt = t.slice(p, 120, 1);
                let m = t.matmul(x, w, Some(b), 2, 3);
                let c = t.conv(m, cw, Some(b), 2, 3);
                let cs = t.channel_scale(c, b);
                let e = t.exp_clamp(dt, 0.005, 0.35);
                let q = t.mul_scalar(cs, s);
                let q = t.mul_scalar(q, e);
                let mc = t.mul_const(q, FieldGrid::filled(2, 5, 5, 1.5));
                let sub = t.sub(mc, m);
                let target = FieldGrid::filled(2, 5, 5, 0.5);
                t.sigmoid_mse(sub, &target)
            },
            1e-6,
        );
    }

    #[test]
    fn inhibition_clamped_entries_use_min_factor() {
        let x0 = FieldGrid::from_vec(3, 1, 1, vec![10.0, 0.5, -0.01]).unwrap();
        check_unary_graph(
            &x0,
            |t, x| {
                let f = t.reshape(x, 3, 1, 1);
                let i = t.lateral_inhibition(f, 0.95, 0.2);
                let sq = t.mul(i, i);
                t.variance_hinge(sq, 100.0)
            },
            1e-6,
        );
    }
}
