//! The full world model: codec plus belief field, as plain functions for
//! inference and as a recorded graph for training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::belief::{self, BeliefParams, BeliefState, GAMMA_MAX, GAMMA_MIN};
use crate::bio::{effective_diffusion, hebbian_update, BioConfig};
use crate::codec::{self, space_to_depth, CodecParams, Conv2d, DecoderParams, GroupNorm, ResBlock};
use crate::dynamics::{IntegrationConfig, LayerParams, StopCriterion, DILATIONS, DT_MAX, DT_MIN, LOCAL_MEMORY_RES, RMS_EPS};
use crate::error::{FluidError, Result};
use crate::field::{spatial_mean, FieldGrid};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::training::loss::{total_loss_tape, LossTerms, LossWeights};

/// Architecture and integration settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub latent_dim: usize,
    pub patch_size: usize,
    pub encoder_layers: usize,
    pub encoder_steps: usize,
    pub belief_steps: usize,
    pub decoder_mid: usize,
    pub dt_init: f64,
    pub gamma_init: f64,
    pub stop: StopCriterion,
    /// Early stopping outside training.
    pub adaptive_inference: bool,
    pub normalize: bool,
    pub bio: BioConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            latent_dim: 128,
            patch_size: 4,
            encoder_layers: 3,
            encoder_steps: 6,
            belief_steps: 3,
            decoder_mid: 64,
            dt_init: 0.1,
            gamma_init: 0.95,
            stop: StopCriterion::default(),
            adaptive_inference: true,
            normalize: true,
            bio: BioConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small model for single-machine runs: d = 16, decoder width 16.
    pub fn desk() -> Self {
        Self { latent_dim: 16, decoder_mid: 16, ..Self::default() }
    }

    /// The gradient-check model: d = 8.
    pub fn tiny() -> Self {
        Self { latent_dim: 8, decoder_mid: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FluidError::Config(m.to_string()));
        if self.in_channels == 0 || self.latent_dim == 0 || self.patch_size == 0 {
            return bad("in_channels, latent_dim and patch_size must be positive");
        }
        if self.decoder_mid == 0 || self.decoder_mid % (2 * codec::GROUP_NORM_GROUPS) != 0 {
            return bad("decoder_mid must be a positive multiple of 16");
        }
        if !(DT_MIN..=DT_MAX).contains(&self.dt_init) {
            return bad("dt_init must lie in [0.005, 0.35]");
        }
        if !(GAMMA_MIN..=GAMMA_MAX).contains(&self.gamma_init) {
            return bad("gamma_init must lie in [0.5, 0.99]");
        }
        if self.stop.epsilon <= 0.0 || self.stop.probe_h == 0 || self.stop.probe_w == 0 {
            return bad("stop criterion needs positive epsilon and probe size");
        }
        Ok(())
    }

    pub fn encoder_integration(&self, training: bool) -> IntegrationConfig {
        IntegrationConfig {
            max_steps: self.encoder_steps,
            stop: self.stop,
            adaptive: self.adaptive_inference && !training,
            normalize: self.normalize,
        }
    }

    pub fn belief_integration(&self, training: bool) -> IntegrationConfig {
        IntegrationConfig { max_steps: self.belief_steps, ..self.encoder_integration(training) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub codec: CodecParams<T>,
    pub belief: BeliefParams<T>,
}

fn layer_tensors<'a, T>(p: &'a mut LayerParams<T>, pre: &str, out: &mut Vec<(String, &'a mut [T])>) {
    out.push((format!("{pre}.diffusion_logits"), &mut p.diffusion_logits));
    out.push((format!("{pre}.reaction_w1"), &mut p.reaction_w1.data));
    out.push((format!("{pre}.reaction_b1"), &mut p.reaction_b1));
    out.push((format!("{pre}.reaction_w2"), &mut p.reaction_w2.data));
    out.push((format!("{pre}.reaction_b2"), &mut p.reaction_b2));
    out.push((format!("{pre}.gmem_gate"), &mut p.gmem_gate.data));
    out.push((format!("{pre}.gmem_val"), &mut p.gmem_val.data));
    out.push((format!("{pre}.lmem_gate"), &mut p.lmem_gate.data));
    out.push((format!("{pre}.lmem_val"), &mut p.lmem_val.data));
    out.push((format!("{pre}.alpha_g_logit"), std::slice::from_mut(&mut p.alpha_g_logit)));
    out.push((format!("{pre}.alpha_l_logit"), std::slice::from_mut(&mut p.alpha_l_logit)));
    out.push((format!("{pre}.dt_logit"), std::slice::from_mut(&mut p.dt_logit)));
    out.push((format!("{pre}.norm_gains"), &mut p.norm_gains));
}

fn conv_tensors<'a, T>(c: &'a mut Conv2d<T>, pre: &str, out: &mut Vec<(String, &'a mut [T])>) {
    out.push((format!("{pre}.weight"), &mut c.weights));
    if let Some(b) = c.bias.as_mut() {
        out.push((format!("{pre}.bias"), b));
    }
}

fn norm_tensors<'a, T>(n: &'a mut GroupNorm<T>, pre: &str, out: &mut Vec<(String, &'a mut [T])>) {
    out.push((format!("{pre}.gamma"), &mut n.gamma));
    out.push((format!("{pre}.beta"), &mut n.beta));
}

fn res_tensors<'a, T>(r: &'a mut ResBlock<T>, pre: &str, out: &mut Vec<(String, &'a mut [T])>) {
    conv_tensors(&mut r.conv_a, &format!("{pre}.conv_a"), out);
    norm_tensors(&mut r.norm_a, &format!("{pre}.norm_a"), out);
    conv_tensors(&mut r.conv_b, &format!("{pre}.conv_b"), out);
    norm_tensors(&mut r.norm_b, &format!("{pre}.norm_b"), out);
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codec = CodecParams::init(
            cfg.in_channels,
            cfg.latent_dim,
            cfg.patch_size,
            cfg.encoder_layers,
            cfg.decoder_mid,
            &mut rng,
        );
        let mut belief = BeliefParams::init(cfg.latent_dim, &mut rng);
        for layer in codec.encoder_layers.iter_mut().chain(std::iter::once(&mut belief.evolve)) {
            layer.set_dt(cfg.dt_init);
        }
        belief.gamma_logit = T::lit(cfg.gamma_init.ln());
        belief.n_evolve = cfg.belief_steps;
        Self { codec, belief }
    }

    /// Every learned tensor with its name, in the canonical flattening order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        let c = &mut self.codec;
        out.push(("codec.patch.weight".to_string(), &mut c.patch_weights.data[..]));
        out.push(("codec.patch.bias".to_string(), &mut c.patch_bias[..]));
        for (i, layer) in c.encoder_layers.iter_mut().enumerate() {
            layer_tensors(layer, &format!("codec.layer{i}"), &mut out);
        }
        let d = &mut c.decoder;
        conv_tensors(&mut d.proj, "decoder.proj", &mut out);
        res_tensors(&mut d.res1, "decoder.res1", &mut out);
        conv_tensors(&mut d.up1, "decoder.up1", &mut out);
        norm_tensors(&mut d.norm1, "decoder.norm1", &mut out);
        res_tensors(&mut d.res2, "decoder.res2", &mut out);
        conv_tensors(&mut d.up2, "decoder.up2", &mut out);
        norm_tensors(&mut d.norm2, "decoder.norm2", &mut out);
        res_tensors(&mut d.res3, "decoder.res3", &mut out);
        conv_tensors(&mut d.out, "decoder.out", &mut out);
        let b = &mut self.belief;
        out.push(("belief.write_gate".to_string(), &mut b.write_gate.data[..]));
        out.push(("belief.write_val".to_string(), &mut b.write_val.data[..]));
        out.push(("belief.gamma_logit".to_string(), std::slice::from_mut(&mut b.gamma_logit)));
        layer_tensors(&mut b.evolve, "belief.evolve", &mut out);
        out
    }

    /// `(name, offset, len)` for every tensor of the flat vector.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut copy = self.clone();
        let mut offset = 0;
        copy.tensors_mut()
            .into_iter()
            .map(|(name, t)| {
                let entry = (name, offset, t.len());
                offset += t.len();
                entry
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|(_, _, n)| n).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut copy = self.clone();
        copy.tensors_mut().into_iter().flat_map(|(_, t)| t.to_vec()).collect()
    }

    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(FluidError::Shape(format!("flat vector has {} entries, model has {n}", flat.len())));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Name of the tensor containing flat index `index`.
    pub fn name_of(&self, index: usize) -> Option<String> {
        self.layout().into_iter().find(|(_, o, n)| index >= *o && index < o + n).map(|(name, _, _)| name)
    }

    pub fn cast<U: Scalar + serde::de::DeserializeOwned>(&self) -> ModelParams<U>
    where
        T: Serialize,
    {
        let json = serde_json::to_value(self).expect("params serialize");
        serde_json::from_value(json).expect("params deserialize")
    }
}

// ---- recorded graph ---------------------------------------------------------

pub struct MatVar {
    pub var: Var,
    pub rows: usize,
    pub cols: usize,
}

pub struct LayerVars {
    pub d: usize,
    pub diffusion_logits: Var,
    pub w1: MatVar,
    pub b1: Var,
    pub w2: MatVar,
    pub b2: Var,
    pub gmem_gate: MatVar,
    pub gmem_val: MatVar,
    pub lmem_gate: MatVar,
    pub lmem_val: MatVar,
    pub alpha_g: Var,
    pub alpha_l: Var,
    pub dt: Var,
    pub gains: Var,
}

pub struct ConvVars {
    pub w: Var,
    pub b: Option<Var>,
    pub out_ch: usize,
    pub kernel: usize,
}

pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
    pub groups: usize,
}

pub struct ResVars {
    pub conv_a: ConvVars,
    pub norm_a: NormVars,
    pub conv_b: ConvVars,
    pub norm_b: NormVars,
}

pub struct DecoderVars {
    pub proj: ConvVars,
    pub res1: ResVars,
    pub up1: ConvVars,
    pub norm1: NormVars,
    pub res2: ResVars,
    pub up2: ConvVars,
    pub norm2: NormVars,
    pub res3: ResVars,
    pub out: ConvVars,
}

pub struct ModelVars {
    pub patch: usize,
    pub patch_w: MatVar,
    pub patch_b: Var,
    pub layers: Vec<LayerVars>,
    pub decoder: DecoderVars,
    pub write_gate: MatVar,
    pub write_val: MatVar,
    pub gamma_logit: Var,
    pub evolve: LayerVars,
    pub n_evolve: usize,
}

fn bind_mat<T: Scalar>(tape: &mut Tape<T>, name: String, m: &Matrix<T>) -> MatVar {
    MatVar { var: tape.param(name, &m.data), rows: m.rows, cols: m.cols }
}

fn bind_layer<T: Scalar>(tape: &mut Tape<T>, p: &LayerParams<T>, pre: &str) -> LayerVars {
    LayerVars {
        d: p.dim(),
        diffusion_logits: tape.param(format!("{pre}.diffusion_logits"), &p.diffusion_logits),
        w1: bind_mat(tape, format!("{pre}.reaction_w1"), &p.reaction_w1),
        b1: tape.param(format!("{pre}.reaction_b1"), &p.reaction_b1),
        w2: bind_mat(tape, format!("{pre}.reaction_w2"), &p.reaction_w2),
        b2: tape.param(format!("{pre}.reaction_b2"), &p.reaction_b2),
        gmem_gate: bind_mat(tape, format!("{pre}.gmem_gate"), &p.gmem_gate),
        gmem_val: bind_mat(tape, format!("{pre}.gmem_val"), &p.gmem_val),
        lmem_gate: bind_mat(tape, format!("{pre}.lmem_gate"), &p.lmem_gate),
        lmem_val: bind_mat(tape, format!("{pre}.lmem_val"), &p.lmem_val),
        alpha_g: tape.param(format!("{pre}.alpha_g_logit"), &[p.alpha_g_logit]),
        alpha_l: tape.param(format!("{pre}.alpha_l_logit"), &[p.alpha_l_logit]),
        dt: tape.param(format!("{pre}.dt_logit"), &[p.dt_logit]),
        gains: tape.param(format!("{pre}.norm_gains"), &p.norm_gains),
    }
}

fn bind_conv<T: Scalar>(tape: &mut Tape<T>, c: &Conv2d<T>, pre: &str) -> ConvVars {
    let w = tape.param(format!("{pre}.weight"), &c.weights);
    let b = c.bias.as_ref().map(|b| tape.param(format!("{pre}.bias"), b));
    ConvVars { w, b, out_ch: c.out_ch, kernel: c.kernel }
}

fn bind_norm<T: Scalar>(tape: &mut Tape<T>, n: &GroupNorm<T>, pre: &str) -> NormVars {
    NormVars {
        gamma: tape.param(format!("{pre}.gamma"), &n.gamma),
        beta: tape.param(format!("{pre}.beta"), &n.beta),
        groups: n.groups,
    }
}

fn bind_res<T: Scalar>(tape: &mut Tape<T>, r: &ResBlock<T>, pre: &str) -> ResVars {
    ResVars {
        conv_a: bind_conv(tape, &r.conv_a, &format!("{pre}.conv_a")),
        norm_a: bind_norm(tape, &r.norm_a, &format!("{pre}.norm_a")),
        conv_b: bind_conv(tape, &r.conv_b, &format!("{pre}.conv_b")),
        norm_b: bind_norm(tape, &r.norm_b, &format!("{pre}.norm_b")),
    }
}

fn bind_decoder<T: Scalar>(tape: &mut Tape<T>, d: &DecoderParams<T>) -> DecoderVars {
    DecoderVars {
        proj: bind_conv(tape, &d.proj, "decoder.proj"),
        res1: bind_res(tape, &d.res1, "decoder.res1"),
        up1: bind_conv(tape, &d.up1, "decoder.up1"),
        norm1: bind_norm(tape, &d.norm1, "decoder.norm1"),
        res2: bind_res(tape, &d.res2, "decoder.res2"),
        up2: bind_conv(tape, &d.up2, "decoder.up2"),
        norm2: bind_norm(tape, &d.norm2, "decoder.norm2"),
        res3: bind_res(tape, &d.res3, "decoder.res3"),
        out: bind_conv(tape, &d.out, "decoder.out"),
    }
}

/// Registers every parameter on the tape, in flattening order.
pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> ModelVars {
    let c = &params.codec;
    let patch_w = bind_mat(tape, "codec.patch.weight".to_string(), &c.patch_weights);
    let patch_b = tape.param("codec.patch.bias", &c.patch_bias);
    let layers = c.encoder_layers.iter().enumerate().map(|(i, l)| bind_layer(tape, l, &format!("codec.layer{i}"))).collect();
    let decoder = bind_decoder(tape, &c.decoder);
    let b = &params.belief;
    let write_gate = bind_mat(tape, "belief.write_gate".to_string(), &b.write_gate);
    let write_val = bind_mat(tape, "belief.write_val".to_string(), &b.write_val);
    let gamma_logit = tape.param("belief.gamma_logit", &[b.gamma_logit]);
    let evolve = bind_layer(tape, &b.evolve, "belief.evolve");
    ModelVars {
        patch: c.patch,
        patch_w,
        patch_b,
        layers,
        decoder,
        write_gate,
        write_val,
        gamma_logit,
        evolve,
        n_evolve: b.n_evolve,
    }
}

/// Running statistics that are treated as constants by the gradient.
/// In replay mode, values recorded by an earlier pass are reused so that
/// perturbed forward passes see the same buffers.
#[derive(Clone, Debug, Default)]
pub struct Buffers<T> {
    replay: bool,
    scales: Vec<Vec<T>>,
    maps: Vec<FieldGrid<T>>,
    next_scale: usize,
    next_map: usize,
}

impl<T: Scalar> Buffers<T> {
    pub fn record() -> Self {
        Self { replay: false, scales: Vec::new(), maps: Vec::new(), next_scale: 0, next_map: 0 }
    }

    /// Replays the values recorded by `self`.
    pub fn into_replay(self) -> Self {
        Self { replay: true, next_scale: 0, next_map: 0, ..self }
    }

    fn scale(&mut self, compute: impl FnOnce() -> Vec<T>) -> Vec<T> {
        if self.replay {
            self.next_scale += 1;
            return self.scales[self.next_scale - 1].clone();
        }
        let v = compute();
        self.scales.push(v.clone());
        v
    }

    fn map(&mut self, compute: impl FnOnce() -> FieldGrid<T>) -> FieldGrid<T> {
        if self.replay {
            self.next_map += 1;
            return self.maps[self.next_map - 1].clone();
        }
        let v = compute();
        self.maps.push(v.clone());
        v
    }
}

fn gated<T: Scalar>(tape: &mut Tape<T>, x: Var, gate: &MatVar, val: &MatVar) -> Var {
    let g = tape.matmul(x, gate.var, None, gate.rows, gate.cols);
    let v = tape.matmul(x, val.var, None, val.rows, val.cols);
    let g = tape.sigmoid(g);
    let v = tape.tanh(v);
    tape.mul(g, v)
}

/// Recorded counterpart of [`crate::dynamics::integrate_layer`] without early stopping.
pub fn integrate_layer_tape<T: Scalar>(
    tape: &mut Tape<T>,
    lv: &LayerVars,
    u0: Var,
    steps: usize,
    normalize: bool,
    multiplier: Option<&FieldGrid<T>>,
) -> Var {
    let (d, h, w) = tape.value(u0).shape();
    let mut u = u0;
    let mut h_g: Option<Var> = None;
    let mut h_l: Option<Var> = None;
    for tau in 1..=steps {
        let u_bar = tape.spatial_mean(u);
        let inc = gated(tape, u_bar, &lv.gmem_gate, &lv.gmem_val);
        h_g = Some(match h_g {
            Some(prev) => tape.add(prev, inc),
            None => inc,
        });
        let pooled = tape.avg_pool(u, LOCAL_MEMORY_RES, LOCAL_MEMORY_RES);
        let inc = gated(tape, pooled, &lv.lmem_gate, &lv.lmem_val);
        h_l = Some(match h_l {
            Some(prev) => tape.add(prev, inc),
            None => inc,
        });

        let mut diff: Option<Var> = None;
        for (k, &dil) in DILATIONS.iter().enumerate() {
            let logits = tape.slice(lv.diffusion_logits, k * d, d);
            let coeffs = tape.softplus(logits);
            let lap = tape.laplacian(u, dil);
            let term = tape.channel_scale(lap, coeffs);
            diff = Some(match diff {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        let mut rhs = diff.expect("at least one scale");
        if let Some(m) = multiplier {
            rhs = tape.mul_const(rhs, m.clone());
        }
        let hidden = tape.matmul(u, lv.w1.var, Some(lv.b1), lv.w1.rows, lv.w1.cols);
        let hidden = tape.gelu(hidden);
        let react = tape.matmul(hidden, lv.w2.var, Some(lv.b2), lv.w2.rows, lv.w2.cols);
        rhs = tape.add(rhs, react);
        let alpha_g = tape.softplus(lv.alpha_g);
        let bg = tape.broadcast(h_g.unwrap(), h, w);
        let bg = tape.mul_scalar(bg, alpha_g);
        rhs = tape.add(rhs, bg);
        let alpha_l = tape.softplus(lv.alpha_l);
        let bl = tape.resize(h_l.unwrap(), h, w);
        let bl = tape.mul_scalar(bl, alpha_l);
        rhs = tape.add(rhs, bl);
        let dt = tape.exp_clamp(lv.dt, T::lit(DT_MIN), T::lit(DT_MAX));
        let step = tape.mul_scalar(rhs, dt);
        let mut next = tape.add(u, step);
        if normalize && tau % 2 == 0 {
            next = tape.rms_norm(next, lv.gains, T::lit(RMS_EPS));
        }
        u = next;
    }
    u
}

/// Encoder output `z` on the tape; updates the fatigue health in `state`.
pub fn encode_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    frame: &FieldGrid<T>,
    cfg: &ModelConfig,
    state: &mut BeliefState<T>,
    buffers: &mut Buffers<T>,
) -> Result<Var> {
    let patches = space_to_depth(frame, vars.patch)?;
    if patches.channels() != vars.patch_w.cols {
        return Err(FluidError::Shape("frame channels do not match the codec".into()));
    }
    let x = tape.constant(patches);
    let u0 = tape.matmul(x, vars.patch_w.var, Some(vars.patch_b), vars.patch_w.rows, vars.patch_w.cols);
    let mut u = u0;
    for lv in &vars.layers {
        u = integrate_layer_tape(tape, lv, u, cfg.encoder_steps, cfg.normalize, None);
    }
    let mut z = tape.add(u, u0);
    let bio = &cfg.bio;
    if bio.inhibition {
        z = tape.lateral_inhibition(z, T::lit(bio.inhibition_beta), T::lit(bio.inhibition_min_factor));
    }
    if bio.fatigue {
        let zv = tape.value(z).clone();
        let health = buffers.scale(|| state.fatigue.updated_health(&spatial_mean(&zv).values));
        state.fatigue.health.values = health.clone();
        z = tape.channel_scale_const(z, &health);
    }
    Ok(z)
}

fn res_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, r: &ResVars) -> Var {
    let a = conv_tape(tape, x, &r.conv_a);
    let a = norm_tape(tape, a, &r.norm_a);
    let a = tape.gelu(a);
    let b = conv_tape(tape, a, &r.conv_b);
    let b = norm_tape(tape, b, &r.norm_b);
    tape.add(x, b)
}

fn conv_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, c: &ConvVars) -> Var {
    tape.conv(x, c.w, c.b, c.out_ch, c.kernel)
}

fn norm_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, n: &NormVars) -> Var {
    tape.group_norm(x, n.gamma, n.beta, n.groups)
}

/// Output logits of the decoder on the tape.
pub fn decode_tape<T: Scalar>(tape: &mut Tape<T>, vars: &ModelVars, z: Var) -> Var {
    let dv = &vars.decoder;
    let (_, h, w) = tape.value(z).shape();
    let x = conv_tape(tape, z, &dv.proj);
    let x = res_tape(tape, x, &dv.res1);
    let x = tape.resize(x, 2 * h, 2 * w);
    let x = conv_tape(tape, x, &dv.up1);
    let x = norm_tape(tape, x, &dv.norm1);
    let x = res_tape(tape, x, &dv.res2);
    let x = tape.resize(x, 4 * h, 4 * w);
    let x = conv_tape(tape, x, &dv.up2);
    let x = norm_tape(tape, x, &dv.norm2);
    let x = res_tape(tape, x, &dv.res3);
    conv_tape(tape, x, &dv.out)
}

/// Gated write followed by evolution and read-out; returns the predicted latent.
pub fn belief_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    s: Var,
    z: Var,
    cfg: &ModelConfig,
    state: &mut BeliefState<T>,
    buffers: &mut Buffers<T>,
) -> (Var, Var) {
    let inc = gated(tape, z, &vars.write_gate, &vars.write_val);
    let gamma = tape.exp_clamp(vars.gamma_logit, T::lit(GAMMA_MIN), T::lit(GAMMA_MAX));
    let decayed = tape.mul_scalar(s, gamma);
    let mut s = tape.add(decayed, inc);
    let bio = &cfg.bio;
    if vars.n_evolve > 0 {
        let multiplier = bio.hebbian.then(|| buffers.map(|| effective_diffusion(&state.hebbian)));
        s = integrate_layer_tape(tape, &vars.evolve, s, vars.n_evolve, cfg.normalize, multiplier.as_ref());
        if bio.hebbian {
            state.hebbian = hebbian_update(&state.hebbian, tape.value(s));
        }
        if bio.apply_post_evolve {
            if bio.inhibition {
                s = tape.lateral_inhibition(s, T::lit(bio.inhibition_beta), T::lit(bio.inhibition_min_factor));
            }
            if bio.fatigue {
                let sv = tape.value(s).clone();
                let health = buffers.scale(|| state.fatigue.updated_health(&spatial_mean(&sv).values));
                state.fatigue.health.values = health.clone();
                s = tape.channel_scale_const(s, &health);
            }
        }
    }
    let (_, h, w) = tape.value(z).shape();
    let read = tape.resize(s, h, w);
    (s, read)
}

/// Output of one recorded window.
pub struct WindowGraph<T> {
    pub loss: Var,
    pub terms: LossTerms,
    /// Belief state after the window, detached.
    pub state: BeliefState<T>,
}

/// Records the mean total loss over a window of `frames.len() - 1` transitions.
pub fn window_graph<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    frames: &[FieldGrid<T>],
    state: &BeliefState<T>,
    cfg: &ModelConfig,
    weights: &LossWeights,
    buffers: &mut Buffers<T>,
) -> Result<WindowGraph<T>> {
    if frames.len() < 2 {
        return Err(FluidError::Shape("a window needs at least two frames".into()));
    }
    let steps = frames.len() - 1;
    let mut st = state.clone();
    let mut s = tape.constant(st.s.clone());
    let mut total: Option<Var> = None;
    let mut terms = LossTerms::default();
    for t in 0..steps {
        let z = encode_tape(tape, vars, &frames[t], cfg, &mut st, buffers)?;
        let recon = decode_tape(tape, vars, z);
        let (s_next, read) = belief_tape(tape, vars, s, z, cfg, &mut st, buffers);
        s = s_next;
        let pred = decode_tape(tape, vars, read);
        let (l, tm) = total_loss_tape(tape, &frames[t], &frames[t + 1], recon, pred, z, weights);
        terms.accumulate(&tm, 1.0 / steps as f64);
        total = Some(match total {
            Some(acc) => tape.add(acc, l),
            None => l,
        });
    }
    let loss = tape.scale(total.unwrap(), T::one() / T::count(steps));
    st.s = tape.value(s).clone();
    Ok(WindowGraph { loss, terms, state: st })
}

/// Fresh belief state for frames of the given size.
pub fn initial_state<T: Scalar>(cfg: &ModelConfig, frame_h: usize, frame_w: usize) -> BeliefState<T> {
    BeliefState::new(cfg.latent_dim, frame_h / cfg.patch_size, frame_w / cfg.patch_size, &cfg.bio)
}

/// One inference step: observe `frame`, then predict the next frame's logits.
/// Returns (reconstruction logits, prediction logits).
pub fn observe_and_predict<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    state: &mut BeliefState<T>,
    frame: &FieldGrid<T>,
    training: bool,
) -> Result<(FieldGrid<T>, FieldGrid<T>)> {
    let enc_cfg = cfg.encoder_integration(training);
    let fatigue = cfg.bio.fatigue.then_some(&state.fatigue);
    let enc = codec::encode(frame, &params.codec, &enc_cfg, &cfg.bio, fatigue)?;
    if let Some(f) = enc.fatigue {
        state.fatigue = f;
    }
    let recon = codec::decode(&enc.z, &params.codec);
    let written = belief::write(state, &enc.z, &params.belief);
    *state = belief::evolve(&written, &params.belief, &cfg.belief_integration(training), &cfg.bio);
    let read = belief::read(state, enc.z.height(), enc.z.width());
    let pred = codec::decode(&read, &params.codec);
    Ok((recon, pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn frames(n: usize, h: usize, w: usize, seed: u64) -> Vec<FieldGrid<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| FieldGrid::from_fn(1, h, w, |_, _, _| r.random_range(0.0..1.0))).collect()
    }

    #[test]
    fn flatten_round_trip_is_bitwise() {
        let p = ModelParams::<f64>::init(&ModelConfig::tiny(), 3);
        let flat = p.flatten();
        let mut q = ModelParams::<f64>::init(&ModelConfig::tiny(), 4);
        assert_ne!(q.flatten(), flat);
        q.unflatten(&flat).unwrap();
        assert_eq!(q, p);
        assert_eq!(q.flatten(), flat);
        assert!(q.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn tape_binding_follows_flatten_order() {
        let p = ModelParams::<f64>::init(&ModelConfig::tiny(), 5);
        let mut tape = Tape::new();
        bind(&mut tape, &p);
        let names: Vec<String> = tape.params().map(|(_, n)| n.to_string()).collect();
        let layout: Vec<String> = p.layout().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names, layout);
        let values: Vec<f64> = tape.params().flat_map(|(v, _)| tape.value(v).values().to_vec()).collect();
        assert_eq!(values, p.flatten());
    }

    #[test]
    fn recorded_window_matches_plain_forward() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::<f64>::init(&cfg, 6);
        let fr = frames(3, 8, 8, 7);
        let state = initial_state::<f64>(&cfg, 8, 8);

        let mut tape = Tape::new();
        let vars = bind(&mut tape, &p);
        let mut buffers = Buffers::record();
        let g = window_graph(&mut tape, &vars, &fr, &state, &cfg, &LossWeights::default(), &mut buffers).unwrap();

        let mut plain = state.clone();
        let mut expected = 0.0;
        for t in 0..2 {
            let (recon, pred) = observe_and_predict(&p, &cfg, &mut plain, &fr[t], true).unwrap();
            let fatigue_free_z = {
                // the variance term needs z; recompute it the same way the window did
                let mut s2 = state.clone();
                let mut z = None;
                for frame in fr.iter().take(t + 1) {
                    let enc = codec::encode(frame, &p.codec, &cfg.encoder_integration(true), &cfg.bio, Some(&s2.fatigue))
                        .unwrap();
                    s2.fatigue = enc.fatigue.clone().unwrap();
                    z = Some(enc.z);
                }
                z.unwrap()
            };
            expected += crate::training::loss::total_loss(
                &fr[t],
                &fr[t + 1],
                &recon,
                &pred,
                &fatigue_free_z,
                &LossWeights::default(),
            ) / 2.0;
        }
        let got = tape.scalar(g.loss);
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        let diff = g.state.s.sub(&plain.s).max_abs();
        assert!(diff < 1e-10);
        assert_eq!(g.state.fatigue.health.values.len(), 8);
    }
}
