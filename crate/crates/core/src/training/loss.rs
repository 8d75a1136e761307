//! Composite training objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::field::FieldGrid;
use crate::scalar::{sigmoid, Scalar};

pub use crate::autodiff::{gradient_loss, mse, sigmoid_mse, sobel_loss, spectral_loss, variance_loss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_r: f64,
    pub w_p: f64,
    pub w_v: f64,
    pub w_g: f64,
    pub sigma_target: f64,
    pub w_edge: f64,
    pub w_freq: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_r: 1.0, w_p: 1.0, w_v: 0.5, w_g: 1.0, sigma_target: 1.0, w_edge: 0.0, w_freq: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [self.w_r, self.w_p, self.w_v, self.w_g, self.sigma_target, self.w_edge, self.w_freq];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(crate::FluidError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Unweighted terms of one evaluation and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub recon: f64,
    pub pred: f64,
    pub variance: f64,
    pub gradient: f64,
    pub edge: f64,
    pub freq: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn accumulate(&mut self, other: &LossTerms, weight: f64) {
        self.recon += weight * other.recon;
        self.pred += weight * other.pred;
        self.variance += weight * other.variance;
        self.gradient += weight * other.gradient;
        self.edge += weight * other.edge;
        self.freq += weight * other.freq;
        self.total += weight * other.total;
    }
}

/// Sobel L1 plus log-magnitude spectrum L1 of two images.
pub fn edge_freq_loss<T: Scalar>(pred: &FieldGrid<T>, target: &FieldGrid<T>) -> (T, T) {
    (sobel_loss(pred, target), spectral_loss(pred, target))
}

/// Weighted objective for one transition. Image-space terms compare
/// `sigmoid(logits)` with the targets.
pub fn total_loss<T: Scalar>(
    x_t: &FieldGrid<T>,
    x_t1: &FieldGrid<T>,
    recon_logits: &FieldGrid<T>,
    pred_logits: &FieldGrid<T>,
    z_t: &FieldGrid<T>,
    w: &LossWeights,
) -> T {
    let half = T::lit(0.5);
    let recon_img = recon_logits.map(sigmoid);
    let pred_img = pred_logits.map(sigmoid);
    let mut total = T::lit(w.w_r) * sigmoid_mse(recon_logits, x_t)
        + T::lit(w.w_p) * sigmoid_mse(pred_logits, x_t1)
        + T::lit(w.w_v) * variance_loss(z_t, T::lit(w.sigma_target))
        + T::lit(w.w_g) * half * (gradient_loss(&recon_img, x_t) + gradient_loss(&pred_img, x_t1));
    if w.w_edge > 0.0 {
        total += T::lit(w.w_edge) * half * (sobel_loss(&recon_img, x_t) + sobel_loss(&pred_img, x_t1));
    }
    if w.w_freq > 0.0 {
        total += T::lit(w.w_freq) * half * (spectral_loss(&recon_img, x_t) + spectral_loss(&pred_img, x_t1));
    }
    total
}

/// Recorded [`total_loss`]; also returns the unweighted terms.
pub fn total_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x_t: &FieldGrid<T>,
    x_t1: &FieldGrid<T>,
    recon: Var,
    pred: Var,
    z: Var,
    w: &LossWeights,
) -> (Var, LossTerms) {
    let f = |t: &Tape<T>, v: Var| t.scalar(v).to_f64_lossy();
    let mut terms = LossTerms::default();
    let l_r = tape.sigmoid_mse(recon, x_t);
    let l_p = tape.sigmoid_mse(pred, x_t1);
    let l_v = tape.variance_hinge(z, T::lit(w.sigma_target));
    let recon_img = tape.sigmoid(recon);
    let pred_img = tape.sigmoid(pred);
    let g_r = tape.grad_l1(recon_img, x_t);
    let g_p = tape.grad_l1(pred_img, x_t1);
    let l_g = tape.add(g_r, g_p);
    let l_g = tape.scale(l_g, T::lit(0.5));
    terms.recon = f(tape, l_r);
    terms.pred = f(tape, l_p);
    terms.variance = f(tape, l_v);
    terms.gradient = f(tape, l_g);

    let parts = [(l_r, w.w_r), (l_p, w.w_p), (l_v, w.w_v), (l_g, w.w_g)];
    let mut total = tape.scale(parts[0].0, T::lit(parts[0].1));
    for &(v, wt) in &parts[1..] {
        let s = tape.scale(v, T::lit(wt));
        total = tape.add(total, s);
    }
    if w.w_edge > 0.0 {
        let a = tape.sobel_l1(recon_img, x_t);
        let b = tape.sobel_l1(pred_img, x_t1);
        let e = tape.add(a, b);
        let e = tape.scale(e, T::lit(0.5));
        terms.edge = f(tape, e);
        let s = tape.scale(e, T::lit(w.w_edge));
        total = tape.add(total, s);
    }
    if w.w_freq > 0.0 {
        let a = tape.spectral_l1(recon_img, x_t);
        let b = tape.spectral_l1(pred_img, x_t1);
        let e = tape.add(a, b);
        let e = tape.scale(e, T::lit(0.5));
        terms.freq = f(tape, e);
        let s = tape.scale(e, T::lit(w.w_freq));
        total = tape.add(total, s);
    }
    terms.total = f(tape, total);
    (total, terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::logit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random01(c: usize, h: usize, w: usize, seed: u64) -> FieldGrid<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        FieldGrid::from_fn(c, h, w, |_, _, _| r.random_range(0.05..0.95))
    }

    #[test]
    fn variance_loss_examples() {
        let alt = FieldGrid::from_fn(3, 4, 4, |_, y, x| if (x + y) % 2 == 0 { 2.0 } else { -2.0 });
        assert_eq!(variance_loss(&alt, 1.0), 0.0);
        assert!((variance_loss(&FieldGrid::<f64>::filled(5, 3, 3, 0.7), 1.0) - 1.0).abs() < 1e-12);

        let z = random01(4, 5, 5, 1);
        let mut expected = 0.0;
        for c in 0..4 {
            let ch = z.channel(c);
            let mean = ch.iter().sum::<f64>() / 25.0;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 25.0;
            expected += (1.0 - var.sqrt()).max(0.0);
        }
        assert!((variance_loss(&z, 1.0) - expected / 4.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_loss_examples() {
        let a = random01(2, 4, 4, 2);
        assert_eq!(gradient_loss(&a, &a), 0.0);
        assert!(gradient_loss(&a.map(|v| v + 0.3), &a) < 1e-12);
        // pred [[0,1],[2,3]] vs zeros: dx = [1,0,1,0], dy = [2,2,0,0] -> 6 / 4
        let p = FieldGrid::from_vec(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(gradient_loss(&p, &FieldGrid::zeros(1, 2, 2)), 1.5);
    }

    #[test]
    fn edge_freq_examples() {
        let a = random01(1, 6, 6, 3);
        assert_eq!(edge_freq_loss(&a, &a), (0.0, 0.0));
        let c1 = FieldGrid::<f64>::filled(1, 4, 4, 0.2);
        let c2 = FieldGrid::filled(1, 4, 4, 0.7);
        let (sob, freq) = edge_freq_loss(&c1, &c2);
        assert!(sob.abs() < 1e-12);
        // only the DC bin differs: |ln(1 + 16*0.2) - ln(1 + 16*0.7)| / 16
        let dc = ((1.0f64 + 3.2).ln() - (1.0f64 + 11.2).ln()).abs() / 16.0;
        assert!((freq - dc).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit_is_zero_and_terms_sum() {
        let x0 = random01(1, 8, 8, 4);
        let x1 = random01(1, 8, 8, 5);
        let z = FieldGrid::from_fn(4, 2, 2, |_, y, x| if (x + y) % 2 == 0 { 1.5 } else { -1.5 });
        let w = LossWeights::default();
        let l = total_loss(&x0, &x1, &x0.map(logit), &x1.map(logit), &z, &w);
        assert!(l.abs() < 1e-12, "{l}");

        let r = random01(1, 8, 8, 6).map(logit);
        let p = random01(1, 8, 8, 7).map(logit);
        let z = random01(4, 2, 2, 8);
        let w = LossWeights { w_edge: 0.3, w_freq: 0.2, ..LossWeights::default() };
        let ri = r.map(sigmoid);
        let pi = p.map(sigmoid);
        let oracle = sigmoid_mse(&r, &x0)
            + sigmoid_mse(&p, &x1)
            + 0.5 * variance_loss(&z, 1.0)
            + 0.5 * (gradient_loss(&ri, &x0) + gradient_loss(&pi, &x1))
            + 0.3 * 0.5 * (sobel_loss(&ri, &x0) + sobel_loss(&pi, &x1))
            + 0.2 * 0.5 * (spectral_loss(&ri, &x0) + spectral_loss(&pi, &x1));
        assert!((total_loss(&x0, &x1, &r, &p, &z, &w) - oracle).abs() < 1e-12);

        let mut tape = Tape::new();
        let (rv, pv, zv) = (tape.constant(r), tape.constant(p), tape.constant(z));
        let (t, terms) = total_loss_tape(&mut tape, &x0, &x1, rv, pv, zv, &w);
        assert!((tape.scalar(t) - oracle).abs() < 1e-12);
        assert!((terms.total - oracle).abs() < 1e-12);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.w_r, w.w_p, w.w_v, w.w_g, w.sigma_target), (1.0, 1.0, 0.5, 1.0, 1.0));
        let parsed: LossWeights = serde_json::from_str(r#"{"w_v": 0.5}"#).unwrap();
        assert_eq!(parsed, w);
        assert!(serde_json::from_str::<LossWeights>(r#"{"w_x": 1}"#).is_err());
    }
}
