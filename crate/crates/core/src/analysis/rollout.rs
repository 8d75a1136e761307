//! Autoregressive rollouts and recovery statistics over SSIM curves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::analysis::metrics::{mse, ssim};
use crate::datagen::{generate_sequence, SceneConfig};
use crate::error::{FluidError, Result};
use crate::field::FieldGrid;
use crate::model::{initial_state, observe_and_predict, ModelConfig, ModelParams};
use crate::scalar::sigmoid;

/// Magnitude above which a curve counts as recovering.
pub const RECOVERY_EPS: f64 = 0.01;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub frames: Vec<FieldGrid<f64>>,
    /// Empty when no ground truth was supplied.
    pub ssim_per_step: Vec<f64>,
    pub mse_per_step: Vec<f64>,
}

/// Observes `init`, then feeds each predicted frame back as the next input.
/// `truth[t]` is compared with the prediction of step `t + 1`.
pub fn rollout(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    init: &FieldGrid<f64>,
    horizon: usize,
    truth: Option<&[FieldGrid<f64>]>,
) -> Result<RolloutTrace> {
    if let Some(t) = truth {
        if t.len() < horizon {
            return Err(FluidError::Shape(format!("{} truth frames for horizon {horizon}", t.len())));
        }
    }
    let (_, h, w) = init.shape();
    let mut state = initial_state(cfg, h, w);
    let mut trace = RolloutTrace::default();
    let mut input = init.clone();
    for t in 0..horizon {
        let (_, pred) = observe_and_predict(params, cfg, &mut state, &input, false)?;
        let frame = pred.map(sigmoid);
        if let Some(truth) = truth {
            trace.ssim_per_step.push(ssim(&frame, &truth[t]));
            trace.mse_per_step.push(mse(&frame, &truth[t]));
        }
        input = frame.clone();
        trace.frames.push(frame);
    }
    Ok(trace)
}

/// Rollouts from the first frame of `n` generated sequences, scored against
/// the remaining frames. Sequence `i` uses scene seed `seed + i`.
pub fn rollout_batch(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    scene: &SceneConfig,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<RolloutTrace>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let sc = SceneConfig { n_frames: horizon + 1, seed: seed.wrapping_add(i as u64), ..scene.clone() };
            let frames = generate_sequence(&sc)?;
            rollout(params, cfg, &frames[0], horizon, Some(&frames[1..]))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecovery {
    pub min_step: usize,
    pub min_value: f64,
    pub magnitude: f64,
}

/// Minimum of the curve (first on ties) and the largest rise after it.
pub fn curve_recovery(curve: &[f64]) -> CurveRecovery {
    let (min_step, min_value) =
        curve.iter().copied().enumerate().fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 { (i, v) } else { best });
    let after = curve[min_step + 1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let magnitude = if after.is_finite() { (after - min_value).max(0.0) } else { 0.0 };
    CurveRecovery { min_step, min_value, magnitude }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub curves: Vec<CurveRecovery>,
    pub n: usize,
    pub fraction: f64,
    pub mean: f64,
    pub std: f64,
    pub t_stat: f64,
    /// Two-sided p-value of the one-sample t-test against zero.
    pub p_value: f64,
    pub cohens_d: f64,
}

/// Aggregate statistics of recovery magnitudes (sample std, n - 1).
pub fn summarize_magnitudes(magnitudes: &[f64]) -> RecoveryReport {
    let n = magnitudes.len();
    let nf = n as f64;
    let mean = if n > 0 { magnitudes.iter().sum::<f64>() / nf } else { 0.0 };
    let std = if n > 1 { (magnitudes.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt() } else { 0.0 };
    let (t_stat, cohens_d, p_value) = if std > 0.0 {
        let t = mean / (std / nf.sqrt());
        let dist = StudentsT::new(0.0, 1.0, nf - 1.0).expect("positive degrees of freedom");
        (t, mean / std, 2.0 * dist.cdf(-t.abs()))
    } else if mean == 0.0 {
        (0.0, 0.0, 1.0)
    } else {
        (f64::INFINITY.copysign(mean), f64::INFINITY.copysign(mean), 0.0)
    };
    RecoveryReport {
        curves: Vec::new(),
        n,
        fraction: if n > 0 { magnitudes.iter().filter(|&&m| m > RECOVERY_EPS).count() as f64 / nf } else { 0.0 },
        mean,
        std,
        t_stat,
        p_value,
        cohens_d,
    }
}

pub fn recovery_stats(curves: &[Vec<f64>]) -> Result<RecoveryReport> {
    if let Some(c) = curves.iter().find(|c| c.len() < 3) {
        return Err(FluidError::Shape(format!("recovery curves need at least 3 points, got {}", c.len())));
    }
    let per: Vec<CurveRecovery> = curves.iter().map(|c| curve_recovery(c)).collect();
    let mags: Vec<f64> = per.iter().map(|c| c.magnitude).collect();
    Ok(RecoveryReport { curves: per, ..summarize_magnitudes(&mags) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub a: f64,
    pub b: f64,
    /// `a exp(-b t)` at every step of the input.
    pub null_curve: Vec<f64>,
}

/// Least-squares fit of `ln s_t = ln a - b t` over steps `1..=fit_steps`,
/// where `ssim[i]` is the value at step `i + 1`.
pub fn fit_exp_null(ssim: &[f64], fit_steps: usize) -> Result<ExpFit> {
    if fit_steps < 2 || ssim.len() < fit_steps {
        return Err(FluidError::Shape("fit needs at least two points".into()));
    }
    if ssim[..fit_steps].iter().any(|&v| v <= 0.0) {
        return Err(FluidError::Config("exponential fit needs positive values".into()));
    }
    let n = fit_steps as f64;
    let ts: Vec<f64> = (1..=fit_steps).map(|t| t as f64).collect();
    let ys: Vec<f64> = ssim[..fit_steps].iter().map(|v| v.ln()).collect();
    let tm = ts.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxy: f64 = ts.iter().zip(&ys).map(|(t, y)| (t - tm) * (y - ym)).sum();
    let sxx: f64 = ts.iter().map(|t| (t - tm).powi(2)).sum();
    let slope = sxy / sxx;
    let a = (ym - slope * tm).exp();
    let b = -slope;
    let null_curve = (1..=ssim.len()).map(|t| a * (-b * t as f64).exp()).collect();
    Ok(ExpFit { a, b, null_curve })
}
