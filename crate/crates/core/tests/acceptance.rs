//! Acceptance checks. Runs every criterion in order and prints one line each;
//! exits non-zero if any of them fails or exceeds its time budget.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use fluidlab::analysis::cluster::{best_kmeans, kmeans};
use fluidlab::analysis::metrics::{effective_rank, effective_rank_of, singular_values, ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use fluidlab::analysis::phase::{energy_experiment, random_field, LayerRunner};
use fluidlab::analysis::resilience::{op_count_scaling, repair_trajectory, resilience_sweep, warm_belief, FreeEvolution, ResilienceConfig};
use fluidlab::analysis::rollout::{curve_recovery, recovery_stats, rollout_batch};
use fluidlab::analysis::symmetry::{seeded_layer, symmetry_experiment, SymmetryConfig};
use fluidlab::autodiff::Tape;
use fluidlab::belief::{BeliefParams, CorruptionMode};
use fluidlab::bio::BioConfig;
use fluidlab::dynamics::{integrate_layer, IntegrationConfig, LayerParams};
use fluidlab::field::{laplacian, spectral_split};
use fluidlab::model::{bind, window_graph, Buffers, ModelConfig, ModelParams};
use fluidlab::training::checkpoint::Checkpoint;
use fluidlab::training::gradcheck::{check_gradients, random_frames, sample_indices, warm_state, GradSample};
use fluidlab::training::loss::LossWeights;
use fluidlab::training::optim::OptimConfig;
use fluidlab::training::trainer::{TrainConfig, Trainer};
use fluidlab::FieldGrid;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

#[derive(Default)]
struct Shared {
    checkpoint: Option<Vec<u8>>,
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn(&mut Shared) -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "stencil oracle", budget: Duration::from_secs(5), run: stencil_oracle },
        Criterion { id: 2, name: "conservation", budget: Duration::from_secs(10), run: conservation },
        Criterion { id: 3, name: "gradient suite", budget: Duration::from_secs(120), run: gradient_suite },
        Criterion { id: 4, name: "stability dichotomy", budget: Duration::from_secs(30), run: stability_dichotomy },
        Criterion { id: 5, name: "adaptive stopping", budget: Duration::from_secs(1), run: adaptive_stopping },
        Criterion { id: 6, name: "scaling table", budget: Duration::from_secs(1), run: scaling_table },
        Criterion { id: 7, name: "symmetry breaking", budget: Duration::from_secs(10), run: symmetry_breaking },
        Criterion { id: 8, name: "self-repair", budget: Duration::from_secs(30), run: self_repair },
        Criterion { id: 9, name: "training sanity", budget: Duration::from_secs(600), run: training_sanity },
        Criterion { id: 10, name: "rollout machinery", budget: Duration::from_secs(120), run: rollout_machinery },
        Criterion { id: 11, name: "metric oracles", budget: Duration::from_secs(30), run: metric_oracles },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut shared = Shared::default();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str()) || c.id.to_string() == *f) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| (c.run)(&mut shared)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > c.budget => Err(format!("over budget ({detail})")),
            other => other,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!(
            "criterion {:>2} {:<20} {tag} [{:.2}s / {}s] {detail}",
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
        if result.is_err() {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned()).unwrap_or_default()
}

fn uniform_field(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FieldGrid<f64> {
    FieldGrid::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

// Direct double loop: neighbours outside the grid are skipped.
fn laplacian_oracle(f: &FieldGrid<f64>, k: usize) -> Vec<f64> {
    let (cn, h, w) = f.shape();
    let mut out = vec![0.0; cn * h * w];
    for c in 0..cn {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let centre = f.get(c, y as usize, x as usize);
                let mut acc = 0.0;
                for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (yy, xx) = (y + dy * k as i64, x + dx * k as i64);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        acc += f.get(c, yy as usize, xx as usize) - centre;
                    }
                }
                out[(c * h + y as usize) * w + x as usize] = acc;
            }
        }
    }
    out
}

fn stencil_oracle(_: &mut Shared) -> Outcome {
    // Frozen by hand: 0..9 on a 3x3 grid.
    let f = FieldGrid::from_vec(1, 3, 3, (0..9).map(f64::from).collect()).unwrap();
    let l = laplacian(&f, 1);
    ensure!(l.values() == [4.0, 3.0, 2.0, 1.0, 0.0, -1.0, -2.0, -3.0, -4.0], "3x3 reference {:?}", l.values());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let (c, h, w) = (rng.random_range(1..=8), rng.random_range(1..=16), rng.random_range(1..=16));
        let f = uniform_field(&mut rng, c, h, w);
        let k = [1, 4, 16][i % 3];
        let got = laplacian(&f, k);
        let want = laplacian_oracle(&f, k);
        for (a, b) in got.values().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst < 1e-12, "max abs diff {worst:e}");
    Ok(format!("200 fields, max abs diff {worst:.1e}"))
}

fn conservation(_: &mut Shared) -> Outcome {
    let (d, h, w) = (4, 32, 32);
    let params = LayerParams::<f64>::pure_diffusion(d, [0.25, 0.25, 0.25], 0.1);
    let u0 = random_field(d, h, w, 7);
    let sums0 = u0.channel_sums();
    let scale: Vec<f64> = (0..d).map(|c| u0.channel(c).iter().map(|v| v.abs()).sum()).collect();
    let mut runner = LayerRunner::new(u0.clone(), &params, false);
    let (_, mut high_prev) = spectral_split(&u0, 0.5);
    let high0 = high_prev;
    let mut worst_sum = 0.0f64;
    for step in 1..=200 {
        let u = runner.step().clone();
        for (c, s) in u.channel_sums().iter().enumerate() {
            worst_sum = worst_sum.max((s - sums0[c]).abs() / scale[c]);
        }
        let (_, high) = spectral_split(&u, 0.5);
        ensure!(high <= high_prev * (1.0 + 1e-12), "high band rose at step {step}: {high_prev:e} -> {high:e}");
        high_prev = high;
    }
    ensure!(worst_sum < 1e-9, "channel sum drift {worst_sum:e}");
    Ok(format!("sum drift {worst_sum:.1e}, high band {high0:.3e} -> {high_prev:.3e}"))
}

fn gradient_suite(_: &mut Shared) -> Outcome {
    let model = ModelConfig::tiny();
    ensure!(model.latent_dim == 8, "tiny model width {}", model.latent_dim);
    let weights = LossWeights { w_edge: 0.3, w_freq: 0.2, ..LossWeights::default() };
    let params = ModelParams::<f64>::init(&model, 11);
    let warm = random_frames(2, 1, 8, 8, 12);
    let state = warm_state(&params, &model, &warm).map_err(|e| e.to_string())?;
    let frames = random_frames(3, 1, 8, 8, 13);

    let mut tape = Tape::new();
    let vars = bind(&mut tape, &params);
    let g = window_graph(&mut tape, &vars, &frames, &state, &model, &weights, &mut Buffers::record())
        .map_err(|e| e.to_string())?;
    let t = g.terms;
    for (name, v) in [("recon", t.recon), ("pred", t.pred), ("variance", t.variance), ("gradient", t.gradient), ("edge", t.edge), ("freq", t.freq)] {
        ensure!(v > 0.0, "loss term {name} is inactive ({v})");
    }

    let indices = sample_indices(&params, 2, 100, 14);
    ensure!(indices.len() >= 100, "only {} indices", indices.len());
    let sample = GradSample { cfg: &model, weights: &weights, frames: &frames, state: &state };
    let report = check_gradients(&params, &sample, &indices, 1e-5).map_err(|e| e.to_string())?;
    for prefix in ["codec.patch", "codec.layer", "decoder.", "belief.write", "belief.gamma", "belief.evolve"] {
        ensure!(report.entries.iter().any(|e| e.name.starts_with(prefix)), "no index from {prefix}");
    }
    let worst = report.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    ensure!(report.passed, "max rel error {:.3e} at {} (analytic {:e}, numeric {:e})", worst.rel_error, worst.name, worst.analytic, worst.numeric);
    Ok(format!("{} indices, max rel error {:.2e} ({})", report.entries.len(), report.max_rel_error, worst.name))
}

fn stability_dichotomy(_: &mut Shared) -> Outcome {
    let (d, h, w) = (16, 16, 16);
    let reference = (d * h * w) as f64;
    let params = seeded_layer(d, 1.0, 0.35, 3);
    let u0 = random_field(d, h, w, 4);
    let on = energy_experiment(&u0, &params, 200, true);
    let peak = on.iter().copied().fold(0.0, f64::max);
    ensure!(peak < 10.0 * reference, "normalized energy peaked at {peak:.1} (reference {reference})");
    let off = energy_experiment(&u0, &params, 200, false);
    let ratio = off[200] / off[0];
    ensure!(ratio > 100.0, "unnormalized growth only {ratio:.3e}");
    Ok(format!("normalized peak {:.2}x reference, unnormalized final/initial {ratio:.2e}", peak / reference))
}

fn adaptive_stopping(_: &mut Shared) -> Outcome {
    let d = 8;
    let params = LayerParams::<f64>::zero_dynamics(d);
    // Unit RMS, so the normalization after step 2 leaves it unchanged.
    let u0 = FieldGrid::filled(d, 16, 16, 1.0);
    let cfg = IntegrationConfig { max_steps: 12, adaptive: true, ..IntegrationConfig::default() };
    ensure!(cfg.stop.epsilon == 0.08 && cfg.stop.patience == 2, "stop criterion {:?}", cfg.stop);
    let (_, diag) = integrate_layer(&u0, &params, &cfg, None);
    ensure!(diag.steps_used <= 3, "constant input used {} steps", diag.steps_used);
    let (_, rescaled) = integrate_layer(&FieldGrid::filled(d, 16, 16, 0.5), &params, &cfg, None);
    ensure!(rescaled.steps_used < cfg.max_steps, "constant 0.5 never stopped");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for max_steps in 1..=8 {
        for u in [u0.clone(), uniform_field(&mut rng, d, 16, 16)] {
            let cfg = IntegrationConfig { max_steps, adaptive: false, ..IntegrationConfig::default() };
            let (_, dg) = integrate_layer(&u, &params, &cfg, None);
            ensure!(dg.steps_used == max_steps && dg.turbulence_per_step.len() == max_steps, "adaptive off ran {} of {max_steps}", dg.steps_used);
        }
    }
    Ok(format!("constant input stopped after {} steps ({} at 0.5)", diag.steps_used, rescaled.steps_used))
}

fn scaling_table(_: &mut Shared) -> Outcome {
    let rows = op_count_scaling(&[256, 1024, 4096, 16384]);
    let want: [(u64, u64, u64, u64); 4] = [
        (256, 65_536, 256, 256),
        (1024, 1_048_576, 1024, 1024),
        (4096, 16_777_216, 4096, 4096),
        (16384, 268_435_456, 16384, 16384),
    ];
    ensure!(rows.len() == 4, "{} rows", rows.len());
    for (r, w) in rows.iter().zip(want) {
        ensure!((r.tokens, r.attention_ops, r.diffusion_ops, r.ratio) == w, "row {:?} != {:?}", r, w);
    }
    Ok("4 rows exact".into())
}

fn symmetry_breaking(_: &mut Shared) -> Outcome {
    let cfg = SymmetryConfig { steps: 10, ..SymmetryConfig::default() };
    let a = symmetry_experiment(&cfg).map_err(|e| e.to_string())?;
    let (s0, s10) = (a.steps[0].symmetry_index, a.steps[10].symmetry_index);
    ensure!(s0 >= 0.999, "step 0 index {s0}");
    ensure!(s10 < 0.9, "step 10 index {s10}");
    let again = symmetry_experiment(&cfg).map_err(|e| e.to_string())?;
    ensure!(again.fields == a.fields, "same seed gave a different trajectory");
    let b = symmetry_experiment(&SymmetryConfig { seed: 1, ..cfg }).map_err(|e| e.to_string())?;
    let diff = a.fields[10].values().iter().zip(b.fields[10].values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure!(diff > 1e-3, "seeds 0 and 1 differ by {diff:e}");
    Ok(format!("index {s0:.4} -> {s10:.3}, seed difference {diff:.3}"))
}

fn self_repair(_: &mut Shared) -> Outcome {
    let d = 16;
    let mut params = BeliefParams::<f64>::init(d, &mut ChaCha8Rng::seed_from_u64(0));
    params.evolve = LayerParams::pure_diffusion(d, [0.25, 0.25, 0.25], 0.1);
    let integration = IntegrationConfig { normalize: false, ..IntegrationConfig::default() };
    let bio = BioConfig::disabled();
    let dynamics = FreeEvolution { params: &params, integration: &integration, bio: &bio };

    let state = warm_belief(dynamics, d, 8, 2, 21);
    let traj = repair_trajectory(dynamics, &state, CorruptionMode::GaussianNoise, 0.5, 1.0, 22, 20);
    ensure!(traj.len() == 21, "trajectory length {}", traj.len());
    for (t, pair) in traj.windows(2).enumerate() {
        ensure!(pair[1] <= pair[0] + 1e-12, "distance rose at step {}: {} -> {}", t + 1, pair[0], pair[1]);
    }

    let cfg = ResilienceConfig { channels: d, ..ResilienceConfig::default() };
    let rows = resilience_sweep(dynamics, &cfg).map_err(|e| e.to_string())?;
    for mode in &cfg.modes {
        let r: Vec<f64> = rows.iter().filter(|r| r.mode == *mode).map(|r| r.residual_mse).collect();
        for (i, pair) in r.windows(2).enumerate() {
            ensure!(pair[1] >= 0.95 * pair[0], "{} residual fell from {:e} to {:e} at ratio {}", mode.name(), pair[0], pair[1], cfg.ratios[i + 1]);
        }
    }
    Ok(format!("distance {:.3} -> {:.3} over 20 steps, {} sweep cells monotone", traj[0], traj[20], rows.len()))
}

fn desk_trainer(steps: usize) -> Trainer {
    let train = TrainConfig { steps, ..TrainConfig::default() };
    Trainer::new(ModelConfig::desk(), OptimConfig::desk(), LossWeights::default(), train).unwrap()
}

fn training_sanity(shared: &mut Shared) -> Outcome {
    let mut trainer = desk_trainer(1000);
    let t = &trainer.train;
    ensure!(trainer.model.latent_dim == 16 && t.frame_size == 16 && t.batch == 4 && t.window == 4, "not the desk setting");
    trainer.run(|_| {}).map_err(|e| e.to_string())?;
    let first = trainer.history[0].terms.total;
    let last = trainer.history[999].terms.total;
    ensure!(last <= 0.5 * first, "loss {first:.4} -> {last:.4}");

    let mut replay = desk_trainer(5);
    replay.run(|_| {}).map_err(|e| e.to_string())?;
    ensure!(replay.history[..] == trainer.history[..5], "replay diverged from the first run");
    shared.checkpoint = Some(trainer.checkpoint().encode().map_err(|e| e.to_string())?);
    Ok(format!("loss {first:.4} -> {last:.4} ({:.1}%), replay identical", 100.0 * last / first))
}

fn rollout_machinery(shared: &mut Shared) -> Outcome {
    // Hand-checked: minimum 0.287 at step 6, best later value 0.508.
    let fixture = [0.778, 0.62, 0.48, 0.38, 0.31, 0.287, 0.36, 0.45, 0.508];
    let rec = curve_recovery(&fixture);
    ensure!((rec.magnitude - 0.221).abs() < 1e-12 && rec.min_step == 5, "fixture recovery {rec:?}");

    let bytes = shared.checkpoint.as_ref().ok_or("no trained checkpoint (training criterion did not run)")?;
    let ck = Checkpoint::decode(bytes).map_err(|e| e.to_string())?;
    let train = ck.train.clone().ok_or("checkpoint without training settings")?;
    let traces = rollout_batch(&ck.params, &ck.model, &train.scene(0), 50, 20, 10_000).map_err(|e| e.to_string())?;
    let mut curves = Vec::new();
    for tr in &traces {
        ensure!(tr.frames.len() == 20 && tr.ssim_per_step.len() == 20, "short rollout");
        ensure!(tr.frames.iter().all(|f| f.values().iter().all(|v| (0.0..=1.0).contains(v))), "frame outside [0, 1]");
        ensure!(tr.ssim_per_step.iter().chain(&tr.mse_per_step).all(|v| v.is_finite()), "non-finite curve");
        curves.push(tr.ssim_per_step.clone());
    }
    let report = recovery_stats(&curves).map_err(|e| e.to_string())?;
    ensure!(report.n == 50 && report.mean.is_finite(), "report {report:?}");
    let mean_ssim = curves.iter().map(|c| c[0]).sum::<f64>() / 50.0;
    Ok(format!(
        "50 rollouts, step-1 SSIM {mean_ssim:.3}, recovery mean {:.4} (fraction {:.2}), fixture delta {:.3}",
        report.mean, report.fraction, rec.magnitude
    ))
}

fn oracle_effective_rank(data: &[f64], rows: usize, cols: usize) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, data);
    let sv = m.singular_values();
    let total: f64 = sv.iter().sum();
    (-sv.iter().map(|s| s / total).filter(|p| *p > 0.0).map(|p| p * p.ln()).sum::<f64>()).exp()
}

fn oracle_ssim(a: &FieldGrid<f64>, b: &FieldGrid<f64>) -> f64 {
    let (ch, h, w) = a.shape();
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let (cy, cx) = ((wh as f64 - 1.0) / 2.0, (ww as f64 - 1.0) / 2.0);
    let mut kernel = vec![vec![0.0; ww]; wh];
    let mut norm = 0.0;
    for (dy, row) in kernel.iter_mut().enumerate() {
        for (dx, k) in row.iter_mut().enumerate() {
            *k = (-((dy as f64 - cy).powi(2) + (dx as f64 - cx).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            norm += *k;
        }
    }
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut scores = Vec::new();
    for c in 0..ch {
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let cells: Vec<(f64, f64, f64)> = (0..wh)
                    .flat_map(|dy| (0..ww).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| (kernel[dy][dx] / norm, a.get(c, y0 + dy, x0 + dx), b.get(c, y0 + dy, x0 + dx)))
                    .collect();
                let mu_a: f64 = cells.iter().map(|(k, u, _)| k * u).sum();
                let mu_b: f64 = cells.iter().map(|(k, _, v)| k * v).sum();
                let var_a: f64 = cells.iter().map(|(k, u, _)| k * (u - mu_a).powi(2)).sum();
                let var_b: f64 = cells.iter().map(|(k, _, v)| k * (v - mu_b).powi(2)).sum();
                let cov: f64 = cells.iter().map(|(k, u, v)| k * (u - mu_a) * (v - mu_b)).sum();
                scores.push((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)));
            }
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn metric_oracles(_: &mut Shared) -> Outcome {
    // Frozen: singular values 3, 2, 1 give exp(H) of p = (1/2, 1/3, 1/6).
    let frozen = effective_rank_of(&[3.0, 2.0, 1.0]);
    ensure!((frozen - 2.749_459_273_997_205).abs() < 1e-12, "frozen effective rank {frozen}");

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst_rank = 0.0f64;
    for i in 0..50 {
        let (rows, cols) = (rng.random_range(2..40), rng.random_range(2..12));
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = effective_rank_of(&singular_values(&data, rows, cols));
        worst_rank = worst_rank.max((got - oracle_effective_rank(&data, rows, cols)).abs());
        if i % 5 == 0 {
            let z = uniform_field(&mut rng, cols, 4, 4 + i % 3);
            let n = z.height() * z.width();
            let mut centred = vec![0.0; n * cols];
            for c in 0..cols {
                let mean = z.channel(c).iter().sum::<f64>() / n as f64;
                for (r, v) in z.channel(c).iter().enumerate() {
                    centred[r * cols + c] = v - mean;
                }
            }
            worst_rank = worst_rank.max((effective_rank(&z) - oracle_effective_rank(&centred, n, cols)).abs());
        }
    }
    ensure!(worst_rank < 1e-6, "effective rank off by {worst_rank:e}");

    let mut worst_ssim = 0.0f64;
    for (c, h, w) in [(1, 16, 16), (2, 9, 13), (3, 7, 7), (1, 5, 6), (1, 32, 20)] {
        let a = FieldGrid::from_fn(c, h, w, |_, _, _| rng.random_range(0.0..1.0));
        let noise = FieldGrid::from_fn(c, h, w, |_, _, _| 0.2 * rng.random_range(-1.0..1.0));
        let b = a.zip_map(&noise, |v, n: f64| (v + n).clamp(0.0, 1.0));
        let self_sim = ssim(&a, &a);
        ensure!((self_sim - 1.0).abs() < 1e-12, "ssim(a, a) = {self_sim}");
        worst_ssim = worst_ssim.max((ssim(&a, &b) - oracle_ssim(&a, &b)).abs());
    }
    ensure!(worst_ssim < 1e-10, "ssim off by {worst_ssim:e}");

    let centres = [(0.0, 0.0), (6.0, 0.0), (0.0, 6.0)];
    let noise = Normal::new(0.0, 0.4).unwrap();
    let mut points = Vec::new();
    for &(x, y) in &centres {
        for _ in 0..40 {
            points.push(vec![x + noise.sample(&mut rng), y + noise.sample(&mut rng)]);
        }
    }
    let km = kmeans(&points, 3, 7, 100);
    for blob in 0..3 {
        let labels = &km.assignments[blob * 40..(blob + 1) * 40];
        ensure!(labels.iter().all(|&l| l == labels[0]), "blob {blob} split across clusters");
    }
    ensure!(km.silhouette > 0.8, "silhouette {}", km.silhouette);
    let (best_k, _) = best_kmeans(&points, 2..=6, 7, 100);
    ensure!(best_k == 3, "best k {best_k}");
    Ok(format!("rank diff {worst_rank:.1e}, ssim diff {worst_ssim:.1e}, silhouette {:.3}", km.silhouette))
}
