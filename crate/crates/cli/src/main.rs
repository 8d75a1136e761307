//! `fluidlab` experiment driver.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fluidlab::analysis::phase::{energy_experiment, initial_field, linspace, phase_sweep, InitKind};
use fluidlab::analysis::resilience::{op_count_scaling, resilience_sweep, FreeEvolution};
use fluidlab::analysis::rollout::{fit_exp_null, recovery_stats, rollout_batch};
use fluidlab::analysis::symmetry::{seeded_layer, symmetry_experiment};
use fluidlab::belief::CorruptionMode;
use fluidlab::datagen::{generate_sequence, normalize_for_display, write_sequence, SceneConfig};
use fluidlab::training::checkpoint::Checkpoint;
use fluidlab::training::gradcheck::{check_gradients, random_frames, sample_indices, warm_state, GradSample};
use fluidlab::training::trainer::Trainer;

use config::{Preset, ResilienceDynamics, RunConfig};
use output::{CliError, Run};

#[derive(Parser)]
#[command(name = "fluidlab", version, about = "Reaction-diffusion world-model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Base defaults before the config file is applied.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic disc videos; writes a checkpoint and a loss CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Number of windows (optimizer steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Autoregressive rollouts from a checkpoint.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        n_sequences: Option<usize>,
    },
    /// Recovery statistics from a rollout CSV.
    Recovery {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rollout_csv: PathBuf,
    },
    /// Growth-rate sweep over diffusion coefficient and time step.
    Phase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        d_min: Option<f64>,
        #[arg(long)]
        d_max: Option<f64>,
        #[arg(long)]
        dt_min: Option<f64>,
        #[arg(long)]
        dt_max: Option<f64>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Energy trajectory of a free-running layer.
    Energy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["uniform", "random", "gradient"])]
        init: Option<String>,
        #[arg(long, value_enum)]
        norm: Option<OnOff>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Structure formation from a nearly uniform field.
    Symmetry {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Belief-field corruption sweep.
    Resilience {
        #[command(flatten)]
        common: Common,
        /// Comma-separated corruption modes.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        /// Comma-separated corruption ratios.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Use the belief dynamics of a trained checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Attention versus diffusion operation counts.
    Scaling {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        tokens: Option<Vec<u64>>,
    },
    /// Analytic against central-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Minimum number of parameter indices to check.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Write synthetic sequences as FWSQ files.
    GenData {
        #[command(flatten)]
        common: Common,
        /// JSON scene configuration; replaces the `scene` block.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        n_sequences: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Rollout { .. } => "rollout",
            Command::Recovery { .. } => "recovery",
            Command::Phase { .. } => "phase",
            Command::Energy { .. } => "energy",
            Command::Symmetry { .. } => "symmetry",
            Command::Resilience { .. } => "resilience",
            Command::Scaling { .. } => "scaling",
            Command::Gradcheck { .. } => "gradcheck",
            Command::GenData { .. } => "gen-data",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Rollout { common, .. }
            | Command::Recovery { common, .. }
            | Command::Phase { common, .. }
            | Command::Energy { common, .. }
            | Command::Symmetry { common, .. }
            | Command::Resilience { common, .. }
            | Command::Scaling { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::GenData { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path, common.preset)?,
        None => RunConfig::preset(common.preset.unwrap_or_default()),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<(), CliError> {
    let n = match std::env::var("FLUIDLAB_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| CliError::usage(format!("FLUIDLAB_THREADS must be an integer, got {v:?}")))?,
        Err(_) => 0,
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.command.common().out.clone();
    let result = configure_threads().and_then(|_| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let json = e.to_json();
            eprintln!("{json}");
            if std::fs::create_dir_all(&out).is_ok() {
                let _ = std::fs::write(out.join("error.json"), format!("{json}\n"));
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    let name = command.name();
    let cfg = load_config(command.common())?;
    let mut run = Run::create(&command.common().out, name)?;
    match command {
        Command::Train { steps, .. } => train(cfg, steps, &mut run),
        Command::Rollout { checkpoint, horizon, n_sequences, .. } => rollout(cfg, &checkpoint, horizon, n_sequences, &mut run),
        Command::Recovery { rollout_csv, .. } => recovery(cfg, &rollout_csv, &mut run),
        Command::Phase { d_min, d_max, dt_min, dt_max, grid, steps, .. } => {
            phase(cfg, [d_min, d_max, dt_min, dt_max], grid, steps, &mut run)
        }
        Command::Energy { init, norm, steps, .. } => energy(cfg, init, norm, steps, &mut run),
        Command::Symmetry { epsilon, steps, .. } => symmetry(cfg, epsilon, steps, &mut run),
        Command::Resilience { modes, ratios, checkpoint, .. } => resilience(cfg, modes, ratios, checkpoint, &mut run),
        Command::Scaling { tokens, .. } => scaling(cfg, tokens, &mut run),
        Command::Gradcheck { samples, .. } => gradcheck(cfg, samples, &mut run),
        Command::GenData { scene, n_sequences, frames, .. } => gen_data(cfg, scene, n_sequences, frames, &mut run),
    }
}

#[derive(Serialize)]
struct LossRow {
    step: u64,
    total: f64,
    recon: f64,
    pred: f64,
    variance: f64,
    gradient: f64,
    edge: f64,
    freq: f64,
    grad_norm: f64,
    lr: f64,
}

fn train(mut cfg: RunConfig, steps: Option<usize>, run: &mut Run) -> Result<(), CliError> {
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.train.seed = cfg.seed;
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.optim.clone(), cfg.loss.clone(), cfg.train.clone())?;
    let mut rows = Vec::with_capacity(cfg.train.steps);
    trainer.run(|m| {
        rows.push(LossRow {
            step: m.step,
            total: m.terms.total,
            recon: m.terms.recon,
            pred: m.terms.pred,
            variance: m.terms.variance,
            gradient: m.terms.gradient,
            edge: m.terms.edge,
            freq: m.terms.freq,
            grad_norm: m.grad_norm,
            lr: m.lr,
        })
    })?;
    run.csv("loss.csv", &rows)?;
    run.bytes("checkpoint.fwck", &trainer.checkpoint().encode()?)?;
    run.finish(&cfg)
}

#[derive(Serialize)]
struct RolloutRow {
    sequence: usize,
    step: usize,
    ssim: f64,
    mse: f64,
}

fn rollout(
    mut cfg: RunConfig,
    checkpoint: &Path,
    horizon: Option<usize>,
    n: Option<usize>,
    run: &mut Run,
) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    cfg.model = ck.model.clone();
    if let Some(h) = horizon {
        cfg.rollout.horizon = h;
    }
    if let Some(n) = n {
        cfg.rollout.n_sequences = n;
    }
    let scene = match &ck.train {
        Some(t) => t.scene(0),
        None => cfg.train.scene(0),
    };
    let traces = rollout_batch(&ck.params, &ck.model, &scene, cfg.rollout.n_sequences, cfg.rollout.horizon, cfg.seed)?;
    let mut rows = Vec::new();
    for (i, tr) in traces.iter().enumerate() {
        for t in 0..tr.ssim_per_step.len() {
            rows.push(RolloutRow { sequence: i, step: t + 1, ssim: tr.ssim_per_step[t], mse: tr.mse_per_step[t] });
        }
    }
    run.csv("rollout.csv", &rows)?;
    for (i, tr) in traces.iter().take(cfg.rollout.save_frames).enumerate() {
        for (t, frame) in tr.frames.iter().enumerate() {
            run.pgm(&format!("frames/seq{i:03}_step{:03}.pgm", t + 1), frame)?;
        }
    }
    run.input("checkpoint", checkpoint)?;
    run.finish(&cfg)
}

#[derive(Serialize)]
struct RecoveryOutput {
    report: fluidlab::analysis::rollout::RecoveryReport,
    mean_curve: Vec<f64>,
    null_fit: Option<fluidlab::analysis::rollout::ExpFit>,
}

fn recovery(cfg: RunConfig, csv_path: &Path, run: &mut Run) -> Result<(), CliError> {
    let curves = output::read_rollout_curves(csv_path)?;
    let report = recovery_stats(&curves)?;
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    let mean_curve: Vec<f64> =
        (0..len).map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / curves.len() as f64).collect();
    let null_fit = fit_exp_null(&mean_curve, cfg.recovery.fit_steps).ok();
    run.json("recovery.json", &RecoveryOutput { report, mean_curve, null_fit })?;
    run.input("rollout_csv", csv_path)?;
    run.finish(&cfg)
}

#[derive(Serialize)]
struct PhaseRow {
    #[serde(rename = "D")]
    d: f64,
    dt: f64,
    growth_rate: f64,
    regime: &'static str,
}

fn phase(
    mut cfg: RunConfig,
    bounds: [Option<f64>; 4],
    grid: Option<usize>,
    steps: Option<usize>,
    run: &mut Run,
) -> Result<(), CliError> {
    let [d_min, d_max, dt_min, dt_max] = bounds;
    let n = grid.unwrap_or(cfg.phase.d_values.len());
    let span = |v: &[f64]| (v.first().copied().unwrap_or(0.0), v.last().copied().unwrap_or(0.0));
    let (d0, d1) = span(&cfg.phase.d_values);
    let (t0, t1) = span(&cfg.phase.dt_values);
    if bounds.iter().any(Option::is_some) || grid.is_some() {
        cfg.phase.d_values = linspace(d_min.unwrap_or(d0), d_max.unwrap_or(d1), n);
        cfg.phase.dt_values = linspace(dt_min.unwrap_or(t0), dt_max.unwrap_or(t1), n);
    }
    if let Some(s) = steps {
        cfg.phase.steps = s;
    }
    cfg.phase.seed = cfg.seed;
    let points = phase_sweep(&cfg.phase)?;
    let rows: Vec<PhaseRow> =
        points.iter().map(|p| PhaseRow { d: p.d, dt: p.dt, growth_rate: p.growth_rate, regime: p.regime.name() }).collect();
    run.csv("phase.csv", &rows)?;
    let (h, w) = (cfg.phase.d_values.len(), cfg.phase.dt_values.len());
    let rates: Vec<f64> = points.iter().map(|p| p.growth_rate.clamp(-10.0, 10.0)).collect();
    run.pgm("phase.pgm", &normalize_for_display(&rates, h, w))?;
    run.finish(&cfg)
}

#[derive(Serialize)]
struct EnergyRow {
    step: usize,
    energy: f64,
}

fn energy(
    mut cfg: RunConfig,
    init: Option<String>,
    norm: Option<OnOff>,
    steps: Option<usize>,
    run: &mut Run,
) -> Result<(), CliError> {
    if let Some(i) = init {
        cfg.energy.init = InitKind::parse(&i).ok_or_else(|| CliError::usage(format!("unknown init {i:?}")))?;
    }
    if let Some(n) = norm {
        cfg.energy.normalize = matches!(n, OnOff::On);
    }
    if let Some(s) = steps {
        cfg.energy.steps = s;
    }
    let e = &cfg.energy;
    let params = seeded_layer(e.channels, e.reaction_gain, e.dt, cfg.seed);
    let u0 = initial_field(e.init, e.channels, e.size, e.size, cfg.seed.wrapping_add(1));
    let traj = energy_experiment(&u0, &params, e.steps, e.normalize);
    let rows: Vec<EnergyRow> = traj.into_iter().enumerate().map(|(step, energy)| EnergyRow { step, energy }).collect();
    run.csv("energy.csv", &rows)?;
    run.finish(&cfg)
}

fn symmetry(mut cfg: RunConfig, epsilon: Option<f64>, steps: Option<usize>, run: &mut Run) -> Result<(), CliError> {
    if let Some(e) = epsilon {
        cfg.symmetry.epsilon = e;
    }
    if let Some(s) = steps {
        cfg.symmetry.steps = s;
    }
    cfg.symmetry.seed = cfg.seed;
    let trace = symmetry_experiment(&cfg.symmetry)?;
    run.csv("symmetry.csv", &trace.steps)?;
    for (t, f) in trace.fields.iter().enumerate() {
        let avg = f.channel_average();
        run.pgm(&format!("fields/step_{t:03}.pgm"), &normalize_for_display(avg.values(), f.height(), f.width()))?;
    }
    run.finish(&cfg)
}

#[derive(Serialize)]
struct ResilienceCsvRow {
    mode: &'static str,
    ratio: f64,
    residual_mse: f64,
    recovery_steps: Option<usize>,
}

fn resilience(
    mut cfg: RunConfig,
    modes: Option<Vec<String>>,
    ratios: Option<Vec<f64>>,
    checkpoint: Option<PathBuf>,
    run: &mut Run,
) -> Result<(), CliError> {
    if let Some(m) = modes {
        cfg.resilience.modes = m
            .iter()
            .map(|s| CorruptionMode::parse(s.trim()).ok_or_else(|| CliError::usage(format!("unknown corruption mode {s:?}"))))
            .collect::<Result<_, _>>()?;
    }
    if let Some(r) = ratios {
        cfg.resilience.ratios = r;
    }
    cfg.resilience.seed = cfg.seed;
    let (belief, integration, bio) = match &checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            cfg.resilience.channels = ck.model.latent_dim;
            let integ = ck.model.belief_integration(false);
            (ck.params.belief, integ, ck.model.bio)
        }
        None => config::sweep_dynamics(&cfg),
    };
    if checkpoint.is_some() {
        cfg.resilience_dynamics = ResilienceDynamics::Checkpoint;
    }
    let rows = resilience_sweep(FreeEvolution { params: &belief, integration: &integration, bio: &bio }, &cfg.resilience)?;
    let csv: Vec<ResilienceCsvRow> = rows
        .iter()
        .map(|r| ResilienceCsvRow {
            mode: r.mode.name(),
            ratio: r.ratio,
            residual_mse: r.residual_mse,
            recovery_steps: r.recovery_steps,
        })
        .collect();
    run.csv("resilience.csv", &csv)?;
    if let Some(p) = &checkpoint {
        run.input("checkpoint", p)?;
    }
    run.finish(&cfg)
}

fn scaling(mut cfg: RunConfig, tokens: Option<Vec<u64>>, run: &mut Run) -> Result<(), CliError> {
    if let Some(t) = tokens {
        cfg.scaling.tokens = t;
    }
    run.csv("scaling.csv", &op_count_scaling(&cfg.scaling.tokens))?;
    run.finish(&cfg)
}

#[derive(Serialize)]
struct GradcheckOutput {
    status: &'static str,
    max_rel_error: f64,
    tolerance: f64,
    n_checked: usize,
    entries: Vec<fluidlab::training::gradcheck::GradCheckEntry>,
}

fn gradcheck(mut cfg: RunConfig, samples: Option<usize>, run: &mut Run) -> Result<(), CliError> {
    if let Some(s) = samples {
        cfg.gradcheck.samples = s;
    }
    let g = &cfg.gradcheck;
    let model = &g.model;
    let params = fluidlab::model::ModelParams::<f64>::init(model, cfg.seed);
    let size = g.frame_size;
    let warm = random_frames(g.warmup_frames, model.in_channels, size, size, cfg.seed.wrapping_add(1));
    let state = warm_state(&params, model, &warm)?;
    let frames = random_frames(g.window + 1, model.in_channels, size, size, cfg.seed.wrapping_add(2));
    let sample = GradSample { cfg: model, weights: &g.loss, frames: &frames, state: &state };
    let indices = sample_indices(&params, g.per_tensor, g.samples, cfg.seed.wrapping_add(3));
    let report = check_gradients(&params, &sample, &indices, g.step)?;
    let out = GradcheckOutput {
        status: if report.passed { "pass" } else { "fail" },
        max_rel_error: report.max_rel_error,
        tolerance: report.tolerance,
        n_checked: report.entries.len(),
        entries: report.entries,
    };
    run.json("gradcheck.json", &out)?;
    run.finish(&cfg)?;
    if out.status == "fail" {
        return Err(CliError::failed(format!("gradient check failed: max relative error {:.3e}", out.max_rel_error)));
    }
    Ok(())
}

fn gen_data(
    mut cfg: RunConfig,
    scene: Option<PathBuf>,
    n: Option<usize>,
    frames: Option<usize>,
    run: &mut Run,
) -> Result<(), CliError> {
    if let Some(path) = &scene {
        cfg.scene = config::read_json::<SceneConfig>(path)?;
    }
    if let Some(n) = n {
        cfg.gen_data.n_sequences = n;
    }
    if let Some(f) = frames {
        cfg.scene.n_frames = f;
    }
    cfg.scene.seed = cfg.seed;
    cfg.scene.validate()?;
    for i in 0..cfg.gen_data.n_sequences {
        let sc = SceneConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.scene.clone() };
        let seq = generate_sequence(&sc)?;
        let path = run.path(&format!("seq_{i:04}.fwsq"))?;
        write_sequence(&seq, (1, sc.height, sc.width), &path)?;
        run.register(&format!("seq_{i:04}.fwsq"))?;
    }
    if let Some(p) = &scene {
        run.input("scene", p)?;
    }
    run.finish(&cfg)
}
