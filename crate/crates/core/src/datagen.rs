//! Synthetic bouncing-disc videos and the PGM / FWSQ file formats.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FluidError, Result};
use crate::field::FieldGrid;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub n_objects: usize,
    pub object_radius: f64,
    /// Pixels per frame.
    pub speed: f64,
    pub n_frames: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { width: 16, height: 16, n_objects: 2, object_radius: 2.0, speed: 1.0, n_frames: 20, seed: 0 }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let side = self.width.min(self.height) as f64;
        if self.width == 0 || self.height == 0 {
            return Err(FluidError::Config("frame size must be positive".into()));
        }
        if !(self.object_radius > 0.0 && 2.0 * self.object_radius <= side) {
            return Err(FluidError::Config("objects must fit inside the frame".into()));
        }
        if !(self.speed >= 0.0 && self.speed < side / 2.0) {
            return Err(FluidError::Config("speed must lie in [0, min(width, height) / 2)".into()));
        }
        Ok(())
    }
}

/// A disc centre and its velocity, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

fn reflect(pos: f64, vel: f64, r: f64, extent: f64) -> (f64, f64) {
    let (lo, hi) = (r, extent - r);
    let mut p = pos + vel;
    let mut v = vel;
    if p < lo {
        p = 2.0 * lo - p;
        v = v.abs();
    } else if p > hi {
        p = 2.0 * hi - p;
        v = -v.abs();
    }
    (p.clamp(lo, hi), v)
}

/// Advances one frame with elastic reflection at the borders.
pub fn step_disc(d: &Disc, radius: f64, width: usize, height: usize) -> Disc {
    let (x, vx) = reflect(d.x, d.vx, radius, width as f64);
    let (y, vy) = reflect(d.y, d.vy, radius, height as f64);
    Disc { x, y, vx, vy }
}

/// Anti-aliased discs on black; overlapping discs take the brighter value.
pub fn render(discs: &[Disc], radius: f64, width: usize, height: usize) -> FieldGrid<f64> {
    FieldGrid::from_fn(1, height, width, |_, y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        discs
            .iter()
            .map(|d| {
                let dist = ((px - d.x).powi(2) + (py - d.y).powi(2)).sqrt();
                (radius - dist + 0.5).clamp(0.0, 1.0)
            })
            .fold(0.0, f64::max)
    })
}

pub fn initial_discs(cfg: &SceneConfig) -> Vec<Disc> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = cfg.object_radius;
    (0..cfg.n_objects)
        .map(|_| {
            let x = rng.random_range(r..=cfg.width as f64 - r);
            let y = rng.random_range(r..=cfg.height as f64 - r);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Disc { x, y, vx: cfg.speed * angle.cos(), vy: cfg.speed * angle.sin() }
        })
        .collect()
}

/// Disc trajectories, one entry per frame.
pub fn trajectories(cfg: &SceneConfig) -> Vec<Vec<Disc>> {
    let mut discs = initial_discs(cfg);
    let mut out = Vec::with_capacity(cfg.n_frames);
    for _ in 0..cfg.n_frames {
        out.push(discs.clone());
        discs = discs.iter().map(|d| step_disc(d, cfg.object_radius, cfg.width, cfg.height)).collect();
    }
    out
}

pub fn generate_sequence(cfg: &SceneConfig) -> Result<Vec<FieldGrid<f64>>> {
    cfg.validate()?;
    Ok(trajectories(cfg).iter().map(|d| render(d, cfg.object_radius, cfg.width, cfg.height)).collect())
}

// ---- PGM --------------------------------------------------------------------

pub fn encode_pgm<T: Scalar>(frame: &FieldGrid<T>) -> Result<Vec<u8>> {
    if frame.channels() != 1 {
        return Err(FluidError::Shape(format!("PGM needs one channel, got {}", frame.channels())));
    }
    let mut out = format!("P5\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.values().iter().map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

fn pgm_err(reason: &str) -> FluidError {
    FluidError::parse("pgm", reason)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<FieldGrid<f64>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(pgm_err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(pgm_err("missing P5 magic"));
    }
    let mut number = |what: &str| -> Result<usize> {
        token()?.parse::<usize>().map_err(|_| pgm_err(&format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(pgm_err("zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(pgm_err("maxval must be in 1..=255"));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(pgm_err("truncated header"));
    }
    let data = &bytes[pos + 1..];
    if data.len() < width * height {
        return Err(pgm_err(&format!("payload has {} bytes, expected {}", data.len(), width * height)));
    }
    let scale = 1.0 / maxval as f64;
    let values = data[..width * height].iter().map(|&b| b as f64 * scale).collect();
    FieldGrid::from_vec(1, height, width, values)
}

pub fn write_pgm<T: Scalar>(frame: &FieldGrid<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(frame)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<FieldGrid<f64>> {
    decode_pgm(&std::fs::read(path)?)
}

/// Min-max normalizes a single plane to [0, 1]; constant planes map to 0.
pub fn normalize_for_display(values: &[f64], height: usize, width: usize) -> FieldGrid<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    FieldGrid::from_fn(1, height, width, |_, y, x| {
        let v = values[y * width + x];
        if span > 0.0 && span.is_finite() {
            (v - lo) / span
        } else {
            0.0
        }
    })
}

// ---- FWSQ -------------------------------------------------------------------

pub const FWSQ_MAGIC: &[u8; 4] = b"FWSQ";
pub const FWSQ_VERSION: u32 = 1;

/// Header plus little-endian f32 frames. An empty sequence still records C/H/W.
pub fn encode_sequence<T: Scalar>(frames: &[FieldGrid<T>], shape: (usize, usize, usize)) -> Result<Vec<u8>> {
    let (c, h, w) = shape;
    if let Some(f) = frames.iter().find(|f| f.shape() != shape) {
        return Err(FluidError::Shape(format!("frame shape {:?} differs from {:?}", f.shape(), shape)));
    }
    let mut out = Vec::with_capacity(24 + frames.len() * c * h * w * 4);
    out.extend_from_slice(FWSQ_MAGIC);
    for v in [FWSQ_VERSION, c as u32, h as u32, w as u32, frames.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in frames {
        for v in f.values() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_sequence(bytes: &[u8]) -> Result<(Vec<FieldGrid<f32>>, (usize, usize, usize))> {
    let err = |r: &str| FluidError::parse("fwsq", r);
    if bytes.len() < 24 {
        return Err(err("truncated header"));
    }
    if &bytes[..4] != FWSQ_MAGIC {
        return Err(err("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != FWSQ_VERSION {
        return Err(err(&format!("unsupported version {}", word(0))));
    }
    let (c, h, w, t) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    let frame_len = c * h * w;
    let payload = &bytes[24..];
    if payload.len() != t * frame_len * 4 {
        return Err(err(&format!("payload has {} bytes, header implies {}", payload.len(), t * frame_len * 4)));
    }
    let frames = payload
        .chunks_exact((frame_len * 4).max(1))
        .take(t)
        .map(|chunk| {
            let values = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            FieldGrid::from_parts(c, h, w, values)
        })
        .collect();
    Ok((frames, (c, h, w)))
}

pub fn write_sequence<T: Scalar>(frames: &[FieldGrid<T>], shape: (usize, usize, usize), path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_sequence(frames, shape)?)?;
    Ok(())
}

pub fn read_sequence(path: &Path) -> Result<Vec<FieldGrid<f32>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(decode_sequence(&bytes)?.0)
}
