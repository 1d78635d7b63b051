//! Desk-scale stand-in for SAR target chips.
//!
//! Each class is a bright geometric target on a dim clutter background with
//! a dark radar shadow cast along the image diagonal. Position, size and
//! brightness are jittered per sample and the whole chip is multiplied by
//! unit-mean gamma speckle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::graph_builder::Image;
use crate::training::STREAM_SYNTHETIC;

pub const SHAPE_NAMES: [&str; 10] = [
    "rectangle",
    "ellipse",
    "l_shape",
    "cross",
    "triangle",
    "ring",
    "diamond",
    "t_shape",
    "twin",
    "bar",
];

const SHADOW_LEVEL: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub size: usize,
    pub classes: usize,
    pub per_class: usize,
    /// Speckle standard deviation (the noise has mean 1).
    pub noise: f64,
    /// Shadow displacement in pixels, down and to the right.
    pub shadow_offset: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            size: 32,
            classes: 3,
            per_class: 87,
            noise: 0.2,
            shadow_offset: 3,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::InvalidInput(format!("synthetic size must be >= 16, got {}", self.size)));
        }
        if !(2..=10).contains(&self.classes) {
            return Err(Error::InvalidInput(format!(
                "synthetic classes must be between 2 and 10, got {}",
                self.classes
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidInput(format!("noise level must be >= 0, got {}", self.noise)));
        }
        if self.shadow_offset >= self.size / 2 {
            return Err(Error::InvalidInput("shadow offset must be below half the image size".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        SHAPE_NAMES[..self.classes].iter().map(|s| s.to_string()).collect()
    }
}

/// Membership test in target-normalized coordinates (`u` across, `v` down).
fn inside(shape: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match shape {
        0 => u.abs() <= 1.0 && v.abs() <= 0.5,
        1 => u * u + (v / 0.7) * (v / 0.7) <= 1.0,
        2 => (u.abs() <= 1.0 && (0.4..=1.0).contains(&v)) || ((-1.0..=-0.4).contains(&u) && v.abs() <= 1.0),
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
        5 => (0.55..=1.0).contains(&r),
        6 => u.abs() + v.abs() <= 1.0,
        7 => (u.abs() <= 1.0 && (-1.0..=-0.5).contains(&v)) || (u.abs() <= 0.3 && v.abs() <= 1.0),
        8 => ((u - 0.55).powi(2) + v * v).sqrt() <= 0.42 || ((u + 0.55).powi(2) + v * v).sqrt() <= 0.42,
        _ => u.abs() <= 0.35 && v.abs() <= 1.0,
    }
}

fn render(shape: usize, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, speckle: Option<&Gamma<f64>>) -> Vec<f64> {
    let n = cfg.size;
    let jitter = (3 * n / 32).max(1) as f64;
    let center_r = n as f64 / 2.0 - 0.5 + rng.gen_range(-jitter..=jitter);
    let center_c = n as f64 / 2.0 - 0.5 + rng.gen_range(-jitter..=jitter);
    let radius = n as f64 * 0.28 * rng.gen_range(0.85..1.15);
    let background = rng.gen_range(0.12..0.25);
    let brightness = rng.gen_range(0.7..0.95);

    let mask: Vec<bool> = (0..n * n)
        .map(|i| {
            let (r, c) = ((i / n) as f64, (i % n) as f64);
            inside(shape, (c - center_c) / radius, (r - center_r) / radius)
        })
        .collect();
    let off = cfg.shadow_offset;
    (0..n * n)
        .map(|i| {
            let (r, c) = (i / n, i % n);
            let base = if mask[i] {
                brightness
            } else if r >= off && c >= off && mask[(r - off) * n + (c - off)] {
                SHADOW_LEVEL
            } else {
                background
            };
            let factor = speckle.map_or(1.0, |g| g.sample(rng));
            (base * factor).clamp(0.0, 1.0)
        })
        .collect()
}

/// Renders `per_class` samples of each class, class-major, from one seeded stream.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_SYNTHETIC);
    let speckle = if cfg.noise > 0.0 {
        // shape k, scale 1/k: mean 1, standard deviation 1/sqrt(k) = noise
        let k = 1.0 / (cfg.noise * cfg.noise);
        Some(Gamma::new(k, 1.0 / k).map_err(|e| Error::InvalidInput(e.to_string()))?)
    } else {
        None
    };
    let names = cfg.class_names();
    let mut samples = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (label, name) in names.iter().enumerate() {
        for i in 0..cfg.per_class {
            let values = render(label, cfg, &mut rng, speckle.as_ref());
            samples.push(Sample {
                image: Image::new(cfg.size, cfg.size, values)?,
                label,
                source: format!("synthetic:{name}:{i}"),
            });
        }
    }
    Ok(samples)
}
