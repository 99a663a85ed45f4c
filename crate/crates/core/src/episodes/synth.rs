//! Synthetic scanning-probe-like images with blob masks.
//!
//! A sample is a union of star-shaped blobs. Each blob raises a flat
//! elevation plateau; the image adds a smooth base texture, Gaussian noise,
//! a per-row scanline offset, and a shadow proportional to the horizontal
//! forward difference of the elevation, then is rescaled to `[0, 1]`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::io;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub image_size: usize,
    /// Multiplies every class's blob radii.
    pub blob_scale: f64,
    pub noise: f64,
    pub scanline: f64,
    pub shadow: f64,
    /// Smallest accepted foreground fraction; the largest is 0.9.
    pub min_foreground: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            blob_scale: 1.0,
            noise: 0.08,
            scanline: 0.04,
            shadow: 0.6,
            min_foreground: 0.02,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 8 {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be a power of two of at least 8",
                self.image_size
            )));
        }
        let amps = [self.blob_scale, self.noise, self.scanline, self.shadow, self.min_foreground];
        if amps.iter().any(|a| !(a.is_finite() && *a >= 0.0)) || self.blob_scale == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "synthetic amplitudes must be finite and nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Blob morphology for one synthetic material.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassParams {
    pub name: String,
    /// Inclusive blob count range.
    pub count: (usize, usize),
    /// Mean radius range as a fraction of the image side.
    pub radius: (f64, f64),
    /// Largest ratio between the two semi-axes.
    pub elongation: f64,
    /// Relative radial modulation amplitude.
    pub wobble: f64,
    pub lobes: u32,
}

impl ClassParams {
    fn new(name: &str, count: (usize, usize), radius: (f64, f64), elongation: f64, wobble: f64, lobes: u32) -> Self {
        Self {
            name: name.to_string(),
            count,
            radius,
            elongation,
            wobble,
            lobes,
        }
    }
}

/// Five materials; the last one is the conventional held-out class.
pub fn default_classes() -> Vec<ClassParams> {
    vec![
        ClassParams::new("grains", (5, 9), (0.06, 0.09), 1.3, 0.05, 3),
        ClassParams::new("flakes", (2, 4), (0.12, 0.17), 2.2, 0.1, 3),
        ClassParams::new("islands", (1, 2), (0.2, 0.27), 1.3, 0.25, 5),
        ClassParams::new("rods", (3, 5), (0.1, 0.15), 3.5, 0.0, 2),
        ClassParams::new("terraces", (2, 3), (0.14, 0.2), 1.1, 0.12, 4),
    ]
}

/// One blob: `1 - (d/R(θ))²` over a rotated ellipse, thresholded at 0.
#[derive(Clone, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    angle: f64,
    wobble: f64,
    lobes: f64,
    phase: f64,
    height: f64,
}

impl Blob {
    fn field(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let theta = v.atan2(u);
        let r = 1.0 + self.wobble * (self.lobes * theta + self.phase).sin();
        1.0 - (u * u + v * v) / (r * r)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    /// `H×W` in `[0, 1]`
    pub image: Tensor,
    /// `H×W` of `{0, 1}`
    pub mask: Tensor,
    pub elevation: Tensor,
    /// The shadow term before normalization.
    pub shadow: Tensor,
}

/// `strength · (elev[r, c+1] − elev[r, c])`, zero in the last column.
pub fn shadow_term(elevation: &Tensor, strength: f64) -> Tensor {
    let (h, w) = (elevation.rows(), elevation.cols());
    Tensor::from_fn(&[h, w], |i| {
        let (r, c) = (i / w, i % w);
        if c + 1 < w {
            strength * (elevation.at2(r, c + 1) - elevation.at2(r, c))
        } else {
            0.0
        }
    })
}

fn draw(cfg: &SyntheticConfig, class: &ClassParams, seed: u64, attempt: u64) -> SyntheticSample {
    let n = cfg.image_size;
    let nf = n as f64;
    let mut r = rng::stream(seed, attempt);
    let count = r.random_range(class.count.0..=class.count.1.max(class.count.0));
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let radius = r.random_range(class.radius.0..=class.radius.1) * cfg.blob_scale * nf;
            let e = r.random_range(1.0..=class.elongation.max(1.0));
            Blob {
                cy: r.random_range(0.1..0.9) * nf,
                cx: r.random_range(0.1..0.9) * nf,
                a: radius * e.sqrt(),
                b: radius / e.sqrt(),
                angle: r.random_range(0.0..PI),
                wobble: class.wobble,
                lobes: class.lobes as f64,
                phase: r.random_range(0.0..2.0 * PI),
                height: r.random_range(0.6..=1.0),
            }
        })
        .collect();

    let mut mask = Tensor::zeros(&[n, n]);
    let mut elevation = Tensor::zeros(&[n, n]);
    for y in 0..n {
        for x in 0..n {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            for blob in &blobs {
                if blob.field(py, px) > 0.0 {
                    mask.set2(y, x, 1.0);
                    elevation.set2(y, x, elevation.at2(y, x).max(blob.height));
                }
            }
        }
    }

    // Smooth base texture from a few low-frequency waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                r.random_range(-3.0..=3.0),
                r.random_range(-3.0..=3.0),
                r.random_range(0.0..2.0 * PI),
                r.random_range(0.5..=1.0),
            )
        })
        .collect();
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let rows: Vec<f64> = (0..n).map(|_| cfg.scanline * gauss.sample(&mut r)).collect();
    let shadow = shadow_term(&elevation, cfg.shadow);
    let mut image = elevation.clone();
    for y in 0..n {
        for x in 0..n {
            let texture: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, amp)| {
                    amp * (2.0 * PI * (fy * y as f64 + fx * x as f64) / nf + ph).sin()
                })
                .sum::<f64>()
                / waves.len() as f64;
            let noise = cfg.noise * gauss.sample(&mut r);
            let v = image.at2(y, x)
                + cfg.noise * texture
                + noise
                + rows[y]
                + shadow.at2(y, x);
            image.set2(y, x, v);
        }
    }
    let lo = image.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = image.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let image = if hi > lo {
        image.map(|v| (v - lo) / (hi - lo))
    } else {
        Tensor::zeros(&[n, n])
    };
    SyntheticSample {
        image,
        mask,
        elevation,
        shadow,
    }
}

/// A sample whose foreground fraction lies in `[min_foreground, 0.9)` and is
/// nonzero, retrying with fresh draws up to [`MAX_ATTEMPTS`] times.
pub fn generate_synthetic(cfg: &SyntheticConfig, class: &ClassParams, seed: u64) -> Result<SyntheticSample> {
    cfg.validate()?;
    let total = (cfg.image_size * cfg.image_size) as f64;
    for attempt in 0..MAX_ATTEMPTS {
        let s = draw(cfg, class, seed, attempt as u64);
        let frac = s.mask.sum() / total;
        if frac > 0.0 && frac >= cfg.min_foreground && frac < 0.9 {
            return Ok(s);
        }
    }
    Err(Error::GenerationFailed(MAX_ATTEMPTS))
}

/// Seed of sample `index` of class `class_index` under a dataset seed.
pub fn sample_seed(seed: u64, class_index: usize, index: usize) -> u64 {
    rng::label_stream(&format!("{seed}/{class_index}/{index}"))
}

/// Writes `per_class` samples of each class in the dataset layout and
/// returns the per-class counts.
pub fn write_dataset(
    root: &Path,
    cfg: &SyntheticConfig,
    classes: &[ClassParams],
    per_class: usize,
    seed: u64,
) -> Result<BTreeMap<String, usize>> {
    cfg.validate()?;
    let mut counts = BTreeMap::new();
    for (ci, class) in classes.iter().enumerate() {
        let images = root.join(&class.name).join("images");
        let masks = root.join(&class.name).join("masks");
        fs::create_dir_all(&images)?;
        fs::create_dir_all(&masks)?;
        for i in 0..per_class {
            let s = generate_synthetic(cfg, class, sample_seed(seed, ci, i))?;
            let name = format!("{}_{i:03}.png", class.name);
            io::write_image(&images.join(&name), &s.image)?;
            io::write_mask(&masks.join(&name), &s.mask)?;
        }
        counts.insert(class.name.clone(), per_class);
    }
    Ok(counts)
}
