//! Synthetic single-object domains. A clean two-level rendering of a random
//! shape is passed through a domain style (gamma, low-frequency texture,
//! blur, intensity offset, additive noise) so that domains share geometry
//! statistics but differ in appearance.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SegmentationMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::DomainSample;

/// Background and foreground levels of the clean rendering.
pub const CLEAN_BACKGROUND: f64 = 0.2;
pub const CLEAN_FOREGROUND: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainStyle {
    pub intensity_offset: f64,
    pub gamma: f64,
    pub noise_std: f64,
    pub blur_sigma: f64,
    pub texture_amp: f64,
}

impl Default for DomainStyle {
    fn default() -> Self {
        Self::neutral()
    }
}

impl DomainStyle {
    pub fn neutral() -> Self {
        Self { intensity_offset: 0.0, gamma: 1.0, noise_std: 0.0, blur_sigma: 0.0, texture_amp: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("style gamma must be positive, got {}", self.gamma)));
        }
        if self.noise_std < 0.0 || self.blur_sigma < 0.0 || self.texture_amp < 0.0 {
            return Err(Error::Config("style noise, blur and texture amplitudes must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Disk,
    Ellipse,
    Blob,
}

/// Star-shaped region around a centre; every family is connected.
struct Shape {
    cy: f64,
    cx: f64,
    radius: f64,
    aspect: f64,
    angle: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Shape {
    fn random(family: ShapeFamily, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let side = h.min(w) as f64;
        let radius = side * rng.random_range(0.12..0.24);
        let margin = radius * 1.35 + 1.0;
        let cy = rng.random_range(margin..(h as f64 - margin).max(margin + 1e-9));
        let cx = rng.random_range(margin..(w as f64 - margin).max(margin + 1e-9));
        let (aspect, angle) = match family {
            ShapeFamily::Disk => (1.0, 0.0),
            _ => (rng.random_range(0.6..1.0), rng.random_range(0.0..PI)),
        };
        let harmonics = match family {
            ShapeFamily::Blob => (2..=4)
                .map(|k| (k as f64, rng.random_range(0.0..0.12), rng.random_range(0.0..2.0 * PI)))
                .collect(),
            _ => Vec::new(),
        };
        Self { cy, cx, radius, aspect, angle, harmonics }
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        let dy = r as f64 + 0.5 - self.cy;
        let dx = c as f64 + 0.5 - self.cx;
        let (s, co) = self.angle.sin_cos();
        let u = dx * co + dy * s;
        let v = (-dx * s + dy * co) / self.aspect;
        let rho = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        let bound = self.radius * (1.0 + self.harmonics.iter().map(|&(k, a, p)| a * (k * theta + p).cos()).sum::<f64>());
        rho <= bound
    }
}

/// Smooth field in roughly `[-1, 1]`: a few random low-frequency plane waves.
fn texture_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(0.5..2.0);
            let dir = rng.random_range(0.0..2.0 * PI);
            (freq * dir.cos(), freq * dir.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 / h as f64, c as f64 / w as f64);
            let v: f64 = waves.iter().map(|&(fx, fy, p)| (2.0 * PI * (fx * x + fy * y) + p).sin()).sum();
            out.push(v / waves.len() as f64);
        }
    }
    out
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let off = k as isize - radius;
                    let (rr, cc) = if horizontal {
                        (r as isize, (c as isize + off).clamp(0, w as isize - 1))
                    } else {
                        ((r as isize + off).clamp(0, h as isize - 1), c as isize)
                    };
                    acc += kv * src[rr as usize * w + cc as usize];
                }
                dst[r * w + c] = acc / norm;
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

/// Render the clean image for a mask.
pub fn clean_rendering(mask: &SegmentationMask) -> Vec<f64> {
    mask.data().iter().map(|&m| if m { CLEAN_FOREGROUND } else { CLEAN_BACKGROUND }).collect()
}

/// Apply a style to a clean rendering. Neutral parameters leave the input
/// untouched; the output is not clipped.
pub fn apply_style(clean: &[f64], h: usize, w: usize, style: &DomainStyle, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img: Vec<f64> = if style.gamma == 1.0 {
        clean.to_vec()
    } else {
        clean.iter().map(|&v| v.max(0.0).powf(style.gamma)).collect()
    };
    if style.texture_amp > 0.0 {
        let field = texture_field(h, w, rng);
        img.iter_mut().zip(field).for_each(|(v, f)| *v += style.texture_amp * f);
    }
    if style.blur_sigma > 0.0 {
        img = gaussian_blur(&img, h, w, style.blur_sigma);
    }
    if style.intensity_offset != 0.0 {
        img.iter_mut().for_each(|v| *v += style.intensity_offset);
    }
    if style.noise_std > 0.0 {
        let normal = Normal::new(0.0, style.noise_std).expect("validated noise std");
        img.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    img
}

fn sample_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((index as u64) << 1) | stream);
    rng
}

/// `n` samples of one domain. Sample `i` draws its geometry and its style
/// noise from two streams derived from `(seed, i)`, so domains generated with
/// the same seed share shapes and differ only in appearance.
pub fn generate_synthetic_domain<T: Scalar>(
    domain: &str,
    n: usize,
    style: &DomainStyle,
    family: ShapeFamily,
    size: (usize, usize),
    seed: u64,
) -> Result<Vec<DomainSample<T>>> {
    if n == 0 {
        return Err(Error::Config(format!("domain `{domain}` must contain at least one sample")));
    }
    style.validate()?;
    let (h, w) = size;
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("synthetic images must be at least 8x8, got {h}x{w}")));
    }
    (0..n)
        .map(|i| {
            let shape = Shape::random(family, h, w, &mut sample_rng(seed, i, 0));
            let mask = SegmentationMask::from_fn(h, w, |r, c| shape.contains(r, c));
            let img = apply_style(&clean_rendering(&mask), h, w, style, &mut sample_rng(seed, i, 1));
            Ok(DomainSample {
                id: format!("{domain}_{i:04}"),
                domain: domain.to_string(),
                image: Tensor::from_vec(&[h, w], img.into_iter().map(T::of).collect())?,
                mask,
            })
        })
        .collect()
}
