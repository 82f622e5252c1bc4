//! Desk-scale stand-in for a character dataset: every class is a fixed
//! oriented bar plus a corner blob, observed through Gaussian pixel noise.

use std::f64::consts::PI;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::InputShape;
use crate::error::{Error, Result};

use super::Pool;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 16,
            per_class: 500,
            height: 12,
            width: 12,
            noise_sigma: 0.15,
            seed: 0,
        }
    }
}

/// Noise-free image of class `class`.
pub fn template(class: usize, height: usize, width: usize) -> Vec<f32> {
    let angle = PI * (class % 8) as f64 / 8.0;
    let corner = (class / 8) % 4;
    let thickness = 0.8 + 0.5 * (class / 32) as f64;
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let half_len = 0.4 * height.min(width) as f64;
    let (dy, dx) = (angle.sin(), angle.cos());
    let margin = 0.2 * height.min(width) as f64;
    let by = if corner / 2 == 0 { margin } else { height as f64 - 1.0 - margin };
    let bx = if corner.is_multiple_of(2) { margin } else { width as f64 - 1.0 - margin };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (ry, rx) = (y as f64 - cy, x as f64 - cx);
            let along = ry * dy + rx * dx;
            let across = -ry * dx + rx * dy;
            let bar = if along.abs() <= half_len {
                (-across * across / (2.0 * thickness * thickness)).exp()
            } else {
                0.0
            };
            let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
            let blob = (-d2 / (2.0 * 1.2 * 1.2)).exp();
            out.push(bar.max(blob) as f32);
        }
    }
    out
}

/// Generates `classes * per_class` single-channel images, grouped by class.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Pool> {
    if spec.classes == 0 || spec.per_class == 0 || spec.height < 3 || spec.width < 3 {
        return Err(Error::Config(
            "synthetic pool needs classes, per_class > 0 and images of at least 3x3".into(),
        ));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::Config("noise_sigma must be finite and nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let pixels = spec.height * spec.width;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class * pixels);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        let base = template(class, spec.height, spec.width);
        for _ in 0..spec.per_class {
            images.extend(base.iter().map(|&v| v + noise.sample(&mut rng) as f32));
            labels.push(class);
        }
    }
    Pool::new(
        images,
        labels,
        InputShape {
            channels: 1,
            height: spec.height,
            width: spec.width,
        },
    )
}
