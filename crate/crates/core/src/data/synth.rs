use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream;

/// Parameters of a synthetic class-conditional image set.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub per_class: usize,
    /// `(C, H, W)`.
    pub shape: [usize; 3],
    /// Pixel noise standard deviation on the `[0, 1]` intensity scale.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { n_classes: 10, per_class: 100, shape: [3, 32, 32], noise: 8.0 / 255.0, seed: 0 }
    }
}

/// Control points per axis of the coarse grid each template is upsampled from.
const GRID: usize = 4;

/// A smooth random field in `[0.15, 0.85]`: uniform values on a coarse grid,
/// bilinearly interpolated to full resolution.
fn template(shape: [usize; 3], seed: u64, class: usize) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut rng = stream(&[seed, 0x7E37, class as u64]);
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let grid: Vec<f64> = (0..GRID * GRID).map(|_| rng.random_range(0.15..0.85)).collect();
        let coord = |i: usize, n: usize| {
            if n == 1 {
                0.0
            } else {
                i as f64 * (GRID - 1) as f64 / (n - 1) as f64
            }
        };
        for i in 0..h {
            let y = coord(i, h);
            let y0 = (y.floor() as usize).min(GRID - 2);
            let fy = y - y0 as f64;
            for j in 0..w {
                let x = coord(j, w);
                let x0 = (x.floor() as usize).min(GRID - 2);
                let fx = x - x0 as f64;
                let g = |a: usize, b: usize| grid[a * GRID + b];
                let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
                let bottom = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The noiseless template of `class`, quantized like the samples.
pub fn class_template(spec: &SynthSpec, class: usize) -> Vec<u8> {
    template(spec.shape, spec.seed, class).into_iter().map(quantize).collect()
}

/// Generates `per_class` noisy samples of each class template, class-major.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.n_classes < 2 || spec.n_classes > 256 {
        return Err(Error::Config(format!("class count {} outside 2..=256", spec.n_classes)));
    }
    if spec.per_class == 0 || spec.shape.contains(&0) {
        return Err(Error::Config("per-class count and image dimensions must be positive".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!("noise {} must be finite and non-negative", spec.noise)));
    }
    let d: usize = spec.shape.iter().product();
    let mut labels = Vec::with_capacity(spec.n_classes * spec.per_class);
    let mut pixels = Vec::with_capacity(spec.n_classes * spec.per_class * d);
    let normal = Normal::new(0.0, spec.noise).expect("validated noise");
    for class in 0..spec.n_classes {
        let t = template(spec.shape, spec.seed, class);
        let mut rng = stream(&[spec.seed, 0x5A3B, class as u64]);
        for _ in 0..spec.per_class {
            labels.push(class as u8);
            pixels.extend(t.iter().map(|&v| quantize(v + normal.sample(&mut rng))));
        }
    }
    Dataset::new(spec.shape, spec.n_classes, labels, pixels)
}
