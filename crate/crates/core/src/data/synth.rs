//! Procedural paired scenes in the LoL directory layout.
//!
//! A normal-light scene is a colored gradient with random rectangles,
//! ellipses and stripe textures. Its low-light counterpart applies a gamma
//! curve, a gain chosen to hit a sampled dark mean, additive Gaussian noise
//! and 8-bit quantization.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ImagePair;
use crate::error::{Error, Result};
use crate::imaging::{hsv_to_rgb_pixel, mean_value, quantize, save_image, ImageRGB};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Range of the mean V channel of the normal-light image.
    pub bright_mean: (f64, f64),
    /// Range of the mean V channel of the low-light image.
    pub dark_mean: (f64, f64),
    pub gamma: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 400,
            width: 600,
            seed: 0,
            bright_mean: (0.35, 0.65),
            dark_mean: (0.04, 0.12),
            gamma: (1.0, 1.4),
            noise_sigma: 0.01,
        }
    }
}

fn random_color<R: Rng>(rng: &mut R, sat: (f64, f64), val: (f64, f64)) -> [f64; 3] {
    hsv_to_rgb_pixel([rng.random::<f64>(), rng.random_range(sat.0..sat.1), rng.random_range(val.0..val.1)])
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

struct Layer {
    shape: Shape,
    color: [f64; 3],
    stripes: Option<(f64, f64, f64, f64)>,
}

/// Normal-light scene, quantized to 8-bit levels.
pub fn synth_scene<R: Rng>(height: usize, width: usize, target_mean: f64, rng: &mut R) -> ImageRGB {
    let (h, w) = (height as f64, width as f64);
    let c0 = random_color(rng, (0.1, 0.6), (0.3, 0.9));
    let c1 = random_color(rng, (0.1, 0.6), (0.3, 0.9));
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let (ay, ax) = (angle.sin(), angle.cos());

    let layers: Vec<Layer> = (0..rng.random_range(8..15))
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                let (sy, sx) = (rng.random_range(0.08..0.45) * h, rng.random_range(0.08..0.45) * w);
                let (y0, x0) = (rng.random_range(-0.1..0.95) * h, rng.random_range(-0.1..0.95) * w);
                Shape::Rect { y0, x0, y1: y0 + sy, x1: x0 + sx }
            } else {
                Shape::Ellipse {
                    cy: rng.random::<f64>() * h,
                    cx: rng.random::<f64>() * w,
                    ry: rng.random_range(0.05..0.3) * h,
                    rx: rng.random_range(0.05..0.3) * w,
                }
            };
            let stripes = rng.random_bool(0.4).then(|| {
                let period = rng.random_range(4.0..16.0);
                let theta = rng.random::<f64>() * std::f64::consts::PI;
                (period, theta.sin(), theta.cos(), rng.random_range(0.1..0.35))
            });
            Layer { shape, color: random_color(rng, (0.2, 0.95), (0.25, 1.0)), stripes }
        })
        .collect();

    let img = ImageRGB::from_fn(height, width, |y, x| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let t = (((fy / h - 0.5) * ay + (fx / w - 0.5) * ax) + 0.75).clamp(0.0, 1.5) / 1.5;
        let mut px = lerp(c0, c1, t);
        for layer in &layers {
            let inside = match layer.shape {
                Shape::Rect { y0, x0, y1, x1 } => fy >= y0 && fy < y1 && fx >= x0 && fx < x1,
                Shape::Ellipse { cy, cx, ry, rx } => ((fy - cy) / ry).powi(2) + ((fx - cx) / rx).powi(2) <= 1.0,
            };
            if inside {
                px = layer.color;
                if let Some((period, sy, sx, amp)) = layer.stripes {
                    let phase = (fy * sy + fx * sx) / period * std::f64::consts::TAU;
                    let k = 1.0 - amp * 0.5 * (1.0 + phase.sin());
                    px = px.map(|c| c * k);
                }
            }
        }
        px
    });

    let scale = target_mean / mean_value(&img).max(1e-6);
    let data = img.as_slice().iter().map(|v| f64::from(quantize(v * scale)) / 255.0).collect();
    ImageRGB::new(height, width, data).expect("quantized values are in range")
}

/// Darkens a normal-light image: `gain * v^gamma + noise`, with the gain
/// chosen so the result's mean V is close to `dark_mean`.
pub fn darken<R: Rng>(bright: &ImageRGB, dark_mean: f64, gamma: f64, noise_sigma: f64, rng: &mut R) -> ImageRGB {
    let curved: Vec<f64> = bright.as_slice().iter().map(|v| v.powf(gamma)).collect();
    let curved = ImageRGB::from_raw_unchecked(bright.height(), bright.width(), curved).expect("same shape");
    let gain = dark_mean / mean_value(&curved).max(1e-6);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    let data = curved
        .as_slice()
        .iter()
        .map(|v| {
            let n = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            f64::from(quantize(v * gain + n)) / 255.0
        })
        .collect();
    ImageRGB::new(bright.height(), bright.width(), data).expect("quantized values are in range")
}

/// Deterministic pair number `index` of the synthetic set.
pub fn synth_pair(cfg: &SynthConfig, index: u64) -> ImagePair {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let bright_mean = rng.random_range(cfg.bright_mean.0..=cfg.bright_mean.1);
    let dark_mean = rng.random_range(cfg.dark_mean.0..=cfg.dark_mean.1);
    let gamma = rng.random_range(cfg.gamma.0..=cfg.gamma.1);
    let reference = synth_scene(cfg.height, cfg.width, bright_mean, &mut rng);
    let low = darken(&reference, dark_mean, gamma, cfg.noise_sigma, &mut rng);
    ImagePair::new(low, reference, (index + 1).to_string()).expect("same size by construction")
}

/// Writes `count` pairs as `<root>/low/<i>.png` and `<root>/high/<i>.png`,
/// numbered from 1.
pub fn write_lol_layout(root: impl AsRef<Path>, cfg: &SynthConfig, count: usize) -> Result<()> {
    let root = root.as_ref();
    for sub in ["low", "high"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for i in 0..count as u64 {
        let pair = synth_pair(cfg, i);
        let name = format!("{}.png", pair.id);
        save_image(&pair.low, root.join("low").join(&name))?;
        save_image(&pair.reference, root.join("high").join(&name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_lol_with_split;

    fn small() -> SynthConfig {
        SynthConfig { height: 48, width: 64, ..SynthConfig::default() }
    }

    #[test]
    fn pairs_are_deterministic_and_distinct() {
        let cfg = small();
        assert_eq!(synth_pair(&cfg, 3), synth_pair(&cfg, 3));
        assert_ne!(synth_pair(&cfg, 3).reference, synth_pair(&cfg, 4).reference);
    }

    #[test]
    fn brightness_targets() {
        let cfg = small();
        for i in 0..5 {
            let p = synth_pair(&cfg, i);
            let (lo, hi) = (mean_value(&p.low), mean_value(&p.reference));
            assert!(lo < 0.2, "low mean {lo}");
            assert!(hi > 0.25, "high mean {hi}");
        }
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        write_lol_layout(dir.path(), &cfg, 4).unwrap();
        let split = load_lol_with_split(dir.path(), 3).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (3, 1));
        assert_eq!(split.train[0], synth_pair(&cfg, 0));
        assert_eq!(split.test[0].id, "4");
    }
}
