//! Background images composited behind rendered views.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raster::{Image, Resolution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackgroundKind {
    White,
    Black,
    /// Per-pixel, per-channel normal noise clipped to `[0, 1]`.
    GaussianNoise { mean: f64, std: f64 },
    /// Two seeded colors alternating on square cells of `cell` pixels.
    Checkerboard { cell: usize },
    /// Per channel, a sum of `waves` random plane waves with up to
    /// `max_cycles` cycles per image, min-max normalized.
    FourierTexture { waves: usize, max_cycles: f64 },
}

impl BackgroundKind {
    pub const fn gaussian_noise() -> Self {
        BackgroundKind::GaussianNoise { mean: 0.5, std: 0.25 }
    }

    pub const fn checkerboard() -> Self {
        BackgroundKind::Checkerboard { cell: 8 }
    }

    pub const fn fourier_texture() -> Self {
        BackgroundKind::FourierTexture {
            waves: 8,
            max_cycles: 16.0,
        }
    }

    /// The augmentation cycle used during training.
    pub fn augmentation_cycle() -> Vec<Self> {
        vec![
            BackgroundKind::White,
            BackgroundKind::Black,
            Self::gaussian_noise(),
            Self::checkerboard(),
            Self::fourier_texture(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    #[serde(flatten)]
    pub kind: BackgroundKind,
    #[serde(default)]
    pub seed: u64,
}

impl BackgroundSpec {
    pub const fn new(kind: BackgroundKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub const fn black() -> Self {
        Self::new(BackgroundKind::Black, 0)
    }
}

/// Builds the background image; deterministic in `spec.seed`.
pub fn make_background(spec: &BackgroundSpec, res: Resolution) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        BackgroundKind::White => Image::filled(res, [1.0; 3]),
        BackgroundKind::Black => Image::filled(res, [0.0; 3]),
        BackgroundKind::GaussianNoise { mean, std } => {
            let normal = Normal::new(mean, std.abs()).expect("finite std");
            Image::from_fn(res, |_, _| std::array::from_fn(|_| normal.sample(&mut rng).clamp(0.0, 1.0)))
        }
        BackgroundKind::Checkerboard { cell } => {
            let cell = cell.max(1);
            let a: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
            let mut b = a.map(|v| 1.0 - v);
            if a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 0.2) {
                b = if a[0] < 0.5 { [1.0; 3] } else { [0.0; 3] };
            }
            Image::from_fn(res, |col, row| if (col / cell + row / cell) % 2 == 0 { a } else { b })
        }
        BackgroundKind::FourierTexture { waves, max_cycles } => fourier_texture(res, waves, max_cycles, &mut rng),
    }
}

fn fourier_texture(res: Resolution, waves: usize, max_cycles: f64, rng: &mut ChaCha8Rng) -> Image {
    let (w, h) = (res.width, res.height);
    let mut channels = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
    for channel in &mut channels {
        for _ in 0..waves {
            let amplitude = rng.random_range(0.2..1.0);
            let fx = rng.random_range(-max_cycles..=max_cycles);
            let fy = rng.random_range(-max_cycles..=max_cycles);
            let phase = rng.random_range(0.0..TAU);
            for row in 0..h {
                for col in 0..w {
                    let arg = TAU * (fx * col as f64 / w as f64 + fy * row as f64 / h as f64) + phase;
                    channel[row * w + col] += amplitude * arg.cos();
                }
            }
        }
        let lo = channel.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = channel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for v in channel.iter_mut() {
            *v = if span > 1e-12 { (*v - lo) / span } else { 0.5 };
        }
    }
    Image::from_fn(res, |col, row| std::array::from_fn(|c| channels[c][row * w + col]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn in_unit_range(img: &Image) -> bool {
        img.pixels.iter().flatten().all(|v| (0.0..=1.0).contains(v))
    }

    #[test]
    fn white_is_white() {
        let img = make_background(&BackgroundSpec::new(BackgroundKind::White, 3), Resolution::square(4));
        assert!(img.pixels.iter().all(|p| *p == [1.0; 3]));
    }

    #[test]
    fn checkerboard_period() {
        let img = make_background(
            &BackgroundSpec::new(BackgroundKind::Checkerboard { cell: 8 }, 5),
            Resolution::square(32),
        );
        assert_ne!(img.get(0, 0), img.get(8, 0));
        assert_eq!(img.get(0, 0), img.get(16, 0));
        assert_eq!(img.get(0, 0), img.get(8, 8));
    }

    #[test]
    fn noise_seeded_and_clipped() {
        let spec = BackgroundSpec::new(BackgroundKind::GaussianNoise { mean: 0.5, std: 2.0 }, 9);
        let a = make_background(&spec, Resolution::square(16));
        let b = make_background(&spec, Resolution::square(16));
        assert_eq!(a, b);
        assert!(in_unit_range(&a));
        let c = make_background(&BackgroundSpec { seed: 10, ..spec }, Resolution::square(16));
        assert_ne!(a, c);
    }

    #[test]
    fn every_kind_in_range() {
        for (i, kind) in BackgroundKind::augmentation_cycle().into_iter().enumerate() {
            let img = make_background(&BackgroundSpec::new(kind, i as u64), Resolution::new(20, 12));
            assert!(in_unit_range(&img), "{kind:?}");
        }
        let img = make_background(
            &BackgroundSpec::new(BackgroundKind::fourier_texture(), 1),
            Resolution::square(32),
        );
        let lo = img.pixels.iter().map(|p| p[0]).fold(1.0, f64::min);
        let hi = img.pixels.iter().map(|p| p[0]).fold(0.0, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn json_shape() {
        let spec = BackgroundSpec::new(BackgroundKind::Checkerboard { cell: 4 }, 2);
        let json = serde_json::to_value(spec).unwrap();
        assert_eq!(json, serde_json::json!({"kind": "checkerboard", "cell": 4, "seed": 2}));
        let back: BackgroundSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);
    }
}
