//! Row-major image buffers shared by the renderer, guidance and metrics.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl Resolution {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub const fn square(side: usize) -> Self {
        Self::new(side, side)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }
}

/// Linear RGB image with `f64` channels, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn filled(res: Resolution, color: [f64; 3]) -> Self {
        Self {
            width: res.width,
            height: res.height,
            pixels: vec![color; res.pixel_count()],
        }
    }

    pub fn from_fn(res: Resolution, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(res.pixel_count());
        for row in 0..res.height {
            for col in 0..res.width {
                pixels.push(f(col, row));
            }
        }
        Self {
            width: res.width,
            height: res.height,
            pixels,
        }
    }

    pub fn resolution(&self) -> Resolution {
        Resolution::new(self.width, self.height)
    }

    pub fn get(&self, col: usize, row: usize) -> [f64; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, value: [f64; 3]) {
        self.pixels[row * self.width + col] = value;
    }

    /// Largest per-channel absolute difference. Panics on size mismatch.
    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.resolution(), other.resolution(), "image size mismatch");
        self.pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }

    /// Channel-interleaved copy, `[r0, g0, b0, r1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.pixels.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(res: Resolution, flat: &[f64]) -> Option<Self> {
        if flat.len() != res.pixel_count() * 3 {
            return None;
        }
        let pixels = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Some(Self {
            width: res.width,
            height: res.height,
            pixels,
        })
    }
}

/// Single-channel map (depth, disparity, transmittance).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ScalarMap {
    pub fn filled(res: Resolution, value: f64) -> Self {
        Self {
            width: res.width,
            height: res.height,
            values: vec![value; res.pixel_count()],
        }
    }

    pub fn resolution(&self) -> Resolution {
        Resolution::new(self.width, self.height)
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population variance over all pixels.
    pub fn variance(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        // Shifted by the first value so constant maps give exactly zero.
        let shift = self.values[0];
        let n = self.values.len() as f64;
        let mean = self.values.iter().map(|v| v - shift).sum::<f64>() / n;
        self.values.iter().map(|v| (v - shift - mean).powi(2)).sum::<f64>() / n
    }
}
