//! A deterministic stand-in for a pretrained image-text model.
//!
//! Images are resampled to the scorer resolution, flattened together with a
//! constant bias feature, rotated by a fixed product of seeded Householder
//! reflections and normalized. The bias pins the scale, so two images share an
//! embedding only if they agree after resampling. Registered captions map to
//! the embedding of their image; other text maps to a hash-seeded direction.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::resample::{resample_bilinear, resample_bilinear_adjoint};
use super::{losses::strip_view_suffix, GuidanceError, Scorer};
use crate::raster::{Image, Resolution};

pub const BIAS_FEATURE: f64 = 0.05;
pub const REFLECTIONS: usize = 4;

#[derive(Debug, Clone)]
pub struct MockScorer {
    resolution: Resolution,
    seed: u64,
    reflectors: Vec<Vec<f64>>,
    captions: BTreeMap<String, Vec<f64>>,
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    n
}

fn reflect(u: &[f64], v: &mut [f64]) {
    let d = 2.0 * u.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>();
    v.iter_mut().zip(u).for_each(|(x, a)| *x -= d * a);
}

impl MockScorer {
    pub fn new(resolution: Resolution, seed: u64) -> Self {
        let dim = 3 * resolution.pixel_count() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            resolution,
            seed,
            reflectors: (0..REFLECTIONS).map(|_| random_unit(dim, &mut rng)).collect(),
            captions: BTreeMap::new(),
        }
    }

    /// A scorer whose `caption` is matched exactly by `target`.
    pub fn with_target(target: &Image, caption: &str, seed: u64) -> Self {
        let mut s = Self::new(target.resolution(), seed);
        s.register(caption, target);
        s
    }

    /// Maps `caption` (and its directional variants) to `image`'s embedding.
    pub fn register(&mut self, caption: &str, image: &Image) {
        let e = self.embed(image);
        self.captions.insert(strip_view_suffix(caption).to_string(), e);
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        3 * self.resolution.pixel_count() + 1
    }

    fn features(&self, image: &Image) -> Vec<f64> {
        let img = resample_bilinear(image, self.resolution);
        let mut f = Vec::with_capacity(self.dim());
        f.extend(img.pixels.iter().flatten());
        f.push(BIAS_FEATURE);
        f
    }

    fn rotate(&self, v: &mut [f64]) {
        for u in &self.reflectors {
            reflect(u, v);
        }
    }

    fn rotate_transpose(&self, v: &mut [f64]) {
        for u in self.reflectors.iter().rev() {
            reflect(u, v);
        }
    }

    fn embed(&self, image: &Image) -> Vec<f64> {
        let mut y = self.features(image);
        self.rotate(&mut y);
        normalize(&mut y);
        y
    }

    /// The embedding of free text not registered with the scorer.
    fn hashed_text(&self, text: &str) -> Vec<f64> {
        let digest = Sha256::digest(text.as_bytes());
        let h = u64::from_le_bytes(digest[..8].try_into().expect("digest length"));
        random_unit(self.dim(), &mut ChaCha8Rng::seed_from_u64(h ^ self.seed))
    }
}

impl Scorer for MockScorer {
    fn resolution(&self) -> Resolution {
        self.resolution
    }

    fn dim(&self) -> usize {
        MockScorer::dim(self)
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>, GuidanceError> {
        Ok(self.embed(image))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, GuidanceError> {
        Ok(match self.captions.get(strip_view_suffix(text)) {
            Some(e) => e.clone(),
            None => self.hashed_text(text),
        })
    }

    fn embed_image_vjp(&self, image: &Image, cotangent: &[f64]) -> Result<Image, GuidanceError> {
        if cotangent.len() != self.dim() {
            return Err(GuidanceError::DimensionMismatch {
                image: self.dim(),
                text: cotangent.len(),
            });
        }
        let mut y = self.features(image);
        self.rotate(&mut y);
        let norm = normalize(&mut y);
        let proj = y.iter().zip(cotangent).map(|(e, g)| e * g).sum::<f64>();
        let mut d: Vec<f64> = cotangent.iter().zip(&y).map(|(g, e)| (g - e * proj) / norm).collect();
        self.rotate_transpose(&mut d);
        d.pop();
        let grad = Image::from_flat(self.resolution, &d).expect("feature length");
        Ok(resample_bilinear_adjoint(&grad, image.resolution()))
    }
}
