use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Ray;

/// Sample distances along a ray with their quadrature spacings.
///
/// `delta[i] = t[i + 1] - t[i]`; the last spacing runs to the far plane.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Lazily yields `(t, delta)` pairs for `n` equal bins over `[lo, hi]`:
/// bin midpoints, or one uniform draw per bin when stratified.
pub struct BinSampler<'r, R: Rng + ?Sized> {
    lo: f64,
    hi: f64,
    width: f64,
    n: usize,
    i: usize,
    next: Option<f64>,
    rng: Option<&'r mut R>,
}

impl<'r, R: Rng + ?Sized> BinSampler<'r, R> {
    pub fn new(lo: f64, hi: f64, n: usize, rng: Option<&'r mut R>) -> Self {
        let mut s = Self {
            lo,
            hi,
            width: (hi - lo) / n.max(1) as f64,
            n,
            i: 0,
            next: None,
            rng,
        };
        s.next = s.draw(0);
        s
    }

    fn draw(&mut self, bin: usize) -> Option<f64> {
        if bin >= self.n {
            return None;
        }
        let u = match self.rng.as_deref_mut() {
            Some(rng) => rng.random::<f64>(),
            None => 0.5,
        };
        Some((self.lo + (bin as f64 + u) * self.width).min(self.hi))
    }
}

impl<R: Rng + ?Sized> Iterator for BinSampler<'_, R> {
    type Item = (f64, f64);

    fn next(&mut self) -> Option<(f64, f64)> {
        let t = self.next?;
        self.i += 1;
        self.next = self.draw(self.i);
        let delta = match self.next {
            Some(next) => next - t,
            None => self.hi - t,
        };
        Some((t, delta))
    }
}

/// Places `n` samples on `[ray.t_near, ray.t_far]`.
pub fn sample_along_ray<R: Rng + ?Sized>(ray: &Ray, n: usize, stratified: bool, rng: &mut R) -> RaySamples {
    let sampler = BinSampler::new(ray.t_near, ray.t_far, n, stratified.then_some(rng));
    let (t, delta) = sampler.unzip();
    RaySamples { t, delta }
}

/// Independent stream for one pixel, stable under any evaluation order.
pub fn pixel_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}
