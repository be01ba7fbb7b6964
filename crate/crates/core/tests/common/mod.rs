#![allow(dead_code)]

use blendfield::fields::{MlpArch, MlpField};
use blendfield::raster::{Image, Resolution};
use blendfield::trainer::LossPipeline;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Width-16, depth-3 generator used by gradient checks.
pub fn small_arch() -> MlpArch {
    MlpArch {
        depth: 3,
        width: 16,
        color_width: 16,
        pos_freqs: 4,
        dir_freqs: 2,
    }
}

/// A red disc on white, the standard mock target.
pub fn red_disc(res: Resolution) -> Image {
    let (cx, cy) = (res.width as f64 / 2.0, res.height as f64 / 2.0);
    let r = res.width.min(res.height) as f64 * 0.3;
    Image::from_fn(res, |c, row| {
        let (dx, dy) = (c as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
        if dx * dx + dy * dy <= r * r {
            [0.9, 0.1, 0.1]
        } else {
            [1.0, 1.0, 1.0]
        }
    })
}

/// Denominator floor of the relative error; central differences cannot
/// resolve gradients below this against the loss's rounding noise.
pub const GRAD_FLOOR: f64 = 1e-7;

/// Difference step; small enough to rarely straddle a ReLU kink.
pub const GRAD_STEP: f32 = 1e-5;

pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, f64, f64)>,
}

/// Central differences of `pipeline`'s total loss against its analytic
/// gradient on `count` random parameters. The step divides by the realized
/// difference of the `f32` parameter.
pub fn grad_check(pipeline: &LossPipeline, generator: &MlpField, count: usize, h: f32, seed: u64) -> GradCheck {
    let (_, grad, _) = pipeline.loss_and_grad(generator).unwrap();
    let n = generator.param_count();
    let idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, count.min(n));
    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for i in idx.iter() {
        let base = generator.params()[i];
        let shifted = |d: f32| {
            let mut g = generator.clone();
            g.update_params(|p| p[i] = base + d);
            (g.params()[i] as f64, pipeline.loss(&g).unwrap().total)
        };
        let (xp, lp) = shifted(h);
        let (xm, lm) = shifted(-h);
        let fd = (lp - lm) / (xp - xm);
        let an = grad[i];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(GRAD_FLOOR);
        if rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst = Some((i, an, fd));
        }
        out.checked += 1;
    }
    out
}
