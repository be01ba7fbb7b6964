//! Blending an original field with a generated field inside the ROI.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{Activation, FieldInput, FieldSample, RadianceField};
use crate::geometry::{ray_box_intersect, CameraPose, RoiBox};
use crate::math::{sigmoid, Vec3};
use crate::raster::Image;
use crate::renderer::{
    march_segment, pixel_rng, render_pixels, Accumulator, RenderError, RenderOutput, RenderSettings, SampleShader,
    ShadeBuffers, ShadedSample,
};

pub const DEFAULT_BLEND_EPS: f64 = 1e-9;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;
/// Below this every density counts as zero when locating the center of mass.
pub const CENTER_DENSITY_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlendError {
    #[error("blend strength must be finite and nonnegative, got {0}")]
    Alpha(f64),
    #[error("blend epsilon must be positive, got {0}")]
    Eps(f64),
    #[error("ema decay must lie in [0, 1], got {0}")]
    Decay(f64),
}

/// Where densities of the two fields are summed relative to the activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensitySum {
    /// `phi(sigma_O + sigma_G)`: the generator may remove density.
    InActivation,
    /// `phi(sigma_O) + phi(sigma_G)`: the generator only adds density.
    OutActivation,
}

fn default_eps() -> f64 {
    DEFAULT_BLEND_EPS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum BlendMode {
    /// Inside the box only the generated field is seen.
    Replace,
    /// Distance-weighted mix of raw outputs about the tracked center.
    Smooth { alpha: f64 },
    /// Alpha-weighted colors and summed densities.
    ObjectBlend {
        density: DensitySum,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl BlendMode {
    pub fn validate(&self) -> Result<(), BlendError> {
        match *self {
            BlendMode::Replace => Ok(()),
            BlendMode::Smooth { alpha } if alpha.is_finite() && alpha >= 0.0 => Ok(()),
            BlendMode::Smooth { alpha } => Err(BlendError::Alpha(alpha)),
            BlendMode::ObjectBlend { eps, .. } if eps > 0.0 && eps.is_finite() => Ok(()),
            BlendMode::ObjectBlend { eps, .. } => Err(BlendError::Eps(eps)),
        }
    }

    pub fn is_object_blend(&self) -> bool {
        matches!(self, BlendMode::ObjectBlend { .. })
    }
}

/// `f = 1 - exp(-alpha * |x - center| / diag)`: the weight of the original
/// field at `x`.
pub fn smooth_blend_weight(x: Vec3, center: Vec3, diag: f64, alpha: f64) -> f64 {
    -(-alpha * x.distance(center) / diag).exp_m1()
}

/// `f * O + (1 - f) * G` on raw density and raw color.
pub fn blend_smooth(original: FieldSample, generated: FieldSample, f: f64) -> FieldSample {
    let mix = |o: f64, g: f64| f * o + (1.0 - f) * g;
    FieldSample {
        raw_density: mix(original.raw_density, generated.raw_density),
        raw_color: std::array::from_fn(|c| mix(original.raw_color[c], generated.raw_color[c])),
    }
}

pub fn point_alpha(raw_density: f64, delta: f64, activation: Activation) -> f64 {
    -(-activation.apply(raw_density) * delta).exp_m1()
}

/// Opacities `1 - exp(-phi(sigma) delta)` of both fields at one point.
pub fn per_point_alphas(raw_o: f64, raw_g: f64, delta: f64, activation: Activation) -> (f64, f64) {
    (point_alpha(raw_o, delta, activation), point_alpha(raw_g, delta, activation))
}

/// `sigmoid((c_O a_O + c_G a_G) / (eps + a_O + a_G))` per channel.
pub fn blend_color_alpha(raw_o: [f64; 3], raw_g: [f64; 3], alpha_o: f64, alpha_g: f64, eps: f64) -> [f64; 3] {
    let denom = eps + alpha_o + alpha_g;
    std::array::from_fn(|c| sigmoid((raw_o[c] * alpha_o + raw_g[c] * alpha_g) / denom))
}

pub fn blend_density(mode: DensitySum, raw_o: f64, raw_g: f64, activation: Activation) -> f64 {
    match mode {
        DensitySum::InActivation => activation.apply(raw_o + raw_g),
        DensitySum::OutActivation => activation.apply(raw_o) + activation.apply(raw_g),
    }
}

/// Exponential moving average of the generated density's center of mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterTracker {
    pub ema_center: Vec3,
    pub decay: f64,
    pub initialized: bool,
}

impl Default for CenterTracker {
    fn default() -> Self {
        Self {
            ema_center: Vec3::ZERO,
            decay: DEFAULT_EMA_DECAY,
            initialized: false,
        }
    }
}

impl CenterTracker {
    pub fn new(decay: f64) -> Result<Self, BlendError> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(BlendError::Decay(decay));
        }
        Ok(Self {
            decay,
            ..Self::default()
        })
    }

    /// The tracked center, or `fallback` before the first update.
    pub fn center_or(&self, fallback: Vec3) -> Vec3 {
        if self.initialized {
            self.ema_center
        } else {
            fallback
        }
    }

    /// Folds in one batch and returns its center. Empty batches are ignored.
    pub fn update(&mut self, positions: &[Vec3], densities: &[f64]) -> Option<Vec3> {
        let batch = batch_center(positions, densities)?;
        if self.initialized {
            self.ema_center = self.ema_center * self.decay + batch * (1.0 - self.decay);
        } else {
            self.ema_center = batch;
            self.initialized = true;
        }
        Some(batch)
    }
}

/// Density-weighted mean position; the plain mean when all densities are
/// negligible.
pub fn batch_center(positions: &[Vec3], densities: &[f64]) -> Option<Vec3> {
    if positions.is_empty() {
        return None;
    }
    let n = positions.len().min(densities.len());
    if densities[..n].iter().all(|d| *d < CENTER_DENSITY_FLOOR) {
        let sum = positions.iter().fold(Vec3::ZERO, |a, p| a + *p);
        return Some(sum / positions.len() as f64);
    }
    let mut sum = Vec3::ZERO;
    let mut total = 0.0;
    for (p, d) in positions.iter().zip(densities) {
        let d = d.max(0.0);
        sum += *p * d;
        total += d;
    }
    Some(sum / total)
}

/// Shades one sample of the edited scene from both raw outputs.
pub fn shade_blended(
    mode: &BlendMode,
    activation: Activation,
    roi: &RoiBox,
    center: Vec3,
    position: Vec3,
    delta: f64,
    original: FieldSample,
    generated: FieldSample,
) -> (f64, [f64; 3]) {
    match *mode {
        BlendMode::Replace => (activation.apply(generated.raw_density), generated.raw_color.map(sigmoid)),
        BlendMode::Smooth { alpha } => {
            let f = smooth_blend_weight(position, center, roi.diagonal(), alpha);
            let s = blend_smooth(original, generated, f);
            (activation.apply(s.raw_density), s.raw_color.map(sigmoid))
        }
        BlendMode::ObjectBlend { density, eps } => {
            let (ao, ag) = per_point_alphas(original.raw_density, generated.raw_density, delta, activation);
            (
                blend_density(density, original.raw_density, generated.raw_density, activation),
                blend_color_alpha(original.raw_color, generated.raw_color, ao, ag, eps),
            )
        }
    }
}

/// How samples are placed along rays of the edited scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BlendSampling {
    /// One uniform sample set over `[near, far]`, shared by both fields.
    #[default]
    Uniform,
    /// The box-clipped interval gets `roi_samples`; the outside parts are
    /// sampled at the base rate.
    Merged { roi_samples: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendSettings {
    pub mode: BlendMode,
    /// Center for the smooth mode, normally the frozen tracked center.
    pub center: Vec3,
    #[serde(default)]
    pub sampling: BlendSampling,
}

struct BlendShader<'a, O: ?Sized, G: ?Sized> {
    original: &'a O,
    generated: &'a G,
    roi: RoiBox,
    settings: BlendSettings,
    activation: Activation,
}

impl<O: RadianceField + ?Sized, G: RadianceField + ?Sized> SampleShader for BlendShader<'_, O, G> {
    fn shade(&self, inputs: &[FieldInput], delta: &[f64], buf: &mut ShadeBuffers<'_>) {
        self.original.eval_batch(inputs, buf.raw);
        let inside: Vec<usize> = (0..inputs.len())
            .filter(|&i| self.roi.contains(inputs[i].position))
            .collect();
        let sub: Vec<FieldInput> = inside.iter().map(|&i| inputs[i]).collect();
        self.generated.eval_batch(&sub, buf.raw_aux);

        buf.out.clear();
        buf.out.extend(buf.raw.iter().map(|s| ShadedSample {
            density: self.activation.apply(s.raw_density),
            color: s.raw_color.map(sigmoid),
            delta: 0.0,
            t: 0.0,
        }));
        for (k, &i) in inside.iter().enumerate() {
            let (density, color) = shade_blended(
                &self.settings.mode,
                self.activation,
                &self.roi,
                self.settings.center,
                inputs[i].position,
                delta[i],
                buf.raw[i],
                buf.raw_aux[k],
            );
            buf.out[i].density = density;
            buf.out[i].color = color;
        }
    }
}

/// Renders the edited scene: the original field outside `roi`, the blend of
/// both fields inside, composited in one pass.
pub fn render_blended<O: RadianceField + ?Sized, G: RadianceField + ?Sized>(
    original: &O,
    generated: &G,
    roi: &RoiBox,
    blend: &BlendSettings,
    pose: &CameraPose,
    settings: &RenderSettings,
    background: &Image,
) -> Result<RenderOutput, RenderError> {
    if background.resolution() != settings.resolution {
        return Err(RenderError::BackgroundSize {
            expected: settings.resolution,
            actual: background.resolution(),
        });
    }
    settings.validate()?;
    let shader = BlendShader {
        original,
        generated,
        roi: *roi,
        settings: *blend,
        activation: settings.activation,
    };
    Ok(render_pixels(settings.resolution, |i, scratch| {
        let ray = settings.pixel_ray(pose, i);
        let mut rng = settings.stratified.then(|| pixel_rng(settings.seed, i));
        let mut acc = Accumulator::new();
        let n = settings.samples_per_ray;
        match (blend.sampling, ray_box_intersect(&ray, roi)) {
            (BlendSampling::Merged { roi_samples }, Some((t0, t1))) => {
                let span = ray.t_far - ray.t_near;
                let base = |len: f64| ((n as f64 * len / span).round() as usize).max(1);
                let segments = [
                    (ray.t_near, t0, base(t0 - ray.t_near)),
                    (t0, t1, roi_samples.max(1)),
                    (t1, ray.t_far, base(ray.t_far - t1)),
                ];
                for (lo, hi, count) in segments {
                    if hi - lo <= 0.0 {
                        continue;
                    }
                    if !march_segment(&ray, lo, hi, count, rng.as_mut(), &shader, scratch, &mut acc) {
                        break;
                    }
                }
            }
            _ => {
                march_segment(&ray, ray.t_near, ray.t_far, n, rng.as_mut(), &shader, scratch, &mut acc);
            }
        }
        acc.finish(background.pixels[i])
    }))
}
