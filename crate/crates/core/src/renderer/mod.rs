//! Volume rendering of radiance fields.

mod background;
mod composite;
pub mod io;
mod sampling;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{Activation, FieldInput, FieldSample, RadianceField};
use crate::geometry::{ray_box_intersect, CameraPose, Ray, RoiBox};
use crate::math::{sigmoid, Vec3};
use crate::raster::{Image, Resolution, ScalarMap};

pub use background::{make_background, BackgroundKind, BackgroundSpec};
pub use composite::{
    composite, composite_backward, composite_shaded, Accumulator, CompositeResult, PixelCotangent, PixelResult,
    RawSample, ShadedCotangent, ShadedSample,
};
pub use sampling::{pixel_rng, sample_along_ray, BinSampler, RaySamples};

/// Floor on accumulated weight and on weighted distance when forming depth
/// and disparity.
pub const WEIGHT_EPS: f64 = 1e-10;

/// Marching stops once transmittance falls below this value.
pub const TERMINATION_TRANSMITTANCE: f64 = 1e-12;

const BATCH: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("resolution must be nonzero, got {width}x{height}")]
    ZeroResolution { width: usize, height: usize },
    #[error("invalid near/far planes ({near}, {far})")]
    InvalidPlanes { near: f64, far: f64 },
    #[error("samples per ray must be at least 1")]
    ZeroSamples,
    #[error("background is {actual:?}, render is {expected:?}")]
    BackgroundSize { expected: Resolution, actual: Resolution },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub resolution: Resolution,
    pub near: f64,
    pub far: f64,
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub seed: u64,
    pub activation: Activation,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            resolution: Resolution::square(64),
            near: 0.1,
            far: 6.0,
            samples_per_ray: 64,
            stratified: false,
            seed: 123,
            activation: Activation::Softplus,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.resolution.is_empty() {
            return Err(RenderError::ZeroResolution {
                width: self.resolution.width,
                height: self.resolution.height,
            });
        }
        if !(self.near >= 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(RenderError::InvalidPlanes {
                near: self.near,
                far: self.far,
            });
        }
        if self.samples_per_ray == 0 {
            return Err(RenderError::ZeroSamples);
        }
        Ok(())
    }

    fn check_background(&self, background: &Image) -> Result<(), RenderError> {
        self.validate()?;
        if background.resolution() != self.resolution {
            return Err(RenderError::BackgroundSize {
                expected: self.resolution,
                actual: background.resolution(),
            });
        }
        Ok(())
    }

    pub fn pixel_ray(&self, pose: &CameraPose, pixel: usize) -> Ray {
        let w = self.resolution.width;
        pose.pixel_ray(pixel % w, pixel / w, w, self.resolution.height, self.near, self.far)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    /// `sum w t / max(sum w, eps)`.
    pub depth: ScalarMap,
    /// `sum w / max(sum w t, eps)`.
    pub disparity: ScalarMap,
    pub final_transmittance: ScalarMap,
    pub accumulation: ScalarMap,
    pub mean_transmittance: f64,
}

impl RenderOutput {
    pub fn from_pixels(res: Resolution, pixels: &[PixelResult]) -> Self {
        let map = |f: &dyn Fn(&PixelResult) -> f64| ScalarMap {
            width: res.width,
            height: res.height,
            values: pixels.iter().map(f).collect(),
        };
        let final_transmittance = map(&|p| p.final_transmittance);
        let mean_transmittance = final_transmittance.mean();
        Self {
            rgb: Image {
                width: res.width,
                height: res.height,
                pixels: pixels.iter().map(|p| p.rgb).collect(),
            },
            depth: map(&|p| pixel_depth(p.accumulation, p.weighted_t)),
            disparity: map(&|p| pixel_disparity(p.accumulation, p.weighted_t)),
            final_transmittance,
            accumulation: map(&|p| p.accumulation),
            mean_transmittance,
        }
    }

    pub fn resolution(&self) -> Resolution {
        self.rgb.resolution()
    }

    /// Depth used for occlusion tests: infinite where the pixel is mostly
    /// transparent.
    pub fn occlusion_depth(&self) -> ScalarMap {
        ScalarMap {
            width: self.depth.width,
            height: self.depth.height,
            values: self
                .depth
                .values
                .iter()
                .zip(&self.accumulation.values)
                .map(|(d, a)| if *a < 0.5 { f64::INFINITY } else { *d })
                .collect(),
        }
    }
}

pub fn pixel_depth(accumulation: f64, weighted_t: f64) -> f64 {
    weighted_t / accumulation.max(WEIGHT_EPS)
}

pub fn pixel_disparity(accumulation: f64, weighted_t: f64) -> f64 {
    accumulation / weighted_t.max(WEIGHT_EPS)
}

/// Reusable buffers for [`march_segment`].
#[derive(Debug, Default)]
pub struct MarchScratch {
    pub inputs: Vec<FieldInput>,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub shaded: Vec<ShadedSample>,
    pub raw: Vec<FieldSample>,
    pub raw_aux: Vec<FieldSample>,
}

/// Batched shading callback: fills `out` with one shaded sample per input.
/// The caller sets `t` and `delta` afterwards.
pub trait SampleShader {
    fn shade(&self, inputs: &[FieldInput], delta: &[f64], buf: &mut ShadeBuffers<'_>);
}

/// Views handed to a [`SampleShader`].
pub struct ShadeBuffers<'a> {
    pub out: &'a mut Vec<ShadedSample>,
    pub raw: &'a mut Vec<FieldSample>,
    pub raw_aux: &'a mut Vec<FieldSample>,
}

/// Shades every sample with one field and fixed activations.
pub struct FieldShader<'f, F: ?Sized> {
    pub field: &'f F,
    pub activation: Activation,
}

impl<F: RadianceField + ?Sized> SampleShader for FieldShader<'_, F> {
    fn shade(&self, inputs: &[FieldInput], _delta: &[f64], buf: &mut ShadeBuffers<'_>) {
        self.field.eval_batch(inputs, buf.raw);
        buf.out.clear();
        buf.out.extend(buf.raw.iter().map(|s| ShadedSample {
            density: self.activation.apply(s.raw_density),
            color: s.raw_color.map(sigmoid),
            delta: 0.0,
            t: 0.0,
        }));
    }
}

/// Streams `n` samples over `[lo, hi]` of `ray` into `acc` in batches.
/// Returns false once the ray became opaque.
pub fn march_segment<S: SampleShader + ?Sized, R: Rng + ?Sized>(
    ray: &Ray,
    lo: f64,
    hi: f64,
    n: usize,
    rng: Option<&mut R>,
    shader: &S,
    scratch: &mut MarchScratch,
    acc: &mut Accumulator,
) -> bool {
    let mut sampler = BinSampler::new(lo, hi, n, rng).peekable();
    while sampler.peek().is_some() {
        scratch.inputs.clear();
        scratch.t.clear();
        scratch.delta.clear();
        for (t, delta) in sampler.by_ref().take(BATCH) {
            scratch.inputs.push(FieldInput {
                position: ray.at(t),
                direction: ray.direction,
            });
            scratch.t.push(t);
            scratch.delta.push(delta);
        }
        let mut buf = ShadeBuffers {
            out: &mut scratch.shaded,
            raw: &mut scratch.raw,
            raw_aux: &mut scratch.raw_aux,
        };
        shader.shade(&scratch.inputs, &scratch.delta, &mut buf);
        for ((s, t), delta) in scratch.shaded.iter_mut().zip(&scratch.t).zip(&scratch.delta) {
            s.t = *t;
            s.delta = *delta;
            acc.push(s);
            if acc.transmittance() < TERMINATION_TRANSMITTANCE {
                return false;
            }
        }
    }
    true
}

/// Runs `pixel` for every pixel index in parallel and assembles the output.
pub fn render_pixels(
    res: Resolution,
    pixel: impl Fn(usize, &mut MarchScratch) -> PixelResult + Sync,
) -> RenderOutput {
    let pixels: Vec<PixelResult> = (0..res.pixel_count())
        .into_par_iter()
        .map_init(MarchScratch::default, |scratch, i| pixel(i, scratch))
        .collect();
    RenderOutput::from_pixels(res, &pixels)
}

fn stratified_rng(settings: &RenderSettings, pixel: usize) -> Option<rand_chacha::ChaCha8Rng> {
    settings.stratified.then(|| pixel_rng(settings.seed, pixel))
}

/// Renders a full view with samples spread over `[near, far]`.
pub fn render_view<F: RadianceField + ?Sized>(
    field: &F,
    pose: &CameraPose,
    settings: &RenderSettings,
    background: &Image,
) -> Result<RenderOutput, RenderError> {
    let shader = FieldShader {
        field,
        activation: settings.activation,
    };
    render_view_with(&shader, pose, settings, background)
}

/// [`render_view`] with an arbitrary per-sample shader.
pub fn render_view_with<S: SampleShader + Sync + ?Sized>(
    shader: &S,
    pose: &CameraPose,
    settings: &RenderSettings,
    background: &Image,
) -> Result<RenderOutput, RenderError> {
    settings.check_background(background)?;
    Ok(render_pixels(settings.resolution, |i, scratch| {
        let ray = settings.pixel_ray(pose, i);
        let mut rng = stratified_rng(settings, i);
        let mut acc = Accumulator::new();
        march_segment(
            &ray,
            ray.t_near,
            ray.t_far,
            settings.samples_per_ray,
            rng.as_mut(),
            shader,
            scratch,
            &mut acc,
        );
        acc.finish(background.pixels[i])
    }))
}

/// Renders only the part of each ray inside `roi`; density outside is zero.
/// Rays that miss the box show the background with unit transmittance.
pub fn render_roi<F: RadianceField + ?Sized>(
    field: &F,
    roi: &RoiBox,
    pose: &CameraPose,
    settings: &RenderSettings,
    background: &Image,
) -> Result<RenderOutput, RenderError> {
    settings.check_background(background)?;
    let shader = FieldShader {
        field,
        activation: settings.activation,
    };
    Ok(render_pixels(settings.resolution, |i, scratch| {
        let ray = settings.pixel_ray(pose, i);
        let Some((t0, t1)) = ray_box_intersect(&ray, roi) else {
            return PixelResult::background(background.pixels[i]);
        };
        let mut rng = stratified_rng(settings, i);
        let mut acc = Accumulator::new();
        march_segment(
            &ray,
            t0,
            t1,
            settings.samples_per_ray,
            rng.as_mut(),
            &shader,
            scratch,
            &mut acc,
        );
        acc.finish(background.pixels[i])
    }))
}

/// A field whose density is removed outside a box.
pub struct MaskedField<'f, F: ?Sized> {
    pub field: &'f F,
    pub roi: RoiBox,
}

impl<F: RadianceField + ?Sized> RadianceField for MaskedField<'_, F> {
    fn eval(&self, position: Vec3, direction: Vec3) -> FieldSample {
        let mut s = self.field.eval(position, direction);
        if !self.roi.contains(position) {
            s.raw_density = crate::fields::EMPTY_RAW_DENSITY;
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{AnalyticField, AnalyticScene};

    fn settings(side: usize) -> RenderSettings {
        RenderSettings {
            resolution: Resolution::square(side),
            near: 0.5,
            far: 8.0,
            samples_per_ray: 64,
            ..Default::default()
        }
    }

    fn front_pose() -> CameraPose {
        CameraPose::look_at(Vec3::new(0.0, 0.0, 4.0), Vec3::ZERO, Vec3::Y, 60f64.to_radians()).unwrap()
    }

    #[test]
    fn empty_field_shows_background() {
        let s = settings(8);
        let bg = Image::from_fn(s.resolution, |c, r| [c as f64 / 8.0, r as f64 / 8.0, 0.5]);
        let out = render_view(&AnalyticField::empty(), &front_pose(), &s, &bg).unwrap();
        assert_eq!(out.rgb, bg);
        assert_eq!(out.mean_transmittance, 1.0);
    }

    #[test]
    fn opaque_sphere_blocks_center() {
        let s = settings(9);
        let sphere = AnalyticField::sphere(Vec3::ZERO, 1.0, 20.0, [0.0; 3]);
        let out = render_view(&sphere, &front_pose(), &s, &Image::filled(s.resolution, [1.0; 3])).unwrap();
        assert!(out.final_transmittance.get(4, 4) < 1e-3);
        let depth = out.depth.get(4, 4);
        assert!((depth - 3.0).abs() < 0.15, "depth {depth}");
    }

    #[test]
    fn rejects_bad_settings() {
        let mut s = settings(4);
        s.resolution = Resolution::new(0, 4);
        let bg = Image::filled(Resolution::new(0, 4), [0.0; 3]);
        assert!(matches!(
            render_view(&AnalyticField::empty(), &front_pose(), &s, &bg),
            Err(RenderError::ZeroResolution { .. })
        ));
        let s = settings(4);
        let bg = Image::filled(Resolution::square(5), [0.0; 3]);
        assert!(render_view(&AnalyticField::empty(), &front_pose(), &s, &bg).is_err());
    }

    #[test]
    fn deterministic_stratified() {
        let mut s = settings(8);
        s.stratified = true;
        let bg = Image::filled(s.resolution, [0.0; 3]);
        let scene = AnalyticScene::test_scene();
        let a = render_view(&scene, &front_pose(), &s, &bg).unwrap();
        let b = render_view(&scene, &front_pose(), &s, &bg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn roi_outside_frustum_is_background() {
        let s = settings(8);
        let bg = Image::filled(s.resolution, [0.3, 0.6, 0.9]);
        let roi = RoiBox::new(Vec3::new(0.0, 0.0, 10.0), Vec3::splat(1.0)).unwrap();
        let out = render_roi(&AnalyticScene::test_scene(), &roi, &front_pose(), &s, &bg).unwrap();
        assert_eq!(out.rgb, bg);
        assert_eq!(out.mean_transmittance, 1.0);
    }

    #[test]
    fn roi_ignores_density_outside_box() {
        let s = settings(8);
        let bg = Image::filled(s.resolution, [0.1, 0.2, 0.3]);
        let roi = RoiBox::new(Vec3::new(0.0, 1.5, 0.0), Vec3::splat(0.6)).unwrap();
        let sphere = AnalyticField::sphere(Vec3::ZERO, 1.0, 20.0, [1.0; 3]);
        let out = render_roi(&sphere, &roi, &front_pose(), &s, &bg).unwrap();
        assert_eq!(out.rgb, bg);
    }

    #[test]
    fn disparity_definition() {
        assert_eq!(pixel_disparity(0.5, 2.0), 0.25);
        assert_eq!(pixel_depth(0.5, 2.0), 4.0);
        assert_eq!(pixel_disparity(0.0, 0.0), 0.0);
    }
}
