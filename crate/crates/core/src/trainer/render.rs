//! Differentiable ROI render of the generator field.

use std::ops::Range;

use rayon::prelude::*;

use crate::blending::{blend_color_alpha, blend_density, per_point_alphas, DensitySum};
use crate::fields::{FieldCotangent, FieldError, FieldInput, FieldSample, MlpField, RadianceField};
use crate::geometry::{ray_box_intersect, CameraPose, RoiBox};
use crate::math::{sigmoid, Vec3};
use crate::raster::Image;
use crate::renderer::{
    composite_backward, composite_shaded, pixel_rng, BinSampler, PixelCotangent, PixelResult, RenderError,
    RenderOutput, RenderSettings, ShadedSample,
};

const PIXELS_PER_CHUNK: usize = 32;

/// How the generator is combined with the original field while training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeneratorMode {
    /// Only the generator is rendered inside the box.
    Insert,
    /// Both fields are blended with per-point alphas and summed densities.
    ObjectBlend { density: DensitySum, eps: f64 },
}

/// One training view: camera, sampling and background.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiView {
    pub pose: CameraPose,
    pub settings: RenderSettings,
    pub background: Image,
}

pub struct RoiRenderer<'a> {
    pub original: &'a dyn RadianceField,
    pub roi: RoiBox,
    pub mode: GeneratorMode,
}

/// Forward result with the generator's inside-box samples for center tracking.
#[derive(Debug, Clone)]
pub struct RoiForward {
    pub output: RenderOutput,
    pub positions: Vec<Vec3>,
    pub densities: Vec<f64>,
}

#[derive(Default)]
struct ChunkPlan {
    inputs: Vec<FieldInput>,
    t: Vec<f64>,
    delta: Vec<f64>,
    /// Sample range per pixel of the chunk; empty for rays that miss.
    ranges: Vec<Range<usize>>,
}

struct Shaded {
    samples: Vec<ShadedSample>,
    original: Vec<FieldSample>,
}

impl RoiRenderer<'_> {
    fn plan(&self, view: &RoiView, pixels: Range<usize>) -> ChunkPlan {
        let s = &view.settings;
        let mut plan = ChunkPlan::default();
        for i in pixels {
            let start = plan.inputs.len();
            let ray = s.pixel_ray(&view.pose, i);
            if let Some((t0, t1)) = ray_box_intersect(&ray, &self.roi) {
                let mut rng = s.stratified.then(|| pixel_rng(s.seed, i));
                for (t, delta) in BinSampler::new(t0, t1, s.samples_per_ray, rng.as_mut()) {
                    plan.inputs.push(FieldInput {
                        position: ray.at(t),
                        direction: ray.direction,
                    });
                    plan.t.push(t);
                    plan.delta.push(delta);
                }
            }
            plan.ranges.push(start..plan.inputs.len());
        }
        plan
    }

    fn shade(&self, view: &RoiView, plan: &ChunkPlan, generated: &[FieldSample]) -> Shaded {
        let act = view.settings.activation;
        let mut original = Vec::new();
        let samples = match self.mode {
            GeneratorMode::Insert => generated
                .iter()
                .zip(plan.t.iter().zip(&plan.delta))
                .map(|(g, (t, delta))| ShadedSample {
                    density: act.apply(g.raw_density),
                    color: g.raw_color.map(sigmoid),
                    delta: *delta,
                    t: *t,
                })
                .collect(),
            GeneratorMode::ObjectBlend { density, eps } => {
                self.original.eval_batch(&plan.inputs, &mut original);
                generated
                    .iter()
                    .zip(&original)
                    .zip(plan.t.iter().zip(&plan.delta))
                    .map(|((g, o), (t, delta))| {
                        let (ao, ag) = per_point_alphas(o.raw_density, g.raw_density, *delta, act);
                        ShadedSample {
                            density: blend_density(density, o.raw_density, g.raw_density, act),
                            color: blend_color_alpha(o.raw_color, g.raw_color, ao, ag, eps),
                            delta: *delta,
                            t: *t,
                        }
                    })
                    .collect()
            }
        };
        Shaded { samples, original }
    }

    fn chunks(view: &RoiView) -> Vec<Range<usize>> {
        let n = view.settings.resolution.pixel_count();
        (0..n)
            .step_by(PIXELS_PER_CHUNK)
            .map(|s| s..(s + PIXELS_PER_CHUNK).min(n))
            .collect()
    }

    fn check(view: &RoiView) -> Result<(), RenderError> {
        view.settings.validate()?;
        if view.background.resolution() != view.settings.resolution {
            return Err(RenderError::BackgroundSize {
                expected: view.settings.resolution,
                actual: view.background.resolution(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, generator: &MlpField, view: &RoiView) -> Result<RoiForward, RenderError> {
        Self::check(view)?;
        let act = view.settings.activation;
        let parts: Vec<(Vec<PixelResult>, Vec<Vec3>, Vec<f64>)> = Self::chunks(view)
            .into_par_iter()
            .map(|pixels| {
                let plan = self.plan(view, pixels.clone());
                let mut raw = Vec::new();
                generator.eval_batch(&plan.inputs, &mut raw);
                let shaded = self.shade(view, &plan, &raw);
                let results = pixels
                    .zip(&plan.ranges)
                    .map(|(i, r)| {
                        let bg = view.background.pixels[i];
                        if r.is_empty() {
                            PixelResult::background(bg)
                        } else {
                            composite_shaded(&shaded.samples[r.clone()], bg)
                        }
                    })
                    .collect();
                let positions = plan.inputs.iter().map(|i| i.position).collect();
                let densities = raw.iter().map(|s| act.apply(s.raw_density)).collect();
                (results, positions, densities)
            })
            .collect();
        let mut pixels = Vec::with_capacity(view.settings.resolution.pixel_count());
        let mut positions = Vec::new();
        let mut densities = Vec::new();
        for (r, p, d) in parts {
            pixels.extend(r);
            positions.extend(p);
            densities.extend(d);
        }
        Ok(RoiForward {
            output: RenderOutput::from_pixels(view.settings.resolution, &pixels),
            positions,
            densities,
        })
    }

    /// Accumulates the parameter gradient of `sum_p <cotangent_p, pixel_p>`.
    pub fn backward(
        &self,
        generator: &MlpField,
        view: &RoiView,
        cotangents: &[PixelCotangent],
        grad: &mut [f64],
    ) -> Result<(), FieldError> {
        let count = generator.param_count();
        if grad.len() != count {
            return Err(FieldError::ParamCount {
                expected: count,
                actual: grad.len(),
            });
        }
        let act = view.settings.activation;
        let partials: Vec<Result<Option<Vec<f64>>, FieldError>> = Self::chunks(view)
            .into_par_iter()
            .map(|pixels| {
                if cotangents[pixels.clone()].iter().all(|c| c.is_zero()) {
                    return Ok(None);
                }
                let plan = self.plan(view, pixels.clone());
                if plan.inputs.is_empty() {
                    return Ok(None);
                }
                let (raw, cache) = generator.forward_cached(&plan.inputs);
                let shaded = self.shade(view, &plan, &raw);
                let mut raw_ct = vec![FieldCotangent::default(); raw.len()];
                for (i, r) in pixels.zip(&plan.ranges) {
                    if r.is_empty() {
                        continue;
                    }
                    let bg = view.background.pixels[i];
                    let sct = composite_backward(&shaded.samples[r.clone()], bg, &cotangents[i]);
                    for (k, ct) in r.clone().zip(sct) {
                        raw_ct[k] = self.raw_cotangent(act, &plan, &shaded, &raw, k, ct.density, ct.color);
                    }
                }
                let mut g = vec![0.0; count];
                generator.backward_cached(&cache, &raw_ct, &mut g)?;
                Ok(Some(g))
            })
            .collect();
        for part in partials {
            if let Some(g) = part? {
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    /// Chains a gradient on a shaded sample back to the generator's raw output.
    fn raw_cotangent(
        &self,
        act: crate::fields::Activation,
        plan: &ChunkPlan,
        shaded: &Shaded,
        raw: &[FieldSample],
        k: usize,
        d_density: f64,
        d_color: [f64; 3],
    ) -> FieldCotangent {
        let g = raw[k];
        match self.mode {
            GeneratorMode::Insert => {
                let c = shaded.samples[k].color;
                FieldCotangent {
                    raw_density: d_density * act.derivative(g.raw_density),
                    raw_color: std::array::from_fn(|j| d_color[j] * c[j] * (1.0 - c[j])),
                }
            }
            GeneratorMode::ObjectBlend { density, eps } => {
                let o = shaded.original[k];
                let delta = plan.delta[k];
                let (ao, ag) = per_point_alphas(o.raw_density, g.raw_density, delta, act);
                let denom = eps + ao + ag;
                let d_alpha_g = act.derivative(g.raw_density) * delta * (1.0 - ag);
                let c = shaded.samples[k].color;
                let mut d_raw_density = d_density
                    * match density {
                        DensitySum::InActivation => act.derivative(o.raw_density + g.raw_density),
                        DensitySum::OutActivation => act.derivative(g.raw_density),
                    };
                let mut raw_color = [0.0; 3];
                for j in 0..3 {
                    let dz = d_color[j] * c[j] * (1.0 - c[j]);
                    let z = (o.raw_color[j] * ao + g.raw_color[j] * ag) / denom;
                    raw_color[j] = dz * ag / denom;
                    d_raw_density += dz * (g.raw_color[j] - z) / denom * d_alpha_g;
                }
                FieldCotangent {
                    raw_density: d_raw_density,
                    raw_color,
                }
            }
        }
    }
}
