//! Optimization of the generator field inside the ROI.

mod objective;
mod render;
mod state;

use std::ops::ControlFlow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blending::{BlendError, BlendMode, CenterTracker, DEFAULT_EMA_DECAY};
use crate::fields::{FieldError, MlpArch, MlpField, ParamMask, RadianceField, SceneField};
use crate::geometry::{near_far_planes, sample_pose, CameraPose, GeometryError, PoseSamplingConfig, RoiBox};
use crate::guidance::{anneal_weights, directional_prompt, GuidanceError, LossBreakdown, LossConfig, Scorer};
use crate::math::Vec3;
use crate::raster::Resolution;
use crate::renderer::{make_background, BackgroundKind, BackgroundSpec, RenderError, RenderSettings};

pub use objective::{LossPipeline, Objective};
pub use render::{GeneratorMode, RoiForward, RoiRenderer, RoiView};
pub use state::{read_history_csv, GENERATOR_FILE, HISTORY_FILE, OPTIMIZER_FILE, STATE_FILE, SUMMARY_FILE, write_history_csv, EditSummary, StepRecord, TrainState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Blend(#[from] BlendError),
    #[error("non-finite {what} at step {step}; pose {pose:?}; losses {loss:?}")]
    NonFinite {
        what: &'static str,
        step: u64,
        pose: Box<CameraPose>,
        loss: LossBreakdown,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("state: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub learning_rate: f64,
    /// Learning rate reached at the last step; decay is exponential.
    pub final_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; nonpositive disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub pose: PoseSamplingConfig,
    pub afov_deg: f64,
    pub resolution: Resolution,
    /// Samples along the box-clipped part of each ray.
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub activation: crate::fields::Activation,
    pub loss: LossConfig,
    pub blend: BlendMode,
    /// Train only the color layers of the generator.
    pub texture_only: bool,
    /// Background kinds, cycled one per step.
    pub backgrounds: Vec<BackgroundKind>,
    /// Save the state every this many steps when an output directory is
    /// given; zero saves only at the end.
    pub checkpoint_every: u64,
    /// Generator architecture when the original field is not an MLP.
    pub generator_arch: MlpArch,
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 5e-4,
            final_learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 10.0,
            seed: 123,
            pose: PoseSamplingConfig::default(),
            afov_deg: 60.0,
            resolution: Resolution::square(32),
            samples_per_ray: 32,
            stratified: true,
            activation: crate::fields::Activation::Softplus,
            loss: LossConfig::default(),
            blend: BlendMode::Replace,
            texture_only: false,
            backgrounds: BackgroundKind::augmentation_cycle(),
            checkpoint_every: 0,
            generator_arch: MlpArch::default(),
            ema_decay: DEFAULT_EMA_DECAY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and nonnegative");
        }
        if !(self.final_learning_rate >= 0.0 && self.final_learning_rate.is_finite()) {
            return bad("final learning rate must be finite and nonnegative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam epsilon must be positive");
        }
        if !(self.afov_deg > 0.0 && self.afov_deg < 180.0) {
            return bad("field of view must lie in (0, 180) degrees");
        }
        if self.resolution.is_empty() || self.samples_per_ray == 0 {
            return bad("resolution and samples per ray must be nonzero");
        }
        if self.backgrounds.is_empty() {
            return bad("at least one background kind is required");
        }
        self.pose.validate()?;
        self.loss.validate()?;
        self.blend.validate()?;
        self.generator_arch.validate()?;
        CenterTracker::new(self.ema_decay)?;
        Ok(())
    }

    pub fn afov(&self) -> f64 {
        self.afov_deg.to_radians()
    }

    /// Learning rate used at `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        if self.steps == 0 || self.learning_rate == 0.0 {
            return self.learning_rate;
        }
        let frac = (step as f64 / self.steps as f64).min(1.0);
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(frac)
    }

    pub fn generator_mode(&self) -> GeneratorMode {
        match self.blend {
            BlendMode::ObjectBlend { density, eps } => GeneratorMode::ObjectBlend { density, eps },
            _ => GeneratorMode::Insert,
        }
    }
}

/// The independent random stream of one training step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Pose, background and prompt drawn for one step.
#[derive(Debug, Clone)]
pub struct StepDraw {
    pub view: RoiView,
    pub prompt: String,
    pub background: BackgroundSpec,
}

/// Draws the view of `step`: pose about the tracked center, planes from the
/// camera distance, next background in the cycle.
pub fn draw_step(
    step: u64,
    cfg: &TrainConfig,
    roi: &RoiBox,
    center: Vec3,
    caption: &str,
) -> Result<StepDraw, TrainError> {
    let mut rng = step_rng(cfg.seed, step);
    let sampled = sample_pose(&cfg.pose, roi, cfg.afov(), center, &mut rng)?;
    let distance = sampled.pose.position.distance(roi.center());
    let (near, far) = near_far_planes(distance, roi.diagonal(), cfg.pose.min_near);
    let kind = cfg.backgrounds[(step % cfg.backgrounds.len() as u64) as usize];
    let background = BackgroundSpec::new(kind, rng.random());
    let settings = RenderSettings {
        resolution: cfg.resolution,
        near,
        far,
        samples_per_ray: cfg.samples_per_ray,
        stratified: cfg.stratified,
        seed: rng.random(),
        activation: cfg.activation,
    };
    let prompt = directional_prompt(caption, &sampled.pose, cfg.pose.scene_type)?;
    Ok(StepDraw {
        view: RoiView {
            pose: sampled.pose,
            settings,
            background: make_background(&background, cfg.resolution),
        },
        prompt,
        background,
    })
}

/// Fresh state: the generator starts from the original field when it is an
/// MLP, otherwise from a seeded network.
pub fn init_state(original: &SceneField, cfg: &TrainConfig) -> Result<TrainState, TrainError> {
    let generator = match original {
        SceneField::Mlp(m) => m.clone(),
        SceneField::Analytic(_) => MlpField::new(cfg.generator_arch, cfg.seed)?,
    };
    Ok(TrainState::new(generator, CenterTracker::new(cfg.ema_decay)?))
}

fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Adam update of `generator` from `grad`, honoring `mask`.
fn apply_update(state: &mut TrainState, grad: &mut [f64], mask: &ParamMask, cfg: &TrainConfig, lr: f64) {
    mask.apply(grad);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (m, v) = (&mut state.adam_m, &mut state.adam_v);
    state.generator.update_params(|params| {
        for i in 0..params.len() {
            if !mask.is_trainable(i) {
                continue;
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let step = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
            params[i] = (params[i] as f64 - step) as f32;
        }
    });
}

/// One optimization step. `state` is left untouched on error.
pub fn train_step(
    state: &mut TrainState,
    original: &dyn RadianceField,
    roi: &RoiBox,
    scorer: &dyn Scorer,
    caption: &str,
    cfg: &TrainConfig,
) -> Result<StepRecord, TrainError> {
    let step = state.step;
    let draw = draw_step(step, cfg, roi, state.tracker.center_or(roi.center()), caption)?;
    let pipeline = LossPipeline {
        renderer: RoiRenderer {
            original,
            roi: *roi,
            mode: cfg.generator_mode(),
        },
        objective: Objective {
            scorer,
            text_embedding: scorer.embed_text(&draw.prompt)?,
            loss: cfg.loss,
            weights: anneal_weights(step, cfg.steps, &cfg.loss),
        },
        view: draw.view,
    };
    let (loss, mut grad, fwd) = pipeline.loss_and_grad(&state.generator)?;
    let non_finite = |what| TrainError::NonFinite {
        what,
        step,
        pose: Box::new(pipeline.view.pose),
        loss,
    };
    if !loss.is_finite() {
        return Err(non_finite("loss"));
    }
    let mut grad_norm = global_norm(&grad);
    if !grad_norm.is_finite() {
        return Err(non_finite("gradient"));
    }
    if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        let s = cfg.grad_clip / grad_norm;
        grad.iter_mut().for_each(|g| *g *= s);
        grad_norm = cfg.grad_clip;
    }

    let mask = if cfg.texture_only {
        state.generator.freeze_density_layers()
    } else {
        ParamMask::all_trainable(state.generator.param_count())
    };
    let lr = cfg.learning_rate_at(step);
    let backup = state.clone();
    apply_update(state, &mut grad, &mask, cfg, lr);
    if state.generator.params().iter().any(|p| !p.is_finite()) {
        *state = backup;
        return Err(non_finite("parameters"));
    }
    state.tracker.update(&fwd.positions, &fwd.densities);
    let record = StepRecord {
        step,
        loss,
        learning_rate: lr,
        grad_norm,
    };
    state.history.push(record);
    state.step += 1;
    Ok(record)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub summary: EditSummary,
}

/// Runs `state` forward to `cfg.steps` or until `on_step` breaks. With
/// `out_dir`, the state is saved at the configured cadence, when the run
/// stops, and before returning an error.
#[allow(clippy::too_many_arguments)]
pub fn train_from(
    mut state: TrainState,
    original: &dyn RadianceField,
    roi: &RoiBox,
    caption: &str,
    cfg: &TrainConfig,
    scorer: &dyn Scorer,
    out_dir: Option<&std::path::Path>,
    mut on_step: impl FnMut(&TrainState) -> ControlFlow<()>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let summary = |s: &TrainState| EditSummary {
        roi: *roi,
        blend: cfg.blend,
        caption: caption.to_string(),
        ema_center: s.tracker.center_or(roi.center()),
        steps: s.step,
    };
    while state.step < cfg.steps {
        if let Err(e) = train_step(&mut state, original, roi, scorer, caption, cfg) {
            if let Some(dir) = out_dir {
                state.save(dir, &summary(&state))?;
            }
            return Err(e);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
                state.save(dir, &summary(&state))?;
            }
        }
        if on_step(&state).is_break() {
            break;
        }
    }
    let summary = summary(&state);
    if let Some(dir) = out_dir {
        state.save(dir, &summary)?;
    }
    Ok(TrainOutcome { state, summary })
}

/// Clones the original field into a generator and trains it.
pub fn train(
    original: &SceneField,
    roi: &RoiBox,
    caption: &str,
    cfg: &TrainConfig,
    scorer: &dyn Scorer,
    out_dir: Option<&std::path::Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let state = init_state(original, cfg)?;
    train_from(state, original, roi, caption, cfg, scorer, out_dir, |_| ControlFlow::Continue(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::AnalyticScene;
    use crate::guidance::MockScorer;
    use crate::raster::Image;

    fn small_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            resolution: Resolution::square(8),
            samples_per_ray: 8,
            generator_arch: MlpArch {
                depth: 2,
                width: 16,
                color_width: 8,
                pos_freqs: 3,
                dir_freqs: 1,
            },
            ..Default::default()
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 5e-4);
        assert!((cfg.learning_rate_at(500) - 5e-5).abs() < 1e-15);
        assert!(cfg.learning_rate_at(250) < 5e-4 && cfg.learning_rate_at(250) > 5e-5);
    }

    #[test]
    fn steps_change_generator_not_original() {
        let original = SceneField::Analytic(AnalyticScene::test_scene());
        let roi = AnalyticScene::test_scene_empty_roi();
        let cfg = small_cfg(3);
        let scorer = MockScorer::with_target(&Image::filled(Resolution::square(8), [1.0, 0.0, 0.0]), "red", 1);
        let init = init_state(&original, &cfg).unwrap();
        let out = train(&original, &roi, "red", &cfg, &scorer, None).unwrap();
        assert_eq!(out.state.step, 3);
        assert_eq!(out.state.history.len(), 3);
        assert_ne!(out.state.generator.params(), init.generator.params());
        assert!(out.state.tracker.initialized);
        assert!(roi.contains(out.state.tracker.ema_center));
    }

    #[test]
    fn zero_steps_keeps_clone() {
        let cfg = small_cfg(0);
        let source = MlpField::new(cfg.generator_arch, 9).unwrap();
        let original = SceneField::Mlp(source.clone());
        let scorer = MockScorer::new(Resolution::square(8), 1);
        let out = train(&original, &AnalyticScene::test_scene_empty_roi(), "x", &cfg, &scorer, None).unwrap();
        assert_eq!(out.state.generator, source);
    }

    #[test]
    fn bad_config_rejected() {
        let mut cfg = small_cfg(1);
        cfg.backgrounds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(1);
        cfg.learning_rate = -1.0;
        assert!(cfg.validate().is_err());
    }
}
