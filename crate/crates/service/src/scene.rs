//! Scene and edit descriptors and the renders built from them.

use std::path::{Path, PathBuf};

use blendfield::blending::{render_blended, BlendMode, BlendSampling, BlendSettings};
use blendfield::fields::{checkpoint, Activation, AnalyticScene, MlpField, SceneField};
use blendfield::geometry::{CameraPose, RoiBox, SceneType};
use blendfield::math::Vec3;
use blendfield::raster::Resolution;
use blendfield::renderer::{make_background, render_view, BackgroundKind, BackgroundSpec, RenderOutput, RenderSettings};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// Name of the built-in analytic scene.
pub const TEST_SCENE: &str = "test-scene";

/// Camera in wire form; `afov_deg` is the full horizontal angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WirePose {
    pub position: Vec3,
    pub look_at: Vec3,
    #[serde(default = "default_up")]
    pub up: Vec3,
    pub afov_deg: f64,
}

fn default_up() -> Vec3 {
    Vec3::new(0.0, 1.0, 0.0)
}

impl WirePose {
    pub fn to_pose(&self) -> Result<CameraPose, ServiceError> {
        CameraPose::look_at(self.position, self.look_at, self.up, self.afov_deg.to_radians())
            .map_err(|e| ServiceError::BadRequest(format!("pose: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FieldSource {
    Builtin { name: String },
    /// Relative paths are resolved against the descriptor's directory.
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderDefaults {
    pub resolution: Resolution,
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub activation: Activation,
    pub background: BackgroundKind,
}

impl Default for RenderDefaults {
    fn default() -> Self {
        Self {
            resolution: Resolution::square(128),
            samples_per_ray: 128,
            near: 0.1,
            far: 8.0,
            activation: Activation::Softplus,
            background: BackgroundKind::Black,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub id: String,
    #[serde(default)]
    pub scene_type: SceneType,
    pub field: FieldSource,
    pub bounds: Bounds,
    pub default_camera: WirePose,
    #[serde(default)]
    pub render: RenderDefaults,
}

impl SceneDescriptor {
    /// Descriptor of the built-in analytic scene.
    pub fn test_scene() -> Self {
        Self {
            id: TEST_SCENE.into(),
            scene_type: SceneType::FullOrbit,
            field: FieldSource::Builtin { name: TEST_SCENE.into() },
            bounds: Bounds {
                min: Vec3::new(-2.0, -1.2, -2.0),
                max: Vec3::new(2.0, 1.5, 2.0),
            },
            default_camera: WirePose {
                position: Vec3::new(0.0, 0.8, 4.0),
                look_at: Vec3::new(0.0, -0.5, 0.0),
                up: default_up(),
                afov_deg: 50.0,
            },
            render: RenderDefaults::default(),
        }
    }
}

/// An edit of a scene; written next to the generator after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDescriptor {
    pub scene_id: String,
    pub roi: RoiBox,
    pub blend: BlendMode,
    pub caption: String,
    /// Tracked center frozen at the end of training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_center: Option<Vec3>,
    /// Generator checkpoint, relative to the descriptor's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<PathBuf>,
    #[serde(default)]
    pub texture_only: bool,
}

/// A loaded scene with its field.
#[derive(Debug, Clone)]
pub struct Scene {
    pub descriptor: SceneDescriptor,
    pub field: SceneField,
    pub bounds: RoiBox,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ServiceError> {
    let bytes = std::fs::read(path).map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| ServiceError::BadRequest(format!("{}: {e}", path.display())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Scene {
    pub fn test_scene() -> Self {
        Self::from_descriptor(SceneDescriptor::test_scene(), Path::new(".")).expect("built-in scene")
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let desc: SceneDescriptor = read_json(path)?;
        Self::from_descriptor(desc, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_descriptor(descriptor: SceneDescriptor, base: &Path) -> Result<Self, ServiceError> {
        let bounds = RoiBox::from_min_max(descriptor.bounds.min, descriptor.bounds.max)
            .map_err(|e| ServiceError::BadRequest(format!("scene bounds: {e}")))?;
        let field = match &descriptor.field {
            FieldSource::Builtin { name } if name == TEST_SCENE => SceneField::Analytic(AnalyticScene::test_scene()),
            FieldSource::Builtin { name } => {
                return Err(ServiceError::BadRequest(format!("unknown built-in scene {name:?}")));
            }
            FieldSource::Checkpoint { path } => {
                let path = resolve(base, path);
                let (mlp, _) = checkpoint::load(&path)
                    .map_err(|e| ServiceError::BadRequest(format!("checkpoint {}: {e}", path.display())))?;
                SceneField::Mlp(mlp)
            }
        };
        descriptor.default_camera.to_pose()?;
        Ok(Self {
            descriptor,
            field,
            bounds,
        })
    }

    pub fn id(&self) -> &str {
        &self.descriptor.id
    }

    pub fn settings(&self, resolution: Option<Resolution>, seed: u64) -> RenderSettings {
        let r = &self.descriptor.render;
        RenderSettings {
            resolution: resolution.unwrap_or(r.resolution),
            near: r.near,
            far: r.far,
            samples_per_ray: r.samples_per_ray,
            stratified: false,
            seed,
            activation: r.activation,
        }
    }

    fn background(&self, settings: &RenderSettings) -> blendfield::raster::Image {
        make_background(
            &BackgroundSpec::new(self.descriptor.render.background, settings.seed),
            settings.resolution,
        )
    }

    pub fn render(&self, pose: &CameraPose, resolution: Option<Resolution>, seed: u64) -> Result<RenderOutput, ServiceError> {
        let settings = self.settings(resolution, seed);
        Ok(render_view(&self.field, pose, &settings, &self.background(&settings))?)
    }

    /// Checks that an edit fits this scene.
    pub fn validate_edit(&self, edit: &EditDescriptor) -> Result<(), ServiceError> {
        if edit.scene_id != self.id() {
            return Err(ServiceError::BadRequest(format!(
                "edit targets scene {:?}, not {:?}",
                edit.scene_id,
                self.id()
            )));
        }
        let (lo, hi) = (self.bounds.min(), self.bounds.max());
        let (blo, bhi) = (edit.roi.min(), edit.roi.max());
        if (0..3).any(|i| blo[i] < lo[i] || bhi[i] > hi[i]) {
            return Err(ServiceError::BadRequest("box leaves the scene bounds".into()));
        }
        if let Some(c) = edit.ema_center {
            if !edit.roi.contains(c) {
                return Err(ServiceError::BadRequest("tracked center lies outside the box".into()));
            }
        }
        if edit.caption.trim().is_empty() {
            return Err(ServiceError::BadRequest("caption must not be empty".into()));
        }
        edit.blend.validate().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        Ok(())
    }

    /// Renders the scene with `generator` blended into the edit's box.
    pub fn render_edited(
        &self,
        edit: &EditDescriptor,
        generator: &MlpField,
        pose: &CameraPose,
        resolution: Option<Resolution>,
        seed: u64,
    ) -> Result<RenderOutput, ServiceError> {
        let settings = self.settings(resolution, seed);
        let blend = BlendSettings {
            mode: edit.blend,
            center: edit.ema_center.unwrap_or(edit.roi.center()),
            sampling: BlendSampling::Uniform,
        };
        Ok(render_blended(
            &self.field,
            generator,
            &edit.roi,
            &blend,
            pose,
            &settings,
            &self.background(&settings),
        )?)
    }
}

/// Loads an edit descriptor and its generator checkpoint.
pub fn load_edit(path: &Path) -> Result<(EditDescriptor, MlpField), ServiceError> {
    let edit: EditDescriptor = read_json(path)?;
    let rel = edit
        .generator
        .clone()
        .ok_or_else(|| ServiceError::BadRequest("edit has no generator; train it first".into()))?;
    let gpath = resolve(path.parent().unwrap_or(Path::new(".")), &rel);
    let (generator, _) = checkpoint::load(&gpath)
        .map_err(|e| ServiceError::BadRequest(format!("checkpoint {}: {e}", gpath.display())))?;
    Ok((edit, generator))
}

pub fn read_edit(path: &Path) -> Result<EditDescriptor, ServiceError> {
    read_json(path)
}
