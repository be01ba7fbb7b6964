//! Radiance fields: maps from `(position, direction)` to raw density and color.
//!
//! Fields return pre-activation values. The density activation and the color
//! sigmoid are applied by the renderer and the blending operators, which need
//! to manipulate the raw quantities.

mod analytic;
pub mod checkpoint;
mod encoding;
mod mlp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::Vec3;

pub use analytic::{AnalyticField, AnalyticScene, Shape, EMPTY_RAW_DENSITY};
pub use encoding::{encode_into, positional_encode};
pub use mlp::{FieldCotangent, ForwardCache, MlpArch, MlpField, ParamGroup, ParamMask};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("non-finite field input: position {position:?}, direction {direction:?}")]
    NonFiniteInput { position: [f64; 3], direction: [f64; 3] },
    #[error("field is not trainable")]
    NotTrainable,
    #[error("parameter count mismatch: expected {expected}, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("batch length mismatch: {inputs} inputs, {cotangents} cotangents")]
    BatchMismatch { inputs: usize, cotangents: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw (pre-activation) field output.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldSample {
    pub raw_density: f64,
    pub raw_color: [f64; 3],
}

impl FieldSample {
    pub fn is_finite(&self) -> bool {
        self.raw_density.is_finite() && self.raw_color.iter().all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldInput {
    pub position: Vec3,
    pub direction: Vec3,
}

pub trait RadianceField: Send + Sync {
    fn eval(&self, position: Vec3, direction: Vec3) -> FieldSample;

    fn eval_batch(&self, inputs: &[FieldInput], out: &mut Vec<FieldSample>) {
        out.clear();
        out.extend(inputs.iter().map(|i| self.eval(i.position, i.direction)));
    }
}

impl<F: RadianceField + ?Sized> RadianceField for &F {
    fn eval(&self, position: Vec3, direction: Vec3) -> FieldSample {
        (**self).eval(position, direction)
    }

    fn eval_batch(&self, inputs: &[FieldInput], out: &mut Vec<FieldSample>) {
        (**self).eval_batch(inputs, out)
    }
}

/// Checked single evaluation: rejects non-finite inputs.
pub fn field_eval<F: RadianceField + ?Sized>(
    field: &F,
    position: Vec3,
    direction: Vec3,
) -> Result<FieldSample, FieldError> {
    if !position.is_finite() || !direction.is_finite() {
        return Err(FieldError::NonFiniteInput {
            position: position.to_array(),
            direction: direction.to_array(),
        });
    }
    Ok(field.eval(position, direction))
}

/// Density activation `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => crate::math::sigmoid(x),
        }
    }
}

/// A scene's original field: either an analytic test scene or a trained MLP.
#[derive(Debug, Clone)]
pub enum SceneField {
    Analytic(AnalyticScene),
    Mlp(MlpField),
}

impl SceneField {
    pub fn as_mlp(&self) -> Option<&MlpField> {
        match self {
            SceneField::Mlp(m) => Some(m),
            SceneField::Analytic(_) => None,
        }
    }
}

impl RadianceField for SceneField {
    fn eval(&self, position: Vec3, direction: Vec3) -> FieldSample {
        match self {
            SceneField::Analytic(a) => a.eval(position, direction),
            SceneField::Mlp(m) => m.eval(position, direction),
        }
    }

    fn eval_batch(&self, inputs: &[FieldInput], out: &mut Vec<FieldSample>) {
        match self {
            SceneField::Analytic(a) => a.eval_batch(inputs, out),
            SceneField::Mlp(m) => m.eval_batch(inputs, out),
        }
    }
}
