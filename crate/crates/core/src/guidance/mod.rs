//! Image-text guidance: scorers, prompts and losses.

mod external;
mod losses;
mod mock;
mod resample;

use thiserror::Error;

use crate::raster::{Image, Resolution};

pub use external::{handle_request, serve_protocol, ExternalScorer, ScorerRequest, ScorerResponse};
pub use losses::{
    anneal_weights, depth_loss, depth_loss_grad, directional_prompt, directional_prompt_for_angles,
    similarity_loss, strip_view_suffix, total_loss, transmittance_loss, transmittance_loss_grad, view_bucket,
    LossBreakdown, LossConfig, ViewBucket, FRONT_MAX_AZIMUTH_DEG, SIDE_MAX_AZIMUTH_DEG, TOP_DOWN_ELEVATION_DEG,
};
pub use mock::{MockScorer, BIAS_FEATURE};
pub use resample::{resample_bilinear, resample_bilinear_adjoint};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("embedding dimensions differ: {image} vs {text}")]
    DimensionMismatch { image: usize, text: usize },
    #[error("caption must not be empty")]
    EmptyCaption,
    #[error("scorer does not provide image gradients")]
    NotDifferentiable,
    #[error("scorer: {0}")]
    Scorer(String),
    #[error("scorer protocol: {0}")]
    Protocol(String),
    #[error("loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An image-text model producing unit embeddings in a shared space.
pub trait Scorer: Send + Sync {
    /// Resolution images are resampled to before encoding.
    fn resolution(&self) -> Resolution;

    fn dim(&self) -> usize;

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>, GuidanceError>;

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, GuidanceError>;

    /// Pulls a gradient on the image embedding back to the input image.
    fn embed_image_vjp(&self, _image: &Image, _cotangent: &[f64]) -> Result<Image, GuidanceError> {
        Err(GuidanceError::NotDifferentiable)
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn resolution(&self) -> Resolution {
        (**self).resolution()
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>, GuidanceError> {
        (**self).embed_image(image)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, GuidanceError> {
        (**self).embed_text(text)
    }

    fn embed_image_vjp(&self, image: &Image, cotangent: &[f64]) -> Result<Image, GuidanceError> {
        (**self).embed_image_vjp(image, cotangent)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn resolution(&self) -> Resolution {
        (**self).resolution()
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>, GuidanceError> {
        (**self).embed_image(image)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, GuidanceError> {
        (**self).embed_text(text)
    }

    fn embed_image_vjp(&self, image: &Image, cotangent: &[f64]) -> Result<Image, GuidanceError> {
        (**self).embed_image_vjp(image, cotangent)
    }
}
