//! Similarity, transmittance and depth losses and their weighting.

use serde::{Deserialize, Serialize};

use super::GuidanceError;
use crate::geometry::{CameraPose, SceneType};
use crate::raster::ScalarMap;

/// `-<image, text>` for unit embeddings.
pub fn similarity_loss(image_embed: &[f64], text_embed: &[f64]) -> Result<f64, GuidanceError> {
    if image_embed.len() != text_embed.len() {
        return Err(GuidanceError::DimensionMismatch {
            image: image_embed.len(),
            text: text_embed.len(),
        });
    }
    Ok(-image_embed.iter().zip(text_embed).map(|(a, b)| a * b).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewBucket {
    TopDown,
    Front,
    Side,
    Back,
}

impl ViewBucket {
    pub const ALL: [ViewBucket; 4] = [ViewBucket::TopDown, ViewBucket::Front, ViewBucket::Side, ViewBucket::Back];

    pub fn suffix(self) -> &'static str {
        match self {
            ViewBucket::TopDown => ", top-down view",
            ViewBucket::Front => ", front view",
            ViewBucket::Side => ", side view",
            ViewBucket::Back => ", back view",
        }
    }
}

/// Elevation below this (camera above the target) counts as top-down.
pub const TOP_DOWN_ELEVATION_DEG: f64 = -60.0;
pub const FRONT_MAX_AZIMUTH_DEG: f64 = 45.0;
pub const SIDE_MAX_AZIMUTH_DEG: f64 = 135.0;

/// Buckets a view by angles in degrees. Forward-facing scenes never use the
/// back bucket.
pub fn view_bucket(azimuth_deg: f64, elevation_deg: f64, scene_type: SceneType) -> ViewBucket {
    let az = azimuth_deg.abs();
    if elevation_deg < TOP_DOWN_ELEVATION_DEG {
        ViewBucket::TopDown
    } else if az < FRONT_MAX_AZIMUTH_DEG {
        ViewBucket::Front
    } else if az <= SIDE_MAX_AZIMUTH_DEG || scene_type == SceneType::ForwardFacing {
        ViewBucket::Side
    } else {
        ViewBucket::Back
    }
}

pub fn directional_prompt_for_angles(
    caption: &str,
    azimuth_deg: f64,
    elevation_deg: f64,
    scene_type: SceneType,
) -> Result<String, GuidanceError> {
    if caption.trim().is_empty() {
        return Err(GuidanceError::EmptyCaption);
    }
    Ok(format!(
        "{caption}{}",
        view_bucket(azimuth_deg, elevation_deg, scene_type).suffix()
    ))
}

/// Appends the view suffix matching the camera's direction from its target.
pub fn directional_prompt(caption: &str, pose: &CameraPose, scene_type: SceneType) -> Result<String, GuidanceError> {
    let angles = pose.view_angles();
    directional_prompt_for_angles(caption, angles.azimuth_deg, angles.elevation_deg, scene_type)
}

/// Removes a trailing view suffix, if any.
pub fn strip_view_suffix(prompt: &str) -> &str {
    ViewBucket::ALL
        .iter()
        .find_map(|b| prompt.strip_suffix(b.suffix()))
        .unwrap_or(prompt)
}

/// `-min(tau, mean_t)`.
pub fn transmittance_loss(mean_t: f64, tau: f64) -> f64 {
    -tau.min(mean_t)
}

/// Derivative of [`transmittance_loss`] in `mean_t`; flows at the kink.
pub fn transmittance_loss_grad(mean_t: f64, tau: f64) -> f64 {
    if mean_t <= tau {
        -1.0
    } else {
        0.0
    }
}

/// `-min(rho, var(disparity))` with the population variance.
pub fn depth_loss(disparity: &ScalarMap, rho: f64) -> f64 {
    -rho.min(disparity.variance())
}

/// Per-pixel derivative of [`depth_loss`]; flows at the kink.
pub fn depth_loss_grad(disparity: &ScalarMap, rho: f64) -> Vec<f64> {
    let n = disparity.values.len();
    if n == 0 || disparity.variance() > rho {
        return vec![0.0; n];
    }
    let mean = disparity.mean();
    disparity
        .values
        .iter()
        .map(|d| -2.0 * (d - mean) / n as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub rho: f64,
    pub lambda_t: f64,
    pub lambda_d: f64,
    /// Ramp start and end as fractions of the total step count.
    pub ramp_start: f64,
    pub ramp_end: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.88,
            rho: 0.2,
            lambda_t: 0.25,
            lambda_d: 4.0,
            ramp_start: 0.0,
            ramp_end: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let bad = |m: &str| Err(GuidanceError::Config(m.to_string()));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho must be positive");
        }
        if !(self.lambda_t >= 0.0 && self.lambda_d >= 0.0 && self.lambda_t.is_finite() && self.lambda_d.is_finite()) {
            return bad("loss weights must be nonnegative");
        }
        if !(0.0 <= self.ramp_start && self.ramp_start <= self.ramp_end && self.ramp_end <= 1.0) {
            return bad("ramp must satisfy 0 <= start <= end <= 1");
        }
        Ok(())
    }

    /// The same configuration with both auxiliary losses disabled.
    pub fn similarity_only(self) -> Self {
        Self {
            lambda_t: 0.0,
            lambda_d: 0.0,
            ..self
        }
    }
}

/// Linear ramp of `(lambda_t, lambda_d)` from zero at `ramp_start` to full
/// at `ramp_end`, constant afterwards.
pub fn anneal_weights(step: u64, total: u64, cfg: &LossConfig) -> (f64, f64) {
    let frac = if total == 0 { 1.0 } else { step as f64 / total as f64 };
    let ramp = if frac >= cfg.ramp_end {
        1.0
    } else if frac <= cfg.ramp_start {
        0.0
    } else {
        (frac - cfg.ramp_start) / (cfg.ramp_end - cfg.ramp_start)
    };
    (ramp * cfg.lambda_t, ramp * cfg.lambda_d)
}

pub fn total_loss(l_sim: f64, l_t: f64, l_d: f64, weights: (f64, f64)) -> f64 {
    l_sim + weights.0 * l_t + weights.1 * l_d
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub similarity: f64,
    pub transmittance: f64,
    pub depth: f64,
    pub lambda_t: f64,
    pub lambda_d: f64,
    pub total: f64,
    pub mean_transmittance: f64,
    pub disparity_variance: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.similarity, self.transmittance, self.depth, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}
