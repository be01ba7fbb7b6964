//! Edit-quality metrics computed with any [`Scorer`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ray_box_intersect, CameraPose, RoiBox};
use crate::guidance::{GuidanceError, Scorer};
use crate::raster::{Image, Resolution};

/// Embedding deltas at or below this norm are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("{0} embedding delta is zero")]
    ZeroDelta(&'static str),
    #[error("sequences differ in length: {original} vs {edited}")]
    LengthMismatch { original: usize, edited: usize },
    #[error("at least two frames are required, got {0}")]
    TooFewFrames(usize),
    #[error("all {0} frame pairs are degenerate")]
    AllDegenerate(usize),
    #[error("caption pool is empty")]
    EmptyPool,
    #[error("{renders} renders but {captions} true captions")]
    CaptionCount { renders: usize, captions: usize },
    #[error("true caption {0:?} is not in the pool exactly once")]
    CaptionNotInPool(String),
    #[error("image sizes differ")]
    SizeMismatch,
    #[error("no pixels outside the box projection")]
    EmptyBackground,
}

fn delta(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine of two deltas, `None` when either is degenerate.
fn delta_cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na <= DEGENERATE_NORM || nb <= DEGENERATE_NORM {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine between the text change and the image change of an edit.
pub fn direction_similarity(
    scorer: &dyn Scorer,
    original: &Image,
    edited: &Image,
    original_caption: &str,
    edited_caption: &str,
) -> Result<f64, MetricsError> {
    let d_text = delta(&scorer.embed_text(edited_caption)?, &scorer.embed_text(original_caption)?);
    let d_image = delta(&scorer.embed_image(edited)?, &scorer.embed_image(original)?);
    if norm(&d_text) <= DEGENERATE_NORM {
        return Err(MetricsError::ZeroDelta("text"));
    }
    delta_cosine(&d_text, &d_image).ok_or(MetricsError::ZeroDelta("image"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    /// Mean cosine over the nondegenerate pairs.
    pub mean: f64,
    pub pairs: usize,
    /// Pairs skipped because a delta was zero.
    pub degenerate: usize,
}

/// Agreement between frame-to-frame embedding changes of two sequences.
pub fn direction_consistency(
    scorer: &dyn Scorer,
    original: &[Image],
    edited: &[Image],
) -> Result<Consistency, MetricsError> {
    if original.len() != edited.len() {
        return Err(MetricsError::LengthMismatch {
            original: original.len(),
            edited: edited.len(),
        });
    }
    if original.len() < 2 {
        return Err(MetricsError::TooFewFrames(original.len()));
    }
    let embed = |frames: &[Image]| -> Result<Vec<Vec<f64>>, GuidanceError> {
        frames.par_iter().map(|f| scorer.embed_image(f)).collect()
    };
    let (eo, ee) = (embed(original)?, embed(edited)?);
    let scores: Vec<Option<f64>> = (0..eo.len() - 1)
        .map(|i| delta_cosine(&delta(&eo[i + 1], &eo[i]), &delta(&ee[i + 1], &ee[i])))
        .collect();
    let valid: Vec<f64> = scores.iter().flatten().copied().collect();
    let degenerate = scores.len() - valid.len();
    if valid.is_empty() {
        return Err(MetricsError::AllDegenerate(scores.len()));
    }
    Ok(Consistency {
        mean: valid.iter().sum::<f64>() / valid.len() as f64,
        pairs: valid.len(),
        degenerate,
    })
}

/// Fraction of renders whose true caption ranks first in `pool`. A tie goes
/// to the caption earliest in the pool.
pub fn r_precision(
    scorer: &dyn Scorer,
    renders: &[Image],
    true_captions: &[&str],
    pool: &[&str],
) -> Result<f64, MetricsError> {
    if pool.is_empty() {
        return Err(MetricsError::EmptyPool);
    }
    if renders.len() != true_captions.len() {
        return Err(MetricsError::CaptionCount {
            renders: renders.len(),
            captions: true_captions.len(),
        });
    }
    let truth: Vec<usize> = true_captions
        .iter()
        .map(|c| {
            let mut hits = pool.iter().enumerate().filter(|(_, p)| *p == c);
            match (hits.next(), hits.next()) {
                (Some((i, _)), None) => Ok(i),
                _ => Err(MetricsError::CaptionNotInPool(c.to_string())),
            }
        })
        .collect::<Result<_, _>>()?;
    if renders.is_empty() {
        return Ok(0.0);
    }
    let text: Vec<Vec<f64>> = pool.iter().map(|c| scorer.embed_text(c)).collect::<Result<_, _>>()?;
    let hits: Vec<bool> = renders
        .par_iter()
        .zip(&truth)
        .map(|(img, &t)| -> Result<bool, GuidanceError> {
            let e = scorer.embed_image(img)?;
            let score = |v: &Vec<f64>| -> f64 { v.iter().zip(&e).map(|(a, b)| a * b).sum() };
            let mut best = 0;
            let mut best_score = score(&text[0]);
            for (i, v) in text.iter().enumerate().skip(1) {
                let s = score(v);
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            Ok(best == t)
        })
        .collect::<Result<_, _>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / renders.len() as f64)
}

/// Pixels whose camera ray passes through the box.
pub fn roi_mask(roi: &RoiBox, pose: &CameraPose, res: Resolution) -> Vec<bool> {
    (0..res.pixel_count())
        .map(|i| {
            let ray = pose.pixel_ray(i % res.width, i / res.width, res.width, res.height, 0.0, f64::INFINITY);
            ray_box_intersect(&ray, roi).is_some()
        })
        .collect()
}

/// Mean absolute channel difference over the pixels outside `mask`.
pub fn masked_bg_mad(a: &Image, b: &Image, mask: &[bool]) -> Result<f64, MetricsError> {
    if a.resolution() != b.resolution() || mask.len() != a.pixels.len() {
        return Err(MetricsError::SizeMismatch);
    }
    let (sum, count) = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .zip(mask)
        .filter(|(_, inside)| !**inside)
        .fold((0.0, 0usize), |(s, n), ((p, q), _)| {
            (s + (0..3).map(|c| (p[c] - q[c]).abs()).sum::<f64>(), n + 3)
        });
    if count == 0 {
        return Err(MetricsError::EmptyBackground);
    }
    Ok(sum / count as f64)
}

/// Metrics of one edit. Fields that could not be computed are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direction_similarity: Option<f64>,
    pub direction_consistency: Option<f64>,
    pub r_precision: Option<f64>,
    pub masked_bg_mad: Option<f64>,
    /// Frame pairs excluded from the consistency mean.
    pub degenerate_pairs: usize,
}
