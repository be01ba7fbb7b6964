//! The training objective on a rendered view and its pixel gradients.

use super::render::{RoiForward, RoiRenderer, RoiView};
use super::TrainError;
use crate::fields::MlpField;
use crate::guidance::{
    depth_loss, depth_loss_grad, similarity_loss, total_loss, transmittance_loss, transmittance_loss_grad,
    LossBreakdown, LossConfig, Scorer,
};
use crate::renderer::{PixelCotangent, RenderOutput, WEIGHT_EPS};

pub struct Objective<'s> {
    pub scorer: &'s dyn Scorer,
    pub text_embedding: Vec<f64>,
    pub loss: LossConfig,
    /// Effective `(lambda_t, lambda_d)`.
    pub weights: (f64, f64),
}

impl Objective<'_> {
    pub fn evaluate(&self, out: &RenderOutput) -> Result<LossBreakdown, TrainError> {
        let image_embedding = self.scorer.embed_image(&out.rgb)?;
        let similarity = similarity_loss(&image_embedding, &self.text_embedding)?;
        let transmittance = transmittance_loss(out.mean_transmittance, self.loss.tau);
        let depth = depth_loss(&out.disparity, self.loss.rho);
        Ok(LossBreakdown {
            similarity,
            transmittance,
            depth,
            lambda_t: self.weights.0,
            lambda_d: self.weights.1,
            total: total_loss(similarity, transmittance, depth, self.weights),
            mean_transmittance: out.mean_transmittance,
            disparity_variance: out.disparity.variance(),
        })
    }

    /// Gradient of the total loss with respect to every pixel output.
    pub fn cotangents(&self, out: &RenderOutput) -> Result<Vec<PixelCotangent>, TrainError> {
        let n = out.rgb.pixels.len();
        let neg_text: Vec<f64> = self.text_embedding.iter().map(|t| -t).collect();
        let d_rgb = self.scorer.embed_image_vjp(&out.rgb, &neg_text)?;

        let (lambda_t, lambda_d) = self.weights;
        let d_t = if lambda_t != 0.0 {
            lambda_t * transmittance_loss_grad(out.mean_transmittance, self.loss.tau) / n as f64
        } else {
            0.0
        };
        let d_disp = if lambda_d != 0.0 {
            depth_loss_grad(&out.disparity, self.loss.rho)
        } else {
            vec![0.0; n]
        };

        Ok((0..n)
            .map(|i| {
                let acc = out.accumulation.values[i];
                let wt = out.depth.values[i] * acc.max(WEIGHT_EPS);
                let g = lambda_d * d_disp[i];
                let mut ct = PixelCotangent {
                    rgb: d_rgb.pixels[i],
                    final_transmittance: d_t,
                    accumulation: 0.0,
                    weighted_t: 0.0,
                };
                if g != 0.0 {
                    ct.accumulation = g / wt.max(WEIGHT_EPS);
                    if wt > WEIGHT_EPS {
                        ct.weighted_t = -g * acc / (wt * wt);
                    }
                }
                ct
            })
            .collect())
    }
}

/// Render plus objective for one fixed view.
pub struct LossPipeline<'a> {
    pub renderer: RoiRenderer<'a>,
    pub view: RoiView,
    pub objective: Objective<'a>,
}

impl LossPipeline<'_> {
    pub fn loss(&self, generator: &MlpField) -> Result<LossBreakdown, TrainError> {
        let fwd = self.renderer.forward(generator, &self.view)?;
        self.objective.evaluate(&fwd.output)
    }

    /// Loss and its gradient with respect to every generator parameter.
    pub fn loss_and_grad(&self, generator: &MlpField) -> Result<(LossBreakdown, Vec<f64>, RoiForward), TrainError> {
        let fwd = self.renderer.forward(generator, &self.view)?;
        let loss = self.objective.evaluate(&fwd.output)?;
        let cts = self.objective.cotangents(&fwd.output)?;
        let mut grad = vec![0.0; generator.param_count()];
        self.renderer.backward(generator, &self.view, &cts, &mut grad)?;
        Ok((loss, grad, fwd))
    }
}
