//! Emission-absorption quadrature and its adjoint.

use crate::fields::Activation;
use crate::math::sigmoid;

/// Raw field output at one sample together with its spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSample {
    pub raw_density: f64,
    pub raw_color: [f64; 3],
    pub delta: f64,
}

/// Activated density and final color in `[0, 1]` at distance `t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ShadedSample {
    pub density: f64,
    pub color: [f64; 3],
    pub delta: f64,
    pub t: f64,
}

/// Per-pixel result of compositing one ray.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelResult {
    pub rgb: [f64; 3],
    pub final_transmittance: f64,
    /// `sum_i w_i`.
    pub accumulation: f64,
    /// `sum_i w_i t_i`.
    pub weighted_t: f64,
}

impl PixelResult {
    /// A ray that sees only the background.
    pub fn background(bg: [f64; 3]) -> Self {
        Self {
            rgb: bg,
            final_transmittance: 1.0,
            accumulation: 0.0,
            weighted_t: 0.0,
        }
    }
}

/// Front-to-back accumulator: `T_i = exp(-sum_{j<i} sigma_j delta_j)`,
/// `w_i = T_i (1 - exp(-sigma_i delta_i))`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    optical_depth: f64,
    rgb: [f64; 3],
    accumulation: f64,
    weighted_t: f64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Transmittance in front of the next sample.
    pub fn transmittance(&self) -> f64 {
        (-self.optical_depth).exp()
    }

    /// Adds one sample and returns its weight.
    pub fn push(&mut self, s: &ShadedSample) -> f64 {
        let tau = s.density * s.delta;
        let w = self.transmittance() * -(-tau).exp_m1();
        for c in 0..3 {
            self.rgb[c] += w * s.color[c];
        }
        self.accumulation += w;
        self.weighted_t += w * s.t;
        self.optical_depth += tau;
        w
    }

    pub fn finish(&self, background: [f64; 3]) -> PixelResult {
        let t_final = self.transmittance();
        PixelResult {
            rgb: std::array::from_fn(|c| self.rgb[c] + t_final * background[c]),
            final_transmittance: t_final,
            accumulation: self.accumulation,
            weighted_t: self.weighted_t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeResult {
    pub rgb: [f64; 3],
    pub weights: Vec<f64>,
    pub final_transmittance: f64,
}

/// Composites raw samples: density through `activation`, color through a sigmoid.
pub fn composite(samples: &[RawSample], activation: Activation, background: [f64; 3]) -> CompositeResult {
    let shaded: Vec<ShadedSample> = samples
        .iter()
        .map(|s| ShadedSample {
            density: activation.apply(s.raw_density),
            color: s.raw_color.map(sigmoid),
            delta: s.delta,
            t: 0.0,
        })
        .collect();
    let mut acc = Accumulator::new();
    let weights = shaded.iter().map(|s| acc.push(s)).collect();
    let px = acc.finish(background);
    CompositeResult {
        rgb: px.rgb,
        weights,
        final_transmittance: px.final_transmittance,
    }
}

pub fn composite_shaded(samples: &[ShadedSample], background: [f64; 3]) -> PixelResult {
    let mut acc = Accumulator::new();
    for s in samples {
        acc.push(s);
    }
    acc.finish(background)
}

/// Upstream gradient on a [`PixelResult`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelCotangent {
    pub rgb: [f64; 3],
    pub final_transmittance: f64,
    pub accumulation: f64,
    pub weighted_t: f64,
}

impl PixelCotangent {
    pub fn is_zero(&self) -> bool {
        self.rgb == [0.0; 3] && self.final_transmittance == 0.0 && self.accumulation == 0.0 && self.weighted_t == 0.0
    }
}

/// Gradient on one shaded sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ShadedCotangent {
    pub density: f64,
    pub color: [f64; 3],
}

/// Adjoint of [`composite_shaded`].
///
/// With `a_i = sigma_i delta_i` and per-sample value
/// `V_i = <g_rgb, c_i> + g_acc + g_wt t_i`:
/// `dL/da_k = T_{k+1} V_k - sum_{i>k} w_i V_i - T_final (g_T + <g_rgb, bg>)`.
pub fn composite_backward(
    samples: &[ShadedSample],
    background: [f64; 3],
    ct: &PixelCotangent,
) -> Vec<ShadedCotangent> {
    let n = samples.len();
    let mut out = vec![ShadedCotangent::default(); n];
    if n == 0 || ct.is_zero() {
        return out;
    }
    let value = |s: &ShadedSample| {
        ct.rgb[0] * s.color[0] + ct.rgb[1] * s.color[1] + ct.rgb[2] * s.color[2] + ct.accumulation + ct.weighted_t * s.t
    };

    let mut trans_after = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut depth = 0.0_f64;
    for s in samples {
        let tau = s.density * s.delta;
        let t_before = (-depth).exp();
        weights.push(t_before * -(-tau).exp_m1());
        depth += tau;
        trans_after.push((-depth).exp());
    }
    let t_final = trans_after[n - 1];
    let tail_const = t_final
        * (ct.final_transmittance
            + ct.rgb[0] * background[0]
            + ct.rgb[1] * background[1]
            + ct.rgb[2] * background[2]);

    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let s = &samples[k];
        let v = value(s);
        let d_tau = trans_after[k] * v - suffix - tail_const;
        out[k] = ShadedCotangent {
            density: d_tau * s.delta,
            color: ct.rgb.map(|g| g * weights[k]),
        };
        suffix += weights[k] * v;
    }
    out
}
