//! NeRF-shaped MLP with a hand-written backward pass.
//!
//! Layout: `[x, enc(x)]` feeds a ReLU trunk of `depth` layers of `width`.
//! The last trunk activation feeds a linear density head and a linear
//! feature layer; `[feature, d, enc(d)]` feeds one ReLU color layer of
//! `color_width` and a linear 3-channel color output.
//!
//! Parameters are stored as `f32` (the checkpoint precision); all math runs
//! in `f64` against a cached widened copy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FieldError, FieldInput, FieldSample, RadianceField};
use crate::math::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub depth: usize,
    pub width: usize,
    pub color_width: usize,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
}

impl Default for MlpArch {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            color_width: 32,
            pos_freqs: 10,
            dir_freqs: 4,
        }
    }
}

impl MlpArch {
    pub fn pos_dim(&self) -> usize {
        3 + 6 * self.pos_freqs
    }

    pub fn dir_dim(&self) -> usize {
        3 + 6 * self.dir_freqs
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.depth == 0 || self.width == 0 || self.color_width == 0 {
            return Err(FieldError::InvalidArch(format!(
                "depth, width and color_width must be positive: {self:?}"
            )));
        }
        if self.pos_freqs > 24 || self.dir_freqs > 24 {
            return Err(FieldError::InvalidArch("frequency counts above 24 are not supported".into()));
        }
        Ok(())
    }

    fn cache_stride(&self) -> usize {
        self.pos_dim() + self.depth * self.width + self.width + self.dir_dim() + self.color_width
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Trunk,
    DensityHead,
    ColorHead,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    inp: usize,
    out: usize,
    offset: usize,
    group: ParamGroup,
}

impl Dense {
    fn len(&self) -> usize {
        self.out * self.inp + self.out
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.out * self.inp
    }

    fn forward(&self, w: &[f64], x: &[f64], y: &mut [f64]) {
        let weights = &w[self.offset..self.offset + self.out * self.inp];
        let bias = &w[self.bias_offset()..self.bias_offset() + self.out];
        for (j, yj) in y.iter_mut().enumerate().take(self.out) {
            let row = &weights[j * self.inp..(j + 1) * self.inp];
            *yj = bias[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients; writes (or adds to) `dx` when given.
    fn backward(&self, w: &[f64], grad: &mut [f64], x: &[f64], dy: &[f64], dx: Option<(&mut [f64], bool)>) {
        let bo = self.bias_offset();
        for (j, &g) in dy.iter().enumerate().take(self.out) {
            if g == 0.0 {
                continue;
            }
            grad[bo + j] += g;
            let row = &mut grad[self.offset + j * self.inp..self.offset + (j + 1) * self.inp];
            for (r, xi) in row.iter_mut().zip(x) {
                *r += g * xi;
            }
        }
        if let Some((dx, accumulate)) = dx {
            if !accumulate {
                dx[..self.inp].fill(0.0);
            }
            for (j, &g) in dy.iter().enumerate().take(self.out) {
                if g == 0.0 {
                    continue;
                }
                let row = &w[self.offset + j * self.inp..self.offset + (j + 1) * self.inp];
                for (d, wi) in dx.iter_mut().zip(row) {
                    *d += g * wi;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    trunk: Vec<Dense>,
    density: Dense,
    feature: Dense,
    color_hidden: Dense,
    color_out: Dense,
    total: usize,
}

impl Layout {
    fn new(arch: &MlpArch) -> Self {
        let mut offset = 0;
        let mut next = |inp: usize, out: usize, group: ParamGroup| {
            let d = Dense {
                inp,
                out,
                offset,
                group,
            };
            offset += d.len();
            d
        };
        let trunk = (0..arch.depth)
            .map(|l| {
                let inp = if l == 0 { arch.pos_dim() } else { arch.width };
                next(inp, arch.width, ParamGroup::Trunk)
            })
            .collect();
        let density = next(arch.width, 1, ParamGroup::DensityHead);
        let feature = next(arch.width, arch.width, ParamGroup::ColorHead);
        let color_hidden = next(arch.width + arch.dir_dim(), arch.color_width, ParamGroup::ColorHead);
        let color_out = next(arch.color_width, 3, ParamGroup::ColorHead);
        Self {
            trunk,
            density,
            feature,
            color_hidden,
            color_out,
            total: offset,
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk
            .iter()
            .chain([&self.density, &self.feature, &self.color_hidden, &self.color_out])
    }
}

/// Upstream gradient on one raw field output.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldCotangent {
    pub raw_density: f64,
    pub raw_color: [f64; 3],
}

/// Activations saved by [`MlpField::forward_cached`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    stride: usize,
    buf: Vec<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.buf.len().checked_div(self.stride).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-parameter trainable flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMask {
    trainable: Vec<bool>,
}

impl ParamMask {
    pub fn all_trainable(count: usize) -> Self {
        Self {
            trainable: vec![true; count],
        }
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.iter().filter(|t| **t).count()
    }

    /// Zeroes gradient entries of frozen parameters.
    pub fn apply(&self, grad: &mut [f64]) {
        for (g, t) in grad.iter_mut().zip(&self.trainable) {
            if !t {
                *g = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpField {
    arch: MlpArch,
    layout: Layout,
    params: Vec<f32>,
    wide: Vec<f64>,
}

impl MlpField {
    /// Seeded init: every weight and bias uniform in `±1/sqrt(fan_in)`.
    pub fn new(arch: MlpArch, seed: u64) -> Result<Self, FieldError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0f32; layout.total];
        for layer in layout.layers() {
            let bound = 1.0 / (layer.inp as f64).sqrt();
            for p in &mut params[layer.offset..layer.offset + layer.len()] {
                *p = (bound * (2.0 * rng.random::<f64>() - 1.0)) as f32;
            }
        }
        Ok(Self::assemble(arch, layout, params))
    }

    pub fn from_params(arch: MlpArch, params: Vec<f32>) -> Result<Self, FieldError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return Err(FieldError::ParamCount {
                expected: layout.total,
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FieldError::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self::assemble(arch, layout, params))
    }

    fn assemble(arch: MlpArch, layout: Layout, params: Vec<f32>) -> Self {
        let wide = params.iter().map(|&p| p as f64).collect();
        Self {
            arch,
            layout,
            params,
            wide,
        }
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Mutates parameters in place and refreshes the widened copy.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.params);
        for (w, p) in self.wide.iter_mut().zip(&self.params) {
            *w = *p as f64;
        }
    }

    pub fn param_group(&self, index: usize) -> ParamGroup {
        self.layout
            .layers()
            .find(|l| index >= l.offset && index < l.offset + l.len())
            .map(|l| l.group)
            .expect("parameter index out of range")
    }

    /// Texture-editing mask: trunk and density head frozen, color head trainable.
    pub fn freeze_density_layers(&self) -> ParamMask {
        let mut trainable = vec![false; self.layout.total];
        for layer in self.layout.layers() {
            if layer.group == ParamGroup::ColorHead {
                trainable[layer.offset..layer.offset + layer.len()].fill(true);
            }
        }
        ParamMask { trainable }
    }

    /// SHA-256 of the little-endian parameter bytes, truncated to 64 bits.
    pub fn checksum(&self) -> u64 {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.to_le_bytes());
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
    }

    fn forward_into(&self, input: &FieldInput, buf: &mut [f64]) -> FieldSample {
        let a = &self.arch;
        let w = &self.wide;
        let (enc, rest) = buf.split_at_mut(a.pos_dim());
        write_encoding(input.position, a.pos_freqs, enc);
        let (trunk, rest) = rest.split_at_mut(a.depth * a.width);
        let (color_in, hidden) = rest.split_at_mut(a.width + a.dir_dim());

        for (l, layer) in self.layout.trunk.iter().enumerate() {
            let (prev, cur) = trunk.split_at_mut(l * a.width);
            let x: &[f64] = if l == 0 { enc } else { &prev[(l - 1) * a.width..] };
            let y = &mut cur[..a.width];
            layer.forward(w, x, y);
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let last = &trunk[(a.depth - 1) * a.width..];

        let mut sigma = [0.0];
        self.layout.density.forward(w, last, &mut sigma);
        self.layout.feature.forward(w, last, &mut color_in[..a.width]);
        write_encoding(input.direction, a.dir_freqs, &mut color_in[a.width..]);
        self.layout.color_hidden.forward(w, color_in, hidden);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut color = [0.0; 3];
        self.layout.color_out.forward(w, hidden, &mut color);
        FieldSample {
            raw_density: sigma[0],
            raw_color: color,
        }
    }

    pub fn forward_cached(&self, inputs: &[FieldInput]) -> (Vec<FieldSample>, ForwardCache) {
        let stride = self.arch.cache_stride();
        let mut buf = vec![0.0; stride * inputs.len()];
        let out = inputs
            .iter()
            .zip(buf.chunks_exact_mut(stride))
            .map(|(i, b)| self.forward_into(i, b))
            .collect();
        (out, ForwardCache { stride, buf })
    }

    /// Accumulates `d(sum_i <cotangent_i, output_i>)/d(params)` into `grad`.
    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        cotangents: &[FieldCotangent],
        grad: &mut [f64],
    ) -> Result<(), FieldError> {
        if cache.len() != cotangents.len() {
            return Err(FieldError::BatchMismatch {
                inputs: cache.len(),
                cotangents: cotangents.len(),
            });
        }
        if grad.len() != self.param_count() {
            return Err(FieldError::ParamCount {
                expected: self.param_count(),
                actual: grad.len(),
            });
        }
        let a = &self.arch;
        let w = &self.wide;
        let mut d_hidden = vec![0.0; a.color_width];
        let mut d_color_in = vec![0.0; a.width + a.dir_dim()];
        let mut d_act = vec![0.0; a.width];
        let mut d_prev = vec![0.0; a.width];

        for (buf, ct) in cache.buf.chunks_exact(cache.stride).zip(cotangents) {
            if ct.raw_density == 0.0 && ct.raw_color == [0.0; 3] {
                continue;
            }
            let (enc, rest) = buf.split_at(a.pos_dim());
            let (trunk, rest) = rest.split_at(a.depth * a.width);
            let (color_in, hidden) = rest.split_at(a.width + a.dir_dim());
            let last = &trunk[(a.depth - 1) * a.width..];

            self.layout
                .color_out
                .backward(w, grad, hidden, &ct.raw_color, Some((&mut d_hidden, false)));
            for (d, h) in d_hidden.iter_mut().zip(hidden) {
                if *h <= 0.0 {
                    *d = 0.0;
                }
            }
            self.layout
                .color_hidden
                .backward(w, grad, color_in, &d_hidden, Some((&mut d_color_in, false)));
            self.layout
                .feature
                .backward(w, grad, last, &d_color_in[..a.width], Some((&mut d_act, false)));
            self.layout
                .density
                .backward(w, grad, last, &[ct.raw_density], Some((&mut d_act, true)));

            for l in (0..a.depth).rev() {
                let act = &trunk[l * a.width..(l + 1) * a.width];
                for (d, v) in d_act.iter_mut().zip(act) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                let layer = &self.layout.trunk[l];
                if l == 0 {
                    layer.backward(w, grad, enc, &d_act, None);
                } else {
                    let x = &trunk[(l - 1) * a.width..l * a.width];
                    layer.backward(w, grad, x, &d_act, Some((&mut d_prev, false)));
                    std::mem::swap(&mut d_act, &mut d_prev);
                }
            }
        }
        Ok(())
    }

    /// Forward pass plus gradient accumulation for a batch.
    pub fn eval_with_gradient(
        &self,
        inputs: &[FieldInput],
        cotangents: &[FieldCotangent],
        grad: &mut [f64],
    ) -> Result<Vec<FieldSample>, FieldError> {
        if inputs.len() != cotangents.len() {
            return Err(FieldError::BatchMismatch {
                inputs: inputs.len(),
                cotangents: cotangents.len(),
            });
        }
        let (out, cache) = self.forward_cached(inputs);
        self.backward_cached(&cache, cotangents, grad)?;
        Ok(out)
    }
}

fn write_encoding(v: Vec3, freqs: usize, out: &mut [f64]) {
    out[..3].copy_from_slice(&v.to_array());
    // Same ordering as `encode_into`, written in place.
    let mut k = 3;
    for x in v.to_array() {
        let mut scale = 1.0;
        for _ in 0..freqs {
            let (s, c) = (scale * x).sin_cos();
            out[k] = c;
            out[k + 1] = s;
            k += 2;
            scale *= 2.0;
        }
    }
}

impl RadianceField for MlpField {
    fn eval(&self, position: Vec3, direction: Vec3) -> FieldSample {
        let mut buf = vec![0.0; self.arch.cache_stride()];
        self.forward_into(&FieldInput { position, direction }, &mut buf)
    }

    fn eval_batch(&self, inputs: &[FieldInput], out: &mut Vec<FieldSample>) {
        let mut buf = vec![0.0; self.arch.cache_stride()];
        out.clear();
        out.extend(inputs.iter().map(|i| self.forward_into(i, &mut buf)));
    }
}

impl PartialEq for MlpField {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MlpArch {
        MlpArch {
            depth: 3,
            width: 16,
            color_width: 8,
            pos_freqs: 3,
            dir_freqs: 2,
        }
    }

    fn probes(n: usize, seed: u64) -> Vec<FieldInput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let p = Vec3::new(rng.random(), rng.random(), rng.random()) * 2.0 - Vec3::splat(1.0);
                let d = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
                    .try_normalize()
                    .unwrap();
                FieldInput {
                    position: p,
                    direction: d,
                }
            })
            .collect()
    }

    #[test]
    fn param_count_matches_layout() {
        let a = small();
        let f = MlpField::new(a, 1).unwrap();
        let expected = (a.pos_dim() * 16 + 16)
            + 2 * (16 * 16 + 16)
            + (16 + 1)
            + (16 * 16 + 16)
            + ((16 + a.dir_dim()) * 8 + 8)
            + (8 * 3 + 3);
        assert_eq!(f.param_count(), expected);
    }

    #[test]
    fn deterministic_init_and_eval() {
        let a = MlpField::new(small(), 123).unwrap();
        let b = MlpField::new(small(), 123).unwrap();
        assert_eq!(a, b);
        let c = MlpField::new(small(), 124).unwrap();
        assert_ne!(a, c);
        let p = probes(1, 0)[0];
        assert_eq!(a.eval(p.position, p.direction), a.eval(p.position, p.direction));
    }

    #[test]
    fn batch_matches_single() {
        let f = MlpField::new(small(), 5).unwrap();
        let ps = probes(10, 2);
        let mut out = Vec::new();
        f.eval_batch(&ps, &mut out);
        let (cached, cache) = f.forward_cached(&ps);
        assert_eq!(cache.len(), 10);
        for (i, p) in ps.iter().enumerate() {
            let s = f.eval(p.position, p.direction);
            assert_eq!(out[i], s);
            assert_eq!(cached[i], s);
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let f = MlpField::new(small(), 5).unwrap();
        let ps = probes(4, 3);
        let mut g = vec![0.0; f.param_count()];
        f.eval_with_gradient(&ps, &[FieldCotangent::default(); 4], &mut g).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_gradient_is_sum_of_sample_gradients() {
        let f = MlpField::new(small(), 8).unwrap();
        let ps = probes(5, 4);
        let cts: Vec<_> = (0..5)
            .map(|i| FieldCotangent {
                raw_density: 0.3 * i as f64 - 0.5,
                raw_color: [0.1, -0.2 * i as f64, 0.7],
            })
            .collect();
        let mut whole = vec![0.0; f.param_count()];
        f.eval_with_gradient(&ps, &cts, &mut whole).unwrap();
        let mut parts = vec![0.0; f.param_count()];
        for (p, c) in ps.iter().zip(&cts) {
            f.eval_with_gradient(std::slice::from_ref(p), std::slice::from_ref(c), &mut parts)
                .unwrap();
        }
        for (a, b) in whole.iter().zip(&parts) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn mismatched_batch_rejected() {
        let f = MlpField::new(small(), 8).unwrap();
        let mut g = vec![0.0; f.param_count()];
        assert!(f
            .eval_with_gradient(&probes(2, 0), &[FieldCotangent::default()], &mut g)
            .is_err());
    }

    #[test]
    fn freeze_mask_partitions_parameters() {
        let f = MlpField::new(small(), 8).unwrap();
        let mask = f.freeze_density_layers();
        assert_eq!(mask.len(), f.param_count());
        for i in 0..f.param_count() {
            let group = f.param_group(i);
            assert_eq!(mask.is_trainable(i), group == ParamGroup::ColorHead, "param {i}");
        }
        let frozen = mask.len() - mask.trainable_count();
        assert!(frozen > 0 && mask.trainable_count() > 0);
    }

    #[test]
    fn clone_is_independent() {
        let src = MlpField::new(small(), 11).unwrap();
        let before = src.checksum();
        let mut clone = src.clone();
        assert_eq!(clone.clone(), clone);
        for p in probes(100, 9) {
            assert_eq!(src.eval(p.position, p.direction), clone.eval(p.position, p.direction));
        }
        clone.update_params(|ps| ps.iter_mut().for_each(|p| *p += 0.01));
        assert_eq!(src.checksum(), before);
        assert_ne!(clone.checksum(), before);
    }

    #[test]
    fn arch_validation() {
        assert!(MlpField::new(
            MlpArch {
                depth: 0,
                ..small()
            },
            0
        )
        .is_err());
        assert!(MlpField::from_params(small(), vec![0.0; 3]).is_err());
    }
}
