//! Bilinear resampling with half-pixel centers and clamped edges, plus its
//! adjoint.

use crate::raster::{Image, Resolution};

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            Tap {
                i0,
                i1: (i0 + 1).min(src - 1),
                frac: s - i0 as f64,
            }
        })
        .collect()
}

/// Resizes `img` to `res`. Same-size resampling is the identity.
pub fn resample_bilinear(img: &Image, res: Resolution) -> Image {
    if img.resolution() == res {
        return img.clone();
    }
    let tx = taps(img.width, res.width);
    let ty = taps(img.height, res.height);
    Image::from_fn(res, |col, row| {
        let (x, y) = (tx[col], ty[row]);
        let p = |c, r| img.get(c, r);
        let (a, b, c, d) = (p(x.i0, y.i0), p(x.i1, y.i0), p(x.i0, y.i1), p(x.i1, y.i1));
        std::array::from_fn(|k| {
            let top = a[k] + (b[k] - a[k]) * x.frac;
            let bottom = c[k] + (d[k] - c[k]) * x.frac;
            top + (bottom - top) * y.frac
        })
    })
}

/// Transposes [`resample_bilinear`]: maps a gradient on the resized image
/// back to an image of resolution `src`.
pub fn resample_bilinear_adjoint(grad: &Image, src: Resolution) -> Image {
    if grad.resolution() == src {
        return grad.clone();
    }
    let tx = taps(src.width, grad.width);
    let ty = taps(src.height, grad.height);
    let mut out = Image::filled(src, [0.0; 3]);
    for row in 0..grad.height {
        for col in 0..grad.width {
            let (x, y) = (tx[col], ty[row]);
            let g = grad.get(col, row);
            let corners = [
                (x.i0, y.i0, (1.0 - x.frac) * (1.0 - y.frac)),
                (x.i1, y.i0, x.frac * (1.0 - y.frac)),
                (x.i0, y.i1, (1.0 - x.frac) * y.frac),
                (x.i1, y.i1, x.frac * y.frac),
            ];
            for (c, r, w) in corners {
                let px = &mut out.pixels[r * src.width + c];
                for k in 0..3 {
                    px[k] += w * g[k];
                }
            }
        }
    }
    out
}
