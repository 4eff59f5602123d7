//! Bilinear ×2 upsampling (half-pixel centres) and nearest-neighbour resize.

use crate::error::{shape_err, Result};
use crate::tensor::RealTensor;

/// Source taps for one output coordinate: `(lo, hi, weight_of_hi)`.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn split_chw(t: &RealTensor, what: &str) -> Result<(usize, usize, usize)> {
    if t.rank() < 2 {
        return Err(shape_err(format!("{what}: need at least 2 axes, got {:?}", t.shape())));
    }
    let r = t.rank();
    let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
    Ok((t.len() / (h * w), h, w))
}

/// Bilinear interpolation of the last two axes by a factor of 2.
pub fn upsample2x(t: &RealTensor) -> Result<RealTensor> {
    let (planes, h, w) = split_chw(t, "upsample2x")?;
    let (th, tw) = (taps(h, 2 * h), taps(w, 2 * w));
    let (ho, wo) = (2 * h, 2 * w);
    let src = t.data();
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let s = &src[p * h * w..][..h * w];
        let d = &mut out[p * ho * wo..][..ho * wo];
        for (oi, &(r0, r1, a)) in th.iter().enumerate() {
            for (oj, &(c0, c1, b)) in tw.iter().enumerate() {
                d[oi * wo + oj] = (1.0 - a) * ((1.0 - b) * s[r0 * w + c0] + b * s[r0 * w + c1])
                    + a * ((1.0 - b) * s[r1 * w + c0] + b * s[r1 * w + c1]);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Ok(RealTensor::from_parts(shape, out))
}

/// Adjoint of `upsample2x`; `grad_out` has the doubled extent.
pub fn upsample2x_backward(grad_out: &RealTensor) -> Result<RealTensor> {
    let (planes, ho, wo) = split_chw(grad_out, "upsample2x backward")?;
    if ho % 2 != 0 || wo % 2 != 0 {
        return Err(shape_err(format!(
            "upsample2x backward: odd extent {ho}x{wo}"
        )));
    }
    let (h, w) = (ho / 2, wo / 2);
    let (th, tw) = (taps(h, ho), taps(w, wo));
    let g = grad_out.data();
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gs = &g[p * ho * wo..][..ho * wo];
        let d = &mut out[p * h * w..][..h * w];
        for (oi, &(r0, r1, a)) in th.iter().enumerate() {
            for (oj, &(c0, c1, b)) in tw.iter().enumerate() {
                let v = gs[oi * wo + oj];
                d[r0 * w + c0] += (1.0 - a) * (1.0 - b) * v;
                d[r0 * w + c1] += (1.0 - a) * b * v;
                d[r1 * w + c0] += a * (1.0 - b) * v;
                d[r1 * w + c1] += a * b * v;
            }
        }
    }
    let mut shape = grad_out.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Ok(RealTensor::from_parts(shape, out))
}

/// Keeps the leading `h × w` window of the last two axes.
pub fn crop_hw(t: &RealTensor, h: usize, w: usize) -> Result<RealTensor> {
    let (planes, sh, sw) = split_chw(t, "crop")?;
    if h > sh || w > sw {
        return Err(shape_err(format!("cannot crop {sh}x{sw} to {h}x{w}")));
    }
    if (h, w) == (sh, sw) {
        return Ok(t.clone());
    }
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for i in 0..h {
            out.extend_from_slice(&t.data()[p * sh * sw + i * sw..][..w]);
        }
    }
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Ok(RealTensor::from_parts(shape, out))
}

/// Adjoint of `crop_hw`: zero-pads back to `sh × sw`.
pub fn uncrop_hw(g: &RealTensor, sh: usize, sw: usize) -> Result<RealTensor> {
    let (planes, h, w) = split_chw(g, "uncrop")?;
    let mut out = vec![0.0; planes * sh * sw];
    for p in 0..planes {
        for i in 0..h {
            out[p * sh * sw + i * sw..][..w].copy_from_slice(&g.data()[p * h * w + i * w..][..w]);
        }
    }
    let mut shape = g.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = sh;
    shape[r - 1] = sw;
    Ok(RealTensor::from_parts(shape, out))
}

/// Repeated ×2 bilinear upsampling until the extent covers `h × w`, then a
/// trailing crop.
pub fn upsample_to(t: &RealTensor, h: usize, w: usize) -> Result<RealTensor> {
    let (_, mut ch, mut cw) = split_chw(t, "upsample_to")?;
    if ch > h || cw > w {
        return Err(shape_err(format!("upsample_to: {ch}x{cw} exceeds target {h}x{w}")));
    }
    let mut cur = t.clone();
    while ch < h || cw < w {
        cur = upsample2x(&cur)?;
        ch *= 2;
        cw *= 2;
    }
    crop_hw(&cur, h, w)
}

/// Nearest-neighbour resize of an `[H,W]` map (half-pixel centres).
pub fn resize_nearest(t: &RealTensor, h: usize, w: usize) -> Result<RealTensor> {
    t.expect_rank(2, "resize_nearest input")?;
    let (sh, sw) = (t.shape()[0], t.shape()[1]);
    let pick = |o: usize, n_in: usize, n_out: usize| {
        (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    Ok(RealTensor::from_fn(&[h, w], |flat| {
        let (i, j) = (flat / w, flat % w);
        t.data()[pick(i, sh, h) * sw + pick(j, sw, w)]
    }))
}
