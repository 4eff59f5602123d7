//! Direct 2D convolution (cross-correlation, no kernel flip) with its two
//! adjoints, plus the naive 4D convolution used as a reference.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::tensor::RealTensor;

/// Stride and zero padding of a 2D convolution, `(rows, cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub const fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { stride, padding }
    }

    /// Stride 1 with padding `k/2`, which keeps the extent for odd `k`.
    pub const fn same(k: usize) -> Self {
        Self::new((1, 1), (k / 2, k / 2))
    }

    pub fn output_extent(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if sh == 0 || sw == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(shape_err(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::new((1, 1), (0, 0))
    }
}

/// Kernel `[out_ch, in_ch, kH, kW]`, bias `[out_ch]`, and geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    pub kernel: RealTensor,
    pub bias: RealTensor,
    pub geometry: ConvGeometry,
}

impl Conv2dParams {
    pub fn new(kernel: RealTensor, bias: RealTensor, geometry: ConvGeometry) -> Result<Self> {
        kernel.expect_rank(4, "conv2d kernel")?;
        let s = kernel.shape();
        if s[2].is_multiple_of(2) || s[3].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv2d kernel extents must be odd, got {}x{}",
                s[2], s[3]
            )));
        }
        bias.expect_shape(&[s[0]], "conv2d bias")?;
        if geometry.stride.0 == 0 || geometry.stride.1 == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        Ok(Self {
            kernel,
            bias,
            geometry,
        })
    }

    /// Same-padded `k×k` layer with weights and bias drawn from
    /// `U(±1/sqrt(in·k·k))`.
    pub fn init<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, k: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        Self::new(
            RealTensor::rand_uniform(&[out_ch, in_ch, k, k], -bound, bound, rng),
            RealTensor::rand_uniform(&[out_ch], -bound, bound, rng),
            ConvGeometry::same(k),
        )
    }

    pub fn weight_count(&self) -> usize {
        self.kernel.len()
    }
}

/// `[C,H,W]` input convolved with `params`, giving `[out_ch,H',W']`.
pub fn conv2d(input: &RealTensor, params: &Conv2dParams) -> Result<RealTensor> {
    input.expect_rank(3, "conv2d input")?;
    let s = input.shape();
    let batched = input.reshape(&[1, s[0], s[1], s[2]])?;
    let out = conv2d_batched(&batched, &params.kernel, Some(&params.bias), params.geometry)?;
    let o = out.shape().to_vec();
    out.into_reshaped(&o[1..])
}

struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn check_dims(input: &RealTensor, kernel: &RealTensor, geo: ConvGeometry) -> Result<Dims> {
    input.expect_rank(4, "conv2d batched input")?;
    kernel.expect_rank(4, "conv2d kernel")?;
    let [b, c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let [o, kc, kh, kw] = [kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]];
    if kc != c {
        return Err(shape_err(format!(
            "conv2d channel mismatch: input {:?} vs kernel {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    let (ho, wo) = geo.output_extent(h, w, kh, kw)?;
    Ok(Dims { b, c, h, w, o, kh, kw, ho, wo })
}

/// Range of output indices `o` for which `o*s + k - p` lands in `[0, n)`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    // o*s + k >= p  and  o*s + k - p < n_in
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if n_in + p > k {
        ((n_in + p - k - 1) / s + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Batched convolution: `[B,C,H,W]` with kernel `[O,C,kH,kW]` → `[B,O,H',W']`.
/// Each `(b, o)` output plane is accumulated in a fixed order, so results do
/// not depend on the thread count.
pub fn conv2d_batched(
    input: &RealTensor,
    kernel: &RealTensor,
    bias: Option<&RealTensor>,
    geo: ConvGeometry,
) -> Result<RealTensor> {
    let d = check_dims(input, kernel, geo)?;
    if let Some(b) = bias {
        b.expect_shape(&[d.o], "conv2d bias")?;
    }
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let x = input.data();
    let k = kernel.data();
    let plane = d.ho * d.wo;
    let mut out = vec![0.0; d.b * d.o * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(bo, dst)| {
        let (bi, oc) = (bo / d.o, bo % d.o);
        if let Some(b) = bias {
            dst.fill(b.data()[oc]);
        }
        for c in 0..d.c {
            let src = &x[(bi * d.c + c) * d.h * d.w..][..d.h * d.w];
            for ki in 0..d.kh {
                let (r0, r1) = valid_range(d.ho, d.h, sh, ki, ph);
                for kj in 0..d.kw {
                    let wv = k[((oc * d.c + c) * d.kh + ki) * d.kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (c0, c1) = valid_range(d.wo, d.w, sw, kj, pw);
                    for oi in r0..r1 {
                        let row = &src[(oi * sh + ki - ph) * d.w..][..d.w];
                        let drow = &mut dst[oi * d.wo..][..d.wo];
                        for oj in c0..c1 {
                            drow[oj] += wv * row[oj * sw + kj - pw];
                        }
                    }
                }
            }
        }
    });
    Ok(RealTensor::from_parts(vec![d.b, d.o, d.ho, d.wo], out))
}

/// Adjoint of `conv2d_batched` with respect to its input.
pub fn conv2d_backward_input(
    grad_out: &RealTensor,
    kernel: &RealTensor,
    input_shape: &[usize],
    geo: ConvGeometry,
) -> Result<RealTensor> {
    let probe = RealTensor::zeros(input_shape);
    let d = check_dims(&probe, kernel, geo)?;
    grad_out.expect_shape(&[d.b, d.o, d.ho, d.wo], "conv2d grad_out")?;
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let g = grad_out.data();
    let k = kernel.data();
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.b * d.c * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(bc, dst)| {
        let (bi, c) = (bc / d.c, bc % d.c);
        for oc in 0..d.o {
            let gsrc = &g[(bi * d.o + oc) * d.ho * d.wo..][..d.ho * d.wo];
            for ki in 0..d.kh {
                let (r0, r1) = valid_range(d.ho, d.h, sh, ki, ph);
                for kj in 0..d.kw {
                    let wv = k[((oc * d.c + c) * d.kh + ki) * d.kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (c0, c1) = valid_range(d.wo, d.w, sw, kj, pw);
                    for oi in r0..r1 {
                        let grow = &gsrc[oi * d.wo..][..d.wo];
                        let drow = &mut dst[(oi * sh + ki - ph) * d.w..][..d.w];
                        for oj in c0..c1 {
                            drow[oj * sw + kj - pw] += wv * grow[oj];
                        }
                    }
                }
            }
        }
    });
    Ok(RealTensor::from_parts(input_shape.to_vec(), out))
}

/// Adjoint of `conv2d_batched` with respect to its kernel.
pub fn conv2d_backward_kernel(
    grad_out: &RealTensor,
    input: &RealTensor,
    kernel_shape: &[usize],
    geo: ConvGeometry,
) -> Result<RealTensor> {
    let probe = RealTensor::zeros(kernel_shape);
    let d = check_dims(input, &probe, geo)?;
    grad_out.expect_shape(&[d.b, d.o, d.ho, d.wo], "conv2d grad_out")?;
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let g = grad_out.data();
    let x = input.data();
    let per_out = d.c * d.kh * d.kw;
    let mut out = vec![0.0; d.o * per_out];
    out.par_chunks_mut(per_out).enumerate().for_each(|(oc, dst)| {
        for bi in 0..d.b {
            let gsrc = &g[(bi * d.o + oc) * d.ho * d.wo..][..d.ho * d.wo];
            for c in 0..d.c {
                let src = &x[(bi * d.c + c) * d.h * d.w..][..d.h * d.w];
                for ki in 0..d.kh {
                    let (r0, r1) = valid_range(d.ho, d.h, sh, ki, ph);
                    for kj in 0..d.kw {
                        let (c0, c1) = valid_range(d.wo, d.w, sw, kj, pw);
                        let mut acc = 0.0;
                        for oi in r0..r1 {
                            let row = &src[(oi * sh + ki - ph) * d.w..][..d.w];
                            let grow = &gsrc[oi * d.wo..][..d.wo];
                            for oj in c0..c1 {
                                acc += grow[oj] * row[oj * sw + kj - pw];
                            }
                        }
                        dst[(c * d.kh + ki) * d.kw + kj] += acc;
                    }
                }
            }
        }
    });
    Ok(RealTensor::from_parts(kernel_shape.to_vec(), out))
}

/// Bias gradient of a batched convolution: sum over batch and space.
pub fn conv2d_backward_bias(grad_out: &RealTensor) -> Result<RealTensor> {
    grad_out.expect_rank(4, "conv2d grad_out")?;
    let s = grad_out.shape();
    let (b, o, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; o];
    for bi in 0..b {
        for (oc, acc) in out.iter_mut().enumerate() {
            *acc += grad_out.data()[(bi * o + oc) * plane..][..plane].iter().sum::<f64>();
        }
    }
    Ok(RealTensor::from_parts(vec![o], out))
}

/// Naive 4D convolution over `[C,Hq,Wq,Hs,Ws]` with kernel
/// `[O,C,kq,kq,ks,ks]`; query geometry applies to axes 1-2 and support
/// geometry to axes 3-4. Reference implementation only.
pub fn conv4d(
    input: &RealTensor,
    kernel: &RealTensor,
    query: ConvGeometry,
    support: ConvGeometry,
) -> Result<RealTensor> {
    input.expect_rank(5, "conv4d input")?;
    kernel.expect_rank(6, "conv4d kernel")?;
    let i = input.shape();
    let k = kernel.shape();
    if k[1] != i[0] {
        return Err(shape_err(format!(
            "conv4d channel mismatch: input {:?} vs kernel {:?}",
            i, k
        )));
    }
    if k[2..].iter().any(|e| e % 2 == 0) {
        return Err(Error::Config(format!("conv4d kernel extents must be odd: {k:?}")));
    }
    let (hq, wq) = query.output_extent(i[1], i[2], k[2], k[3])?;
    let (hs, ws) = support.output_extent(i[3], i[4], k[4], k[5])?;
    let mut out = RealTensor::zeros(&[k[0], hq, wq, hs, ws]);
    let at = |n: usize, s: usize, kk: usize, p: usize, o: usize| -> Option<usize> {
        let v = (o * s + kk) as isize - p as isize;
        (v >= 0 && (v as usize) < n).then_some(v as usize)
    };
    for o in 0..k[0] {
        for a in 0..hq {
            for b in 0..wq {
                for c in 0..hs {
                    for d in 0..ws {
                        let mut acc = 0.0;
                        for ch in 0..i[0] {
                            for ka in 0..k[2] {
                                let Some(u0) = at(i[1], query.stride.0, ka, query.padding.0, a) else { continue };
                                for kb in 0..k[3] {
                                    let Some(u1) = at(i[2], query.stride.1, kb, query.padding.1, b) else { continue };
                                    for kc in 0..k[4] {
                                        let Some(x0) = at(i[3], support.stride.0, kc, support.padding.0, c) else { continue };
                                        for kd in 0..k[5] {
                                            let Some(x1) = at(i[4], support.stride.1, kd, support.padding.1, d) else { continue };
                                            acc += kernel.get(&[o, ch, ka, kb, kc, kd])
                                                * input.get(&[ch, u0, u1, x0, x1]);
                                        }
                                    }
                                }
                            }
                        }
                        out.set(&[o, a, b, c, d], acc);
                    }
                }
            }
        }
    }
    Ok(out)
}
