//! Episodic readout: soft attention from quaternion components to a real
//! feature map, then a skip-connected convolutional decoder with a
//! two-channel softmax head (channel 0 background, channel 1 foreground).

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::ops::{self, softmax_backward, Conv2dParams, ConvGeometry};
use crate::qclm::QuatTensor;
use crate::tensor::RealTensor;

/// Default width of each 1×1 skip projection.
pub const SKIP_WIDTH: usize = 48;

fn gap_weights(x: &RealTensor) -> Result<RealTensor> {
    let s = x.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let gap = RealTensor::from_fn(&[4, c], |i| x.data()[i * plane..][..plane].iter().sum::<f64>() / plane as f64);
    ops::softmax(&gap, 0)
}

/// Per-channel softmax over the four components' global average pools:
/// `[4, C]`, each column a probability vector.
pub fn component_weights(q: &QuatTensor) -> Result<RealTensor> {
    gap_weights(&q.stacked())
}

/// `F_r[c] = Σ_δ w[δ,c] · q_δ[c]` on a stacked `[4,C,H,W]` variable.
pub fn quat_to_real_on(tape: &mut Tape, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    let s = xv.shape().to_vec();
    if s.len() != 4 || s[0] != 4 {
        return Err(shape_err(format!("quat_to_real needs [4,C,H,W], got {s:?}")));
    }
    let (c, plane) = (s[1], s[2] * s[3]);
    let n = c * plane;
    let w = gap_weights(xv)?;
    let mut out = vec![0.0; n];
    for d in 0..4 {
        for ch in 0..c {
            let wv = w.data()[d * c + ch];
            let src = &xv.data()[d * n + ch * plane..][..plane];
            for (o, v) in out[ch * plane..][..plane].iter_mut().zip(src) {
                *o += wv * v;
            }
        }
    }
    Ok(tape.record(
        RealTensor::from_parts(vec![c, s[2], s[3]], out),
        &[x],
        Box::new(move |ctx| {
            let x = ctx.inputs[0].data();
            let g = ctx.grad.data();
            let w = gap_weights(ctx.inputs[0])?;
            let dw = RealTensor::from_fn(&[4, c], |i| {
                let ch = i % c;
                g[ch * plane..][..plane]
                    .iter()
                    .zip(&x[i * plane..][..plane])
                    .map(|(a, b)| a * b)
                    .sum()
            });
            let da = softmax_backward(&w, &dw, 0);
            let mut dx = vec![0.0; x.len()];
            for (i, chunk) in dx.chunks_mut(plane).enumerate() {
                let ch = i % c;
                let (wv, dav) = (w.data()[i], da.data()[i] / plane as f64);
                for (d, gv) in chunk.iter_mut().zip(&g[ch * plane..][..plane]) {
                    *d = gv * wv + dav;
                }
            }
            Ok(vec![Some(RealTensor::from_parts(ctx.inputs[0].shape().to_vec(), dx))])
        }),
    ))
}

pub fn quat_to_real(q: &QuatTensor) -> Result<RealTensor> {
    let mut tape = Tape::new();
    let x = tape.constant(q.stacked());
    let y = quat_to_real_on(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

/// One skip projection and one 3×3 refine conv per stage, then a 1×1 head
/// with exactly two output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub skip_projections: Vec<Conv2dParams>,
    pub refine_convs: Vec<Conv2dParams>,
    pub head: Conv2dParams,
}

impl DecoderParams {
    pub fn new(skip_projections: Vec<Conv2dParams>, refine_convs: Vec<Conv2dParams>, head: Conv2dParams) -> Result<Self> {
        if skip_projections.len() != refine_convs.len() {
            return Err(shape_err(format!(
                "decoder has {} skip projections but {} refine convs",
                skip_projections.len(),
                refine_convs.len()
            )));
        }
        if head.kernel.shape()[0] != 2 {
            return Err(shape_err(format!(
                "decoder head must have 2 output channels, got {}",
                head.kernel.shape()[0]
            )));
        }
        Ok(Self {
            skip_projections,
            refine_convs,
            head,
        })
    }

    /// `in_ch` is the width of `F_r`; `skip_channels` lists the skip widths
    /// coarse to fine.
    pub fn init<R: Rng + ?Sized>(
        in_ch: usize,
        skip_channels: &[usize],
        skip_width: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut proj = Vec::new();
        let mut refine = Vec::new();
        let mut cur = in_ch;
        for &sc in skip_channels {
            proj.push(Conv2dParams::init(skip_width, sc, 1, rng)?);
            refine.push(Conv2dParams::init(width, cur + skip_width, 3, rng)?);
            cur = width;
        }
        let head = Conv2dParams::init(2, cur, 1, rng)?;
        Self::new(proj, refine, head)
    }

    pub fn weight_count(&self) -> usize {
        self.skip_projections
            .iter()
            .chain(&self.refine_convs)
            .chain(std::iter::once(&self.head))
            .map(|p| p.kernel.len() + p.bias.len())
            .sum()
    }
}

/// Kernel and bias handles of one real conv layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
}

impl ConvVars {
    pub fn constants(tape: &mut Tape, p: &Conv2dParams) -> Self {
        Self {
            kernel: tape.constant(p.kernel.clone()),
            bias: tape.constant(p.bias.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub skip_projections: Vec<ConvVars>,
    pub refine_convs: Vec<ConvVars>,
    pub head: ConvVars,
}

impl DecoderVars {
    pub fn constants(tape: &mut Tape, p: &DecoderParams) -> Self {
        Self {
            skip_projections: p.skip_projections.iter().map(|c| ConvVars::constants(tape, c)).collect(),
            refine_convs: p.refine_convs.iter().map(|c| ConvVars::constants(tape, c)).collect(),
            head: ConvVars::constants(tape, &p.head),
        }
    }
}

/// Same-padded conv of a `[C,H,W]` variable.
pub fn conv_chw_on(tape: &mut Tape, x: Var, v: ConvVars) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let k = tape.value(v.kernel).shape().to_vec();
    if s.len() != 3 {
        return Err(shape_err(format!("expected a [C,H,W] map, got {s:?}")));
    }
    let b = tape.reshape(x, &[1, s[0], s[1], s[2]])?;
    let y = tape.conv2d(b, v.kernel, Some(v.bias), ConvGeometry::new((1, 1), (k[2] / 2, k[3] / 2)))?;
    tape.reshape(y, &[k[0], s[1], s[2]])
}

/// Decoder up to the head: returns `[2,H,W]` logits. Each stage upsamples
/// ×2, concatenates the projected skip and refines with conv + ReLU.
pub fn decode_logits_on(tape: &mut Tape, fr: Var, skips: &[Var], v: &DecoderVars) -> Result<Var> {
    if skips.len() != v.refine_convs.len() {
        return Err(shape_err(format!(
            "decoder built for {} skips, got {}",
            v.refine_convs.len(),
            skips.len()
        )));
    }
    let mut cur = fr;
    for (stage, &skip) in skips.iter().enumerate() {
        cur = tape.upsample2x(cur)?;
        let (cs, ss) = (tape.value(cur).shape().to_vec(), tape.value(skip).shape().to_vec());
        if ss.len() != 3 || ss[1..] != cs[1..] {
            return Err(shape_err(format!(
                "decoder stage {stage}: skip {ss:?} does not match working extent {:?}",
                &cs[1..]
            )));
        }
        let proj = conv_chw_on(tape, skip, v.skip_projections[stage])?;
        let cat = tape.concat0(&[cur, proj])?;
        let refined = conv_chw_on(tape, cat, v.refine_convs[stage])?;
        cur = tape.relu(refined);
    }
    conv_chw_on(tape, cur, v.head)
}

/// Soft mask `[2,H,W]`; the two channels sum to 1 at every pixel.
pub fn decode(fr: &RealTensor, skips: &[RealTensor], params: &DecoderParams) -> Result<RealTensor> {
    fr.expect_rank(3, "decoder input")?;
    let mut tape = Tape::new();
    let f = tape.constant(fr.clone());
    let s: Vec<Var> = skips.iter().map(|t| tape.constant(t.clone())).collect();
    let v = DecoderVars::constants(&mut tape, params);
    let logits = decode_logits_on(&mut tape, f, &s, &v)?;
    ops::softmax(tape.value(logits), 0)
}

/// Foreground where channel 1 strictly exceeds channel 0; ties go to
/// background.
pub fn binarize(soft: &RealTensor) -> Result<RealTensor> {
    soft.expect_rank(3, "soft mask")?;
    if soft.shape()[0] != 2 {
        return Err(shape_err(format!("soft mask needs 2 channels, got {:?}", soft.shape())));
    }
    let plane = soft.len() / 2;
    let (bg, fg) = soft.data().split_at(plane);
    Ok(RealTensor::from_parts(
        soft.shape()[1..].to_vec(),
        bg.iter().zip(fg).map(|(b, f)| if f > b { 1.0 } else { 0.0 }).collect(),
    ))
}
