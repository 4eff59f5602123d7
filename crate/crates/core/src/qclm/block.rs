use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::ops::ConvGeometry;

use super::conv::{quat_conv2d_on, QuatConvParams, QuatKernel};
use super::norm::{quat_norm_on, NormKind, QuatNormParams};
use super::QuatTensor;

/// Convolution kernel and normalization flavour of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockVariant {
    pub kernel: QuatKernel,
    pub norm: NormKind,
}

impl Default for BlockVariant {
    fn default() -> Self {
        Self {
            kernel: QuatKernel::Hamilton,
            norm: NormKind::Quaternion,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QclBlockParams {
    pub conv: QuatConvParams,
    pub norm: QuatNormParams,
}

/// Tape handles for one block: stacked weight `[4,O,C,k,k]`, bias `[4,O]`,
/// norm γ `[G]` and β `[4,G]`.
#[derive(Debug, Clone, Copy)]
pub struct QclBlockVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl QclBlockVars {
    pub fn constants(tape: &mut Tape, p: &QclBlockParams) -> Self {
        Self {
            weight: tape.constant(p.conv.stacked_weight()),
            bias: tape.constant(p.conv.stacked_bias()),
            gamma: tape.constant(p.norm.gamma.clone()),
            beta: tape.constant(p.norm.beta.clone()),
        }
    }
}

/// `ReLU(QN(W ⊗ q + b))` on a stacked `[4,C,H,W]` variable; same padding.
pub fn qcl_block_on(tape: &mut Tape, variant: BlockVariant, x: Var, v: &QclBlockVars, eps: f64) -> Result<Var> {
    let k = tape.value(v.weight).shape()[3];
    let y = quat_conv2d_on(tape, variant.kernel, x, v.weight, Some(v.bias), ConvGeometry::same(k))?;
    let y = quat_norm_on(tape, variant.norm, y, v.gamma, v.beta, eps)?;
    Ok(tape.relu(y))
}

pub fn qcl_block(q: &QuatTensor, p: &QclBlockParams) -> Result<QuatTensor> {
    let mut tape = Tape::new();
    let x = tape.constant(q.stacked());
    let vars = QclBlockVars::constants(&mut tape, p);
    let y = qcl_block_on(&mut tape, BlockVariant::default(), x, &vars, p.norm.eps)?;
    QuatTensor::from_stacked(tape.value(y))
}

/// Bilinear ×2 upsample of the deep map, cropped to the fine extent when the
/// fine extent is odd.
pub fn upsample_onto_on(tape: &mut Tape, deep: Var, fine_hw: (usize, usize)) -> Result<Var> {
    let ds = tape.value(deep).shape().to_vec();
    let (dh, dw) = (ds[ds.len() - 2], ds[ds.len() - 1]);
    let (fh, fw) = fine_hw;
    let fits = |d: usize, f: usize| 2 * d == f || 2 * d == f + 1;
    if !fits(dh, fh) || !fits(dw, fw) {
        return Err(shape_err(format!(
            "cannot merge a {dh}x{dw} map into a {fh}x{fw} map"
        )));
    }
    let up = tape.upsample2x(deep)?;
    if (2 * dh, 2 * dw) == (fh, fw) {
        Ok(up)
    } else {
        tape.crop_hw(up, fh, fw)
    }
}

/// Coarse-to-fine merge: `block(fine + up(deep))`.
pub fn quat_aggregation_on(
    tape: &mut Tape,
    variant: BlockVariant,
    deep: Var,
    fine: Var,
    v: &QclBlockVars,
    eps: f64,
) -> Result<Var> {
    let fs = tape.value(fine).shape().to_vec();
    let ds = tape.value(deep).shape().to_vec();
    if ds[..2] != fs[..2] {
        return Err(shape_err(format!(
            "merge channel mismatch: deep {ds:?} vs fine {fs:?}"
        )));
    }
    let up = upsample_onto_on(tape, deep, (fs[2], fs[3]))?;
    let sum = tape.add(fine, up)?;
    qcl_block_on(tape, variant, sum, v, eps)
}

pub fn quat_aggregation(deep: &QuatTensor, fine: &QuatTensor, p: &QclBlockParams) -> Result<QuatTensor> {
    let mut tape = Tape::new();
    let d = tape.constant(deep.stacked());
    let f = tape.constant(fine.stacked());
    let vars = QclBlockVars::constants(&mut tape, p);
    let y = quat_aggregation_on(&mut tape, BlockVariant::default(), d, f, &vars, p.norm.eps)?;
    QuatTensor::from_stacked(tape.value(y))
}

/// Stacked `[4,D,Hq,Wq]` view of a channel-first `[D,Hq,Wq,2,2]` aggregate.
pub fn encapsulate_on(tape: &mut Tape, agg: Var) -> Result<Var> {
    let s = tape.value(agg).shape().to_vec();
    if s.len() != 5 || s[3] != 2 || s[4] != 2 {
        return Err(shape_err(format!("encapsulate needs [D,Hq,Wq,2,2], got {s:?}")));
    }
    let p = tape.permute(agg, &[3, 4, 0, 1, 2])?;
    tape.reshape(p, &[4, s[0], s[1], s[2]])
}
