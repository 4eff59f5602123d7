//! Real-valued neural primitives.

mod conv;
mod norm;
mod resample;

pub use conv::{
    conv2d, conv2d_backward_bias, conv2d_backward_input, conv2d_backward_kernel, conv2d_batched,
    conv4d, Conv2dParams, ConvGeometry,
};
pub use norm::{group_norm, DEFAULT_EPS};
pub(crate) use norm::{
    channel_groups, group_norm_backward, group_norm_with_stats, normalize_segments,
    normalize_segments_backward, Group,
};
pub use resample::{crop_hw, resize_nearest, uncrop_hw, upsample2x, upsample2x_backward, upsample_to};

use crate::error::{shape_err, Result};
use crate::tensor::RealTensor;

pub fn relu(t: &RealTensor) -> RealTensor {
    t.map(|v| v.max(0.0))
}

/// Per-channel mean of a `[C,H,W]` tensor.
pub fn global_avg_pool(t: &RealTensor) -> Result<RealTensor> {
    t.expect_rank(3, "global_avg_pool input")?;
    let c = t.shape()[0];
    let plane = t.len() / c;
    Ok(RealTensor::from_parts(
        vec![c],
        t.data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect(),
    ))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(t: &RealTensor, axis: usize) -> Result<RealTensor> {
    if axis >= t.rank() {
        return Err(shape_err(format!(
            "softmax axis {axis} out of range for shape {:?}",
            t.shape()
        )));
    }
    let n = t.shape()[axis];
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let outer = t.len() / (n * inner);
    let src = t.data();
    let mut out = vec![0.0; t.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let m = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..n {
                let e = (src[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[at(k)] /= z;
            }
        }
    }
    Ok(RealTensor::from_parts(t.shape().to_vec(), out))
}

/// Given softmax output `y` and upstream `g`, `dx = y ⊙ (g − Σ_axis g ⊙ y)`.
pub(crate) fn softmax_backward(y: &RealTensor, g: &RealTensor, axis: usize) -> RealTensor {
    let n = y.shape()[axis];
    let inner: usize = y.shape()[axis + 1..].iter().product();
    let outer = y.len() / (n * inner);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let dot: f64 = (0..n).map(|k| yd[at(k)] * gd[at(k)]).sum();
            for k in 0..n {
                out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    RealTensor::from_parts(y.shape().to_vec(), out)
}
