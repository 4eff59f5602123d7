//! Group statistics normalization shared by real group norm and the
//! quaternion norm.
//!
//! A group is a list of contiguous flat ranges ("segments"). Each segment is
//! centred on its own mean; the variance is pooled (biased, 1/N) over the
//! whole group. Real group norm uses one segment per group, the quaternion
//! norm uses four: one per component plane.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::RealTensor;

pub const DEFAULT_EPS: f64 = 1e-5;

pub(crate) type Group = Vec<Range<usize>>;

/// Normalized values plus the per-group `1/sqrt(var + eps)`.
pub(crate) struct Normalized {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn normalize_segments(x: &[f64], groups: &[Group], eps: f64) -> Normalized {
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(groups.len());
    for group in groups {
        let n: usize = group.iter().map(|r| r.len()).sum();
        let mut sq = 0.0;
        let mut means = Vec::with_capacity(group.len());
        for seg in group {
            let m = x[seg.clone()].iter().sum::<f64>() / seg.len() as f64;
            sq += x[seg.clone()].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            means.push(m);
        }
        let var = sq / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (seg, m) in group.iter().zip(means) {
            for i in seg.clone() {
                xhat[i] = (x[i] - m) * is;
            }
        }
        inv_std.push(is);
    }
    Normalized { xhat, inv_std }
}

/// Given `d xhat`, returns `d x` for the transform above.
pub(crate) fn normalize_segments_backward(
    dxhat: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    groups: &[Group],
) -> Vec<f64> {
    let mut dx = vec![0.0; dxhat.len()];
    for (group, &is) in groups.iter().zip(inv_std) {
        let n: usize = group.iter().map(|r| r.len()).sum();
        let proj = group
            .iter()
            .flat_map(|r| r.clone())
            .map(|i| dxhat[i] * xhat[i])
            .sum::<f64>()
            / n as f64;
        for seg in group {
            let seg_mean = dxhat[seg.clone()].iter().sum::<f64>() / seg.len() as f64;
            for i in seg.clone() {
                dx[i] = is * (dxhat[i] - seg_mean - xhat[i] * proj);
            }
        }
    }
    dx
}

pub(crate) fn channel_groups(channels: usize, groups: usize, inner: usize) -> Result<Vec<Group>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "{channels} channels cannot be split into {groups} groups"
        )));
    }
    let per = channels / groups * inner;
    Ok((0..groups).map(|g| vec![g * per..(g + 1) * per]).collect())
}

/// Group normalization over `[C, ...]` with per-channel affine `gamma`, `beta`.
pub fn group_norm(
    t: &RealTensor,
    groups: usize,
    gamma: &RealTensor,
    beta: &RealTensor,
    eps: f64,
) -> Result<RealTensor> {
    Ok(group_norm_with_stats(t, groups, gamma, beta, eps)?.0)
}

pub(crate) fn group_norm_with_stats(
    t: &RealTensor,
    groups: usize,
    gamma: &RealTensor,
    beta: &RealTensor,
    eps: f64,
) -> Result<(RealTensor, Normalized)> {
    let c = t.shape()[0];
    gamma.expect_shape(&[c], "group_norm gamma")?;
    beta.expect_shape(&[c], "group_norm beta")?;
    let inner = t.len() / c;
    let layout = channel_groups(c, groups, inner)?;
    let norm = normalize_segments(t.data(), &layout, eps);
    let out: Vec<f64> = norm
        .xhat
        .iter()
        .enumerate()
        .map(|(i, &v)| gamma.data()[i / inner] * v + beta.data()[i / inner])
        .collect();
    Ok((RealTensor::from_parts(t.shape().to_vec(), out), norm))
}

/// Returns `(d input, d gamma, d beta)`.
pub(crate) fn group_norm_backward(
    grad_out: &RealTensor,
    norm: &Normalized,
    groups: usize,
    gamma: &RealTensor,
) -> Result<(RealTensor, RealTensor, RealTensor)> {
    let c = gamma.len();
    let inner = grad_out.len() / c;
    let layout = channel_groups(c, groups, inner)?;
    let g = grad_out.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dxhat = vec![0.0; g.len()];
    for i in 0..g.len() {
        let ch = i / inner;
        dgamma[ch] += g[i] * norm.xhat[i];
        dbeta[ch] += g[i];
        dxhat[i] = g[i] * gamma.data()[ch];
    }
    let dx = normalize_segments_backward(&dxhat, &norm.xhat, &norm.inv_std, &layout);
    Ok((
        RealTensor::from_parts(grad_out.shape().to_vec(), dx),
        RealTensor::from_parts(vec![c], dgamma),
        RealTensor::from_parts(vec![c], dbeta),
    ))
}
