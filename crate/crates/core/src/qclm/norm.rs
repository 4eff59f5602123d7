//! Quaternion normalization: componentwise quaternion mean per channel group,
//! one shared real variance averaged over the four components.

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::{channel_groups, normalize_segments, normalize_segments_backward, Group, DEFAULT_EPS};
use crate::quat::Quaternion;
use crate::tensor::RealTensor;

use super::QuatTensor;

/// `gamma` is one real scale per group (`[G]`); `beta` is one quaternion per
/// group stored as `[4, G]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuatNormParams {
    pub gamma: RealTensor,
    pub beta: RealTensor,
    pub groups: usize,
    pub eps: f64,
}

impl QuatNormParams {
    /// γ = 1, β = 0.
    pub fn identity(groups: usize) -> Self {
        Self {
            gamma: RealTensor::ones(&[groups]),
            beta: RealTensor::zeros(&[4, groups]),
            groups,
            eps: DEFAULT_EPS,
        }
    }

    pub fn new(gamma: RealTensor, beta: RealTensor, eps: f64) -> Result<Self> {
        gamma.expect_rank(1, "quaternion norm gamma")?;
        let groups = gamma.len();
        beta.expect_shape(&[4, groups], "quaternion norm beta")?;
        if groups == 0 {
            return Err(Error::Config("quaternion norm needs at least one group".into()));
        }
        Ok(Self { gamma, beta, groups, eps })
    }

    pub fn beta_quaternion(&self, g: usize) -> Quaternion {
        let b = self.beta.data();
        Quaternion {
            r: b[g],
            x: b[self.groups + g],
            y: b[2 * self.groups + g],
            z: b[3 * self.groups + g],
        }
    }
}

/// Which statistics the normalization pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// One variance shared by the four components of a group.
    Quaternion,
    /// Ablation: every component plane of a group gets its own variance.
    PlaneGroup,
}

/// Segment layout over a stacked `[4,C,H,W]` buffer. For the quaternion
/// kind, group `g` holds the same channel slice of all four planes, one
/// segment per plane.
fn quat_groups(kind: NormKind, channels: usize, groups: usize, inner: usize) -> Result<Vec<Group>> {
    let per_plane = channel_groups(channels, groups, inner)?;
    let plane = channels * inner;
    let seg = |d: usize, g: &Group| d * plane + g[0].start..d * plane + g[0].end;
    Ok(match kind {
        NormKind::Quaternion => per_plane.iter().map(|g| (0..4).map(|d| seg(d, g)).collect()).collect(),
        NormKind::PlaneGroup => (0..4)
            .flat_map(|d| per_plane.iter().map(move |g| vec![seg(d, g)]))
            .collect(),
    })
}

/// Normalization on a stacked `[4,C,H,W]` tensor with `gamma` `[G]` and
/// `beta` `[4,G]`.
pub fn quat_norm_on(tape: &mut Tape, kind: NormKind, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 || xs[0] != 4 {
        return Err(shape_err(format!("quaternion norm needs [4,C,H,W], got {xs:?}")));
    }
    tape.value(gamma).expect_rank(1, "quaternion norm gamma")?;
    let groups = tape.value(gamma).len();
    tape.value(beta).expect_shape(&[4, groups], "quaternion norm beta")?;
    let (c, inner) = (xs[1], xs[2] * xs[3]);
    let layout = quat_groups(kind, c, groups, inner)?;
    let per = c / groups * inner;
    // flat index → (plane, group)
    let locate = move |i: usize| (i / (c * inner), (i % (c * inner)) / per);

    let norm = normalize_segments(tape.value(x).data(), &layout, eps);
    let (gv, bv) = (tape.value(gamma).data(), tape.value(beta).data());
    let out: Vec<f64> = norm
        .xhat
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (d, g) = locate(i);
            gv[g] * v + bv[d * groups + g]
        })
        .collect();
    Ok(tape.record(
        RealTensor::from_parts(xs, out),
        &[x, gamma, beta],
        Box::new(move |ctx| {
            let norm = normalize_segments(ctx.inputs[0].data(), &layout, eps);
            let gam = ctx.inputs[1].data();
            let g = ctx.grad.data();
            let mut dgamma = vec![0.0; groups];
            let mut dbeta = vec![0.0; 4 * groups];
            let mut dxhat = vec![0.0; g.len()];
            for i in 0..g.len() {
                let (d, grp) = locate(i);
                dgamma[grp] += g[i] * norm.xhat[i];
                dbeta[d * groups + grp] += g[i];
                dxhat[i] = g[i] * gam[grp];
            }
            let dx = normalize_segments_backward(&dxhat, &norm.xhat, &norm.inv_std, &layout);
            Ok(vec![
                Some(RealTensor::from_parts(ctx.inputs[0].shape().to_vec(), dx)),
                Some(RealTensor::from_parts(vec![groups], dgamma)),
                Some(RealTensor::from_parts(vec![4, groups], dbeta)),
            ])
        }),
    ))
}

pub fn quat_norm(q: &QuatTensor, params: &QuatNormParams) -> Result<QuatTensor> {
    let mut tape = Tape::new();
    let x = tape.constant(q.stacked());
    let g = tape.constant(params.gamma.clone());
    let b = tape.constant(params.beta.clone());
    if params.beta.shape() != [4, params.groups] {
        return Err(shape_err("quaternion norm beta must be [4, groups]"));
    }
    let y = quat_norm_on(&mut tape, NormKind::Quaternion, x, g, b, params.eps)?;
    QuatTensor::from_stacked(tape.value(y))
}

/// Empirical (unbiased) covariance of the `(r, x, y, z)` component vectors.
pub fn augmented_covariance(sample: &[Quaternion]) -> Result<[[f64; 4]; 4]> {
    if sample.len() < 2 {
        return Err(Error::Domain(format!(
            "covariance needs at least 2 samples, got {}",
            sample.len()
        )));
    }
    let n = sample.len() as f64;
    let mut mean = [0.0; 4];
    for q in sample {
        for (m, v) in mean.iter_mut().zip(q.to_array()) {
            *m += v / n;
        }
    }
    let mut cov = [[0.0; 4]; 4];
    for q in sample {
        let c = q.to_array();
        for a in 0..4 {
            for b in 0..4 {
                cov[a][b] += (c[a] - mean[a]) * (c[b] - mean[b]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n - 1.0;
        }
    }
    Ok(cov)
}
