//! Parameter accounting and kernel timings behind `qclnet bench`.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{LayerCount, ParamStore};
use crate::ops::ConvGeometry;
use crate::qclm::{quat_conv2d_with, real_replacement_conv2d, QuatConvParams, QuatKernel, QuatTensor};
use crate::tensor::RealTensor;

/// Whole-model scalar totals under the three kernel choices. Everything
/// outside the quaternion conv weights is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamTotals {
    pub quaternion: usize,
    pub real_replacement: usize,
    pub group_conv: usize,
}

pub fn param_totals(store: &ParamStore, layers: &[LayerCount]) -> ParamTotals {
    let total = store.scalar_count();
    let quat: usize = layers.iter().map(|l| l.quaternion).sum();
    let shared = total - quat;
    ParamTotals {
        quaternion: total,
        real_replacement: shared + layers.iter().map(|l| l.real_replacement).sum::<usize>(),
        group_conv: shared + layers.iter().map(|l| l.group_conv).sum::<usize>(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelVariant {
    Hamilton,
    Group,
    RealReplacement,
}

impl KernelVariant {
    pub const ALL: [KernelVariant; 3] = [Self::Hamilton, Self::Group, Self::RealReplacement];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hamilton => "hamilton",
            Self::Group => "group",
            Self::RealReplacement => "real",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Timing {
    pub variant: KernelVariant,
    pub extent: usize,
    pub per_forward: Duration,
}

/// Median wall time of a 3×3, `channels`→`channels` layer forward on a
/// `extent`×`extent` quaternion map.
pub fn time_layer(variant: KernelVariant, channels: usize, extent: usize, reps: usize, seed: u64) -> Result<Timing> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = QuatTensor::from_stacked(&RealTensor::randn(&[4, channels, extent, extent], 1.0, &mut rng))?;
    let p = QuatConvParams::init(channels, channels, 3, &mut rng)?;
    let dense = RealTensor::randn(&[4 * channels, 4 * channels, 3, 3], 0.1, &mut rng);
    let bias = RealTensor::zeros(&[4 * channels]);
    let geo = ConvGeometry::same(3);
    let mut samples = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let out = match variant {
            KernelVariant::Hamilton => quat_conv2d_with(QuatKernel::Hamilton, &q, &p, geo)?,
            KernelVariant::Group => quat_conv2d_with(QuatKernel::Group, &q, &p, geo)?,
            KernelVariant::RealReplacement => real_replacement_conv2d(&q, &dense, &bias, geo)?,
        };
        samples.push(t.elapsed());
        std::hint::black_box(out);
    }
    samples.sort();
    Ok(Timing {
        variant,
        extent,
        per_forward: samples[samples.len() / 2],
    })
}
