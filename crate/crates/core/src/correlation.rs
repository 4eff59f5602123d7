//! Masked multi-layer 4D cosine correlation between query and support
//! feature pyramids, and a seeded stand-in for the frozen backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::ops::resize_nearest;
use crate::tensor::RealTensor;

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

/// Level extents (square, coarsening by 2) and per-level layer counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidSpec {
    pub extents: Vec<usize>,
    pub layer_counts: Vec<usize>,
    pub channels: usize,
}

impl PyramidSpec {
    pub fn new(extents: Vec<usize>, layer_counts: Vec<usize>, channels: usize) -> Result<Self> {
        let spec = Self {
            extents,
            layer_counts,
            channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.is_empty() || self.extents.len() != self.layer_counts.len() {
            return Err(Error::Config(format!(
                "pyramid needs matching non-empty extents and layer counts, got {:?} / {:?}",
                self.extents, self.layer_counts
            )));
        }
        if self.extents.iter().chain(&self.layer_counts).any(|&v| v == 0) || self.channels == 0 {
            return Err(Error::Config("pyramid extents, layer counts and channels must be positive".into()));
        }
        for w in self.extents.windows(2) {
            if w[1] != w[0].div_ceil(2) {
                return Err(Error::Config(format!(
                    "pyramid levels must halve: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.extents.len()
    }
}

/// `levels[p][i]` is layer `i` of level `p`, shaped `[C, H_p, W_p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Vec<RealTensor>>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Vec<RealTensor>>) -> Result<Self> {
        let mut prev: Option<(usize, usize)> = None;
        for (p, level) in levels.iter().enumerate() {
            let first = level
                .first()
                .ok_or_else(|| shape_err(format!("pyramid level {p} has no layers")))?;
            first.expect_rank(3, "pyramid feature map")?;
            let hw = (first.shape()[1], first.shape()[2]);
            for m in level {
                m.expect_rank(3, "pyramid feature map")?;
                if (m.shape()[1], m.shape()[2]) != hw {
                    return Err(shape_err(format!(
                        "level {p}: maps disagree on extent {:?} vs {:?}",
                        hw,
                        &m.shape()[1..]
                    )));
                }
            }
            if let Some((ph, pw)) = prev {
                if hw.0 >= ph || hw.1 >= pw {
                    return Err(shape_err(format!(
                        "level {p} extent {hw:?} does not shrink from {:?}",
                        (ph, pw)
                    )));
                }
            }
            prev = Some(hw);
        }
        Ok(Self { levels })
    }

    pub fn extent(&self, level: usize) -> (usize, usize) {
        let s = self.levels[level][0].shape();
        (s[1], s[2])
    }

    /// The last map of the coarsest level.
    pub fn last_layer(&self) -> &RealTensor {
        self.levels.last().and_then(|l| l.last()).expect("non-empty pyramid")
    }
}

/// Stacked per-layer correlations of one level: `[N, Hq, Wq, Hs, Ws]`,
/// every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTensor(RealTensor);

impl CorrelationTensor {
    pub fn new(t: RealTensor) -> Result<Self> {
        t.expect_rank(5, "correlation tensor")?;
        if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Validation("correlation values must lie in [0, 1]".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &RealTensor {
        &self.0
    }

    pub fn into_tensor(self) -> RealTensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }
}

fn check_binary(mask: &RealTensor) -> Result<()> {
    mask.expect_rank(2, "mask")?;
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("mask values must be 0 or 1".into()));
    }
    Ok(())
}

/// Multiplies every support map by the mask resized (nearest) to its extent.
pub fn mask_support(features: &FeaturePyramid, mask: &RealTensor) -> Result<FeaturePyramid> {
    check_binary(mask)?;
    let levels = features
        .levels
        .iter()
        .map(|level| {
            let (h, w) = (level[0].shape()[1], level[0].shape()[2]);
            let m = resize_nearest(mask, h, w)?;
            Ok(level
                .iter()
                .map(|f| {
                    let plane = h * w;
                    RealTensor::from_fn(f.shape(), |i| f.data()[i] * m.data()[i % plane])
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturePyramid { levels })
}

/// Unit channel vectors per pixel, `[H*W][C]`; zero vectors stay zero.
fn unit_vectors(f: &RealTensor) -> Vec<Vec<f64>> {
    let (c, plane) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
    (0..plane)
        .map(|p| {
            let v: Vec<f64> = (0..c).map(|ch| f.data()[ch * plane + p]).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < ZERO_NORM {
                vec![0.0; c]
            } else {
                v.into_iter().map(|x| x / n).collect()
            }
        })
        .collect()
}

/// ReLU of the cosine similarity for every (query pixel, support pixel)
/// pair: `[C,Hq,Wq] × [C,Hs,Ws] → [Hq,Wq,Hs,Ws]`.
pub fn cosine_correlation(fq: &RealTensor, fs: &RealTensor) -> Result<RealTensor> {
    fq.expect_rank(3, "query features")?;
    fs.expect_rank(3, "support features")?;
    if fq.shape()[0] != fs.shape()[0] {
        return Err(shape_err(format!(
            "correlation channel mismatch: query {:?} vs support {:?}",
            fq.shape(),
            fs.shape()
        )));
    }
    let uq = unit_vectors(fq);
    let us = unit_vectors(fs);
    let mut out = Vec::with_capacity(uq.len() * us.len());
    for a in &uq {
        for b in &us {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            out.push(dot.clamp(0.0, 1.0));
        }
    }
    Ok(RealTensor::from_parts(
        vec![fq.shape()[1], fq.shape()[2], fs.shape()[1], fs.shape()[2]],
        out,
    ))
}

/// Per level, the layer-wise correlations stacked on a leading channel axis.
pub fn build_hypercorrelation(
    query: &FeaturePyramid,
    support_masked: &FeaturePyramid,
) -> Result<Vec<CorrelationTensor>> {
    if query.levels.len() != support_masked.levels.len() {
        return Err(shape_err(format!(
            "pyramids differ in level count: {} vs {}",
            query.levels.len(),
            support_masked.levels.len()
        )));
    }
    query
        .levels
        .iter()
        .zip(&support_masked.levels)
        .enumerate()
        .map(|(p, (ql, sl))| {
            if ql.len() != sl.len() {
                return Err(shape_err(format!(
                    "level {p}: {} query layers vs {} support layers",
                    ql.len(),
                    sl.len()
                )));
            }
            let maps = ql
                .iter()
                .zip(sl)
                .map(|(q, s)| {
                    let c = cosine_correlation(q, s)?;
                    let sh = c.shape().to_vec();
                    let mut s5 = vec![1];
                    s5.extend(sh);
                    c.into_reshaped(&s5)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&RealTensor> = maps.iter().collect();
            Ok(CorrelationTensor(RealTensor::concat0(&refs)?))
        })
        .collect()
}

/// Deterministic Gaussian features for every level and layer of `spec`.
pub fn synthetic_pyramid(seed: u64, spec: &PyramidSpec) -> Result<FeaturePyramid> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = spec
        .extents
        .iter()
        .zip(&spec.layer_counts)
        .map(|(&e, &n)| {
            (0..n)
                .map(|_| RealTensor::randn(&[spec.channels, e, e], 1.0, &mut rng))
                .collect()
        })
        .collect();
    FeaturePyramid::new(levels)
}
