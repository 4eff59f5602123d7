//! Episodes, K-shot prior fusion, segmentation metrics and the synthetic
//! episode generator.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Tape;
use crate::correlation::{cosine_correlation, mask_support, FeaturePyramid};
use crate::erm::binarize;
use crate::error::{shape_err, Error, Result};
use crate::model::{forward_shot_on, ModelSpec, ParamStore};
use crate::ops::{resize_nearest, softmax, upsample_to};
use crate::tensor::RealTensor;

/// One annotated support frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub features: FeaturePyramid,
    /// Binary `[H,W]` mask at the image extent.
    pub mask: RealTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub supports: Vec<Shot>,
    pub query: FeaturePyramid,
    /// Low-level query maps for the decoder, coarse to fine.
    pub query_skips: Vec<RealTensor>,
    /// Ground truth `[H,W]`.
    pub query_mask: RealTensor,
    pub class_id: u64,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.supports.len()
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.supports.is_empty() {
            return Err(Error::Validation("an episode needs at least one support".into()));
        }
        let e = spec.image_extent();
        for m in self.supports.iter().map(|s| &s.mask).chain([&self.query_mask]) {
            m.expect_shape(&[e, e], "episode mask")?;
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Validation("episode masks must be binary".into()));
            }
        }
        let c = spec.pyramid.channels;
        for (p, &ext) in spec.pyramid.extents.iter().enumerate() {
            for f in self.supports.iter().map(|s| &s.features).chain([&self.query]) {
                if f.levels.len() != spec.pyramid.levels() || f.extent(p) != (ext, ext) {
                    return Err(shape_err(format!("episode pyramid does not match level {p} extent {ext}")));
                }
                let level = &f.levels[p];
                if level.len() != spec.pyramid.layer_counts[p] || level.iter().any(|m| m.shape()[0] != c) {
                    return Err(shape_err(format!(
                        "episode level {p} needs {} maps of {c} channels",
                        spec.pyramid.layer_counts[p]
                    )));
                }
            }
        }
        let skips = spec.skip_extents();
        if self.query_skips.len() != skips.len() {
            return Err(shape_err(format!("episode needs {} query skips, got {}", skips.len(), self.query_skips.len())));
        }
        for (s, &e) in self.query_skips.iter().zip(&skips) {
            s.expect_shape(&[spec.skip_channels, e, e], "query skip")?;
        }
        Ok(())
    }
}

/// Per query pixel, the largest ReLU-cosine to any pixel of each masked
/// support map: `K` maps `[Hq,Wq]` with values in `[0,1]`.
pub fn prior_weights(query_last: &RealTensor, supports_last: &[RealTensor]) -> Result<Vec<RealTensor>> {
    query_last.expect_rank(3, "query features")?;
    let (hq, wq) = (query_last.shape()[1], query_last.shape()[2]);
    supports_last
        .iter()
        .map(|s| {
            let c = cosine_correlation(query_last, s)?;
            let support = s.shape()[1] * s.shape()[2];
            Ok(RealTensor::from_parts(
                vec![hq, wq],
                c.data()
                    .chunks(support)
                    .map(|row| row.iter().copied().fold(0.0, f64::max))
                    .collect(),
            ))
        })
        .collect()
}

fn foreground(soft: &RealTensor) -> Result<&[f64]> {
    soft.expect_rank(3, "soft mask")?;
    if soft.shape()[0] != 2 {
        return Err(shape_err(format!("soft mask needs 2 channels, got {:?}", soft.shape())));
    }
    Ok(&soft.data()[soft.len() / 2..])
}

fn threshold(v: &RealTensor, tau: f64) -> RealTensor {
    v.map(|x| if x > tau { 1.0 } else { 0.0 })
}

/// Per-pixel softmax over shots of the priors, bilinearly brought to the
/// prediction extent: `[K,H,W]`.
pub fn shot_weights(priors: &[RealTensor], h: usize, w: usize) -> Result<RealTensor> {
    let up = priors
        .iter()
        .map(|p| {
            p.expect_rank(2, "prior map")?;
            let s = p.shape();
            let m = if (s[0], s[1]) == (h, w) {
                p.clone()
            } else {
                upsample_to(&p.reshape(&[1, s[0], s[1]])?, h, w)?.into_reshaped(&[h, w])?
            };
            m.into_reshaped(&[1, h, w])
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&RealTensor> = up.iter().collect();
    softmax(&RealTensor::concat0(&refs)?, 0)
}

/// `Σ_i softmax_i(w) · fg_i`, the fused foreground probability `[H,W]`.
pub fn fused_foreground(per_shot_soft: &[RealTensor], priors: &[RealTensor]) -> Result<RealTensor> {
    if per_shot_soft.len() != priors.len() || priors.is_empty() {
        return Err(shape_err(format!(
            "{} predictions but {} prior maps",
            per_shot_soft.len(),
            priors.len()
        )));
    }
    let s = per_shot_soft[0].shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let weights = shot_weights(priors, h, w)?;
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for (k, soft) in per_shot_soft.iter().enumerate() {
        soft.expect_shape(&s, "per-shot soft mask")?;
        let fg = foreground(soft)?;
        for (i, o) in out.iter_mut().enumerate() {
            *o += weights.data()[k * plane + i] * fg[i];
        }
    }
    Ok(RealTensor::from_parts(vec![h, w], out))
}

/// Prior-weighted K-shot fusion thresholded strictly above `tau`.
pub fn fuse_kshot(per_shot_soft: &[RealTensor], priors: &[RealTensor], tau: f64) -> Result<RealTensor> {
    Ok(threshold(&fused_foreground(per_shot_soft, priors)?, tau))
}

/// Unweighted mean of the foreground probabilities, thresholded at `tau`.
pub fn mask_avg_baseline(per_shot_soft: &[RealTensor], tau: f64) -> Result<RealTensor> {
    let first = per_shot_soft
        .first()
        .ok_or_else(|| shape_err("mask averaging needs at least one prediction"))?;
    let s = first.shape().to_vec();
    let mut sum = vec![0.0; first.len() / 2];
    for soft in per_shot_soft {
        soft.expect_shape(&s, "per-shot soft mask")?;
        for (a, b) in sum.iter_mut().zip(foreground(soft)?) {
            *a += b;
        }
    }
    let k = per_shot_soft.len() as f64;
    Ok(threshold(
        &RealTensor::from_parts(s[1..].to_vec(), sum.into_iter().map(|v| v / k).collect()),
        tau,
    ))
}

/// Confusion counts of one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, fp, fn_ }
    }

    /// `TP / (TP + FP + FN)`, or `None` when all three are zero.
    pub fn iou(&self) -> Option<f64> {
        let d = self.tp + self.fp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    fn merge(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Running per-class foreground counts plus pooled foreground and background
/// counts. Merging is a plain sum, so accumulators combine in any order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsAccumulator {
    pub per_class: BTreeMap<u64, Counts>,
    pub foreground: Counts,
    pub background: Counts,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one binary prediction against its binary ground truth.
    pub fn add(&mut self, class_id: u64, pred: &RealTensor, truth: &RealTensor) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(shape_err(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.shape(),
                truth.shape()
            )));
        }
        let mut fg = Counts::default();
        let mut bg = Counts::default();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p > 0.5, t > 0.5) {
                (true, true) => fg.tp += 1,
                (true, false) => {
                    fg.fp += 1;
                    bg.fn_ += 1;
                }
                (false, true) => {
                    fg.fn_ += 1;
                    bg.fp += 1;
                }
                (false, false) => bg.tp += 1,
            }
        }
        self.per_class.entry(class_id).or_default().merge(&fg);
        self.foreground.merge(&fg);
        self.background.merge(&bg);
        Ok(())
    }

    /// Adds raw foreground counts for a class (pooled counts untouched).
    pub fn add_class_counts(&mut self, class_id: u64, c: Counts) {
        self.per_class.entry(class_id).or_default().merge(&c);
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        for (k, c) in &other.per_class {
            self.per_class.entry(*k).or_default().merge(c);
        }
        self.foreground.merge(&other.foreground);
        self.background.merge(&other.background);
    }

    /// Classes left out of [`miou`] because they have no counts.
    pub fn empty_classes(&self) -> usize {
        self.per_class.values().filter(|c| c.iou().is_none()).count()
    }
}

/// Mean IoU over classes with at least one count; 0 when none qualify.
pub fn miou(acc: &MetricsAccumulator) -> f64 {
    let ious: Vec<f64> = acc.per_class.values().filter_map(Counts::iou).collect();
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Mean of pooled foreground and background IoU; an undefined IoU counts 0.
pub fn fb_iou(acc: &MetricsAccumulator) -> f64 {
    (acc.foreground.iou().unwrap_or(0.0) + acc.background.iou().unwrap_or(0.0)) / 2.0
}

/// Random axis-aligned rectangle covering 10–50% of an `e×e` frame.
fn random_rect(rng: &mut ChaCha8Rng, e: usize) -> RealTensor {
    let total = (e * e) as f64;
    let (h, w) = loop {
        let h = rng.random_range(1..=e);
        let w = rng.random_range(1..=e);
        let f = (h * w) as f64 / total;
        if (0.1..=0.5).contains(&f) {
            break (h, w);
        }
    };
    let (top, left) = (rng.random_range(0..=e - h), rng.random_range(0..=e - w));
    RealTensor::from_fn(&[e, e], |i| {
        let (r, c) = (i / e, i % e);
        f64::from(u8::from((top..top + h).contains(&r) && (left..left + w).contains(&c)))
    })
}

/// Shared signatures of one episode: an object and a background vector per
/// (level, layer), and one object vector per skip map.
struct Signatures {
    object: Vec<Vec<Vec<f64>>>,
    background: Vec<Vec<Vec<f64>>>,
    skips: Vec<Vec<f64>>,
}

const OBJECT_GAIN: f64 = 2.0;
const BACKGROUND_GAIN: f64 = 1.0;
const JITTER: f64 = 0.25;

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `noise + mask·α·object + (1 − mask)·β·background` at `e×e`.
fn planted_map(
    rng: &mut ChaCha8Rng,
    mask: &RealTensor,
    e: usize,
    object: &[f64],
    background: Option<&[f64]>,
) -> Result<RealTensor> {
    let m = resize_nearest(mask, e, e)?;
    let c = object.len();
    let plane = e * e;
    let amp: Vec<f64> = (0..plane)
        .map(|_| OBJECT_GAIN * (1.0 + JITTER * rng.random_range(-1.0..1.0)))
        .collect();
    let mut data = gaussian_vec(rng, c * plane);
    for ch in 0..c {
        for i in 0..plane {
            let v = &mut data[ch * plane + i];
            if m.data()[i] > 0.5 {
                *v += amp[i] * object[ch];
            } else if let Some(b) = background {
                *v += BACKGROUND_GAIN * b[ch];
            }
        }
    }
    Ok(RealTensor::from_parts(vec![c, e, e], data))
}

fn planted_pyramid(rng: &mut ChaCha8Rng, spec: &ModelSpec, sig: &Signatures, mask: &RealTensor) -> Result<FeaturePyramid> {
    let levels = spec
        .pyramid
        .extents
        .iter()
        .enumerate()
        .map(|(p, &e)| {
            (0..spec.pyramid.layer_counts[p])
                .map(|l| planted_map(rng, mask, e, &sig.object[p][l], Some(&sig.background[p][l])))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(levels)
}

/// Deterministic synthetic episode with `k` supports. Supports and query
/// share planted object and background signatures inside and outside their
/// rectangular masks.
pub fn synth_episode(seed: u64, k: usize, spec: &ModelSpec) -> Result<Episode> {
    spec.validate()?;
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.pyramid.channels;
    let per_level = |rng: &mut ChaCha8Rng| -> Vec<Vec<Vec<f64>>> {
        spec.pyramid
            .layer_counts
            .iter()
            .map(|&n| (0..n).map(|_| gaussian_vec(rng, c)).collect())
            .collect()
    };
    let sig = Signatures {
        object: per_level(&mut rng),
        background: per_level(&mut rng),
        skips: (0..2).map(|_| gaussian_vec(&mut rng, spec.skip_channels)).collect(),
    };
    let e = spec.image_extent();
    let class_id = rng.random::<u64>() % 1000;
    let supports = (0..k)
        .map(|_| {
            let mask = random_rect(&mut rng, e);
            Ok(Shot {
                features: planted_pyramid(&mut rng, spec, &sig, &mask)?,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let query_mask = random_rect(&mut rng, e);
    let query = planted_pyramid(&mut rng, spec, &sig, &query_mask)?;
    let query_skips = spec
        .skip_extents()
        .iter()
        .zip(&sig.skips)
        .map(|(&se, s)| planted_map(&mut rng, &query_mask, se, s, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        supports,
        query,
        query_skips,
        query_mask,
        class_id,
    })
}

/// Everything one forward pass over an episode produces.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutput {
    /// `[2,H,W]` soft mask per shot.
    pub per_shot_soft: Vec<RealTensor>,
    /// Prior map per shot at the coarsest level.
    pub priors: Vec<RealTensor>,
    /// Fused foreground probability `[H,W]`.
    pub fused: RealTensor,
    /// Binary `[H,W]` prediction.
    pub mask: RealTensor,
}

/// Runs every shot through the network and fuses the predictions.
pub fn forward_episode(ep: &Episode, spec: &ModelSpec, params: &ParamStore, tau: f64) -> Result<EpisodeOutput> {
    ep.validate(spec)?;
    let mut per_shot_soft = Vec::with_capacity(ep.k());
    let mut supports_last = Vec::with_capacity(ep.k());
    for shot in &ep.supports {
        let masked = mask_support(&shot.features, &shot.mask)?;
        let mut tape = Tape::new();
        let vars = params.to_tape(&mut tape, false);
        let logits = forward_shot_on(&mut tape, spec, &vars, &ep.query, &ep.query_skips, &masked)?;
        per_shot_soft.push(softmax(tape.value(logits), 0)?);
        supports_last.push(masked.last_layer().clone());
    }
    let priors = prior_weights(ep.query.last_layer(), &supports_last)?;
    let fused = fused_foreground(&per_shot_soft, &priors)?;
    let mask = threshold(&fused, tau);
    Ok(EpisodeOutput {
        per_shot_soft,
        priors,
        fused,
        mask,
    })
}

/// Single-shot binarization of the first prediction, for comparison.
pub fn single_shot_mask(out: &EpisodeOutput) -> Result<RealTensor> {
    binarize(&out.per_shot_soft[0])
}
