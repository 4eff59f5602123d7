//! The full network: per-level correlation aggregation, quaternion blocks,
//! coarse-to-fine quaternion merging, quaternion-to-real readout and the
//! decoder. Parameters live in a name-indexed store.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::cam::{aggregate_on, plan_support_strides, CamLayer, CamLayerVars};
use crate::correlation::{build_hypercorrelation, FeaturePyramid, PyramidSpec};
use crate::erm::{decode_logits_on, quat_to_real_on, ConvVars, DecoderParams, DecoderVars};
use crate::error::{shape_err, Error, Result};
use crate::ops::DEFAULT_EPS;
use crate::qclm::{
    encapsulate_on, qcl_block_on, quat_aggregation_on, BlockVariant, QclBlockVars, QuatConvParams, QuatKernel,
    QuatNormParams,
};
use crate::tensor::RealTensor;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub pyramid: PyramidSpec,
    /// Quaternion channel width after aggregation.
    pub d: usize,
    /// Group count of both the aggregation group norm and the quaternion norm.
    pub groups: usize,
    /// Quaternion blocks per pyramid level before merging.
    pub qclm_depth: usize,
    /// Channels of each low-level query skip map.
    pub skip_channels: usize,
    pub skip_width: usize,
    pub decoder_width: usize,
    pub variant: BlockVariant,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        if self.d == 0 || self.groups == 0 || !self.d.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "D = {} must be a positive multiple of groups = {}",
                self.d, self.groups
            )));
        }
        if self.pyramid.extents.iter().any(|&e| e < 2) {
            return Err(Error::Config("every pyramid extent must be at least 2".into()));
        }
        if self.skip_channels == 0 || self.skip_width == 0 || self.decoder_width == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }

    /// Extent of images and masks: two ×2 decoder stages above the finest
    /// level.
    pub fn image_extent(&self) -> usize {
        4 * self.pyramid.extents[0]
    }

    /// Extents of the two query skip maps, coarse to fine.
    pub fn skip_extents(&self) -> [usize; 2] {
        [2 * self.pyramid.extents[0], 4 * self.pyramid.extents[0]]
    }
}

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, RealTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: RealTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&RealTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RealTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(RealTensor::len).sum()
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut RealTensor> {
        self.tensors.values_mut()
    }

    /// Every tensor placed on `tape`, as trainable leaves or as constants.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Tape handles for a [`ParamStore`], same order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn block(&self, prefix: &str) -> Result<QclBlockVars> {
        Ok(QclBlockVars {
            weight: self.get(&format!("{prefix}.w"))?,
            bias: self.get(&format!("{prefix}.b"))?,
            gamma: self.get(&format!("{prefix}.qn_gamma"))?,
            beta: self.get(&format!("{prefix}.qn_beta"))?,
        })
    }

    fn conv(&self, prefix: &str) -> Result<ConvVars> {
        Ok(ConvVars {
            kernel: self.get(&format!("{prefix}.w"))?,
            bias: self.get(&format!("{prefix}.b"))?,
        })
    }
}

fn insert_block(store: &mut ParamStore, prefix: &str, d: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let conv = QuatConvParams::init(d, d, 3, rng)?;
    let norm = QuatNormParams::identity(groups);
    store.insert(format!("{prefix}.w"), conv.stacked_weight());
    store.insert(format!("{prefix}.b"), conv.stacked_bias());
    store.insert(format!("{prefix}.qn_gamma"), norm.gamma);
    store.insert(format!("{prefix}.qn_beta"), norm.beta);
    Ok(())
}

/// Seeded initial parameters for `spec`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let levels = spec.pyramid.levels();
    for p in 0..levels {
        let e = spec.pyramid.extents[p];
        let mut in_ch = spec.pyramid.layer_counts[p];
        for (l, stride) in plan_support_strides(e, e)?.into_iter().enumerate() {
            let layer = CamLayer::init(in_ch, spec.d, stride, &mut rng)?;
            store.insert(format!("cam.{p}.{l}.kq"), layer.kernel.k_query);
            store.insert(format!("cam.{p}.{l}.ks"), layer.kernel.k_support);
            store.insert(format!("cam.{p}.{l}.gn_gamma"), layer.gamma);
            store.insert(format!("cam.{p}.{l}.gn_beta"), layer.beta);
            in_ch = spec.d;
        }
        for b in 0..spec.qclm_depth {
            insert_block(&mut store, &format!("qclm.{p}.{b}"), spec.d, spec.groups, &mut rng)?;
        }
        if p + 1 < levels {
            insert_block(&mut store, &format!("qam.{p}"), spec.d, spec.groups, &mut rng)?;
        }
    }
    let dec = DecoderParams::init(
        spec.d,
        &[spec.skip_channels, spec.skip_channels],
        spec.skip_width,
        spec.decoder_width,
        &mut rng,
    )?;
    for (i, (proj, refine)) in dec.skip_projections.into_iter().zip(dec.refine_convs).enumerate() {
        store.insert(format!("dec.proj{i}.w"), proj.kernel);
        store.insert(format!("dec.proj{i}.b"), proj.bias);
        store.insert(format!("dec.refine{i}.w"), refine.kernel);
        store.insert(format!("dec.refine{i}.b"), refine.bias);
    }
    store.insert("dec.head.w", dec.head.kernel);
    store.insert("dec.head.b", dec.head.bias);
    Ok(store)
}

/// Checks that `store` holds exactly the tensors `spec` needs, with the
/// right shapes. Reports the first offending name.
pub fn check_params(spec: &ModelSpec, store: &ParamStore) -> Result<()> {
    let reference = init_params(spec, 0)?;
    for (name, t) in reference.iter() {
        let got = store
            .get(name)
            .map_err(|_| Error::WeightShape {
                name: name.to_string(),
                found: vec![],
                expected: t.shape().to_vec(),
            })?;
        if got.shape() != t.shape() {
            return Err(Error::WeightShape {
                name: name.to_string(),
                found: got.shape().to_vec(),
                expected: t.shape().to_vec(),
            });
        }
    }
    if let Some((extra, t)) = store.iter().find(|(n, _)| reference.get(n).is_err()) {
        return Err(Error::WeightShape {
            name: extra.to_string(),
            found: t.shape().to_vec(),
            expected: vec![],
        });
    }
    Ok(())
}

/// One query/support pair through the network on `tape`; returns `[2,H,W]`
/// logits at the image extent. `support_masked` must already be masked.
pub fn forward_shot_on(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ParamVars,
    query: &FeaturePyramid,
    query_skips: &[RealTensor],
    support_masked: &FeaturePyramid,
) -> Result<Var> {
    let levels = spec.pyramid.levels();
    if query.levels.len() != levels {
        return Err(shape_err(format!(
            "query pyramid has {} levels, model expects {levels}",
            query.levels.len()
        )));
    }
    let corr = build_hypercorrelation(query, support_masked)?;
    let mut per_level = Vec::with_capacity(levels);
    for (p, c) in corr.into_iter().enumerate() {
        let s = c.tensor().shape().to_vec();
        let strides = plan_support_strides(s[3], s[4])?;
        let layers = strides
            .iter()
            .enumerate()
            .map(|(l, &stride_s)| {
                Ok(CamLayerVars {
                    k_query: params.get(&format!("cam.{p}.{l}.kq"))?,
                    k_support: params.get(&format!("cam.{p}.{l}.ks"))?,
                    gamma: params.get(&format!("cam.{p}.{l}.gn_gamma"))?,
                    beta: params.get(&format!("cam.{p}.{l}.gn_beta"))?,
                    stride_s,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cv = tape.constant(c.into_tensor());
        let agg = aggregate_on(tape, cv, &layers, spec.groups)?;
        let mut q = encapsulate_on(tape, agg)?;
        for b in 0..spec.qclm_depth {
            q = qcl_block_on(tape, spec.variant, q, &params.block(&format!("qclm.{p}.{b}"))?, DEFAULT_EPS)?;
        }
        per_level.push(q);
    }
    let mut cur = *per_level.last().expect("at least one level");
    for p in (0..levels - 1).rev() {
        cur = quat_aggregation_on(tape, spec.variant, cur, per_level[p], &params.block(&format!("qam.{p}"))?, DEFAULT_EPS)?;
    }
    let fr = quat_to_real_on(tape, cur)?;
    let skips: Vec<Var> = query_skips.iter().map(|s| tape.constant(s.clone())).collect();
    let dec = DecoderVars {
        skip_projections: vec![params.conv("dec.proj0")?, params.conv("dec.proj1")?],
        refine_convs: vec![params.conv("dec.refine0")?, params.conv("dec.refine1")?],
        head: params.conv("dec.head")?,
    };
    decode_logits_on(tape, fr, &skips, &dec)
}

/// Parameter counts of one quaternion layer and its two comparison variants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub quaternion: usize,
    pub real_replacement: usize,
    pub group_conv: usize,
}

/// Weight-scalar counts of every quaternion conv layer. The real replacement
/// maps `4·in` real channels to `4·out` with a dense kernel; the group
/// ablation keeps the four planes.
pub fn quaternion_layer_counts(store: &ParamStore) -> Vec<LayerCount> {
    store
        .iter()
        .filter(|(n, t)| (n.starts_with("qclm.") || n.starts_with("qam.")) && n.ends_with(".w") && t.rank() == 5)
        .map(|(n, t)| {
            let s = t.shape();
            let (o, c, kh, kw) = (s[1], s[2], s[3], s[4]);
            LayerCount {
                name: n.trim_end_matches(".w").to_string(),
                quaternion: 4 * o * c * kh * kw,
                real_replacement: (4 * o) * (4 * c) * kh * kw,
                group_conv: 4 * o * c * kh * kw,
            }
        })
        .collect()
}

/// Kernel variant a block family uses, for reporting.
pub fn kernel_name(k: QuatKernel) -> &'static str {
    match k {
        QuatKernel::Hamilton => "hamilton",
        QuatKernel::Group => "group",
        QuatKernel::CorruptedSign => "corrupted",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{mask_support, synthetic_pyramid};

    pub(crate) fn tiny_spec() -> ModelSpec {
        ModelSpec {
            pyramid: PyramidSpec::new(vec![4, 2], vec![2, 2], 3).unwrap(),
            d: 4,
            groups: 2,
            qclm_depth: 1,
            skip_channels: 2,
            skip_width: 2,
            decoder_width: 3,
            variant: BlockVariant::default(),
        }
    }

    #[test]
    fn init_is_seeded_and_checked() {
        let spec = tiny_spec();
        let a = init_params(&spec, 3).unwrap();
        assert_eq!(a, init_params(&spec, 3).unwrap());
        assert_ne!(a, init_params(&spec, 4).unwrap());
        check_params(&spec, &a).unwrap();
        let mut wide = spec.clone();
        wide.d = 8;
        let err = check_params(&wide, &a).unwrap_err();
        assert!(matches!(err, Error::WeightShape { .. }));
    }

    #[test]
    fn forward_shapes() {
        let spec = tiny_spec();
        let params = init_params(&spec, 1).unwrap();
        let q = synthetic_pyramid(1, &spec.pyramid).unwrap();
        let s = synthetic_pyramid(2, &spec.pyramid).unwrap();
        let mask = RealTensor::from_fn(&[16, 16], |i| ((i % 16) < 8) as u8 as f64);
        let sm = mask_support(&s, &mask).unwrap();
        let skips = [RealTensor::ones(&[2, 8, 8]), RealTensor::ones(&[2, 16, 16])];
        let mut tape = Tape::new();
        let vars = params.to_tape(&mut tape, false);
        let out = forward_shot_on(&mut tape, &spec, &vars, &q, &skips, &sm).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 16, 16]);
    }

    #[test]
    fn layer_count_ratio() {
        let params = init_params(&tiny_spec(), 0).unwrap();
        let counts = quaternion_layer_counts(&params);
        assert_eq!(counts.len(), 3);
        for c in counts {
            assert_eq!(c.real_replacement, 4 * c.quaternion);
            assert_eq!(c.group_conv, c.quaternion);
        }
    }
}
