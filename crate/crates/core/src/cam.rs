//! Correlation aggregation: separable 4D convolution that shrinks the
//! support subspace of each correlation tensor to 2×2 while keeping the
//! query extent, plus the TopK baseline aggregator.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::correlation::CorrelationTensor;
use crate::error::{shape_err, Error, Result};
use crate::ops::{ConvGeometry, DEFAULT_EPS};
use crate::tensor::RealTensor;

pub const CAM_KERNEL: usize = 3;
pub const CAM_GROUPS: usize = 4;

/// A 4D kernel factored into a query-plane kernel `[out,in,kq,kq]` and a
/// support-plane kernel `[out,out,ks,ks]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableKernel4d {
    pub k_query: RealTensor,
    pub k_support: RealTensor,
    pub stride_q: (usize, usize),
    pub stride_s: (usize, usize),
}

impl SeparableKernel4d {
    pub fn new(
        k_query: RealTensor,
        k_support: RealTensor,
        stride_q: (usize, usize),
        stride_s: (usize, usize),
    ) -> Result<Self> {
        k_query.expect_rank(4, "query kernel")?;
        k_support.expect_rank(4, "support kernel")?;
        let (q, s) = (k_query.shape(), k_support.shape());
        if q[2..].iter().chain(&s[2..]).any(|e| e % 2 == 0) {
            return Err(Error::Config(format!(
                "separable kernel extents must be odd: {q:?}, {s:?}"
            )));
        }
        if s[0] != q[0] || s[1] != q[0] {
            return Err(shape_err(format!(
                "support kernel {s:?} must map {} channels to {}",
                q[0], q[0]
            )));
        }
        if [stride_q.0, stride_q.1, stride_s.0, stride_s.1].contains(&0) {
            return Err(Error::Config("strides must be >= 1".into()));
        }
        Ok(Self {
            k_query,
            k_support,
            stride_q,
            stride_s,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.k_query.shape()[0]
    }

    fn geometries(&self) -> (ConvGeometry, ConvGeometry) {
        let (kq, ks) = (self.k_query.shape()[2], self.k_support.shape()[2]);
        (
            ConvGeometry::new(self.stride_q, (kq / 2, self.k_query.shape()[3] / 2)),
            ConvGeometry::new(self.stride_s, (ks / 2, self.k_support.shape()[3] / 2)),
        )
    }
}

/// Aggregated correlation `[Hq, Wq, 2, 2, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedCorrelation(RealTensor);

impl AggregatedCorrelation {
    pub fn new(t: RealTensor) -> Result<Self> {
        t.expect_rank(5, "aggregated correlation")?;
        if t.shape()[2] != 2 || t.shape()[3] != 2 {
            return Err(shape_err(format!(
                "aggregated correlation needs a 2x2 support extent, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &RealTensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[4]
    }
}

/// Separable 4D convolution recorded on a tape. Input `[C,Hq,Wq,Hs,Ws]`,
/// query pass first, then support pass; padding is `k/2` on both planes.
pub fn separable_conv4d_on(
    tape: &mut Tape,
    c: Var,
    k_query: Var,
    k_support: Var,
    query: ConvGeometry,
    support: ConvGeometry,
) -> Result<Var> {
    let s = tape.value(c).shape().to_vec();
    if s.len() != 5 {
        return Err(shape_err(format!("separable_conv4d input must be rank 5, got {s:?}")));
    }
    let (cin, hq, wq, hs, ws) = (s[0], s[1], s[2], s[3], s[4]);
    // query pass: every support pixel is a batch entry
    let t = tape.permute(c, &[3, 4, 0, 1, 2])?;
    let t = tape.reshape(t, &[hs * ws, cin, hq, wq])?;
    let t = tape.conv2d(t, k_query, None, query)?;
    let (mid, hq2, wq2) = {
        let o = tape.value(t).shape();
        (o[1], o[2], o[3])
    };
    // support pass: every query pixel is a batch entry
    let t = tape.reshape(t, &[hs, ws, mid, hq2, wq2])?;
    let t = tape.permute(t, &[3, 4, 2, 0, 1])?;
    let t = tape.reshape(t, &[hq2 * wq2, mid, hs, ws])?;
    let t = tape.conv2d(t, k_support, None, support)?;
    let (out, hs2, ws2) = {
        let o = tape.value(t).shape();
        (o[1], o[2], o[3])
    };
    let t = tape.reshape(t, &[hq2, wq2, out, hs2, ws2])?;
    tape.permute(t, &[2, 0, 1, 3, 4])
}

/// `k_support(x) * [k_query(u) * c(u, x)]` on a `[C,Hq,Wq,Hs,Ws]` tensor.
pub fn separable_conv4d(c: &RealTensor, k: &SeparableKernel4d) -> Result<RealTensor> {
    let mut tape = Tape::new();
    let cv = tape.constant(c.clone());
    let kq = tape.constant(k.k_query.clone());
    let ks = tape.constant(k.k_support.clone());
    let (gq, gs) = k.geometries();
    let out = separable_conv4d_on(&mut tape, cv, kq, ks, gq, gs)?;
    Ok(tape.value(out).clone())
}

/// One aggregation layer: separable conv → group norm → ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct CamLayer {
    pub kernel: SeparableKernel4d,
    pub gamma: RealTensor,
    pub beta: RealTensor,
}

impl CamLayer {
    pub fn init<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, stride_s: (usize, usize), rng: &mut R) -> Result<Self> {
        let k = CAM_KERNEL;
        let bq = 1.0 / ((in_ch * k * k) as f64).sqrt();
        let bs = 1.0 / ((out_ch * k * k) as f64).sqrt();
        Ok(Self {
            kernel: SeparableKernel4d::new(
                RealTensor::rand_uniform(&[out_ch, in_ch, k, k], -bq, bq, rng),
                RealTensor::rand_uniform(&[out_ch, out_ch, k, k], -bs, bs, rng),
                (1, 1),
                stride_s,
            )?,
            gamma: RealTensor::ones(&[out_ch]),
            beta: RealTensor::zeros(&[out_ch]),
        })
    }
}

/// Support strides for each layer: a stride-1 projection layer, then
/// per-axis halvings until the support extent is 2×2. Axes already at 2
/// keep stride 1.
pub fn plan_support_strides(hs: usize, ws: usize) -> Result<Vec<(usize, usize)>> {
    if hs < 2 || ws < 2 {
        return Err(Error::Config(format!(
            "support extent {hs}x{ws} is below 2x2 and cannot be aggregated"
        )));
    }
    let shrink = |e: usize| (e - 1) / 2 + 1;
    let mut plan = vec![(1, 1)];
    let (mut h, mut w) = (hs, ws);
    while h > 2 || w > 2 {
        let sh = if h > 2 { 2 } else { 1 };
        let sw = if w > 2 { 2 } else { 1 };
        plan.push((sh, sw));
        h = if sh == 2 { shrink(h) } else { h };
        w = if sw == 2 { shrink(w) } else { w };
    }
    Ok(plan)
}

/// Support extent after applying `strides` with 3×3 kernels and padding 1.
pub fn support_extent_after(hs: usize, ws: usize, strides: &[(usize, usize)]) -> (usize, usize) {
    strides.iter().fold((hs, ws), |(h, w), &(sh, sw)| {
        ((h - 1) / sh.max(1) + 1, (w - 1) / sw.max(1) + 1)
    })
}

/// A validated stack of aggregation layers for one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct CamStack {
    pub layers: Vec<CamLayer>,
    pub groups: usize,
}

impl CamStack {
    /// Checks that the layers chain channel-wise, end at `target_d` channels
    /// and land the support extent on exactly 2×2.
    pub fn new(layers: Vec<CamLayer>, groups: usize, in_ch: usize, target_d: usize, support: (usize, usize)) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("aggregation needs at least one layer".into()));
        }
        let mut ch = in_ch;
        for (i, l) in layers.iter().enumerate() {
            let q = l.kernel.k_query.shape();
            if q[1] != ch {
                return Err(Error::Config(format!(
                    "aggregation layer {i} expects {} input channels, receives {ch}",
                    q[1]
                )));
            }
            if q[0] % groups != 0 {
                return Err(Error::Config(format!(
                    "aggregation layer {i}: {} channels not divisible into {groups} groups",
                    q[0]
                )));
            }
            if l.kernel.stride_q != (1, 1) {
                return Err(Error::Config(format!("aggregation layer {i}: query stride must be 1")));
            }
            ch = q[0];
        }
        if ch != target_d {
            return Err(Error::Config(format!(
                "aggregation ends at {ch} channels, expected {target_d}"
            )));
        }
        let strides: Vec<_> = layers.iter().map(|l| l.kernel.stride_s).collect();
        let end = support_extent_after(support.0, support.1, &strides);
        if end != (2, 2) {
            return Err(Error::Config(format!(
                "stride schedule {strides:?} takes support {support:?} to {end:?}, not (2, 2)"
            )));
        }
        Ok(Self { layers, groups })
    }

    /// The default schedule: projection to `d` channels, then halvings.
    pub fn init<R: Rng + ?Sized>(in_ch: usize, d: usize, support: (usize, usize), rng: &mut R) -> Result<Self> {
        let plan = plan_support_strides(support.0, support.1)?;
        let mut layers = Vec::with_capacity(plan.len());
        for (i, &s) in plan.iter().enumerate() {
            layers.push(CamLayer::init(if i == 0 { in_ch } else { d }, d, s, rng)?);
        }
        Self::new(layers, CAM_GROUPS, in_ch, d, support)
    }
}

/// Tape handles for one aggregation layer.
#[derive(Debug, Clone, Copy)]
pub struct CamLayerVars {
    pub k_query: Var,
    pub k_support: Var,
    pub gamma: Var,
    pub beta: Var,
    pub stride_s: (usize, usize),
}

/// Runs the layer stack and returns the aggregated tensor in channel-first
/// layout `[D, Hq, Wq, 2, 2]`.
pub fn aggregate_on(tape: &mut Tape, c: Var, layers: &[CamLayerVars], groups: usize) -> Result<Var> {
    let mut cur = c;
    for l in layers {
        let kq = tape.value(l.k_query).shape().to_vec();
        let ks = tape.value(l.k_support).shape().to_vec();
        let gq = ConvGeometry::new((1, 1), (kq[2] / 2, kq[3] / 2));
        let gs = ConvGeometry::new(l.stride_s, (ks[2] / 2, ks[3] / 2));
        cur = separable_conv4d_on(tape, cur, l.k_query, l.k_support, gq, gs)?;
        cur = tape.group_norm(cur, l.gamma, l.beta, groups, DEFAULT_EPS)?;
        cur = tape.relu(cur);
    }
    let s = tape.value(cur).shape();
    if s[3] != 2 || s[4] != 2 {
        return Err(Error::Config(format!(
            "aggregation ended at support extent {}x{}, not 2x2",
            s[3], s[4]
        )));
    }
    Ok(cur)
}

/// Full aggregation of one level's correlation tensor to `[Hq,Wq,2,2,D]`.
pub fn aggregate(c: &CorrelationTensor, stack: &CamStack, target_d: usize) -> Result<AggregatedCorrelation> {
    let ct = c.tensor();
    let support = (ct.shape()[3], ct.shape()[4]);
    // re-validate against this tensor's extents
    let stack = CamStack::new(stack.layers.clone(), stack.groups, ct.shape()[0], target_d, support)?;
    let mut tape = Tape::new();
    let cv = tape.constant(ct.clone());
    let vars: Vec<CamLayerVars> = stack
        .layers
        .iter()
        .map(|l| CamLayerVars {
            k_query: tape.constant(l.kernel.k_query.clone()),
            k_support: tape.constant(l.kernel.k_support.clone()),
            gamma: tape.constant(l.gamma.clone()),
            beta: tape.constant(l.beta.clone()),
            stride_s: l.kernel.stride_s,
        })
        .collect();
    let out = aggregate_on(&mut tape, cv, &vars, stack.groups)?;
    AggregatedCorrelation::new(tape.value(out).permute(&[1, 2, 3, 4, 0])?)
}

/// The `k` largest support values per query pixel and channel, descending;
/// ties keep the smaller flattened support index first. Output
/// `[Hq, Wq, N·k]`, channel-major along the last axis.
pub fn topk_aggregate(c: &CorrelationTensor, k: usize) -> Result<RealTensor> {
    let t = c.tensor();
    let s = t.shape();
    let (n, hq, wq, support) = (s[0], s[1], s[2], s[3] * s[4]);
    if k == 0 || k > support {
        return Err(Error::Validation(format!(
            "top-k needs 1 <= k <= {support}, got {k}"
        )));
    }
    let mut out = vec![0.0; hq * wq * n * k];
    let mut idx: Vec<usize> = Vec::with_capacity(support);
    for ch in 0..n {
        for u in 0..hq * wq {
            let row = &t.data()[(ch * hq * wq + u) * support..][..support];
            idx.clear();
            idx.extend(0..support);
            // stable sort keeps equal values in index order
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            for (j, &src) in idx[..k].iter().enumerate() {
                out[u * n * k + ch * k + j] = row[src];
            }
        }
    }
    Ok(RealTensor::from_parts(vec![hq, wq, n * k], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv4d;
    use crate::tensor::max_rel_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn delta(o: usize, i: usize) -> RealTensor {
        let mut k = RealTensor::zeros(&[o, i, 3, 3]);
        for c in 0..o.min(i) {
            k.set(&[c, c, 1, 1], 1.0);
        }
        k
    }

    #[test]
    fn delta_kernels_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = RealTensor::randn(&[1, 4, 3, 5, 4], 1.0, &mut rng);
        let k = SeparableKernel4d::new(delta(1, 1), delta(1, 1), (1, 1), (1, 1)).unwrap();
        assert_eq!(separable_conv4d(&c, &k).unwrap(), c);
    }

    #[test]
    fn all_ones_interior_is_81() {
        let c = RealTensor::ones(&[1, 5, 5, 5, 5]);
        let k = SeparableKernel4d::new(
            RealTensor::ones(&[1, 1, 3, 3]),
            RealTensor::ones(&[1, 1, 3, 3]),
            (1, 1),
            (1, 1),
        )
        .unwrap();
        let out = separable_conv4d(&c, &k).unwrap();
        assert_eq!(out.get(&[0, 2, 2, 2, 2]), 81.0);
        assert_eq!(out.get(&[0, 0, 0, 0, 0]), 16.0);
    }

    #[test]
    fn matches_conv4d_with_outer_product_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = RealTensor::randn(&[2, 4, 4, 4, 4], 1.0, &mut rng);
        let kq = RealTensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let ks = RealTensor::randn(&[3, 3, 3, 3], 1.0, &mut rng);
        let k = SeparableKernel4d::new(kq.clone(), ks.clone(), (1, 1), (2, 2)).unwrap();
        let full = RealTensor::from_fn(&[3, 2, 3, 3, 3, 3], |flat| {
            let mut r = flat;
            let e = r % 3; r /= 3;
            let d = r % 3; r /= 3;
            let b = r % 3; r /= 3;
            let a = r % 3; r /= 3;
            let ci = r % 2; r /= 2;
            let o = r;
            (0..3).map(|m| ks.get(&[o, m, d, e]) * kq.get(&[m, ci, a, b])).sum()
        });
        let want = conv4d(&c, &full, ConvGeometry::same(3), ConvGeometry::new((2, 2), (1, 1))).unwrap();
        let got = separable_conv4d(&c, &k).unwrap();
        assert_eq!(got.shape(), want.shape());
        assert!(max_rel_diff(got.data(), want.data(), 1e-12) < 1e-10);
    }

    #[test]
    fn stride_plans() {
        assert_eq!(plan_support_strides(8, 8).unwrap(), vec![(1, 1), (2, 2), (2, 2)]);
        assert_eq!(plan_support_strides(2, 2).unwrap(), vec![(1, 1)]);
        assert_eq!(plan_support_strides(15, 15).unwrap().len(), 4); // 15 → 8 → 4 → 2
        assert_eq!(plan_support_strides(60, 60).unwrap().len(), 6); // 60 → 30 → 15 → 8 → 4 → 2
        let p = plan_support_strides(8, 4).unwrap();
        assert_eq!(support_extent_after(8, 4, &p), (2, 2));
        assert!(plan_support_strides(1, 4).is_err());
    }

    #[test]
    fn aggregate_shapes_and_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = CorrelationTensor::new(RealTensor::rand_uniform(&[3, 6, 6, 8, 8], 0.0, 1.0, &mut rng)).unwrap();
        let stack = CamStack::init(3, 8, (8, 8), &mut rng).unwrap();
        assert_eq!(stack.layers.len(), 3);
        let agg = aggregate(&c, &stack, 8).unwrap();
        assert_eq!(agg.tensor().shape(), &[6, 6, 2, 2, 8]);
    }

    #[test]
    fn bad_schedule_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layers = vec![
            CamLayer::init(3, 8, (1, 1), &mut rng).unwrap(),
            CamLayer::init(8, 8, (2, 2), &mut rng).unwrap(),
        ];
        assert!(matches!(CamStack::new(layers, 4, 3, 8, (8, 8)), Err(Error::Config(_))));
    }

    #[test]
    fn topk_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = RealTensor::rand_uniform(&[1, 2, 2, 3, 3], 0.0, 1.0, &mut rng);
        let c = CorrelationTensor::new(t.clone()).unwrap();
        let all = topk_aggregate(&c, 9).unwrap();
        for u in 0..4 {
            let mut want: Vec<f64> = t.data()[u * 9..][..9].to_vec();
            want.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert_eq!(&all.data()[u * 9..][..9], &want[..]);
        }
        let mut onehot = RealTensor::zeros(&[1, 1, 1, 2, 2]);
        onehot.set(&[0, 0, 0, 1, 0], 1.0);
        let r = topk_aggregate(&CorrelationTensor::new(onehot).unwrap(), 3).unwrap();
        assert_eq!(r.data(), &[1.0, 0.0, 0.0]);
        assert!(topk_aggregate(&c, 10).is_err());
        assert!(topk_aggregate(&c, 0).is_err());
    }
}
