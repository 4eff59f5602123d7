//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Every reference value here comes from code written in this file
//! (direct loops, explicit matrices, hand-worked tables), not from the
//! library paths under test.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qclnet::autograd::{away_from_zero, finite_diff_check, Tape, Var};
use qclnet::cam::{aggregate_on, separable_conv4d, separable_conv4d_on, CamLayerVars, SeparableKernel4d};
use qclnet::config::Config;
use qclnet::episode::{
    fb_iou, forward_episode, fuse_kshot, miou, prior_weights, synth_episode, MetricsAccumulator,
};
use qclnet::erm::{binarize, decode_logits_on, quat_to_real_on, ConvVars, DecoderParams, DecoderVars};
use qclnet::model::{init_params, quaternion_layer_counts, ParamStore};
use qclnet::ops::{softmax, ConvGeometry, DEFAULT_EPS};
use qclnet::qclm::{
    augmented_covariance, encapsulate_on, quat_aggregation_on, quat_conv2d, quat_conv2d_on, quat_norm, quat_norm_on,
    qcl_block_on, BlockVariant, NormKind, QclBlockVars, QuatConvParams, QuatKernel, QuatNormParams, QuatTensor,
};
use qclnet::quat::{conjugate, hamilton, Quaternion};
use qclnet::train::train_toy;
use qclnet::weights::{decode, encode, load_weights, save_weights};
use qclnet::RealTensor;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12 * scale)).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

fn rand_q(rng: &mut ChaCha8Rng) -> Quaternion {
    Quaternion::new(
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
    )
    .unwrap()
}

/// Hamilton product written out component by component.
fn product_by_hand(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn qrel(a: Quaternion, b: Quaternion) -> f64 {
    let (a, b) = (a.to_array(), b.to_array());
    let scale = a.iter().chain(&b).fold(1e-300_f64, |m, v| m.max(v.abs()));
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn hamilton_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (i, j, k) = (
        Quaternion::pure(1.0, 0.0, 0.0).unwrap(),
        Quaternion::pure(0.0, 1.0, 0.0).unwrap(),
        Quaternion::pure(0.0, 0.0, 1.0).unwrap(),
    );
    ensure(hamilton(i, j) == k, || "i·j != k".into())?;
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (p, q, r) = (rand_q(&mut rng), rand_q(&mut rng), rand_q(&mut rng));
        let by_hand = Quaternion::from_array(product_by_hand(p.to_array(), q.to_array())).unwrap();
        worst = worst.max(qrel(hamilton(p, q), by_hand));
        worst = worst.max(qrel(hamilton(hamilton(p, q), r), hamilton(p, hamilton(q, r))));
        worst = worst.max(rel(hamilton(p, q).norm(), p.norm() * q.norm()));
        worst = worst.max(qrel(conjugate(hamilton(p, q)), hamilton(conjugate(q), conjugate(p))));
    }
    let t = start.elapsed();
    ensure(worst < 1e-10, || format!("max relative error {worst:e}"))?;
    ensure(t < Duration::from_secs(5), || format!("took {t:?}"))?;
    Ok(format!("10^4 triples, max rel {worst:.2e}, {:.2}s", t.as_secs_f64()))
}

// ---------------------------------------------------------------- 2

/// Direct-loop 2D convolution of `[C,H,W]` by `[O,C,k,k]`, stride 1, same
/// padding.
fn direct_conv(x: &RealTensor, k: &RealTensor) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kk) = (k.shape()[0], k.shape()[2]);
    let pad = (kk / 2) as isize;
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for i in 0..h {
            for jj in 0..w {
                let mut s = 0.0;
                for ci in 0..c {
                    for a in 0..kk {
                        for b in 0..kk {
                            let (y, z) = (i as isize + a as isize - pad, jj as isize + b as isize - pad);
                            if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < w {
                                s += k.get(&[oc, ci, a, b]) * x.get(&[ci, y as usize, z as usize]);
                            }
                        }
                    }
                }
                out[(oc * h + i) * w + jj] = s;
            }
        }
    }
    out
}

/// Real `[4O,4C,k,k]` kernel assembled from the 4×4 block pattern
///
/// ```text
/// Wr -Wx -Wy -Wz
/// Wx  Wr -Wz  Wy
/// Wy  Wz  Wr -Wx
/// Wz -Wy  Wx  Wr
/// ```
fn block_kernel(w: &[RealTensor; 4]) -> RealTensor {
    let pattern: [[(usize, f64); 4]; 4] = [
        [(0, 1.0), (1, -1.0), (2, -1.0), (3, -1.0)],
        [(1, 1.0), (0, 1.0), (3, -1.0), (2, 1.0)],
        [(2, 1.0), (3, 1.0), (0, 1.0), (1, -1.0)],
        [(3, 1.0), (2, -1.0), (1, 1.0), (0, 1.0)],
    ];
    let (o, c, kk) = (w[0].shape()[0], w[0].shape()[1], w[0].shape()[2]);
    let mut big = RealTensor::zeros(&[4 * o, 4 * c, kk, kk]);
    for (br, row) in pattern.iter().enumerate() {
        for (bc, &(src, sign)) in row.iter().enumerate() {
            for oc in 0..o {
                for ci in 0..c {
                    for a in 0..kk {
                        for b in 0..kk {
                            big.set(&[br * o + oc, bc * c + ci, a, b], sign * w[src].get(&[oc, ci, a, b]));
                        }
                    }
                }
            }
        }
    }
    big
}

fn block_matrix_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (c, o) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let kk = if rng.random_bool(0.5) { 1 } else { 3 };
        let x = RealTensor::randn(&[4, c, h, w], 1.0, &mut rng);
        let ws: [RealTensor; 4] = std::array::from_fn(|_| RealTensor::randn(&[o, c, kk, kk], 1.0, &mut rng));
        let params = ok(QuatConvParams::zero_bias(ws.clone()))?;
        let got = ok(quat_conv2d(&ok(QuatTensor::from_stacked(&x))?, &params, ConvGeometry::same(kk)))?.stacked();
        let want = direct_conv(&ok(x.reshape(&[4 * c, h, w]))?, &block_kernel(&ws));
        worst = worst.max(max_rel(got.data(), &want));
    }
    let t = start.elapsed();
    ensure(worst < 1e-10, || format!("max relative error {worst:e}"))?;
    ensure(t < Duration::from_secs(30), || format!("took {t:?}"))?;
    Ok(format!("100 configs, max rel {worst:.2e}, {:.2}s", t.as_secs_f64()))
}

// ---------------------------------------------------------------- 3

/// Naive 4D convolution with the full kernel
/// `K[o,c,a,b,d,e] = Σ_m Ks[o,m,d,e]·Kq[m,c,a,b]`, padding 1 everywhere,
/// query stride 1 and support stride `ss`.
fn naive_outer_conv4d(x: &RealTensor, kq: &RealTensor, ks: &RealTensor, ss: (usize, usize)) -> Vec<f64> {
    let s = x.shape();
    let (c, hq, wq, hs, ws) = (s[0], s[1], s[2], s[3], s[4]);
    let (mid, o) = (kq.shape()[0], ks.shape()[0]);
    let mut full = vec![0.0; o * c * 81];
    for oc in 0..o {
        for ci in 0..c {
            for a in 0..3 {
                for b in 0..3 {
                    for d in 0..3 {
                        for e in 0..3 {
                            let v: f64 = (0..mid).map(|m| ks.get(&[oc, m, d, e]) * kq.get(&[m, ci, a, b])).sum();
                            full[((((oc * c + ci) * 3 + a) * 3 + b) * 3 + d) * 3 + e] = v;
                        }
                    }
                }
            }
        }
    }
    let (hs2, ws2) = ((hs - 1) / ss.0 + 1, (ws - 1) / ss.1 + 1);
    let at = |ci: usize, i: isize, j: isize, u: isize, v: isize| -> f64 {
        if i < 0 || j < 0 || u < 0 || v < 0 || i >= hq as isize || j >= wq as isize || u >= hs as isize || v >= ws as isize {
            0.0
        } else {
            x.get(&[ci, i as usize, j as usize, u as usize, v as usize])
        }
    };
    let mut out = Vec::with_capacity(o * hq * wq * hs2 * ws2);
    for oc in 0..o {
        for i in 0..hq {
            for j in 0..wq {
                for u in 0..hs2 {
                    for v in 0..ws2 {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for a in 0..3 {
                                for b in 0..3 {
                                    for d in 0..3 {
                                        for e in 0..3 {
                                            let kv = full[((((oc * c + ci) * 3 + a) * 3 + b) * 3 + d) * 3 + e];
                                            acc += kv
                                                * at(
                                                    ci,
                                                    (i + a) as isize - 1,
                                                    (j + b) as isize - 1,
                                                    (u * ss.0 + d) as isize - 1,
                                                    (v * ss.1 + e) as isize - 1,
                                                );
                                        }
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}

fn factorization_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        // the support pass keeps the channel count
        let (c, mid) = (rng.random_range(1..=2), rng.random_range(1..=3));
        let o = mid;
        let e: Vec<usize> = (0..4).map(|_| rng.random_range(1..=4)).collect();
        let ss = (rng.random_range(1..=2), rng.random_range(1..=2));
        let x = RealTensor::randn(&[c, e[0], e[1], e[2], e[3]], 1.0, &mut rng);
        let kq = RealTensor::randn(&[mid, c, 3, 3], 1.0, &mut rng);
        let ks = RealTensor::randn(&[o, mid, 3, 3], 1.0, &mut rng);
        let got = ok(separable_conv4d(&x, &ok(SeparableKernel4d::new(kq.clone(), ks.clone(), (1, 1), ss))?))?;
        let want = naive_outer_conv4d(&x, &kq, &ks, ss);
        worst = worst.max(max_rel(got.data(), &want));
    }
    ensure(worst < 1e-10, || format!("max relative error {worst:e}"))?;
    Ok(format!("50 instances up to 4x4x4x4, max rel {worst:.2e}"))
}

// ---------------------------------------------------------------- 4

fn parameter_counts() -> Outcome {
    let cfg = Config::default();
    let spec = ok(cfg.model_spec())?;
    let store = ok(init_params(&spec, 0))?;
    let layers = quaternion_layer_counts(&store);
    let expected_layers = cfg.extents.len() * cfg.qclm_depth + cfg.extents.len() - 1;
    ensure(layers.len() == expected_layers, || format!("{} layers, expected {expected_layers}", layers.len()))?;
    for l in &layers {
        let w = ok(store.get(&format!("{}.w", l.name)))?;
        let s = w.shape();
        let (o, c, kk) = (s[1], s[2], s[3] * s[4]);
        // four real o×c kernels hold the quaternion layer
        ensure(l.quaternion == 4 * o * c * kk && l.quaternion == w.len(), || format!("{}: quaternion count {}", l.name, l.quaternion))?;
        // a dense real layer between 4c and 4o channels
        ensure(l.real_replacement == (4 * o) * (4 * c) * kk, || format!("{}: real count {}", l.name, l.real_replacement))?;
        ensure(l.real_replacement == 4 * l.quaternion, || format!("{}: ratio not 4", l.name))?;
        ensure(l.group_conv == l.quaternion, || format!("{}: group count {}", l.name, l.group_conv))?;
    }
    Ok(format!("{} layers at D = {}, real/quaternion = 4 and group = quaternion on each", layers.len(), cfg.d))
}

// ---------------------------------------------------------------- 5

fn qn_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (groups, c, h, w) = (4, 8, 32, 32);
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for _ in 0..3 {
        let std = rng.random_range(4.0..10.0);
        let shift = rng.random_range(-5.0..5.0);
        let x = RealTensor::randn(&[4, c, h, w], std, &mut rng).map(|v| v + shift);
        let out = ok(quat_norm(&ok(QuatTensor::from_stacked(&x))?, &QuatNormParams::identity(groups)))?.stacked();
        let per = c / groups * h * w;
        ensure(4 * per >= 4096, || "group too small".into())?;
        for g in 0..groups {
            let mut comp_var = 0.0;
            for d in 0..4 {
                let start = (d * c + g * c / groups) * h * w;
                let seg = &out.data()[start..start + per];
                let m = seg.iter().sum::<f64>() / per as f64;
                worst_mean = worst_mean.max(m.abs());
                comp_var += seg.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / per as f64 / 4.0;
            }
            worst_var = worst_var.max((comp_var - 1.0).abs());
        }
    }
    ensure(worst_mean < 1e-8, || format!("mean component {worst_mean:e}"))?;
    ensure(worst_var < 1e-6, || format!("variance off by {worst_var:e}"))?;
    Ok(format!("4096 elements per group, |mean| {worst_mean:.1e}, |var-1| {worst_var:.1e}"))
}

// ---------------------------------------------------------------- 6

fn q_properness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = 2.0;
    let normal = rand_distr::Normal::new(0.0, f64::sqrt(v)).unwrap();
    let sample: Vec<Quaternion> = (0..100_000)
        .map(|_| Quaternion::from_array(std::array::from_fn(|_| rng.sample(normal))).unwrap())
        .collect();
    let cov = ok(augmented_covariance(&sample))?;
    let mut worst: f64 = 0.0;
    for (a, row) in cov.iter().enumerate() {
        for (b, &x) in row.iter().enumerate() {
            let target = if a == b { v } else { 0.0 };
            worst = worst.max((x - target).abs() / v);
        }
    }
    ensure(worst < 0.05, || format!("worst elementwise deviation {worst:.4} of v"))?;
    Ok(format!("n = 10^5, worst deviation {:.2}% of v", 100.0 * worst))
}

// ---------------------------------------------------------------- 7

fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> qclnet::Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let w = RealTensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let wv = t.constant(w);
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    let mut results: Vec<(&str, f64)> = Vec::new();
    let mut check = |name: &'static str, x: &RealTensor, f: &dyn Fn(&mut Tape, Var) -> qclnet::Result<Var>| -> Result<(), String> {
        assert!(x.len() <= 200, "{name} has {} elements", x.len());
        let r = ok(finite_diff_check(f, x, h))?;
        results.push((name, r.max_rel_error));
        Ok(())
    };
    let mut randn = |s: &[usize]| RealTensor::randn(s, 1.0, &mut rng);

    // conv2d: input, kernel, bias
    let (x, k, b) = (randn(&[2, 2, 4, 4]), randn(&[3, 2, 3, 3]), randn(&[3]));
    let geo = ConvGeometry::new((2, 1), (1, 1));
    check("conv2d.input", &x, &|t, v| {
        let (kv, bv) = (t.constant(k.clone()), t.constant(b.clone()));
        let y = t.conv2d(v, kv, Some(bv), geo)?;
        weighted_sum(t, y, 1)
    })?;
    check("conv2d.kernel", &k, &|t, v| {
        let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, v, Some(bv), geo)?;
        weighted_sum(t, y, 1)
    })?;
    check("conv2d.bias", &b, &|t, v| {
        let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
        let y = t.conv2d(xv, kv, Some(v), geo)?;
        weighted_sum(t, y, 1)
    })?;

    // group norm
    let (x, g, be) = (randn(&[4, 3, 3]), randn(&[4]), randn(&[4]));
    check("group_norm.input", &x, &|t, v| {
        let (gv, bv) = (t.constant(g.clone()), t.constant(be.clone()));
        let y = t.group_norm(v, gv, bv, 2, DEFAULT_EPS)?;
        weighted_sum(t, y, 2)
    })?;
    check("group_norm.gamma", &g, &|t, v| {
        let (xv, bv) = (t.constant(x.clone()), t.constant(be.clone()));
        let y = t.group_norm(xv, v, bv, 2, DEFAULT_EPS)?;
        weighted_sum(t, y, 2)
    })?;
    check("group_norm.beta", &be, &|t, v| {
        let (xv, gv) = (t.constant(x.clone()), t.constant(g.clone()));
        let y = t.group_norm(xv, gv, v, 2, DEFAULT_EPS)?;
        weighted_sum(t, y, 2)
    })?;

    // elementwise and layout ops
    let x = away_from_zero(&randn(&[2, 3, 4]), 0.05);
    check("relu", &x, &|t, v| {
        let y = t.relu(v);
        weighted_sum(t, y, 3)
    })?;
    check("permute_reshape", &x, &|t, v| {
        let y = t.permute(v, &[2, 0, 1])?;
        let y = t.reshape(y, &[8, 3])?;
        weighted_sum(t, y, 4)
    })?;
    check("concat_slice", &x, &|t, v| {
        let a = t.slice0(v, 1, 2)?;
        let y = t.concat0(&[v, a])?;
        weighted_sum(t, y, 5)
    })?;
    check("upsample2x", &x, &|t, v| {
        let y = t.upsample2x(v)?;
        weighted_sum(t, y, 6)
    })?;
    check("upsample_crop", &x, &|t, v| {
        let y = t.upsample2x(v)?;
        let y = t.crop_hw(y, 5, 7)?;
        weighted_sum(t, y, 7)
    })?;
    check("softmax", &x, &|t, v| {
        let y = t.softmax(v, 0)?;
        weighted_sum(t, y, 8)
    })?;
    let logits = randn(&[2, 4, 5]);
    let target = RealTensor::from_fn(&[4, 5], |i| f64::from(u8::from(i % 3 == 0)));
    check("softmax_cross_entropy", &logits, &|t, v| t.softmax_cross_entropy(v, &target))?;

    // separable 4D conv and the aggregation stack
    let (c4, kq, ks) = (randn(&[1, 3, 3, 4, 4]), randn(&[2, 1, 3, 3]), randn(&[2, 2, 3, 3]));
    let (gq, gs) = (ConvGeometry::same(3), ConvGeometry::new((2, 2), (1, 1)));
    check("separable_conv4d.input", &c4, &|t, v| {
        let (a, b) = (t.constant(kq.clone()), t.constant(ks.clone()));
        let y = separable_conv4d_on(t, v, a, b, gq, gs)?;
        weighted_sum(t, y, 9)
    })?;
    check("separable_conv4d.query_kernel", &kq, &|t, v| {
        let (a, b) = (t.constant(c4.clone()), t.constant(ks.clone()));
        let y = separable_conv4d_on(t, a, v, b, gq, gs)?;
        weighted_sum(t, y, 9)
    })?;
    check("separable_conv4d.support_kernel", &ks, &|t, v| {
        let (a, b) = (t.constant(c4.clone()), t.constant(kq.clone()));
        let y = separable_conv4d_on(t, a, b, v, gq, gs)?;
        weighted_sum(t, y, 9)
    })?;
    let layer = |t: &mut Tape, kq_v: Var| CamLayerVars {
        k_query: kq_v,
        k_support: t.constant(ks.clone()),
        gamma: t.constant(RealTensor::full(&[2], 1.2)),
        beta: t.constant(RealTensor::full(&[2], 0.1)),
        stride_s: (2, 2),
    };
    check("cam_aggregate+encapsulate", &c4, &|t, v| {
        let kq_v = t.constant(kq.clone());
        let l = layer(t, kq_v);
        let y = aggregate_on(t, v, &[l], 1)?;
        let y = encapsulate_on(t, y)?;
        weighted_sum(t, y, 10)
    })?;
    check("cam_aggregate.query_kernel", &kq, &|t, v| {
        let cv = t.constant(c4.clone());
        let l = layer(t, v);
        let y = aggregate_on(t, cv, &[l], 1)?;
        weighted_sum(t, y, 10)
    })?;

    // quaternion conv, both kernels, against input, weight and bias
    let (qx, qw, qb) = (randn(&[4, 2, 3, 3]), randn(&[4, 2, 2, 3, 3]), randn(&[4, 2]));
    for (kind, names) in [
        (QuatKernel::Hamilton, ["quat_conv.hamilton.input", "quat_conv.hamilton.weight", "quat_conv.hamilton.bias"]),
        (QuatKernel::Group, ["quat_conv.group.input", "quat_conv.group.weight", "quat_conv.group.bias"]),
    ] {
        check(names[0], &qx, &|t, v| {
            let (w, b) = (t.constant(qw.clone()), t.constant(qb.clone()));
            let y = quat_conv2d_on(t, kind, v, w, Some(b), ConvGeometry::same(3))?;
            weighted_sum(t, y, 11)
        })?;
        check(names[1], &qw, &|t, v| {
            let (x, b) = (t.constant(qx.clone()), t.constant(qb.clone()));
            let y = quat_conv2d_on(t, kind, x, v, Some(b), ConvGeometry::same(3))?;
            weighted_sum(t, y, 11)
        })?;
        check(names[2], &qb, &|t, v| {
            let (x, w) = (t.constant(qx.clone()), t.constant(qw.clone()));
            let y = quat_conv2d_on(t, kind, x, w, Some(v), ConvGeometry::same(3))?;
            weighted_sum(t, y, 11)
        })?;
    }
    // plain sum of the Hamilton forward, as a second objective
    check("quat_conv.hamilton.sum", &qw, &|t, v| {
        let x = t.constant(qx.clone());
        let y = quat_conv2d_on(t, QuatKernel::Hamilton, x, v, None, ConvGeometry::same(3))?;
        Ok(t.sum(y))
    })?;

    // quaternion norm, both statistics kinds
    let (ng, nb) = (randn(&[2]), randn(&[4, 2]));
    let nx = randn(&[4, 4, 3, 3]);
    for (kind, names) in [
        (NormKind::Quaternion, ["quat_norm.qn.input", "quat_norm.qn.gamma", "quat_norm.qn.beta"]),
        (NormKind::PlaneGroup, ["quat_norm.gn.input", "quat_norm.gn.gamma", "quat_norm.gn.beta"]),
    ] {
        check(names[0], &nx, &|t, v| {
            let (g, b) = (t.constant(ng.clone()), t.constant(nb.clone()));
            let y = quat_norm_on(t, kind, v, g, b, DEFAULT_EPS)?;
            weighted_sum(t, y, 12)
        })?;
        check(names[1], &ng, &|t, v| {
            let (x, b) = (t.constant(nx.clone()), t.constant(nb.clone()));
            let y = quat_norm_on(t, kind, x, v, b, DEFAULT_EPS)?;
            weighted_sum(t, y, 12)
        })?;
        check(names[2], &nb, &|t, v| {
            let (x, g) = (t.constant(nx.clone()), t.constant(ng.clone()));
            let y = quat_norm_on(t, kind, x, g, v, DEFAULT_EPS)?;
            weighted_sum(t, y, 12)
        })?;
    }

    // full block and coarse-to-fine merge
    let bw = randn(&[4, 2, 2, 3, 3]).scale(0.5);
    let bb = randn(&[4, 2]);
    let block_vars = |t: &mut Tape, w: Var| QclBlockVars {
        weight: w,
        bias: t.constant(bb.clone()),
        gamma: t.constant(RealTensor::full(&[1], 1.3)),
        beta: t.constant(RealTensor::full(&[4, 1], 0.2)),
    };
    let bx = randn(&[4, 2, 3, 3]);
    check("qcl_block.input", &bx, &|t, v| {
        let w = t.constant(bw.clone());
        let vars = block_vars(t, w);
        let y = qcl_block_on(t, BlockVariant::default(), v, &vars, DEFAULT_EPS)?;
        weighted_sum(t, y, 13)
    })?;
    check("qcl_block.weight", &bw, &|t, v| {
        let x = t.constant(bx.clone());
        let vars = block_vars(t, v);
        let y = qcl_block_on(t, BlockVariant::default(), x, &vars, DEFAULT_EPS)?;
        weighted_sum(t, y, 13)
    })?;
    let deep = randn(&[4, 2, 2, 2]);
    check("quat_aggregation.deep", &deep, &|t, v| {
        let fine = t.constant(bx.clone());
        let w = t.constant(bw.clone());
        let vars = block_vars(t, w);
        let y = quat_aggregation_on(t, BlockVariant::default(), v, fine, &vars, DEFAULT_EPS)?;
        weighted_sum(t, y, 14)
    })?;

    // readout and decoder
    let rx = randn(&[4, 3, 3, 3]);
    check("quat_to_real", &rx, &|t, v| {
        let y = quat_to_real_on(t, v)?;
        weighted_sum(t, y, 15)
    })?;
    let dec = ok(DecoderParams::init(3, &[2, 2], 2, 3, &mut ChaCha8Rng::seed_from_u64(70)))?;
    let fr = randn(&[3, 2, 2]);
    let skips = [randn(&[2, 4, 4]), randn(&[2, 8, 8])];
    let head_k = dec.head.kernel.clone();
    let decode_with = |t: &mut Tape, fr_v: Var, head: Option<Var>| -> qclnet::Result<Var> {
        let mut vars = DecoderVars::constants(t, &dec);
        if let Some(h) = head {
            vars.head = ConvVars { kernel: h, bias: vars.head.bias };
        }
        let s: Vec<Var> = skips.iter().map(|s| t.constant(s.clone())).collect();
        decode_logits_on(t, fr_v, &s, &vars)
    };
    let target = RealTensor::from_fn(&[8, 8], |i| f64::from(u8::from((i / 8 + i % 8) % 3 == 0)));
    check("decode.input", &fr, &|t, v| {
        let y = decode_with(t, v, None)?;
        t.softmax_cross_entropy(y, &target)
    })?;
    check("decode.head", &head_k, &|t, v| {
        let f = t.constant(fr.clone());
        let y = decode_with(t, f, Some(v))?;
        t.softmax_cross_entropy(y, &target)
    })?;

    let t = start.elapsed();
    let (worst_name, worst) = results.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<String> = results.iter().filter(|(_, e)| e.is_nan() || *e >= 1e-4).map(|(n, e)| format!("{n} {e:.2e}")).collect();
    ensure(failing.is_empty(), || format!("over tolerance: {}", failing.join(", ")))?;
    ensure(t < Duration::from_secs(120), || format!("took {t:?}"))?;
    Ok(format!("{} checks, worst {worst_name} {worst:.2e}, {:.1}s", results.len(), t.as_secs_f64()))
}

// ---------------------------------------------------------------- 8

const TOY: &str = "D = 16
extents = 8, 4, 2
layer_counts = 2, 2, 2
feature_channels = 8
skip_channels = 4
skip_width = 8
decoder_width = 8
qclm_depth = 2
steps = 300
lr = 1e-3
seed = 7
";

fn learnability() -> Outcome {
    let start = Instant::now();
    let cfg = ok(Config::parse(TOY))?;
    let spec = ok(cfg.model_spec())?;
    let run = || -> qclnet::Result<_> {
        let ep = synth_episode(cfg.seed, 1, &spec)?;
        train_toy(&spec, init_params(&spec, cfg.seed)?, &[ep], cfg.steps, cfg.lr, cfg.tau, |_| {})
    };
    let (a, b) = std::thread::scope(|s| {
        let ha = s.spawn(run);
        let hb = s.spawn(run);
        (ha.join().unwrap(), hb.join().unwrap())
    });
    let (a, b) = (ok(a)?, ok(b)?);
    let t = start.elapsed();
    let (first, last) = (a.records[0], *a.records.last().unwrap());
    ensure(a.records.len() == 301, || format!("{} records", a.records.len()))?;
    ensure(last.loss < 0.25 * first.loss, || format!("loss {:.4} -> {:.4}", first.loss, last.loss))?;
    ensure(last.miou > 0.7, || format!("final mIoU {}", last.miou))?;
    ensure(a.records == b.records, || "two runs gave different curves".into())?;
    ensure(encode(&a.params) == encode(&b.params), || "two runs gave different weights".into())?;
    ensure(t < Duration::from_secs(300), || format!("took {t:?}"))?;
    Ok(format!(
        "CE {:.4} -> {:.2e} ({:.3}%), mIoU {:.3}, identical reruns, {:.0}s",
        first.loss,
        last.loss,
        100.0 * last.loss / first.loss,
        last.miou,
        t.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 9

fn soft_from_fg(fg: &[f64], h: usize, w: usize) -> RealTensor {
    let mut d: Vec<f64> = fg.iter().map(|f| 1.0 - f).collect();
    d.extend_from_slice(fg);
    RealTensor::new(&[2, h, w], d).unwrap()
}

fn kshot_fusion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // priors in [0,1] even with signed features and empty support masks
    for _ in 0..20 {
        let q = RealTensor::randn(&[6, 4, 4], 1.0, &mut rng);
        let mut s = RealTensor::randn(&[6, 5, 3], 1.0, &mut rng);
        if rng.random_bool(0.3) {
            s = RealTensor::zeros(&[6, 5, 3]);
        }
        for p in ok(prior_weights(&q, &[s]))? {
            ensure(p.data().iter().all(|v| (0.0..=1.0).contains(v)), || "prior outside [0,1]".into())?;
        }
    }
    // strict threshold at the boundary
    let half = soft_from_fg(&[0.5, 0.75, 0.25, 0.5], 2, 2);
    let m = ok(fuse_kshot(std::slice::from_ref(&half), &[RealTensor::full(&[2, 2], 0.3)], 0.5))?;
    ensure(m.data() == [0.0, 1.0, 0.0, 0.0], || format!("tau = 0.5 boundary gave {:?}", m.data()))?;
    let m = ok(fuse_kshot(&[half.clone(), half], &[RealTensor::zeros(&[2, 2]), RealTensor::zeros(&[2, 2])], 0.25))?;
    ensure(m.data() == [1.0, 1.0, 0.0, 1.0], || format!("tau = 0.25 boundary gave {:?}", m.data()))?;
    // K = 1 against single-shot binarization
    for _ in 0..200 {
        let logits = RealTensor::randn(&[2, 6, 5], 2.0, &mut rng);
        let soft = ok(softmax(&logits, 0))?;
        let prior = RealTensor::rand_uniform(&[6, 5], 0.0, 1.0, &mut rng);
        let fused = ok(fuse_kshot(std::slice::from_ref(&soft), &[prior], 0.5))?;
        let single = ok(binarize(&soft))?;
        let same = fused.data().iter().zip(single.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || "K = 1 fusion differs from binarization".into())?;
    }
    // K = 5 against a per-pixel softmax written out here
    let (k, h, w) = (5, 4, 6);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let fgs: Vec<Vec<f64>> = (0..k).map(|_| (0..h * w).map(|_| rng.random::<f64>()).collect()).collect();
        let pri: Vec<Vec<f64>> = (0..k).map(|_| (0..h * w).map(|_| rng.random::<f64>()).collect()).collect();
        let tau = rng.random_range(0.2..0.8);
        let softs: Vec<RealTensor> = fgs.iter().map(|f| soft_from_fg(f, h, w)).collect();
        let priors: Vec<RealTensor> = pri.iter().map(|p| RealTensor::new(&[h, w], p.clone()).unwrap()).collect();
        let got = ok(qclnet::episode::fused_foreground(&softs, &priors))?;
        let mask = ok(fuse_kshot(&softs, &priors, tau))?;
        for px in 0..h * w {
            let z: f64 = (0..k).map(|s| pri[s][px].exp()).sum();
            let want: f64 = (0..k).map(|s| pri[s][px].exp() / z * fgs[s][px]).sum();
            worst = worst.max((got.data()[px] - want).abs());
            let bit = if want > tau { 1.0 } else { 0.0 };
            if (want - tau).abs() > 1e-9 {
                ensure(mask.data()[px] == bit, || format!("pixel {px}: mask {} vs oracle {bit}", mask.data()[px]))?;
            }
        }
    }
    ensure(worst < 1e-12, || format!("K = 5 fusion off by {worst:e}"))?;
    Ok(format!("priors in [0,1], strict boundary, K=1 bit-exact, K=5 max abs {worst:.1e}"))
}

// ---------------------------------------------------------------- 10

/// `(class, tp, fp, fn, tn)` per episode, and hand-worked (mIoU, FB-IoU).
struct Table {
    episodes: &'static [(u64, usize, usize, usize, usize)],
    miou: f64,
    fb_iou: f64,
}

const TABLES: [Table; 10] = [
    // fg 8/10, bg 10/12
    Table { episodes: &[(1, 8, 2, 0, 10)], miou: 0.8, fb_iou: 49.0 / 60.0 },
    Table { episodes: &[(1, 5, 0, 0, 15)], miou: 1.0, fb_iou: 1.0 },
    // bg 12/20
    Table { episodes: &[(1, 0, 4, 4, 12)], miou: 0.0, fb_iou: 0.3 },
    // 3/4 and 1/4; pooled fg 4/8, bg 32/36
    Table { episodes: &[(1, 3, 1, 0, 16), (2, 1, 1, 2, 16)], miou: 0.5, fb_iou: 25.0 / 36.0 },
    // one class over two episodes pools to 6/8; bg 32/34
    Table { episodes: &[(7, 6, 0, 0, 14), (7, 0, 1, 1, 18)], miou: 0.75, fb_iou: 115.0 / 136.0 },
    // class 1 never appears and is skipped; bg 38/39
    Table { episodes: &[(1, 0, 0, 0, 20), (2, 1, 0, 1, 18)], miou: 0.5, fb_iou: 115.0 / 156.0 },
    // nothing to score in the foreground
    Table { episodes: &[(3, 0, 0, 0, 20)], miou: 0.0, fb_iou: 0.5 },
    // 1, 1/2, 0; pooled fg 4/9, bg 51/56
    Table { episodes: &[(1, 2, 0, 0, 18), (2, 2, 2, 0, 16), (3, 0, 0, 3, 17)], miou: 0.5, fb_iou: 683.0 / 1008.0 },
    // everything predicted foreground
    Table { episodes: &[(4, 10, 10, 0, 0)], miou: 0.5, fb_iou: 0.25 },
    // everything predicted background
    Table { episodes: &[(5, 0, 0, 10, 10)], miou: 0.0, fb_iou: 0.25 },
];

fn metric_tables() -> Outcome {
    for (n, t) in TABLES.iter().enumerate() {
        let mut acc = MetricsAccumulator::new();
        for &(class, tp, fp, fn_, tn) in t.episodes {
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            for (p, g, count) in [(1.0, 1.0, tp), (1.0, 0.0, fp), (0.0, 1.0, fn_), (0.0, 0.0, tn)] {
                pred.extend(std::iter::repeat_n(p, count));
                truth.extend(std::iter::repeat_n(g, count));
            }
            let len = pred.len();
            ok(acc.add(class, &RealTensor::new(&[1, len], pred).unwrap(), &RealTensor::new(&[1, len], truth).unwrap()))?;
        }
        let (m, f) = (miou(&acc), fb_iou(&acc));
        // exact up to the last bit of the final division
        let close = |a: f64, b: f64| (a - b).abs() <= 2.0 * f64::EPSILON * b.abs().max(1.0);
        ensure(close(m, t.miou), || format!("table {}: mIoU {m} vs {}", n + 1, t.miou))?;
        ensure(close(f, t.fb_iou), || format!("table {}: FB-IoU {f} vs {}", n + 1, t.fb_iou))?;
    }
    Ok("10 tables, mIoU and FB-IoU match".into())
}

// ---------------------------------------------------------------- 11

fn determinism_and_serialization() -> Outcome {
    let cfg = ok(Config::parse(TOY))?;
    let spec = ok(cfg.model_spec())?;
    let params = ok(init_params(&spec, 11))?;
    let ep = ok(synth_episode(11, 3, &spec))?;
    let bits = |o: &qclnet::episode::EpisodeOutput| -> Vec<u64> {
        o.per_shot_soft
            .iter()
            .chain(&o.priors)
            .chain([&o.fused, &o.mask])
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let mut runs = Vec::new();
    for threads in [1, 4, 1, 3] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let out = ok(pool.install(|| forward_episode(&ep, &spec, &params, cfg.tau)))?;
        runs.push(bits(&out));
    }
    ensure(runs.windows(2).all(|w| w[0] == w[1]), || "forward differs across runs or thread counts".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut store = ParamStore::new();
    for (name, t) in params.iter() {
        store.insert(name, t.clone());
    }
    store.insert("extra.tiny", RealTensor::new(&[3], vec![f64::MIN_POSITIVE, -0.0, f64::MAX]).unwrap());
    store.insert("extra.scalar", RealTensor::scalar(rng.random()));
    let back = ok(decode(&encode(&store)))?;
    let same = |a: &ParamStore, b: &ParamStore| {
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| {
                na == nb && ta.shape() == tb.shape() && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    };
    ensure(same(&store, &back), || "in-memory round trip changed bits".into())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("w.qclw");
    ok(save_weights(&params, &path))?;
    let loaded = ok(load_weights(&path, &spec))?;
    ensure(same(&params, &loaded), || "file round trip changed bits".into())?;
    Ok(format!("4 forwards over 1/4/1/3 threads identical, {} tensors round-trip bit-exact", store.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("hamilton algebra", hamilton_algebra),
        ("quaternion conv = block-matrix real conv", block_matrix_oracle),
        ("separable 4D conv = outer-product conv4d", factorization_oracle),
        ("parameter counts", parameter_counts),
        ("quaternion norm statistics", qn_statistics),
        ("Q-properness of an isotropic sample", q_properness),
        ("gradient suite", gradient_suite),
        ("toy learnability", learnability),
        ("K-shot fusion", kshot_fusion),
        ("metric formulas", metric_tables),
        ("determinism and weight round trip", determinism_and_serialization),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", n + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {e}", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
