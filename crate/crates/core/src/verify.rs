//! Self-check suites behind `qclnet verify`: algebraic identities, oracle
//! comparisons and invariants of every module, each reporting its largest
//! observed error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{away_from_zero, finite_diff_check};
use crate::cam::{separable_conv4d, SeparableKernel4d};
use crate::config::Config;
use crate::correlation::cosine_correlation;
use crate::episode::{fb_iou, fuse_kshot, fused_foreground, miou, Counts, MetricsAccumulator};
use crate::erm::{component_weights, decode, quat_to_real_on, DecoderParams};
use crate::error::Result;
use crate::model::ParamStore;
use crate::ops::{conv2d_batched, conv4d, ConvGeometry, DEFAULT_EPS};
use crate::qclm::{
    augmented_covariance, quat_conv2d_on, quat_conv2d_with, quat_norm, quat_norm_on, NormKind, QuatConvParams,
    QuatKernel, QuatNormParams, QuatTensor,
};
use crate::quat::Quaternion;
use crate::tensor::{max_rel_diff, RealTensor};
use crate::weights::{decode as decode_weights, encode};

/// One line of the verify report.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub max_error: f64,
    pub detail: String,
}

impl SuiteResult {
    fn check(name: &'static str, max_error: f64, tol: f64, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed: max_error.is_finite() && max_error < tol,
            max_error,
            detail: detail.into(),
        }
    }

    fn failed(name: &'static str, err: crate::Error) -> Self {
        Self {
            name,
            passed: false,
            max_error: f64::NAN,
            detail: err.to_string(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<16} max_error={:.3e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Swap the Hamilton kernel for one with a flipped sign, to prove the
    /// oracle suites notice.
    pub corrupt_hamilton: bool,
    pub seed: u64,
}

pub const SUITES: [&str; 10] = [
    "quat_core",
    "tensor_ops",
    "autograd",
    "correlation",
    "cam",
    "hamilton_oracle",
    "qclm",
    "erm",
    "episode_runtime",
    "cli",
];

/// Runs the named suite, or every suite for `None`. Unknown names give
/// `None`.
pub fn run(suite: Option<&str>, opts: VerifyOptions) -> Option<Vec<SuiteResult>> {
    let names: Vec<&'static str> = match suite {
        None => SUITES.to_vec(),
        Some(s) => vec![*SUITES.iter().find(|n| **n == s)?],
    };
    Some(names.into_iter().map(|n| run_one(n, opts)).collect())
}

fn run_one(name: &'static str, opts: VerifyOptions) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = match name {
        "quat_core" => quat_core(&mut rng),
        "tensor_ops" => tensor_ops(&mut rng),
        "autograd" => autograd(&mut rng),
        "correlation" => correlation(&mut rng),
        "cam" => cam(&mut rng),
        "hamilton_oracle" => hamilton_oracle(&mut rng, opts.corrupt_hamilton),
        "qclm" => qclm(&mut rng),
        "erm" => erm(&mut rng),
        "episode_runtime" => episode_runtime(&mut rng),
        _ => cli(&mut rng),
    };
    r.unwrap_or_else(|e| SuiteResult::failed(name, e))
}

fn rand_quat(rng: &mut ChaCha8Rng) -> Quaternion {
    Quaternion {
        r: rng.random_range(-2.0..2.0),
        x: rng.random_range(-2.0..2.0),
        y: rng.random_range(-2.0..2.0),
        z: rng.random_range(-2.0..2.0),
    }
}

fn qdiff(a: Quaternion, b: Quaternion) -> f64 {
    let (a, b) = (a.to_array(), b.to_array());
    let scale = a.iter().chain(&b).fold(1e-300_f64, |m, v| m.max(v.abs()));
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn quat_core(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut worst: f64 = qdiff(Quaternion::I * Quaternion::J, Quaternion::K);
    for _ in 0..10_000 {
        let (p, q, r) = (rand_quat(rng), rand_quat(rng), rand_quat(rng));
        worst = worst.max(qdiff((p * q) * r, p * (q * r)));
        let (n, m) = ((p * q).norm(), p.norm() * q.norm());
        worst = worst.max((n - m).abs() / m.max(1e-300));
        worst = worst.max(qdiff((p * q).conjugate(), q.conjugate() * p.conjugate()));
    }
    Ok(SuiteResult::check("quat_core", worst, 1e-10, "10^4 triples: associativity, |pq|=|p||q|, conj(pq)=conj(q)conj(p), ij=k"))
}

/// Straight six-loop convolution of `[C,H,W]` by `[O,C,k,k]`.
fn naive_conv(x: &RealTensor, k: &RealTensor, geo: ConvGeometry) -> RealTensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1] as isize, x.shape()[2] as isize);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ho, wo) = geo.output_extent(h as usize, w as usize, kh, kw).expect("valid geometry");
    RealTensor::from_fn(&[o, ho, wo], |flat| {
        let (oc, i, j) = (flat / (ho * wo), (flat / wo) % ho, flat % wo);
        let mut s = 0.0;
        for ci in 0..c {
            for a in 0..kh {
                for b in 0..kw {
                    let y = (i * geo.stride.0 + a) as isize - geo.padding.0 as isize;
                    let z = (j * geo.stride.1 + b) as isize - geo.padding.1 as isize;
                    if (0..h).contains(&y) && (0..w).contains(&z) {
                        s += k.get(&[oc, ci, a, b]) * x.get(&[ci, y as usize, z as usize]);
                    }
                }
            }
        }
        s
    })
}

fn tensor_ops(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let (c, o) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (h, w) = (rng.random_range(k..k + 5), rng.random_range(k..k + 5));
        let geo = ConvGeometry::new((rng.random_range(1..3), rng.random_range(1..3)), (k / 2, rng.random_range(0..=k / 2)));
        let x = RealTensor::randn(&[c, h, w], 1.0, rng);
        let kern = RealTensor::randn(&[o, c, k, k], 1.0, rng);
        let got = conv2d_batched(&x.reshape(&[1, c, h, w])?, &kern, None, geo)?;
        let want = naive_conv(&x, &kern, geo);
        worst = worst.max(max_rel_diff(got.data(), want.data(), 1e-12));
    }
    Ok(SuiteResult::check("tensor_ops", worst, 1e-10, "30 random conv2d configs vs direct loops"))
}

fn autograd(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let x = away_from_zero(&RealTensor::randn(&[1, 2, 4, 4], 1.0, rng), 0.05);
    let k = RealTensor::randn(&[2, 2, 3, 3], 1.0, rng);
    worst = worst.max(
        finite_diff_check(
            |t, v| {
                let kv = t.constant(k.clone());
                let y = t.conv2d(v, kv, None, ConvGeometry::same(3))?;
                Ok(t.half_sq_norm(y))
            },
            &x,
            h,
        )?
        .max_rel_error,
    );
    let g = RealTensor::randn(&[4, 2, 3], 1.0, rng);
    let w = RealTensor::randn(&[4, 2, 3], 1.0, rng);
    worst = worst.max(
        finite_diff_check(
            |t, v| {
                let (gm, bt, wv) = (t.constant(RealTensor::full(&[4], 1.3)), t.constant(RealTensor::full(&[4], 0.2)), t.constant(w.clone()));
                let y = t.group_norm(v, gm, bt, 2, DEFAULT_EPS)?;
                let y = t.mul(y, wv)?;
                Ok(t.sum(y))
            },
            &g,
            h,
        )?
        .max_rel_error,
    );
    let logits = RealTensor::randn(&[2, 3, 3], 1.0, rng);
    let target = RealTensor::from_fn(&[3, 3], |i| (i % 2) as f64);
    worst = worst.max(finite_diff_check(|t, v| t.softmax_cross_entropy(v, &target), &logits, h)?.max_rel_error);
    let u = RealTensor::randn(&[2, 3, 3], 1.0, rng);
    let wu = RealTensor::randn(&[2, 5, 5], 1.0, rng);
    worst = worst.max(
        finite_diff_check(
            |t, v| {
                let y = t.upsample2x(v)?;
                let y = t.crop_hw(y, 5, 5)?;
                let wv = t.constant(wu.clone());
                let y = t.mul(y, wv)?;
                Ok(t.sum(y))
            },
            &u,
            h,
        )?
        .max_rel_error,
    );
    Ok(SuiteResult::check("autograd", worst, 1e-4, "finite differences: conv2d, group_norm, upsample+crop, cross-entropy"))
}

fn correlation(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let f = RealTensor::randn(&[5, 3, 3], 1.0, rng);
    let s = RealTensor::randn(&[5, 4, 2], 1.0, rng);
    let c = cosine_correlation(&f, &s)?;
    let mut worst: f64 = c.data().iter().map(|v| (-v).max(v - 1.0).max(0.0)).fold(0.0, f64::max);
    let selfc = cosine_correlation(&f, &f)?;
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max((selfc.get(&[i, j, i, j]) - 1.0).abs());
        }
    }
    Ok(SuiteResult::check("correlation", worst, 1e-12, "values in [0,1], self-correlation diagonal = 1"))
}

fn outer_kernel(kq: &RealTensor, ks: &RealTensor) -> RealTensor {
    let (o, c, q, s) = (kq.shape()[0], kq.shape()[1], kq.shape()[2], ks.shape()[2]);
    RealTensor::from_fn(&[o, c, q, q, s, s], |flat| {
        let mut r = flat;
        let e = r % s;
        r /= s;
        let d = r % s;
        r /= s;
        let b = r % q;
        r /= q;
        let a = r % q;
        r /= q;
        let ci = r % c;
        let oc = r / c;
        (0..o).map(|m| ks.get(&[oc, m, d, e]) * kq.get(&[m, ci, a, b])).sum()
    })
}

fn cam(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (n, o) = (rng.random_range(1..3), rng.random_range(1..3));
        let e = [rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..5)];
        let ss = (rng.random_range(1..3), rng.random_range(1..3));
        let c = RealTensor::randn(&[n, e[0], e[1], e[2], e[3]], 1.0, rng);
        let kq = RealTensor::randn(&[o, n, 3, 3], 1.0, rng);
        let ks = RealTensor::randn(&[o, o, 3, 3], 1.0, rng);
        let got = separable_conv4d(&c, &SeparableKernel4d::new(kq.clone(), ks.clone(), (1, 1), ss)?)?;
        let want = conv4d(&c, &outer_kernel(&kq, &ks), ConvGeometry::same(3), ConvGeometry::new(ss, (1, 1)))?;
        worst = worst.max(max_rel_diff(got.data(), want.data(), 1e-12));
    }
    Ok(SuiteResult::check("cam", worst, 1e-10, "separable 4D conv vs naive conv4d with outer-product kernel"))
}

/// The real `[4O,4C,k,k]` kernel whose block rows are
/// `r: [Wr −Wx −Wy −Wz]`, `x: [Wx Wr −Wz Wy]`, `y: [Wy Wz Wr −Wx]`,
/// `z: [Wz −Wy Wx Wr]`.
pub fn block_matrix_kernel(p: &QuatConvParams) -> RealTensor {
    let w = &p.weights;
    let blocks: [[(usize, f64); 4]; 4] = [
        [(0, 1.0), (1, -1.0), (2, -1.0), (3, -1.0)],
        [(1, 1.0), (0, 1.0), (3, -1.0), (2, 1.0)],
        [(2, 1.0), (3, 1.0), (0, 1.0), (1, -1.0)],
        [(3, 1.0), (2, -1.0), (1, 1.0), (0, 1.0)],
    ];
    let s = w[0].shape();
    let (o, c, kh, kw) = (s[0], s[1], s[2], s[3]);
    RealTensor::from_fn(&[4 * o, 4 * c, kh, kw], |flat| {
        let (row, rest) = (flat / (4 * c * kh * kw), flat % (4 * c * kh * kw));
        let (col, k) = (rest / (kh * kw), rest % (kh * kw));
        let (src, sign) = blocks[row / o][col / c];
        sign * w[src].data()[((row % o) * c + col % c) * kh * kw + k]
    })
}

fn hamilton_oracle(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<SuiteResult> {
    let kind = if corrupt { QuatKernel::CorruptedSign } else { QuatKernel::Hamilton };
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let (c, o) = (rng.random_range(1..5), rng.random_range(1..5));
        let k = [1, 3][rng.random_range(0..2)];
        let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
        let q = QuatTensor::from_stacked(&RealTensor::randn(&[4, c, h, w], 1.0, rng))?;
        let weights = std::array::from_fn(|_| RealTensor::randn(&[o, c, k, k], 1.0, rng));
        let p = QuatConvParams::zero_bias(weights)?;
        let geo = ConvGeometry::same(k);
        let got = quat_conv2d_with(kind, &q, &p, geo)?.stacked();
        let want = conv2d_batched(&q.stacked().reshape(&[1, 4 * c, h, w])?, &block_matrix_kernel(&p), None, geo)?;
        worst = worst.max(max_rel_diff(got.data(), want.data(), 1e-12));
    }
    Ok(SuiteResult::check(
        "hamilton_oracle",
        worst,
        1e-10,
        if corrupt { "quaternion conv (corrupted sign) vs block-matrix real conv" } else { "quaternion conv vs block-matrix real conv" },
    ))
}

fn plane_stats(t: &RealTensor) -> (f64, f64) {
    let n = t.len() as f64;
    let m = t.sum() / n;
    (m, t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
}

fn qclm(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    // normalization statistics; eps keeps the variance a hair under one
    let t = RealTensor::randn(&[4, 8, 32, 32], 2.5, rng).map(|v| v - 0.7);
    let out = quat_norm(&QuatTensor::from_stacked(&t)?, &QuatNormParams::identity(2))?;
    let mut worst: f64 = 0.0;
    for g in 0..2 {
        let mut avg = 0.0;
        for p in out.planes() {
            let (m, v) = plane_stats(&p.slice0(4 * g, 4 * g + 4)?);
            worst = worst.max(m.abs());
            avg += v / 4.0;
        }
        worst = worst.max((avg - 1.0).abs());
    }
    // Q-proper covariance
    let sample: Vec<Quaternion> = (0..20_000)
        .map(|_| {
            let v = RealTensor::randn(&[4], 1.5, rng);
            Quaternion::from_array([v.data()[0], v.data()[1], v.data()[2], v.data()[3]]).expect("finite")
        })
        .collect();
    let cov = augmented_covariance(&sample)?;
    let mut cov_err: f64 = 0.0;
    for (a, row) in cov.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            let want = if a == b { 2.25 } else { 0.0 };
            cov_err = cov_err.max((v - want).abs() / 2.25);
        }
    }
    // gradients through conv and norm
    let x = RealTensor::randn(&[4, 2, 3, 3], 1.0, rng);
    let w = RealTensor::randn(&[4, 4, 2, 3, 3], 0.5, rng);
    let wt = RealTensor::randn(&[4, 4, 3, 3], 1.0, rng);
    let grad = finite_diff_check(
        |t, v| {
            let wv = t.constant(w.clone());
            let y = quat_conv2d_on(t, QuatKernel::Hamilton, v, wv, None, ConvGeometry::same(3))?;
            let (g, b) = (t.constant(RealTensor::full(&[2], 1.1)), t.constant(RealTensor::full(&[4, 2], 0.3)));
            let y = quat_norm_on(t, NormKind::Quaternion, y, g, b, DEFAULT_EPS)?;
            let m = t.constant(wt.clone());
            let y = t.mul(y, m)?;
            Ok(t.sum(y))
        },
        &x,
        1e-5,
    )?
    .max_rel_error;
    let stat_ok = worst < 1e-4 && cov_err < 0.05 && grad < 1e-4;
    Ok(SuiteResult {
        name: "qclm",
        passed: stat_ok,
        max_error: worst.max(grad),
        detail: format!("norm mean/variance {worst:.1e}, covariance {cov_err:.3} (tol 0.05), gradient {grad:.1e}"),
    })
}

fn erm(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let z = RealTensor::zeros(&[3, 2, 2]);
    let q = QuatTensor::new(z.clone(), RealTensor::full(&[3, 2, 2], 2f64.ln()), z.clone(), z)?;
    let w = component_weights(&q)?;
    let mut worst: f64 = 0.0;
    for ch in 0..3 {
        for (d, want) in [0.2, 0.4, 0.2, 0.2].iter().enumerate() {
            worst = worst.max((w.get(&[d, ch]) - want).abs());
        }
    }
    let p = DecoderParams::init(4, &[3, 3], 4, 4, rng)?;
    let soft = decode(
        &RealTensor::randn(&[4, 2, 2], 1.0, rng),
        &[RealTensor::randn(&[3, 4, 4], 1.0, rng), RealTensor::randn(&[3, 8, 8], 1.0, rng)],
        &p,
    )?;
    for i in 0..64 {
        worst = worst.max((soft.data()[i] + soft.data()[64 + i] - 1.0).abs());
    }
    let x = RealTensor::randn(&[4, 2, 3, 3], 1.0, rng);
    let wt = RealTensor::randn(&[2, 3, 3], 1.0, rng);
    let grad = finite_diff_check(
        |t, v| {
            let y = quat_to_real_on(t, v)?;
            let m = t.constant(wt.clone());
            let y = t.mul(y, m)?;
            Ok(t.sum(y))
        },
        &x,
        1e-5,
    )?
    .max_rel_error;
    let ok = worst < 1e-12 && grad < 1e-4;
    Ok(SuiteResult {
        name: "erm",
        passed: ok,
        max_error: worst.max(grad),
        detail: format!("softmax weights / soft mask sums {worst:.1e}, quat_to_real gradient {grad:.1e}"),
    })
}

fn episode_runtime(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let (k, h, w) = (5, 3, 4);
    let softs: Vec<RealTensor> = (0..k)
        .map(|_| {
            let fg = RealTensor::rand_uniform(&[1, h, w], 0.0, 1.0, rng);
            let bg = fg.map(|v| 1.0 - v);
            RealTensor::concat0(&[&bg, &fg]).expect("same shape")
        })
        .collect();
    let priors: Vec<RealTensor> = (0..k).map(|_| RealTensor::rand_uniform(&[h, w], 0.0, 1.0, rng)).collect();
    let fused = fused_foreground(&softs, &priors)?;
    let mut worst: f64 = 0.0;
    for i in 0..h * w {
        let m = priors.iter().map(|p| p.data()[i]).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = priors.iter().map(|p| (p.data()[i] - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let want: f64 = (0..k).map(|s| e[s] / z * softs[s].data()[h * w + i]).sum();
        worst = worst.max((fused.data()[i] - want).abs());
    }
    let edge = fuse_kshot(&softs[..1], &[RealTensor::zeros(&[h, w])], 0.5)?;
    let mut acc = MetricsAccumulator::new();
    acc.add_class_counts(0, Counts::new(8, 2, 0));
    worst = worst.max((miou(&acc) - 0.8).abs());
    let bg = RealTensor::zeros(&[2, 2]);
    let mut acc = MetricsAccumulator::new();
    acc.add(0, &bg, &bg)?;
    worst = worst.max((fb_iou(&acc) - 0.5).abs());
    let strict = edge.data().iter().zip(&softs[0].data()[h * w..]).all(|(m, f)| (*m == 1.0) == (*f > 0.5));
    Ok(SuiteResult {
        name: "episode_runtime",
        passed: worst < 1e-12 && strict,
        max_error: worst,
        detail: "K=5 fusion vs per-pixel softmax loop, strict threshold, metric formulas".into(),
    })
}

fn cli(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let defaults = Config::parse("")? == Config::default();
    let mut store = ParamStore::new();
    for i in 0..4 {
        let rank = rng.random_range(0..4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..4)).collect();
        store.insert(format!("t{i}"), RealTensor::randn(&shape, 1e3, rng));
    }
    let back = decode_weights(&encode(&store))?;
    let exact = store.iter().zip(back.iter()).all(|((n1, a), (n2, b))| {
        n1 == n2 && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    Ok(SuiteResult {
        name: "cli",
        passed: defaults && exact,
        max_error: 0.0,
        detail: format!("empty config gives defaults: {defaults}, weight round trip bit-exact: {exact}"),
    })
}
