//! Quaternion convolution via the Hamilton product, and the plane-wise
//! group-convolution ablation.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::{conv2d_backward_input, conv2d_backward_kernel, conv2d_batched, ConvGeometry};
use crate::tensor::RealTensor;

use super::QuatTensor;

/// `HAMILTON[a][b] = (p, sign)`: weight component `a` applied to input
/// component `b` lands in output component `p` with `sign`. Components are
/// ordered r, x, y, z.
const HAMILTON: [[(usize, f64); 4]; 4] = [
    [(0, 1.0), (1, 1.0), (2, 1.0), (3, 1.0)],
    [(1, 1.0), (0, -1.0), (3, 1.0), (2, -1.0)],
    [(2, 1.0), (3, -1.0), (0, -1.0), (1, 1.0)],
    [(3, 1.0), (2, 1.0), (1, -1.0), (0, -1.0)],
];

/// How the four weight planes couple to the four input planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuatKernel {
    /// Full Hamilton product: every weight plane meets every input plane.
    Hamilton,
    /// Plane-independent: `W_δ * q_δ` only.
    Group,
    /// Hamilton table with the sign of the `W_x * q_y` term flipped. Exists
    /// so the verification suites can prove they catch a wrong sign.
    #[doc(hidden)]
    CorruptedSign,
}

impl QuatKernel {
    /// `(output plane, sign)` for weight plane `a` on input plane `b`.
    fn route(self, a: usize, b: usize) -> Option<(usize, f64)> {
        match self {
            QuatKernel::Hamilton => Some(HAMILTON[a][b]),
            QuatKernel::Group => (a == b).then_some((a, 1.0)),
            QuatKernel::CorruptedSign => {
                let (p, sign) = HAMILTON[a][b];
                Some((p, if (a, b) == (1, 2) { -sign } else { sign }))
            }
        }
    }
}

/// Weight planes `W_r, W_x, W_y, W_z` (`[out,in,kH,kW]` each) and a
/// quaternion bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct QuatConvParams {
    pub weights: [RealTensor; 4],
    pub bias: [RealTensor; 4],
}

impl QuatConvParams {
    pub fn new(weights: [RealTensor; 4], bias: [RealTensor; 4]) -> Result<Self> {
        weights[0].expect_rank(4, "quaternion weight plane")?;
        let s = weights[0].shape().to_vec();
        for w in &weights[1..] {
            w.expect_shape(&s, "quaternion weight plane")?;
        }
        for b in &bias {
            b.expect_shape(&[s[0]], "quaternion bias plane")?;
        }
        Ok(Self { weights, bias })
    }

    pub fn zero_bias(weights: [RealTensor; 4]) -> Result<Self> {
        let o = weights[0].shape().first().copied().unwrap_or(1);
        let b = RealTensor::zeros(&[o]);
        Self::new(weights, [b.clone(), b.clone(), b.clone(), b])
    }

    pub fn from_stacked(w: &RealTensor, b: &RealTensor) -> Result<Self> {
        w.expect_rank(5, "stacked quaternion weight")?;
        b.expect_rank(2, "stacked quaternion bias")?;
        let wp = w.len() / 4;
        let bp = b.len() / 4;
        let ws = w.shape()[1..].to_vec();
        let bs = b.shape()[1..].to_vec();
        let wpart = |i: usize| RealTensor::from_parts(ws.clone(), w.data()[i * wp..(i + 1) * wp].to_vec());
        let bpart = |i: usize| RealTensor::from_parts(bs.clone(), b.data()[i * bp..(i + 1) * bp].to_vec());
        Self::new(
            [wpart(0), wpart(1), wpart(2), wpart(3)],
            [bpart(0), bpart(1), bpart(2), bpart(3)],
        )
    }

    /// `[4, out, in, kH, kW]`
    pub fn stacked_weight(&self) -> RealTensor {
        let refs: Vec<&RealTensor> = self.weights.iter().collect();
        let s = self.weights[0].shape();
        RealTensor::concat0(&refs)
            .and_then(|t| t.into_reshaped(&[4, s[0], s[1], s[2], s[3]]))
            .expect("congruent planes")
    }

    /// `[4, out]`
    pub fn stacked_bias(&self) -> RealTensor {
        let o = self.bias[0].len();
        let mut d = Vec::with_capacity(4 * o);
        for b in &self.bias {
            d.extend_from_slice(b.data());
        }
        RealTensor::from_parts(vec![4, o], d)
    }

    pub fn out_channels(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights[0].shape()[1]
    }

    /// Real-valued weight scalars (four planes), bias excluded.
    pub fn weight_count(&self) -> usize {
        4 * self.weights[0].len()
    }

    pub fn bias_count(&self) -> usize {
        4 * self.bias[0].len()
    }

    /// Polar initialization: a uniform magnitude bounded by
    /// `1/sqrt(2·(in+out)·kH·kW)`, a random unit pure-imaginary axis and a
    /// uniform phase in `[−π, π]`. Bias starts at zero.
    pub fn init<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, k: usize, rng: &mut R) -> Result<Self> {
        let s = [out_ch, in_ch, k, k];
        let n: usize = s.iter().product();
        let bound = 1.0 / ((2 * (in_ch + out_ch) * k * k) as f64).sqrt();
        let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            let mag = rng.random_range(-bound..bound);
            let phase = rng.random_range(-PI..PI);
            let axis = loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm > 1e-9 {
                    break [v[0] / norm, v[1] / norm, v[2] / norm];
                }
            };
            planes[0][i] = mag * phase.cos();
            for c in 0..3 {
                planes[c + 1][i] = mag * phase.sin() * axis[c];
            }
        }
        let [a, b, c, d] = planes;
        Self::zero_bias([
            RealTensor::from_parts(s.to_vec(), a),
            RealTensor::from_parts(s.to_vec(), b),
            RealTensor::from_parts(s.to_vec(), c),
            RealTensor::from_parts(s.to_vec(), d),
        ])
    }
}

/// Quaternion convolution on stacked tensors: input `[4,C,H,W]`, weight
/// `[4,O,C,kH,kW]`, optional bias `[4,O]`; output `[4,O,H',W']`.
pub fn quat_conv2d_on(
    tape: &mut Tape,
    kind: QuatKernel,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    geo: ConvGeometry,
) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let ws = tape.value(weight).shape().to_vec();
    if xs.len() != 4 || xs[0] != 4 || ws.len() != 5 || ws[0] != 4 {
        return Err(shape_err(format!(
            "quaternion conv needs input [4,C,H,W] and weight [4,O,C,k,k], got {xs:?} and {ws:?}"
        )));
    }
    if ws[2] != xs[1] {
        return Err(shape_err(format!(
            "quaternion conv channel mismatch: input {xs:?} vs weight {ws:?}"
        )));
    }
    if ws[3].is_multiple_of(2) || ws[4].is_multiple_of(2) {
        return Err(Error::Config(format!("quaternion kernel extents must be odd: {ws:?}")));
    }
    if let Some(b) = bias {
        tape.value(b).expect_shape(&[4, ws[1]], "quaternion bias")?;
    }
    let out = quat_conv_forward(kind, tape.value(x), tape.value(weight), bias.map(|b| tape.value(b)), geo)?;
    let mut parents = vec![x, weight];
    parents.extend(bias);
    Ok(tape.record(
        out,
        &parents,
        Box::new(move |c| {
            let (gx, gw) = quat_conv_backward(kind, c.grad, c.inputs[0], c.inputs[1], geo, c.needs[0], c.needs[1])?;
            let mut grads = vec![gx, gw];
            if c.inputs.len() == 3 {
                // bias gradient: sum of each output plane over space
                let g = c.grad;
                let (o, plane) = (g.shape()[1], g.shape()[2] * g.shape()[3]);
                let gb = RealTensor::from_fn(&[4, o], |i| g.data()[i * plane..][..plane].iter().sum());
                grads.push(Some(gb));
            }
            Ok(grads)
        }),
    ))
}

fn weight_plane(w: &RealTensor, a: usize) -> RealTensor {
    let s = &w.shape()[1..];
    let n: usize = s.iter().product();
    RealTensor::from_parts(s.to_vec(), w.data()[a * n..(a + 1) * n].to_vec())
}

fn quat_conv_forward(
    kind: QuatKernel,
    x: &RealTensor,
    w: &RealTensor,
    bias: Option<&RealTensor>,
    geo: ConvGeometry,
) -> Result<RealTensor> {
    let mut out: Option<Vec<f64>> = None;
    let mut oshape = Vec::new();
    for a in 0..4 {
        let wa = weight_plane(w, a);
        // all four input planes as one batch: y[b] = W_a * q_b
        let y = conv2d_batched(x, &wa, None, geo)?;
        let plane = y.len() / 4;
        let acc = out.get_or_insert_with(|| {
            oshape = y.shape().to_vec();
            vec![0.0; y.len()]
        });
        for b in 0..4 {
            if let Some((p, s)) = kind.route(a, b) {
                let src = &y.data()[b * plane..][..plane];
                for (d, v) in acc[p * plane..][..plane].iter_mut().zip(src) {
                    *d += s * v;
                }
            }
        }
    }
    let mut data = out.expect("four planes");
    if let Some(b) = bias {
        let (o, plane) = (oshape[1], oshape[2] * oshape[3]);
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let bv = b.data()[(i / o) * o + i % o];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(RealTensor::from_parts(oshape, data))
}

#[allow(clippy::type_complexity)]
fn quat_conv_backward(
    kind: QuatKernel,
    g: &RealTensor,
    x: &RealTensor,
    w: &RealTensor,
    geo: ConvGeometry,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<RealTensor>, Option<RealTensor>)> {
    let plane = g.len() / 4;
    let mut gx = need_x.then(|| RealTensor::zeros(x.shape()));
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let wn = w.len() / 4;
    for a in 0..4 {
        // G_a[b] = sign · g_p for the term (a, b) → p
        let mut ga = vec![0.0; g.len()];
        let mut any = false;
        for b in 0..4 {
            if let Some((p, s)) = kind.route(a, b) {
                any = true;
                for (d, v) in ga[b * plane..][..plane].iter_mut().zip(&g.data()[p * plane..][..plane]) {
                    *d = s * v;
                }
            }
        }
        if !any {
            continue;
        }
        let ga = RealTensor::from_parts(g.shape().to_vec(), ga);
        let wa = weight_plane(w, a);
        if let Some(gx) = gx.as_mut() {
            gx.axpy(1.0, &conv2d_backward_input(&ga, &wa, x.shape(), geo)?);
        }
        if let Some(gw) = gw.as_mut() {
            let d = conv2d_backward_kernel(&ga, x, wa.shape(), geo)?;
            gw[a * wn..(a + 1) * wn].copy_from_slice(d.data());
        }
    }
    Ok((gx, gw.map(|d| RealTensor::from_parts(w.shape().to_vec(), d))))
}

fn run_pure(kind: QuatKernel, q: &QuatTensor, params: &QuatConvParams, geo: ConvGeometry) -> Result<QuatTensor> {
    if params.in_channels() != q.channels() {
        return Err(shape_err(format!(
            "quaternion conv expects {} input channels, got {:?}",
            params.in_channels(),
            q.shape()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(q.stacked());
    let w = tape.constant(params.stacked_weight());
    let b = tape.constant(params.stacked_bias());
    let out = quat_conv2d_on(&mut tape, kind, x, w, Some(b), geo)?;
    QuatTensor::from_stacked(tape.value(out))
}

/// Runs a quaternion convolution of the given kind on plain values.
pub fn quat_conv2d_with(kind: QuatKernel, q: &QuatTensor, params: &QuatConvParams, geo: ConvGeometry) -> Result<QuatTensor> {
    run_pure(kind, q, params, geo)
}

/// Real-valued replacement at matched capacity: the four planes are treated
/// as `4C` independent real channels mixed by a dense `[4O,4C,kH,kW]` kernel
/// and `[4O]` bias.
pub fn real_replacement_conv2d(
    q: &QuatTensor,
    kernel: &RealTensor,
    bias: &RealTensor,
    geo: ConvGeometry,
) -> Result<QuatTensor> {
    let s = q.shape();
    kernel.expect_rank(4, "real replacement kernel")?;
    let o4 = kernel.shape()[0];
    if !o4.is_multiple_of(4) || kernel.shape()[1] != 4 * s[0] {
        return Err(shape_err(format!(
            "real replacement kernel {:?} does not fit {} quaternion channels",
            kernel.shape(),
            s[0]
        )));
    }
    let x = q.stacked().into_reshaped(&[1, 4 * s[0], s[1], s[2]])?;
    let y = conv2d_batched(&x, kernel, Some(bias), geo)?;
    let ys = y.shape().to_vec();
    QuatTensor::from_stacked(&y.into_reshaped(&[4, o4 / 4, ys[2], ys[3]])?)
}

/// `W ⊗ q + b` with the Hamilton-product sign pattern, one real convolution
/// per term.
pub fn quat_conv2d(q: &QuatTensor, params: &QuatConvParams, geo: ConvGeometry) -> Result<QuatTensor> {
    run_pure(QuatKernel::Hamilton, q, params, geo)
}

/// Plane-wise ablation kernel: `(W_r*q_r, W_x*q_x, W_y*q_y, W_z*q_z) + b`.
pub fn group_conv2d_ablation(q: &QuatTensor, params: &QuatConvParams, geo: ConvGeometry) -> Result<QuatTensor> {
    run_pure(QuatKernel::Group, q, params, geo)
}
