//! Append-only tape for reverse-mode differentiation over `RealTensor`s.
//!
//! Every recorded node stores its forward value, the indices of its operands
//! and a closure mapping the output gradient to operand gradients. Operands
//! always precede the node that consumes them, so a single reverse sweep
//! visits nodes in a valid order.

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::RealTensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees.
pub(crate) struct BackCtx<'a> {
    pub grad: &'a RealTensor,
    pub inputs: Vec<&'a RealTensor>,
    pub output: &'a RealTensor,
    /// Whether operand `i` needs a gradient at all.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackCtx) -> Result<Vec<Option<RealTensor>>> + Send>;

struct Node {
    value: RealTensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<RealTensor>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can record a fresh pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn leaf(&mut self, value: RealTensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: RealTensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: RealTensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &RealTensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// requires one. Unreached leaves report a zero tensor.
    pub fn grad(&self, v: Var) -> Option<RealTensor> {
        if !self.nodes[v.0].requires_grad || !self.consumed {
            return None;
        }
        Some(
            self.grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| RealTensor::zeros(self.nodes[v.0].value.shape())),
        )
    }

    pub(crate) fn record(&mut self, value: RealTensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// The loss must be a scalar recorded on this tape; a second call
    /// without [`Tape::reset`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; reset before recording again".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not recorded on this tape".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(RealTensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = self.grads[i].take() else { continue };
            let ctx = BackCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx)?;
            let parents = node.parents.clone();
            for (p, g) in parents.into_iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[p].value.shape() {
                    return Err(shape_err(format!(
                        "internal: gradient shape {:?} for operand of shape {:?}",
                        g.shape(),
                        self.nodes[p].value.shape()
                    )));
                }
                match &mut self.grads[p] {
                    Some(acc) => acc.axpy(1.0, &g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    // ---- elementwise and structural ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.record(
            v,
            &[a, b],
            Box::new(|c| Ok(vec![Some(c.grad.clone()), Some(c.grad.clone())])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.record(
            v,
            &[a, b],
            Box::new(|c| Ok(vec![Some(c.grad.clone()), Some(c.grad.scale(-1.0))])),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.record(
            v,
            &[a, b],
            Box::new(|c| {
                Ok(vec![
                    c.needs[0].then(|| c.grad.mul(c.inputs[1])).transpose()?,
                    c.needs[1].then(|| c.grad.mul(c.inputs[0])).transpose()?,
                ])
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.record(v, &[a], Box::new(move |c| Ok(vec![Some(c.grad.scale(s))])))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = RealTensor::scalar(self.value(a).sum());
        self.record(
            v,
            &[a],
            Box::new(|c| Ok(vec![Some(RealTensor::full(c.inputs[0].shape(), c.grad.data()[0]))])),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `0.5 * ||a||²`
    pub fn half_sq_norm(&mut self, a: Var) -> Var {
        let v = RealTensor::scalar(0.5 * self.value(a).data().iter().map(|x| x * x).sum::<f64>());
        self.record(
            v,
            &[a],
            Box::new(|c| Ok(vec![Some(c.inputs[0].scale(c.grad.data()[0]))])),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = ops::relu(self.value(a));
        self.record(
            v,
            &[a],
            Box::new(|c| {
                Ok(vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })?)])
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.record(
            v,
            &[a],
            Box::new(|c| Ok(vec![Some(c.grad.reshape(c.inputs[0].shape())?)])),
        ))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.record(
            v,
            &[a],
            Box::new(move |c| Ok(vec![Some(c.grad.permute(&inverse)?)])),
        ))
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&RealTensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = RealTensor::concat0(&values)?;
        let leads: Vec<usize> = values.iter().map(|t| t.shape()[0]).collect();
        Ok(self.record(
            v,
            parts,
            Box::new(move |c| {
                let mut start = 0;
                leads
                    .iter()
                    .zip(&c.needs)
                    .map(|(&n, &need)| {
                        let g = need.then(|| c.grad.slice0(start, start + n)).transpose();
                        start += n;
                        g
                    })
                    .collect()
            }),
        ))
    }

    pub fn slice0(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice0(start, end)?;
        Ok(self.record(
            v,
            &[a],
            Box::new(move |c| {
                let lead = c.inputs[0].shape()[0];
                let inner = c.inputs[0].len() / lead;
                let mut g = RealTensor::zeros(c.inputs[0].shape());
                g.data_mut()[start * inner..end * inner].copy_from_slice(c.grad.data());
                Ok(vec![Some(g)])
            }),
        ))
    }

    // ---- neural ops ----

    /// Batched convolution `[B,C,H,W] * [O,C,kH,kW] (+ bias [O])`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let v = ops::conv2d_batched(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            geo,
        )?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        Ok(self.record(
            v,
            &parents,
            Box::new(move |c| {
                let (xv, kv) = (c.inputs[0], c.inputs[1]);
                let mut out = vec![
                    c.needs[0]
                        .then(|| ops::conv2d_backward_input(c.grad, kv, xv.shape(), geo))
                        .transpose()?,
                    c.needs[1]
                        .then(|| ops::conv2d_backward_kernel(c.grad, xv, kv.shape(), geo))
                        .transpose()?,
                ];
                if c.inputs.len() == 3 {
                    out.push(c.needs[2].then(|| ops::conv2d_backward_bias(c.grad)).transpose()?);
                }
                Ok(out)
            }),
        ))
    }

    /// Group normalization over `[C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (v, _) = ops::group_norm_with_stats(self.value(x), groups, self.value(gamma), self.value(beta), eps)?;
        Ok(self.record(
            v,
            &[x, gamma, beta],
            Box::new(move |c| {
                // statistics are recomputed rather than stored on the node
                let (_, stats) = ops::group_norm_with_stats(c.inputs[0], groups, c.inputs[1], c.inputs[2], eps)?;
                let (dx, dg, db) = ops::group_norm_backward(c.grad, &stats, groups, c.inputs[1])?;
                Ok(vec![Some(dx), Some(dg), Some(db)])
            }),
        ))
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let v = ops::upsample2x(self.value(a))?;
        Ok(self.record(
            v,
            &[a],
            Box::new(|c| Ok(vec![Some(ops::upsample2x_backward(c.grad)?)])),
        ))
    }

    pub fn crop_hw(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let v = ops::crop_hw(self.value(a), h, w)?;
        Ok(self.record(
            v,
            &[a],
            Box::new(|c| {
                let s = c.inputs[0].shape();
                let r = s.len();
                Ok(vec![Some(ops::uncrop_hw(c.grad, s[r - 2], s[r - 1])?)])
            }),
        ))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax(self.value(a), axis)?;
        Ok(self.record(
            v,
            &[a],
            Box::new(move |c| Ok(vec![Some(ops::softmax_backward(c.output, c.grad, axis))])),
        ))
    }

    /// Mean per-pixel cross-entropy of `[2,H,W]` logits against a binary
    /// `[H,W]` target (channel 0 background, channel 1 foreground).
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &RealTensor) -> Result<Var> {
        let l = self.value(logits);
        l.expect_rank(3, "cross-entropy logits")?;
        if l.shape()[0] != 2 || target.shape() != &l.shape()[1..] {
            return Err(shape_err(format!(
                "cross-entropy: logits {:?} vs target {:?}",
                l.shape(),
                target.shape()
            )));
        }
        let probs = ops::softmax(l, 0)?;
        let plane = target.len();
        let label = |i: usize| usize::from(target.data()[i] > 0.5);
        let loss = (0..plane)
            .map(|i| {
                let p = probs.data()[label(i) * plane + i];
                // f64::max would swallow a NaN probability
                if p.is_nan() { p } else { -p.max(f64::MIN_POSITIVE).ln() }
            })
            .sum::<f64>()
            / plane as f64;
        let target = target.clone();
        Ok(self.record(
            RealTensor::scalar(loss),
            &[logits],
            Box::new(move |c| {
                let probs = ops::softmax(c.inputs[0], 0)?;
                let scale = c.grad.data()[0] / plane as f64;
                let mut g = probs.into_data();
                for i in 0..plane {
                    g[usize::from(target.data()[i] > 0.5) * plane + i] -= 1.0;
                }
                g.iter_mut().for_each(|v| *v *= scale);
                Ok(vec![Some(RealTensor::from_parts(c.inputs[0].shape().to_vec(), g))])
            }),
        ))
    }
}
