//! Toy training: Adam on per-pixel cross-entropy over a fixed set of
//! synthetic episodes.

use crate::autograd::{Adam, Tape, Var};
use crate::correlation::mask_support;
use crate::episode::{fused_foreground, miou, prior_weights, Episode, MetricsAccumulator};
use crate::error::{Error, Result};
use crate::model::{forward_shot_on, ModelSpec, ParamStore};
use crate::ops::softmax;
use crate::tensor::RealTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Mean cross-entropy before this step's update.
    pub loss: f64,
    /// mIoU of the fused prediction before this step's update.
    pub miou: f64,
}

impl StepRecord {
    /// `step,loss,miou`
    pub fn csv(&self) -> String {
        format!("{},{:.6},{:.4}", self.step, self.loss, self.miou)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub params: ParamStore,
}

/// Masked supports and priors depend only on the data, so they are built
/// once.
struct Prepared<'a> {
    ep: &'a Episode,
    masked: Vec<crate::correlation::FeaturePyramid>,
    priors: Vec<RealTensor>,
}

fn prepare(ep: &Episode) -> Result<Prepared<'_>> {
    let masked = ep
        .supports
        .iter()
        .map(|s| mask_support(&s.features, &s.mask))
        .collect::<Result<Vec<_>>>()?;
    let last: Vec<RealTensor> = masked.iter().map(|m| m.last_layer().clone()).collect();
    let priors = prior_weights(ep.query.last_layer(), &last)?;
    Ok(Prepared { ep, masked, priors })
}

/// One evaluation of loss and metrics; when `trainable`, also the gradients
/// in store order.
fn evaluate(
    spec: &ModelSpec,
    params: &ParamStore,
    data: &[Prepared<'_>],
    tau: f64,
    trainable: bool,
) -> Result<(f64, f64, Option<Vec<RealTensor>>)> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, trainable);
    let mut losses: Vec<Var> = Vec::new();
    let mut acc = MetricsAccumulator::new();
    for d in data {
        let mut softs = Vec::with_capacity(d.masked.len());
        for m in &d.masked {
            let logits = forward_shot_on(&mut tape, spec, &vars, &d.ep.query, &d.ep.query_skips, m)?;
            softs.push(softmax(tape.value(logits), 0)?);
            losses.push(tape.softmax_cross_entropy(logits, &d.ep.query_mask)?);
        }
        let fused = fused_foreground(&softs, &d.priors)?;
        acc.add(d.ep.class_id, &fused.map(|v| f64::from(u8::from(v > tau))), &d.ep.query_mask)?;
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, 1.0 / losses.len() as f64);
    let value = tape.value(loss).data()[0];
    let grads = if trainable {
        tape.backward(loss)?;
        Some(
            vars.iter()
                .map(|(name, v)| tape.grad(v).ok_or_else(|| Error::Contract(format!("no gradient for {name}"))))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok((value, miou(&acc), grads))
}

/// Runs `steps` Adam updates. `on_step` sees every record as it is made.
/// A non-finite loss stops training with [`Error::Divergence`].
pub fn train_toy(
    spec: &ModelSpec,
    mut params: ParamStore,
    episodes: &[Episode],
    steps: usize,
    lr: f64,
    tau: f64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    if episodes.is_empty() {
        return Err(Error::Config("training needs at least one episode".into()));
    }
    let data = episodes.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(lr);
    let mut records = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, m, grads) = evaluate(spec, &params, &data, tau, true)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let rec = StepRecord { step, loss, miou: m };
        on_step(&rec);
        records.push(rec);
        let grads = grads.expect("trainable evaluation");
        let mut values: Vec<RealTensor> = params.values_mut().map(|t| std::mem::replace(t, RealTensor::scalar(0.0))).collect();
        adam.step(&mut values, &grads)?;
        for (slot, v) in params.values_mut().zip(values) {
            *slot = v;
        }
    }
    let (loss, m, _) = evaluate(spec, &params, &data, tau, false)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: steps, loss });
    }
    let rec = StepRecord {
        step: steps,
        loss,
        miou: m,
    };
    on_step(&rec);
    records.push(rec);
    Ok(TrainReport { records, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::PyramidSpec;
    use crate::episode::synth_episode;
    use crate::model::init_params;
    use crate::qclm::BlockVariant;

    fn spec() -> ModelSpec {
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
    fn zero_lr_keeps_loss() {
        let s = spec();
        let ep = synth_episode(1, 1, &s).unwrap();
        let r = train_toy(&s, init_params(&s, 1).unwrap(), &[ep], 3, 0.0, 0.5, |_| {}).unwrap();
        assert_eq!(r.records.len(), 4);
        assert!(r.records.iter().all(|x| x.loss == r.records[0].loss));
    }

    #[test]
    fn loss_drops_and_repeats() {
        let s = spec();
        let eps = vec![synth_episode(2, 2, &s).unwrap()];
        let run = || train_toy(&s, init_params(&s, 2).unwrap(), &eps, 20, 1e-2, 0.5, |_| {}).unwrap();
        let (a, b) = (run(), run());
        assert!(a.records[20].loss < a.records[0].loss);
        assert_eq!(a.records, b.records);
        let mut seen = Vec::new();
        train_toy(&s, init_params(&s, 2).unwrap(), &eps, 2, 1e-2, 0.5, |r| seen.push(r.step)).unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn no_episodes() {
        let s = spec();
        assert!(train_toy(&s, init_params(&s, 0).unwrap(), &[], 1, 1e-3, 0.5, |_| {}).is_err());
    }

    #[test]
    fn csv_line() {
        let r = StepRecord { step: 3, loss: 0.5, miou: 0.25 };
        assert_eq!(r.csv(), "3,0.500000,0.2500");
    }
}
