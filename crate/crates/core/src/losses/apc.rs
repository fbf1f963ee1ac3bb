use super::{check_lengths, ApcConfig, LossHead, LossInput};
use crate::autograd::{NodeId, Tape};
use crate::error::Result;
use crate::tensor::Scalar;

/// Autoregressive predictive coding: a linear head on `hidden[t]` regresses
/// `target[t + shift]` (mean squared error), plus `tv_weight` times the mean
/// absolute change of the prediction between consecutive valid frames.
pub fn apc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    head: &LossHead<T>,
    x: &LossInput<'_>,
    cfg: &ApcConfig,
) -> Result<NodeId> {
    check_lengths("apc", x.lengths, x.layout, cfg.shift + 1)?;
    let frames = x.layout.frames;
    let batch = x.layout.batch as f64;
    let d_t = tape.shape(x.targets)[1] as f64;

    let mut anchors = Vec::new();
    let mut shifted = Vec::new();
    let mut l2_w = Vec::new();
    let (mut next, mut prev, mut tv_w) = (Vec::new(), Vec::new(), Vec::new());
    for (b, &len) in x.lengths.iter().enumerate() {
        let n = len - cfg.shift;
        for t in 0..n {
            anchors.push(b * frames + t);
            shifted.push(b * frames + t + cfg.shift);
            l2_w.push(T::from_f64(1.0 / (n as f64 * batch * d_t)));
        }
        for t in 0..len - 1 {
            next.push(b * frames + t + 1);
            prev.push(b * frames + t);
            tv_w.push(T::from_f64(cfg.tv_weight / ((len - 1) as f64 * batch * d_t)));
        }
    }

    let pred = head.project(tape, x.hidden, 0)?;
    let p = tape.gather_rows(pred, anchors)?;
    let y = tape.gather_rows(x.targets, shifted)?;
    let diff = tape.sub(p, y)?;
    let sq = tape.square(diff)?;
    let l2 = tape.weighted_sum(sq, l2_w)?;
    if cfg.tv_weight == 0.0 {
        return Ok(l2);
    }
    let a = tape.gather_rows(pred, next)?;
    let b = tape.gather_rows(pred, prev)?;
    let delta = tape.sub(a, b)?;
    let delta = tape.abs(delta)?;
    let tv = tape.weighted_sum(delta, tv_w)?;
    tape.add(l2, tv)
}
