use rand::seq::index;
use rand::Rng;

use super::{check_lengths, CpcConfig, LossHead, LossInput, W2v2Config};
use crate::autograd::{NodeId, SeqLayout, Tape};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// `k` distinct frame indices drawn uniformly from `0..frames` without
/// `positive`.
pub fn sample_negatives(rng: &mut impl Rng, frames: usize, positive: usize, k: usize) -> Result<Vec<usize>> {
    if frames <= k || positive >= frames {
        return Err(Error::SequenceTooShort { loss: "sample_negatives", required: k + 1, got: frames });
    }
    Ok(index::sample(rng, frames - 1, k).into_iter().map(|i| if i >= positive { i + 1 } else { i }).collect())
}

fn contrast_scale<T: Scalar>(tape: &Tape<T>, targets: NodeId) -> T {
    T::from_f64(1.0 / (tape.shape(targets)[1] as f64).sqrt())
}

/// Contrastive predictive coding over offsets `1..=future_horizon`.
///
/// For offset `k` and every anchor `t` with `t + k` inside the sequence, the
/// head's offset-`k` projection of `hidden[t]` is dot-scored against the true
/// `target[t + k]` and `num_negatives` other frames of the same sequence;
/// the loss is the cross-entropy of picking the true frame, averaged over
/// anchors, batch, and offsets.
pub fn cpc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    head: &LossHead<T>,
    x: &LossInput<'_>,
    cfg: &CpcConfig,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    check_lengths("cpc", x.lengths, x.layout, cfg.future_horizon + cfg.num_negatives + 1)?;
    if head.projections.len() != cfg.future_horizon {
        return Err(Error::Invalid(format!(
            "cpc head has {} projections, horizon is {}",
            head.projections.len(),
            cfg.future_horizon
        )));
    }
    let frames = x.layout.frames;
    let norm = (x.layout.batch * cfg.future_horizon) as f64;
    let scale = contrast_scale(tape, x.targets);
    let mut total: Option<NodeId> = None;
    for k in 1..=cfg.future_horizon {
        let mut anchors = Vec::new();
        let mut cands = Vec::new();
        let mut weights = Vec::new();
        for (b, &len) in x.lengths.iter().enumerate() {
            let n = len - k;
            for t in 0..n {
                anchors.push(b * frames + t);
                cands.push(b * frames + t + k);
                for neg in sample_negatives(rng, len, t + k, cfg.num_negatives)? {
                    cands.push(b * frames + neg);
                }
                weights.push(T::from_f64(1.0 / (n as f64 * norm)));
            }
        }
        let pred = head.project(tape, x.hidden, k - 1)?;
        let scores = tape.contrast_scores(pred, x.targets, anchors, cands, scale)?;
        let rows = tape.shape(scores)[0];
        let ce = tape.cross_entropy(scores, vec![0; rows], weights)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    Ok(total.expect("horizon ≥ 1"))
}

/// What masked frames' features are replaced with: a fixed ±1 pattern.
/// Unlike zeros it has non-zero variance, so a window of masked frames does
/// not produce constant rows that layer norm would amplify without bound.
pub fn mask_fill(feature_dim: usize) -> Vec<f32> {
    (0..feature_dim).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect()
}

/// Span mask over encoder frames: each valid frame starts a span of
/// `mask_span` frames with probability `mask_prob`; a sequence that draws no
/// span gets one at a uniform start.
pub fn sample_mask(lengths: &[usize], layout: SeqLayout, cfg: &W2v2Config, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(cfg.mask_prob > 0.0 && cfg.mask_prob < 1.0) {
        return Err(Error::Config(format!("mask_prob = {} must lie in (0, 1)", cfg.mask_prob)));
    }
    check_lengths("w2v2", lengths, layout, 1)?;
    let mut mask = vec![false; layout.rows()];
    for (b, &len) in lengths.iter().enumerate() {
        let row = &mut mask[b * layout.frames..b * layout.frames + len];
        let mut any = false;
        for t in 0..len {
            if rng.random_bool(cfg.mask_prob) {
                row[t..(t + cfg.mask_span).min(len)].fill(true);
                any = true;
            }
        }
        if !any {
            let t = rng.random_range(0..len);
            row[t..(t + cfg.mask_span).min(len)].fill(true);
        }
    }
    Ok(mask)
}

/// Masked-frame contrastive loss without a quantizer: the head's projection
/// of `hidden` at each masked frame is dot-scored against the unmasked input
/// features at that frame and `num_negatives` other masked frames of the
/// same sequence. When a sequence has too few masked frames, the remaining
/// negatives come from its unmasked frames.
pub fn w2v2_loss<T: Scalar>(
    tape: &mut Tape<T>,
    head: &LossHead<T>,
    x: &LossInput<'_>,
    mask: &[bool],
    cfg: &W2v2Config,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let k = cfg.num_negatives;
    check_lengths("w2v2", x.lengths, x.layout, k + 1)?;
    if mask.len() != x.layout.rows() {
        return Err(Error::Shape {
            op: "w2v2",
            detail: format!("mask of {} rows for {}", mask.len(), x.layout.rows()),
        });
    }
    let frames = x.layout.frames;
    let batch = x.layout.batch as f64;
    let mut anchors = Vec::new();
    let mut cands = Vec::new();
    let mut weights = Vec::new();
    for (b, &len) in x.lengths.iter().enumerate() {
        let base = b * frames;
        let (masked, open): (Vec<usize>, Vec<usize>) = (0..len).partition(|&t| mask[base + t]);
        if masked.is_empty() {
            return Err(Error::Invalid(format!("w2v2: sequence {b} has no masked frames")));
        }
        for (i, &t) in masked.iter().enumerate() {
            anchors.push(base + t);
            cands.push(base + t);
            let others = masked.len() - 1;
            if others >= k {
                for j in sample_negatives(rng, masked.len(), i, k)? {
                    cands.push(base + masked[j]);
                }
            } else {
                cands.extend(masked.iter().filter(|&&m| m != t).map(|&m| base + m));
                for j in index::sample(rng, open.len(), k - others) {
                    cands.push(base + open[j]);
                }
            }
            weights.push(T::from_f64(1.0 / (masked.len() as f64 * batch)));
        }
    }
    let scale = contrast_scale(tape, x.targets);
    let pred = head.project(tape, x.hidden, 0)?;
    let scores = tape.contrast_scores(pred, x.targets, anchors, cands, scale)?;
    let rows = tape.shape(scores)[0];
    tape.cross_entropy(scores, vec![0; rows], weights)
}
