use rand::Rng;

use super::Sequence;
use crate::autograd::SeqLayout;
use crate::error::{Error, Result};
use crate::tensor::NDArray;

/// A padded batch `[batch × frames × (feature_dim + onehot_dim)]`.
///
/// Frames at or beyond `lengths[b]` are zero (one-hot included) and carry
/// label 0; every consumer masks them out by length.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub features: NDArray<f32>,
    pub lengths: Vec<usize>,
    pub labels: Option<Vec<u32>>,
    pub domain_ids: Vec<u32>,
    pub feature_dim: usize,
    pub onehot_dim: usize,
}

impl FeatureBatch {
    /// Pads sequences to the longest one and appends the domain one-hot.
    /// Labels are kept only if every sequence has them.
    pub fn from_sequences(items: &[(&Sequence, u32)], onehot_dim: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let f = items[0].0.dim();
        if items.iter().any(|(s, _)| s.dim() != f) {
            return Err(Error::Invalid("sequences in a batch must share a feature dimension".into()));
        }
        if let Some((_, d)) = items.iter().find(|(_, d)| *d as usize >= onehot_dim && onehot_dim > 0) {
            return Err(Error::Invalid(format!("domain id {d} does not fit a one-hot of size {onehot_dim}")));
        }
        let frames = items.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
        let width = f + onehot_dim;
        let b = items.len();
        let mut data = vec![0.0f32; b * frames * width];
        let with_labels = items.iter().all(|(s, _)| s.labels.is_some());
        let mut labels = with_labels.then(|| vec![0u32; b * frames]);
        for (bi, (s, dom)) in items.iter().enumerate() {
            for t in 0..s.len() {
                let row = &mut data[(bi * frames + t) * width..(bi * frames + t + 1) * width];
                row[..f].copy_from_slice(&s.features.data()[t * f..(t + 1) * f]);
                if onehot_dim > 0 {
                    row[f + *dom as usize] = 1.0;
                }
            }
            if let (Some(out), Some(l)) = (labels.as_mut(), s.labels.as_ref()) {
                out[bi * frames..bi * frames + s.len()].copy_from_slice(l);
            }
        }
        Ok(Self {
            features: NDArray::from_vec([b, frames, width], data)?,
            lengths: items.iter().map(|(s, _)| s.len()).collect(),
            labels,
            domain_ids: items.iter().map(|(_, d)| *d).collect(),
            feature_dim: f,
            onehot_dim,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.feature_dim + self.onehot_dim
    }

    pub fn layout(&self) -> SeqLayout {
        SeqLayout { batch: self.batch_size(), frames: self.frames() }
    }

    pub fn valid_frames(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn is_valid(&self, row: usize) -> bool {
        row % self.frames() < self.lengths[row / self.frames()]
    }

    /// Encoder input `[batch·frames × width]`.
    pub fn input_matrix(&self) -> NDArray<f32> {
        self.features.clone().reshape([self.batch_size() * self.frames(), self.width()]).expect("same element count")
    }

    /// Feature part without the one-hot, `[batch·frames × feature_dim]`.
    pub fn targets(&self) -> NDArray<f32> {
        let (w, f) = (self.width(), self.feature_dim);
        let data: Vec<f32> = self.features.data().chunks(w).flat_map(|row| row[..f].iter().copied()).collect();
        NDArray::from_vec([self.batch_size() * self.frames(), f], data).expect("same element count")
    }

    /// Copy with label storage removed.
    pub fn without_labels(&self) -> Self {
        Self { labels: None, ..self.clone() }
    }
}

/// Fraction of frames removed when cropping `original` frames to `max_len`.
pub fn truncation_pct(original: usize, max_len: usize) -> f64 {
    if original == 0 || max_len >= original {
        0.0
    } else {
        1.0 - max_len as f64 / original as f64
    }
}

/// Crops each sequence longer than `max_len` to a random contiguous window
/// of exactly `max_len` frames; labels follow the same window.
pub fn truncate(batch: &FeatureBatch, max_len: usize, min_len: usize, rng: &mut impl Rng) -> Result<FeatureBatch> {
    if max_len < min_len {
        return Err(Error::SequenceTooShort { loss: "truncate", required: min_len, got: max_len });
    }
    let frames = batch.frames();
    if max_len >= frames {
        return Ok(batch.clone());
    }
    let (b, w) = (batch.batch_size(), batch.width());
    let mut data = vec![0.0f32; b * max_len * w];
    let mut labels = batch.labels.as_ref().map(|_| vec![0u32; b * max_len]);
    let mut lengths = Vec::with_capacity(b);
    for bi in 0..b {
        let len = batch.lengths[bi];
        let (start, new_len) = if len > max_len { (rng.random_range(0..=len - max_len), max_len) } else { (0, len) };
        let src = &batch.features.data()[(bi * frames + start) * w..(bi * frames + start + new_len) * w];
        data[bi * max_len * w..(bi * max_len + new_len) * w].copy_from_slice(src);
        if let (Some(out), Some(l)) = (labels.as_mut(), batch.labels.as_ref()) {
            out[bi * max_len..bi * max_len + new_len]
                .copy_from_slice(&l[bi * frames + start..bi * frames + start + new_len]);
        }
        lengths.push(new_len);
    }
    Ok(FeatureBatch {
        features: NDArray::from_vec([b, max_len, w], data)?,
        lengths,
        labels,
        domain_ids: batch.domain_ids.clone(),
        feature_dim: batch.feature_dim,
        onehot_dim: batch.onehot_dim,
    })
}
