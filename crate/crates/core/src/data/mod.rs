//! Synthetic domains, frame stacking, batching, truncation, and the FSEQ
//! feature-file format.

mod batch;
mod domain;
mod fseq;

pub use batch::{truncate, truncation_pct, FeatureBatch};
pub use domain::{two_domains, DomainSpec, Emitter, TaskConfig, SOURCE_DOMAIN, TARGET_DOMAIN};
pub use fseq::{decode_fseq, encode_fseq, read_fseq, write_fseq};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::NDArray;

/// One utterance: `[frames × dim]` features and optional per-frame labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub features: NDArray<f32>,
    pub labels: Option<Vec<u32>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Sequences drawn from a single domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domain_id: u32,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }

    /// Stacks and subsamples every sequence; see [`stack_subsample`].
    pub fn stacked(&self, stack: usize, stride: usize) -> Result<Dataset> {
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                let features = stack_subsample(&s.features, stack, stride)?;
                let labels = s.labels.as_ref().map(|l| subsample_labels(l, stride));
                Ok(Sequence { features, labels })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { domain_id: self.domain_id, sequences })
    }

    pub fn strip_labels(mut self) -> Dataset {
        for s in &mut self.sequences {
            s.labels = None;
        }
        self
    }
}

/// Concatenates `stack` consecutive frames starting every `stride` frames:
/// output frame `i` holds input frames `i·stride ..= i·stride + stack − 1`,
/// repeating the last frame past the end. Output has `⌈T/stride⌉` frames.
pub fn stack_subsample(frames: &NDArray<f32>, stack: usize, stride: usize) -> Result<NDArray<f32>> {
    if frames.shape().len() != 2 {
        return Err(Error::Shape {
            op: "stack_subsample",
            detail: format!("expected [T × f], got {:?}", frames.shape()),
        });
    }
    let (t, f) = (frames.shape()[0], frames.shape()[1]);
    if stack == 0 || stride == 0 {
        return Err(Error::Invalid("stack_subsample: stack and stride must be positive".into()));
    }
    if t < stack {
        return Err(Error::Invalid(format!("stack_subsample: {t} frames is fewer than stack {stack}")));
    }
    let out_t = t.div_ceil(stride);
    let mut out = Vec::with_capacity(out_t * stack * f);
    for i in 0..out_t {
        for j in 0..stack {
            let src = (i * stride + j).min(t - 1);
            out.extend_from_slice(&frames.data()[src * f..(src + 1) * f]);
        }
    }
    NDArray::from_vec([out_t, stack * f], out)
}

/// Label of the first raw frame of each stacked frame.
pub fn subsample_labels(labels: &[u32], stride: usize) -> Vec<u32> {
    labels.iter().step_by(stride).copied().collect()
}

/// Unlabeled pretraining pool. Labels are dropped on construction, so
/// nothing downstream of this type can read them.
#[derive(Clone, Debug)]
pub struct UnlabeledSet {
    parts: Vec<Dataset>,
}

impl UnlabeledSet {
    pub fn new(parts: impl IntoIterator<Item = Dataset>) -> Self {
        Self { parts: parts.into_iter().map(Dataset::strip_labels).collect() }
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(Dataset::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, mut i: usize) -> (&Sequence, u32) {
        for p in &self.parts {
            if i < p.len() {
                return (&p.sequences[i], p.domain_id);
            }
            i -= p.len();
        }
        panic!("index out of range")
    }

    /// The pool's per-domain datasets, all without labels.
    pub fn parts(&self) -> &[Dataset] {
        &self.parts
    }

    pub fn max_len(&self) -> usize {
        self.parts.iter().flat_map(|p| p.sequences.iter().map(Sequence::len)).max().unwrap_or(0)
    }

    pub fn min_len(&self) -> usize {
        self.parts.iter().flat_map(|p| p.sequences.iter().map(Sequence::len)).min().unwrap_or(0)
    }

    /// Draws `batch` distinct sequences uniformly.
    pub fn sample_batch(&self, batch: usize, onehot_dim: usize, rng: &mut impl Rng) -> Result<FeatureBatch> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Invalid("sample_batch: empty pretraining set".into()));
        }
        let picks = rand::seq::index::sample(rng, n, batch.min(n)).into_vec();
        let items: Vec<(&Sequence, u32)> = picks.into_iter().map(|i| self.get(i)).collect();
        FeatureBatch::from_sequences(&items, onehot_dim)
    }
}

/// Labeled fine-tuning data. Only a labeled domain may back it, apart from
/// model-predicted pseudo-labels and the explicit evaluation oracle.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    parts: Vec<Dataset>,
}

impl LabeledSet {
    pub fn new(data: Dataset, spec: &DomainSpec) -> Result<Self> {
        if !spec.labeled {
            return Err(Error::Invalid(format!(
                "domain {} is unlabeled; its labels may not be used for training",
                spec.id
            )));
        }
        if data.domain_id != spec.id {
            return Err(Error::Invalid(format!(
                "dataset is from domain {}, spec is domain {}",
                data.domain_id, spec.id
            )));
        }
        Self::checked(vec![data])
    }

    fn checked(parts: Vec<Dataset>) -> Result<Self> {
        if parts.iter().all(Dataset::is_empty) || parts.iter().flat_map(|p| &p.sequences).any(|s| s.labels.is_none()) {
            return Err(Error::Invalid("fine-tuning data must be non-empty and fully labeled".into()));
        }
        Ok(Self { parts })
    }

    /// Sequences labeled by a model rather than by their generator.
    pub(crate) fn pseudo(data: Dataset) -> Result<Self> {
        Self::checked(vec![data])
    }

    /// Trains on held-out evaluation labels. A diagnostic ceiling only: it
    /// is the one way target-domain labels can reach training.
    pub fn oracle(set: &EvalSet) -> Self {
        Self { parts: vec![set.data.clone()] }
    }

    /// Both sets' sequences in one pool.
    pub fn union(mut self, other: LabeledSet) -> Self {
        self.parts.extend(other.parts);
        self
    }

    pub fn parts(&self) -> &[Dataset] {
        &self.parts
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(Dataset::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, mut i: usize) -> (&Sequence, u32) {
        for p in &self.parts {
            if i < p.len() {
                return (&p.sequences[i], p.domain_id);
            }
            i -= p.len();
        }
        panic!("index out of range")
    }

    pub fn sample_batch(&self, batch: usize, onehot_dim: usize, rng: &mut impl Rng) -> Result<FeatureBatch> {
        let picks = rand::seq::index::sample(rng, self.len(), batch.min(self.len())).into_vec();
        let items: Vec<(&Sequence, u32)> = picks.into_iter().map(|i| self.get(i)).collect();
        FeatureBatch::from_sequences(&items, onehot_dim)
    }
}

/// Labeled held-out data, accepted only by evaluation.
#[derive(Clone, Debug)]
pub struct EvalSet {
    data: Dataset,
}

impl EvalSet {
    /// Generates `n` sequences of `spec` with hidden-state labels and stacks
    /// them.
    pub fn generate(spec: &DomainSpec, n: usize, stack: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self { data: spec.generate_with_labels(n, rng)?.stacked(stack, stride)? })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    /// Fixed-order batches covering the whole set.
    pub fn batches(&self, batch: usize, onehot_dim: usize) -> Result<Vec<FeatureBatch>> {
        self.data
            .sequences
            .chunks(batch.max(1))
            .map(|chunk| {
                let items: Vec<(&Sequence, u32)> = chunk.iter().map(|s| (s, self.data.domain_id)).collect();
                FeatureBatch::from_sequences(&items, onehot_dim)
            })
            .collect()
    }
}
