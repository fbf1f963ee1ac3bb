//! Synthetic two-domain task: a sticky hidden Markov chain whose states are
//! the frame labels, emitted through a per-domain linear mixing.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::tensor::NDArray;

/// Per-domain emission model: `x = scale ⊙ (mixing · (mean[state] + noise·ε)) + offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct Emitter {
    /// `[num_states × raw_dim]`
    pub means: Vec<f32>,
    /// `[raw_dim × raw_dim]`
    pub mixing: Vec<f32>,
    pub offset: Vec<f32>,
    pub scale: Vec<f32>,
    pub noise: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: u32,
    /// Raw (pre-stacking) frame count range, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    pub num_states: usize,
    pub raw_dim: usize,
    pub stay_prob: f32,
    pub emitter: Emitter,
    pub labeled: bool,
}

/// Knobs of the two-domain task. Lengths are in raw frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub num_states: usize,
    pub raw_dim: usize,
    pub stay_prob: f32,
    pub noise: f32,
    pub source_len: [usize; 2],
    pub target_len: [usize; 2],
    /// Rotation (radians) applied to the target domain's mixing, per plane.
    pub target_rotation: f32,
    /// Magnitude of the target domain's per-dimension offset.
    pub target_offset: f32,
    /// Seed of the shared state means and the two mixings.
    pub task_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_states: 8,
            raw_dim: 8,
            stay_prob: 0.9,
            noise: 0.9,
            source_len: [66, 150],
            target_len: [180, 300],
            target_rotation: 0.6,
            target_offset: 1.0,
            task_seed: 1234,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_states < 2 || self.raw_dim == 0 {
            return Err(Error::Config("data.task needs num_states ≥ 2 and raw_dim ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.stay_prob) {
            return Err(Error::Config("data.task.stay_prob must lie in [0, 1)".into()));
        }
        for (name, [lo, hi]) in [("source_len", self.source_len), ("target_len", self.target_len)] {
            if lo == 0 || hi < lo {
                return Err(Error::Config(format!("data.task.{name} = [{lo}, {hi}] is not a valid range")));
            }
        }
        Ok(())
    }
}

/// Domain ids of the two-domain task.
pub const SOURCE_DOMAIN: u32 = 0;
pub const TARGET_DOMAIN: u32 = 1;

fn normal(rng: &mut impl Rng) -> f32 {
    StandardNormal.sample(rng)
}

/// Random well-conditioned mixing: identity plus a small random perturbation.
fn base_mixing(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = if i == j { 1.0 } else { 0.0 } + 0.25 * normal(rng);
        }
    }
    m
}

/// Applies Givens rotations by `angle` on planes (0,1), (2,3), ... to the
/// rows of `m`.
fn rotate(m: &[f32], n: usize, angle: f32) -> Vec<f32> {
    let mut out = m.to_vec();
    let (s, c) = angle.sin_cos();
    for p in (0..n.saturating_sub(1)).step_by(2) {
        for j in 0..n {
            let (a, b) = (m[p * n + j], m[(p + 1) * n + j]);
            out[p * n + j] = c * a - s * b;
            out[(p + 1) * n + j] = s * a + c * b;
        }
    }
    out
}

/// Source (labeled, short) and target (unlabeled, long, shifted) domains
/// sharing the same hidden states.
pub fn two_domains(task: &TaskConfig) -> Result<(DomainSpec, DomainSpec)> {
    use rand::SeedableRng;
    task.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(task.task_seed);
    let (s, n) = (task.num_states, task.raw_dim);
    let means: Vec<f32> = (0..s * n).map(|_| 1.2 * normal(&mut rng)).collect();
    let mixing = base_mixing(&mut rng, n);
    let offset: Vec<f32> =
        (0..n).map(|_| task.target_offset * if normal(&mut rng) > 0.0 { 1.0 } else { -1.0 }).collect();
    let scale: Vec<f32> = (0..n).map(|_| 1.0 + 0.2 * normal(&mut rng).abs()).collect();
    let source = DomainSpec {
        id: SOURCE_DOMAIN,
        min_len: task.source_len[0],
        max_len: task.source_len[1],
        num_states: s,
        raw_dim: n,
        stay_prob: task.stay_prob,
        emitter: Emitter {
            means: means.clone(),
            mixing: mixing.clone(),
            offset: vec![0.0; n],
            scale: vec![1.0; n],
            noise: task.noise,
        },
        labeled: true,
    };
    let target = DomainSpec {
        id: TARGET_DOMAIN,
        min_len: task.target_len[0],
        max_len: task.target_len[1],
        num_states: s,
        raw_dim: n,
        stay_prob: task.stay_prob,
        emitter: Emitter { means, mixing: rotate(&mixing, n, task.target_rotation), offset, scale, noise: task.noise },
        labeled: false,
    };
    Ok((source, target))
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err(Error::Invalid(format!(
                "domain {}: length range [{}, {}] is degenerate",
                self.id, self.min_len, self.max_len
            )));
        }
        let (s, n) = (self.num_states, self.raw_dim);
        let e = &self.emitter;
        if s == 0
            || n == 0
            || e.means.len() != s * n
            || e.mixing.len() != n * n
            || e.offset.len() != n
            || e.scale.len() != n
        {
            return Err(Error::Invalid(format!("domain {}: emitter dimensions disagree", self.id)));
        }
        Ok(())
    }

    /// One raw sequence and its hidden-state path.
    fn sample_sequence(&self, rng: &mut impl Rng) -> (NDArray<f32>, Vec<u32>) {
        let (s, n) = (self.num_states, self.raw_dim);
        let e = &self.emitter;
        let len = rng.random_range(self.min_len..=self.max_len);
        let mut state = rng.random_range(0..s);
        let mut data = Vec::with_capacity(len * n);
        let mut states = Vec::with_capacity(len);
        let mut z = vec![0.0f32; n];
        for t in 0..len {
            if t > 0 && !rng.random_bool(self.stay_prob as f64) {
                state = (state + rng.random_range(1..s)) % s;
            }
            for (k, zk) in z.iter_mut().enumerate() {
                *zk = e.means[state * n + k] + e.noise * normal(rng);
            }
            for j in 0..n {
                let mixed: f32 = (0..n).map(|k| e.mixing[j * n + k] * z[k]).sum();
                data.push(e.scale[j] * mixed + e.offset[j]);
            }
            states.push(state as u32);
        }
        (NDArray::from_vec([len, n], data).expect("len ≥ 1"), states)
    }

    /// `n` raw sequences; labels are attached iff the domain is labeled.
    pub fn generate(&self, n: usize, rng: &mut impl Rng) -> Result<Dataset> {
        self.generate_inner(n, rng, self.labeled)
    }

    /// `n` raw sequences that always carry their hidden-state labels; for
    /// building evaluation sets only.
    pub(crate) fn generate_with_labels(&self, n: usize, rng: &mut impl Rng) -> Result<Dataset> {
        self.generate_inner(n, rng, true)
    }

    fn generate_inner(&self, n: usize, rng: &mut impl Rng, keep_labels: bool) -> Result<Dataset> {
        self.validate()?;
        if n == 0 {
            return Err(Error::Invalid("generate: n must be at least 1".into()));
        }
        let sequences = (0..n)
            .map(|_| {
                let (features, states) = self.sample_sequence(rng);
                Sequence { features, labels: keep_labels.then_some(states) }
            })
            .collect();
        Ok(Dataset { domain_id: self.id, sequences })
    }
}
