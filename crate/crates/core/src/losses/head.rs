use rand::Rng;

use super::{LossConfig, LossKind};
use crate::autograd::{NodeId, ParamId, ParamStore, Tape};
use crate::error::Result;
use crate::tensor::{NDArray, Scalar};

/// Prediction head of one SSL loss, in its own parameter store.
///
/// CPC has one bias-free `d × d_t` projection per future offset; APC and
/// W2V2 have a single `d × d_t` linear layer with bias.
#[derive(Clone, Debug)]
pub struct LossHead<T: Scalar = f32> {
    pub kind: LossKind,
    pub store: ParamStore<T>,
    pub projections: Vec<(ParamId, Option<ParamId>)>,
}

impl<T: Scalar> LossHead<T> {
    pub fn new(cfg: &LossConfig, model_dim: usize, target_dim: usize, rng: &mut impl Rng) -> Self {
        Self::named(cfg, model_dim, target_dim, "head", rng)
    }

    /// Like [`LossHead::new`] with tensor names prefixed by `prefix`.
    pub fn named(cfg: &LossConfig, model_dim: usize, target_dim: usize, prefix: &str, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        // Scaled below fan-in so that initial contrastive scores are close to
        // uniform.
        let bound = 1.0 / ((model_dim * target_dim) as f64).sqrt();
        let mut weight = |store: &mut ParamStore<T>, name: String| {
            let data = (0..model_dim * target_dim).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
            store.add(name, NDArray::from_vec([model_dim, target_dim], data).expect("positive dims"))
        };
        let projections = match cfg.kind {
            LossKind::Cpc => (1..=cfg.cpc.future_horizon)
                .map(|k| (weight(&mut store, format!("{prefix}.cpc.offset{k:02}.weight")), None))
                .collect(),
            kind => {
                let w = weight(&mut store, format!("{prefix}.{kind}.weight"));
                let b = store.add(format!("{prefix}.{kind}.bias"), NDArray::zeros([target_dim]));
                vec![(w, Some(b))]
            }
        };
        Self { kind: cfg.kind, store, projections }
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Sets every head parameter to zero, which makes all contrastive scores
    /// equal.
    pub fn zero(&mut self) {
        for (_, p) in self.store.iter_mut() {
            p.value.data_mut().fill(T::zero());
        }
    }

    /// `hidden · W_i (+ b_i)` for projection `i`.
    pub(crate) fn project(&self, tape: &mut Tape<T>, hidden: NodeId, i: usize) -> Result<NodeId> {
        let (w, b) = self.projections[i];
        let w = tape.param(&self.store, w);
        let out = tape.matmul(hidden, w)?;
        match b {
            Some(b) => {
                let b = tape.param(&self.store, b);
                tape.add_bias(out, b)
            }
            None => Ok(out),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LossHead<U> {
        let mut store = ParamStore::<U>::new();
        for (_, p) in self.store.iter() {
            let id = store.add(p.name.clone(), p.value.cast());
            store.set_trainable(id, p.trainable);
        }
        LossHead { kind: self.kind, store, projections: self.projections.clone() }
    }
}
