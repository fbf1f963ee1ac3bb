use std::sync::atomic::{AtomicU32, Ordering};

use crate::tensor::{NDArray, Scalar};

static NEXT_STORE_TAG: AtomicU32 = AtomicU32::new(1);

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a parameter across stores; used by the tape to route gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: u32,
    pub id: ParamId,
}

#[derive(Clone, Debug)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: NDArray<T>,
    pub grad: Option<NDArray<T>>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Owns a flat list of named parameters.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f32> {
    tag: u32,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed), params: Vec::new() }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: NDArray<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value, grad: None, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey { store: self.tag, id }
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        if !trainable {
            p.grad = None;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }
}
