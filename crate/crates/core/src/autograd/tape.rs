//! The recording tape and its byte accounting.
//!
//! Every op appends a node. When a node requires a gradient, the op marks the
//! input values its backward rule needs as *retained*; the payload of each
//! retained non-parameter node is counted once into `retained_bytes`. Nothing
//! else is counted: parameter values belong to the model, and the values of
//! non-retained nodes are freed before backward runs.

use std::collections::BTreeMap;

use super::ops::Op;
use super::param::{ParamKey, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{NDArray, Scalar};

/// Index of a node on a [`Tape`]. Ids are topologically ordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

pub(crate) struct Node<T: Scalar> {
    pub op: Op<T>,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub value: Option<NDArray<T>>,
    pub requires_grad: bool,
    pub retained: bool,
    pub param: Option<ParamKey>,
    /// Set for nodes that share their input's storage (stop-gradient).
    pub alias_of: Option<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Recording,
    Differentiated,
}

/// Byte counters of a tape at a point in time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeBytes {
    pub activation_bytes: u64,
    pub grad_bytes: u64,
    pub peak_bytes: u64,
}

/// A value the tape keeps for backward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SavedTensor {
    /// Name of the op that produced the value.
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub bytes: u64,
}

/// Reverse-mode autodiff tape.
pub struct Tape<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    phase: Phase,
    saved_bytes: u64,
    grad_bytes: u64,
    peak_bytes: u64,
    max_saved_bytes: u64,
    grads: BTreeMap<ParamKey, NDArray<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            phase: Phase::Recording,
            saved_bytes: 0,
            grad_bytes: 0,
            peak_bytes: 0,
            max_saved_bytes: 0,
            grads: BTreeMap::new(),
        }
    }

    /// Runs a graph-building closure on an empty or released tape.
    pub fn forward<F>(&mut self, build: F) -> Result<NodeId>
    where
        F: FnOnce(&mut Tape<T>) -> Result<NodeId>,
    {
        if !self.nodes.is_empty() || self.phase != Phase::Recording {
            return Err(Error::TapeNotReleased);
        }
        build(self)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes currently retained: saved activations plus gradient buffers.
    pub fn retained_bytes(&self) -> u64 {
        self.saved_bytes + self.grad_bytes
    }

    /// Bytes of activations saved for backward.
    pub fn activation_bytes(&self) -> u64 {
        self.saved_bytes
    }

    pub fn grad_bytes(&self) -> u64 {
        self.grad_bytes
    }

    /// Running maximum of [`Tape::retained_bytes`] since creation or the last
    /// [`Tape::reset_peak`].
    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    /// Largest saved-activation footprint seen since the last reset.
    pub fn peak_activation_bytes(&self) -> u64 {
        self.max_saved_bytes
    }

    pub fn bytes(&self) -> TapeBytes {
        TapeBytes { activation_bytes: self.saved_bytes, grad_bytes: self.grad_bytes, peak_bytes: self.peak_bytes }
    }

    /// Every counted saved value, in recording order.
    pub fn saved_tensors(&self) -> Vec<SavedTensor> {
        self.nodes
            .iter()
            .filter(|n| n.retained && n.param.is_none() && n.alias_of.is_none())
            .map(|n| SavedTensor {
                op: n.op.name(),
                shape: n.shape.clone(),
                bytes: n.value.as_ref().map_or(0, NDArray::bytes),
            })
            .collect()
    }

    pub fn reset_peak(&mut self) {
        self.peak_bytes = self.retained_bytes();
        self.max_saved_bytes = self.saved_bytes;
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_retained(&self, id: NodeId) -> bool {
        self.nodes[id.0].retained
    }

    /// Value of a node; `None` once a transient value has been freed.
    pub fn value(&self, id: NodeId) -> Option<&NDArray<T>> {
        self.nodes[id.0].value.as_ref()
    }

    pub(crate) fn val(&self, id: NodeId) -> &NDArray<T> {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("value of a node was freed before use; a backward rule is missing a save")
    }

    /// Scalar value of a node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.val(id).data()[0]
    }

    /// Inserts a constant (input data, targets, masks).
    pub fn constant(&mut self, value: NDArray<T>) -> NodeId {
        self.push_raw(Op::Leaf, Vec::new(), value, false, None)
    }

    /// Inserts a parameter leaf. It requires a gradient iff it is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: super::ParamId) -> NodeId {
        let p = store.get(id);
        self.push_raw(Op::Param, Vec::new(), p.value.clone(), p.trainable, Some(store.key(id)))
    }

    pub(crate) fn push_raw(
        &mut self,
        op: Op<T>,
        inputs: Vec<NodeId>,
        value: NDArray<T>,
        requires_grad: bool,
        param: Option<ParamKey>,
    ) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite output from {:?}", op.name());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape: value.shape().to_vec(),
            value: Some(value),
            requires_grad,
            retained: false,
            param,
            alias_of: None,
        });
        id
    }

    /// Marks a node's value as needed by a backward rule.
    pub(crate) fn save(&mut self, id: NodeId) {
        let mut root = id;
        while let Some(a) = self.nodes[root.0].alias_of {
            // Aliases keep their value but are never counted.
            self.nodes[root.0].retained = true;
            root = a;
        }
        let node = &mut self.nodes[root.0];
        if node.retained {
            return;
        }
        node.retained = true;
        if node.param.is_none() {
            self.saved_bytes += node.value.as_ref().map_or(0, NDArray::bytes);
            self.max_saved_bytes = self.max_saved_bytes.max(self.saved_bytes);
            self.peak_bytes = self.peak_bytes.max(self.retained_bytes());
        }
    }

    pub(crate) fn set_alias(&mut self, id: NodeId, of: NodeId) {
        self.nodes[id.0].alias_of = Some(of);
    }

    /// Differentiates `loss` and accumulates gradients for every trainable
    /// parameter reachable from it.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.phase == Phase::Differentiated {
            return Err(Error::BackwardTwice);
        }
        let shape = &self.nodes[loss.0].shape;
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        self.phase = Phase::Differentiated;
        self.free_transients(loss);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }

        let mut adj: Vec<Option<NDArray<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(NDArray::full(self.nodes[loss.0].shape.clone(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(key) = node.param {
                match self.grads.get_mut(&key) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        self.grad_bytes += g.bytes();
                        self.grads.insert(key, g);
                    }
                }
                continue;
            }
            let input_grads = self.backward_node(NodeId(i), &g)?;
            for (inp, ig) in self.nodes[i].inputs.clone().into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut adj[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        self.peak_bytes = self.peak_bytes.max(self.retained_bytes());
        Ok(())
    }

    fn free_transients(&mut self, keep: NodeId) {
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.retained && node.param.is_none() && i != keep.0 {
                node.value = None;
            }
        }
    }

    /// Gradient accumulated for a parameter by the last backward pass.
    pub fn grad(&self, key: ParamKey) -> Option<&NDArray<T>> {
        self.grads.get(&key)
    }

    /// Moves this store's gradients from the tape into `Param::grad`.
    /// Gradient bytes stay counted until [`Tape::release`].
    pub fn write_grads(&mut self, store: &mut ParamStore<T>) {
        let tag = store.tag();
        let keys: Vec<ParamKey> = self.grads.keys().copied().filter(|k| k.store == tag).collect();
        for key in keys {
            let g = self.grads.remove(&key).expect("key listed");
            let p = store.get_mut(key.id);
            if p.trainable {
                p.grad = Some(g);
            }
        }
    }

    /// Drops all nodes, saved activations, and gradient buffers. Retained
    /// bytes return to zero; the peak is kept until [`Tape::reset_peak`].
    pub fn release(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.saved_bytes = 0;
        self.grad_bytes = 0;
        self.phase = Phase::Recording;
    }
}
