use serde::{Deserialize, Serialize};

/// Storage of frozen layer weights during the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizationMode {
    #[default]
    F32,
    /// One byte per weight plus one f32 scale per tensor.
    Int8,
}

impl QuantizationMode {
    /// Bytes to hold a frozen tensor of `numel` weights.
    pub fn tensor_bytes(self, numel: usize) -> u64 {
        match self {
            QuantizationMode::F32 => 4 * numel as u64,
            QuantizationMode::Int8 => numel as u64 + 4,
        }
    }
}

/// Bytes of one training step, by component.
///
/// `param_bytes` covers trainable parameters in the graph (encoder and loss
/// head); `frozen_weight_bytes` covers frozen parameters the forward pass
/// reads. `activation_bytes` are values saved for backward; `transient_bytes`
/// is the largest single non-saved value, a peak term outside `total_bytes`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub param_bytes: u64,
    pub grad_bytes: u64,
    pub optimizer_bytes: u64,
    pub activation_bytes: u64,
    pub frozen_weight_bytes: u64,
    pub quantization: QuantizationMode,
    pub transient_bytes: u64,
    /// Largest activations-plus-gradients footprint during the step.
    pub peak_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryReport {
    /// Fills `total_bytes` from the components.
    pub fn with_total(mut self) -> Self {
        self.total_bytes = self.param_bytes
            + self.grad_bytes
            + self.optimizer_bytes
            + self.activation_bytes
            + self.frozen_weight_bytes;
        self
    }

    /// The part a training scheme controls: activations, gradients, and
    /// optimizer slots.
    pub fn headline_bytes(&self) -> u64 {
        self.activation_bytes + self.grad_bytes + self.optimizer_bytes
    }
}
