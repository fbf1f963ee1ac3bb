use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use super::report::{MemoryReport, QuantizationMode};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::train::Regime;

const F32: u64 = 4;

/// Sequence lengths of one step, after any truncation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepShape {
    pub lengths: Vec<usize>,
    /// Padded frame count.
    pub frames: usize,
    /// Masked frames over the batch (masked-input losses only).
    pub masked_frames: usize,
}

impl StepShape {
    /// `batch` sequences of exactly `input_len` frames. The masked-frame
    /// count is the expectation under the configured span masking.
    pub fn uniform(batch: usize, input_len: usize, loss: &LossConfig) -> Self {
        let w = &loss.w2v2;
        let covered: f64 = (0..input_len).map(|t| 1.0 - (1.0 - w.mask_prob).powi(w.mask_span.min(t + 1) as i32)).sum();
        let forced = (1.0 - w.mask_prob).powi(input_len as i32) * w.mask_span.min(input_len) as f64;
        let masked = ((covered + forced) * batch as f64).round() as usize;
        Self { lengths: vec![input_len; batch], frames: input_len, masked_frames: masked.max(batch) }
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.batch() * self.frames
    }
}

/// Everything the planner needs to know about one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSpec {
    pub regime: Regime,
    /// Trainable layers, 1-based. For E2E and GLW this is every layer.
    pub active: RangeInclusive<usize>,
    pub shape: StepShape,
    pub loss: LossConfig,
    pub quantization: QuantizationMode,
}

/// One saved value predicted by the planner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedTensor {
    pub label: String,
    /// Op that produces the value, as the tape names it.
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActivationBreakdown {
    /// Saved encoder input.
    pub stem: u64,
    /// Saved values owned by each layer in the graph, bottom to top.
    pub layers: Vec<u64>,
    /// Saved values of the loss heads and their targets.
    pub head: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub report: MemoryReport,
    pub tensors: Vec<PlannedTensor>,
    pub breakdown: ActivationBreakdown,
}

/// Element counts of the tensors of one layer.
pub fn layer_tensor_numels(cfg: &EncoderConfig) -> Vec<usize> {
    let (d, f) = (cfg.model_dim, cfg.ffn_mult * cfg.model_dim);
    let linear = |i: usize, o: usize| [i * o, o];
    let mut out = Vec::new();
    out.extend([d, d]);
    for _ in 0..4 {
        out.extend(linear(d, d));
    }
    out.push(cfg.num_heads * (cfg.left_context + 1));
    out.extend([d, d]);
    out.extend([cfg.conv_kernel * d, d]);
    out.extend(linear(d, d));
    out.extend([d, d]);
    out.extend(linear(d, f));
    out.extend(linear(f, d));
    out.extend([d, d]);
    out
}

fn stem_tensor_numels(cfg: &EncoderConfig) -> Vec<usize> {
    vec![cfg.input_dim() * cfg.model_dim, cfg.model_dim]
}

/// Parameters of one loss head.
pub fn head_param_count(cfg: &EncoderConfig, loss: &LossConfig) -> usize {
    let (d, dt) = (cfg.model_dim, cfg.feature_dim);
    match loss.kind {
        LossKind::Cpc => loss.cpc.future_horizon * d * dt,
        LossKind::Apc | LossKind::W2v2 => d * dt + dt,
    }
}

struct Acc {
    seen: BTreeSet<String>,
    tensors: Vec<PlannedTensor>,
}

impl Acc {
    /// Records a saved value once per identity `key`; returns its bytes the
    /// first time and 0 afterwards.
    fn save(&mut self, key: String, op: &'static str, shape: Vec<usize>) -> u64 {
        if !self.seen.insert(key.clone()) {
            return 0;
        }
        let bytes = F32 * shape.iter().product::<usize>() as u64;
        self.tensors.push(PlannedTensor { label: key, op, shape, bytes });
        bytes
    }
}

/// Closed-form bytes of one training step, mirroring the tape's save rules
/// tensor by tensor.
pub fn plan(cfg: &EncoderConfig, spec: &StepSpec) -> Result<Plan> {
    cfg.validate()?;
    spec.loss.validate()?;
    let l_max = cfg.num_layers;
    // An empty active range is a forward pass through frozen layers only.
    let forward_only = spec.active.is_empty();
    let (lo, hi) = if forward_only { (l_max + 1, l_max) } else { (*spec.active.start(), *spec.active.end()) };
    if !forward_only && (lo == 0 || hi > l_max) {
        return Err(Error::LayerOutOfRange { layer: if lo == 0 { 0 } else { hi }, num_layers: l_max });
    }
    if !forward_only && spec.regime != Regime::Ilw && (lo, hi) != (1, l_max) {
        return Err(Error::Config(format!("{} trains every layer; active block must be 1..={l_max}", spec.regime)));
    }
    let shape = &spec.shape;
    let min = spec.loss.min_len();
    if shape.batch() == 0 || shape.lengths.iter().any(|&l| l > shape.frames) {
        return Err(Error::Config("step shape: lengths must be non-empty and fit the padded frame count".into()));
    }
    if let Some(&got) = shape.lengths.iter().min().filter(|&&l| l < min && !forward_only) {
        return Err(Error::SequenceTooShort { loss: spec.loss.kind.name(), required: min, got });
    }

    let (d, f, dt) = (cfg.model_dim, cfg.ffn_mult * cfg.model_dim, cfg.feature_dim);
    let n = shape.rows();
    let hw = cfg.num_heads * (cfg.left_context + 1);
    let top = hi;
    let isolate = spec.regime == Regime::Glw;
    let trainable = |l: usize| (lo..=hi).contains(&l);
    let mut acc = Acc { seen: BTreeSet::new(), tensors: Vec::new() };
    let mut breakdown = ActivationBreakdown::default();

    let input_op = if spec.loss.masks_input() { "mask_rows" } else { "leaf" };
    if trainable(1) {
        breakdown.stem += acc.save("input".into(), input_op, vec![n, cfg.input_dim()]);
    }

    // Whether each layer's input requires a gradient.
    let mut rx = trainable(1);
    for l in 1..=top {
        if isolate && l > 1 {
            rx = false;
        }
        let p = trainable(l);
        let rg = rx || p;
        let x_key = if l == 1 { "stem.out".to_string() } else { format!("layer{:02}.out", l - 1) };
        let x_op = if l == 1 { "add_bias" } else { "layer_norm" };
        let k = |name: &str| format!("layer{l:02}.{name}");
        let mut bytes = 0;
        let mut save = |acc: &mut Acc, cond: bool, key: String, op: &'static str, cols: usize, rows: usize| {
            if cond {
                bytes += acc.save(key, op, vec![rows, cols]);
            }
        };
        save(&mut acc, rg, x_key, x_op, d, n);
        save(&mut acc, p, k("attn_norm.out"), "layer_norm", d, n);
        save(&mut acc, rg, k("attn.q"), "add_bias", d, n);
        save(&mut acc, rg, k("attn.k"), "add_bias", d, n);
        save(&mut acc, rg, k("attn.probs"), "window_softmax", cfg.left_context + 1, n * cfg.num_heads);
        save(&mut acc, rg, k("attn.v"), "add_bias", d, n);
        save(&mut acc, p, k("attn.context"), "window_apply", d, n);
        save(&mut acc, rg, k("attn.residual"), "add", d, n);
        save(&mut acc, p, k("conv_norm.out"), "layer_norm", d, n);
        save(&mut acc, rg, k("conv.depthwise"), "depthwise_conv", d, n);
        save(&mut acc, p, k("conv.act"), "silu", d, n);
        save(&mut acc, rg, k("conv.residual"), "add", d, n);
        save(&mut acc, p, k("ffn_norm.out"), "layer_norm", d, n);
        save(&mut acc, rg, k("ffn.in"), "add_bias", f, n);
        save(&mut acc, p, k("ffn.act"), "silu", f, n);
        save(&mut acc, rg, k("ffn.residual"), "add", d, n);
        breakdown.layers.push(bytes);
        rx = rg;
    }

    let loss_layers: Vec<usize> = match (forward_only, isolate) {
        (true, _) => Vec::new(),
        (false, true) => (1..=l_max).collect(),
        (false, false) => vec![top],
    };
    let valid: usize = shape.lengths.iter().sum();
    let classes = |k: usize| k + 1;
    for &l in &loss_layers {
        let hidden = format!("layer{l:02}.out");
        let head = format!("layer{l:02}.head");
        let mut bytes = acc.save(hidden, "layer_norm", vec![n, d]);
        match spec.loss.kind {
            LossKind::Cpc => {
                let c = &spec.loss.cpc;
                bytes += acc.save("targets".into(), "leaf", vec![n, dt]);
                for off in 1..=c.future_horizon {
                    let anchors: usize = shape.lengths.iter().map(|&len| len - off).sum();
                    bytes += acc.save(
                        format!("{head}.scores{off:02}"),
                        "contrast_scores",
                        vec![anchors, classes(c.num_negatives)],
                    );
                }
            }
            LossKind::Apc => {
                let a = &spec.loss.apc;
                bytes += acc.save(format!("{head}.error"), "sub", vec![valid - a.shift * shape.batch(), dt]);
                if a.tv_weight > 0.0 {
                    bytes += acc.save(format!("{head}.delta"), "sub", vec![valid - shape.batch(), dt]);
                }
            }
            LossKind::W2v2 => {
                let w = &spec.loss.w2v2;
                bytes += acc.save("targets".into(), "leaf", vec![n, dt]);
                bytes += acc.save(
                    format!("{head}.scores"),
                    "contrast_scores",
                    vec![shape.masked_frames, classes(w.num_negatives)],
                );
            }
        }
        // In GLW a hidden state is also the next layer's input; it was
        // already counted there and `save` returns 0 here.
        breakdown.head += bytes;
    }
    let activation_bytes: u64 = acc.tensors.iter().map(|t| t.bytes).sum();
    debug_assert_eq!(activation_bytes, breakdown.stem + breakdown.layers.iter().sum::<u64>() + breakdown.head);

    let layer_numels = layer_tensor_numels(cfg);
    let stem_numels = stem_tensor_numels(cfg);
    let mut trainable_params = 0usize;
    let mut frozen_weight_bytes = 0u64;
    let owned = |l: usize| -> Vec<usize> {
        let mut v = layer_numels.clone();
        if l == 1 {
            v.extend(&stem_numels);
        }
        v
    };
    for l in 1..=top {
        let numels = owned(l);
        if trainable(l) {
            trainable_params += numels.iter().sum::<usize>();
        } else {
            frozen_weight_bytes += numels.iter().map(|&m| spec.quantization.tensor_bytes(m)).sum::<u64>();
        }
    }
    trainable_params += loss_layers.len() * head_param_count(cfg, &spec.loss);
    let param_bytes = F32 * trainable_params as u64;
    let frozen_below = lo > 1;
    let transient_bytes = if frozen_below { F32 * (n * f.max(hw)) as u64 } else { 0 };
    let report = MemoryReport {
        param_bytes,
        grad_bytes: param_bytes,
        optimizer_bytes: 2 * param_bytes,
        activation_bytes,
        frozen_weight_bytes,
        quantization: spec.quantization,
        transient_bytes,
        peak_bytes: activation_bytes + param_bytes,
        total_bytes: 0,
    }
    .with_total();
    Ok(Plan { report, tensors: acc.tensors, breakdown })
}

/// Memory of an ILW step on block `active` (E2E when it spans every layer)
/// for `batch` sequences of `input_len` encoder frames.
pub fn plan_step(
    cfg: &EncoderConfig,
    active: RangeInclusive<usize>,
    input_len: usize,
    batch: usize,
    loss: &LossConfig,
    quantization: QuantizationMode,
) -> Result<MemoryReport> {
    let regime = if active == (1..=cfg.num_layers) { Regime::E2e } else { Regime::Ilw };
    let spec = StepSpec {
        regime,
        active,
        shape: StepShape::uniform(batch, input_len, loss),
        loss: loss.clone(),
        quantization,
    };
    Ok(plan(cfg, &spec)?.report)
}
