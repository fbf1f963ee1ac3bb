use std::collections::BTreeSet;

use rand::Rng;

use super::config::EncoderConfig;
use crate::autograd::{NodeId, ParamId, ParamStore, SeqLayout, Tape, Window};
use crate::error::{Error, Result};
use crate::tensor::{NDArray, Scalar};

const LN_EPS: f64 = 1e-5;

/// Parameter handles of one encoder layer.
///
/// Block order: pre-norm left-context self-attention, pre-norm causal
/// depthwise convolution with a pointwise projection, pre-norm feed-forward;
/// each sub-block adds back onto the residual stream, which a final layer
/// norm closes.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub attn_norm: (ParamId, ParamId),
    pub wq: (ParamId, ParamId),
    pub wk: (ParamId, ParamId),
    pub wv: (ParamId, ParamId),
    pub wo: (ParamId, ParamId),
    pub rel_bias: ParamId,
    pub conv_norm: (ParamId, ParamId),
    pub depthwise: (ParamId, ParamId),
    pub pointwise: (ParamId, ParamId),
    pub ffn_norm: (ParamId, ParamId),
    pub ffn_in: (ParamId, ParamId),
    pub ffn_out: (ParamId, ParamId),
    pub out_norm: (ParamId, ParamId),
}

impl LayerParams {
    pub fn ids(&self) -> Vec<ParamId> {
        let pairs = [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.conv_norm,
            self.depthwise,
            self.pointwise,
            self.ffn_norm,
            self.ffn_in,
            self.ffn_out,
            self.out_norm,
        ];
        let mut ids: Vec<ParamId> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        ids.push(self.rel_bias);
        ids.sort();
        ids
    }
}

/// Encoder parameters plus the per-layer freeze flags.
#[derive(Clone, Debug)]
pub struct EncoderState<T: Scalar = f32> {
    pub config: EncoderConfig,
    pub store: ParamStore<T>,
    pub stem: (ParamId, ParamId),
    pub layers: Vec<LayerParams>,
}

fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> NDArray<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    NDArray::from_vec(shape.to_vec(), data).expect("positive shape")
}

impl<T: Scalar> EncoderState<T> {
    /// Fan-in uniform weights, zero biases, unit layer-norm scales.
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.model_dim, config.ffn_mult * config.model_dim);
        let mut store = ParamStore::new();
        let linear = |store: &mut ParamStore<T>, rng: &mut _, name: &str, i: usize, o: usize| {
            (
                store.add(format!("{name}.weight"), uniform(rng, &[i, o], i)),
                store.add(format!("{name}.bias"), NDArray::zeros([o])),
            )
        };
        let stem = linear(&mut store, rng, "stem", config.input_dim(), d);
        let norm = |store: &mut ParamStore<T>, name: &str| {
            (
                store.add(format!("{name}.gamma"), NDArray::full([d], T::one())),
                store.add(format!("{name}.beta"), NDArray::zeros([d])),
            )
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 1..=config.num_layers {
            let p = format!("layer{l:02}");
            let attn_norm = norm(&mut store, &format!("{p}.attn_norm"));
            let wq = linear(&mut store, rng, &format!("{p}.attn.q"), d, d);
            let wk = linear(&mut store, rng, &format!("{p}.attn.k"), d, d);
            let wv = linear(&mut store, rng, &format!("{p}.attn.v"), d, d);
            let wo = linear(&mut store, rng, &format!("{p}.attn.out"), d, d);
            let rel_bias =
                store.add(format!("{p}.attn.rel_bias"), NDArray::zeros([config.num_heads, config.left_context + 1]));
            let conv_norm = norm(&mut store, &format!("{p}.conv_norm"));
            let depthwise = (
                store.add(
                    format!("{p}.conv.depthwise.weight"),
                    uniform(rng, &[config.conv_kernel, d], config.conv_kernel),
                ),
                store.add(format!("{p}.conv.depthwise.bias"), NDArray::zeros([d])),
            );
            let pointwise = linear(&mut store, rng, &format!("{p}.conv.pointwise"), d, d);
            let ffn_norm = norm(&mut store, &format!("{p}.ffn_norm"));
            let ffn_in = linear(&mut store, rng, &format!("{p}.ffn.in"), d, f);
            let ffn_out = linear(&mut store, rng, &format!("{p}.ffn.out"), f, d);
            let out_norm = norm(&mut store, &format!("{p}.out_norm"));
            layers.push(LayerParams {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                rel_bias,
                conv_norm,
                depthwise,
                pointwise,
                ffn_norm,
                ffn_in,
                ffn_out,
                out_norm,
            });
        }
        Ok(Self { config, store, stem, layers })
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    /// Parameter ids owned by layer `layer` (1-based); layer 1 also owns the
    /// input projection.
    pub fn layer_param_ids(&self, layer: usize) -> Result<Vec<ParamId>> {
        self.check_layer(layer)?;
        let mut ids = self.layers[layer - 1].ids();
        if layer == 1 {
            ids.extend([self.stem.0, self.stem.1]);
        }
        Ok(ids)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.config.num_layers {
            return Err(Error::LayerOutOfRange { layer, num_layers: self.config.num_layers });
        }
        Ok(())
    }

    /// Makes exactly the listed layers trainable and freezes the rest.
    pub fn set_trainable(&mut self, layers: &BTreeSet<usize>) -> Result<()> {
        if layers.is_empty() {
            return Err(Error::Invalid("set_trainable: at least one layer must be trainable".into()));
        }
        for &l in layers {
            self.check_layer(l)?;
        }
        for l in 1..=self.config.num_layers {
            let on = layers.contains(&l);
            for id in self.layer_param_ids(l)? {
                self.store.set_trainable(id, on);
            }
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            self.store.set_trainable(id, false);
        }
    }

    pub fn trainable_layers(&self) -> BTreeSet<usize> {
        (1..=self.config.num_layers).filter(|&l| self.store.get(self.layers[l - 1].wq.0).trainable).collect()
    }

    /// Runs the input projection and layers `1..=upto_layer`, returning every
    /// layer output. Layers above `upto_layer` never touch the tape. With
    /// `isolate_layers`, each layer sees a stop-gradient copy of the layer
    /// below so that a loss on layer `l` trains layer `l` only.
    pub fn encode_layers(
        &self,
        tape: &mut Tape<T>,
        input: NodeId,
        layout: SeqLayout,
        upto_layer: usize,
        isolate_layers: bool,
    ) -> Result<Vec<NodeId>> {
        self.check_layer(upto_layer)?;
        let shape = tape.shape(input).to_vec();
        if shape != [layout.rows(), self.config.input_dim()] {
            return Err(Error::Shape {
                op: "encode",
                detail: format!(
                    "input {shape:?} does not match [{} × {}] (feature_dim {} + domain_onehot_dim {})",
                    layout.rows(),
                    self.config.input_dim(),
                    self.config.feature_dim,
                    self.config.domain_onehot_dim
                ),
            });
        }
        let mut x = self.linear(tape, input, self.stem)?;
        let mut outs = Vec::with_capacity(upto_layer);
        for (i, layer) in self.layers[..upto_layer].iter().enumerate() {
            if isolate_layers && i > 0 {
                x = tape.stop_gradient(x);
            }
            x = self.layer_forward(tape, x, layer, layout)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// Hidden sequence `[rows × model_dim]` of layer `upto_layer`.
    pub fn encode(&self, tape: &mut Tape<T>, input: NodeId, layout: SeqLayout, upto_layer: usize) -> Result<NodeId> {
        Ok(*self.encode_layers(tape, input, layout, upto_layer, false)?.last().expect("upto_layer ≥ 1"))
    }

    fn linear(&self, tape: &mut Tape<T>, x: NodeId, (w, b): (ParamId, ParamId)) -> Result<NodeId> {
        let w = tape.param(&self.store, w);
        let b = tape.param(&self.store, b);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }

    fn norm(&self, tape: &mut Tape<T>, x: NodeId, (g, b): (ParamId, ParamId)) -> Result<NodeId> {
        let g = tape.param(&self.store, g);
        let b = tape.param(&self.store, b);
        tape.layer_norm(x, g, b, T::from_f64(LN_EPS))
    }

    fn layer_forward(&self, tape: &mut Tape<T>, x: NodeId, p: &LayerParams, layout: SeqLayout) -> Result<NodeId> {
        let cfg = &self.config;
        let win = Window { layout, heads: cfg.num_heads, window: cfg.left_context };

        let a = self.norm(tape, x, p.attn_norm)?;
        let q = self.linear(tape, a, p.wq)?;
        let k = self.linear(tape, a, p.wk)?;
        let v = self.linear(tape, a, p.wv)?;
        let scale = T::from_f64(1.0 / (cfg.head_dim() as f64).sqrt());
        let s = tape.window_scores(q, k, win, scale)?;
        let rb = tape.param(&self.store, p.rel_bias);
        let s = tape.window_bias(s, rb, win)?;
        let probs = tape.window_softmax(s, win)?;
        let o = tape.window_apply(probs, v, win)?;
        let o = self.linear(tape, o, p.wo)?;
        let h1 = tape.add(x, o)?;

        let c = self.norm(tape, h1, p.conv_norm)?;
        let dw = tape.param(&self.store, p.depthwise.0);
        let db = tape.param(&self.store, p.depthwise.1);
        let c = tape.depthwise_conv(c, dw, db, layout)?;
        let c = tape.silu(c)?;
        let c = self.linear(tape, c, p.pointwise)?;
        let h2 = tape.add(h1, c)?;

        let f = self.norm(tape, h2, p.ffn_norm)?;
        let f = self.linear(tape, f, p.ffn_in)?;
        let f = tape.silu(f)?;
        let f = self.linear(tape, f, p.ffn_out)?;
        let h3 = tape.add(h2, f)?;
        self.norm(tape, h3, p.out_norm)
    }

    /// Copies every parameter value into another numeric precision.
    pub fn cast<U: Scalar>(&self) -> EncoderState<U> {
        let mut store = ParamStore::<U>::new();
        for (_, p) in self.store.iter() {
            let id = store.add(p.name.clone(), p.value.cast());
            store.set_trainable(id, p.trainable);
        }
        EncoderState { config: self.config.clone(), store, stem: self.stem, layers: self.layers.clone() }
    }
}
