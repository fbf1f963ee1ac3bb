//! Central finite-difference checks of the tape's gradients in f64.
//!
//! Each case builds a scalar function of a few parameter tensors, then
//! compares the autodiff gradient with `(f(x+h) − f(x−h)) / 2h` for every
//! element. The numerical side only ever runs forward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{NodeId, ParamId, ParamStore, SeqLayout, Tape, Window};
use crate::error::Result;
use crate::losses::{
    sample_mask, ssl_loss, ApcConfig, CpcConfig, LossConfig, LossHead, LossInput, LossKind, W2v2Config,
};
use crate::tensor::NDArray;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;

/// A scalar-valued graph over the parameters of a store.
pub type Builder<'a> = dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + 'a;

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

/// Like [`Builder`], with read access to the store being perturbed.
pub type StoreBuilder<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[NodeId]) -> Result<NodeId> + 'a;

fn evaluate(store: &ParamStore<f64>, build: &StoreBuilder<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let leaves: Vec<NodeId> = ids.into_iter().map(|id| tape.param(store, id)).collect();
    let out = build(&mut tape, store, &leaves)?;
    Ok(tape.scalar(out))
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)` over all parameters, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    if na + nn < 1e-300 {
        0.0
    } else {
        diff / (na + nn)
    }
}

/// Compares tape gradients against central differences for every element of
/// every parameter in `store`.
pub fn check(name: &str, store: &mut ParamStore<f64>, build: &Builder<'_>) -> Result<GradCheck> {
    check_store(name, store, &|t, _, l| build(t, l))
}

/// [`check`] for graphs that also read the store directly, such as loss
/// heads.
pub fn check_store(name: &str, store: &mut ParamStore<f64>, build: &StoreBuilder<'_>) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let leaves: Vec<NodeId> = ids.iter().map(|&id| tape.param(store, id)).collect();
    let out = build(&mut tape, store, &leaves)?;
    tape.backward(out)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &id in &ids {
        let n = store.get(id).numel();
        match tape.grad(store.key(id)) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + STEP;
            let fp = evaluate(store, build)?;
            store.get_mut(id).value.data_mut()[i] = orig - STEP;
            let fm = evaluate(store, build)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * STEP));
        }
    }
    Ok(GradCheck { name: name.to_string(), rel_error: relative_error(&analytic, &numeric) })
}

pub(crate) fn random_array(rng: &mut impl Rng, shape: &[usize], scale: f64) -> NDArray<f64> {
    let n = shape.iter().product();
    NDArray::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> NDArray<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    NDArray::from_vec(shape.to_vec(), data).expect("shape")
}

/// Names of the primitive ops covered by [`primitive_case`].
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add_bias",
    "add",
    "sub",
    "mul",
    "scale",
    "silu",
    "square",
    "abs",
    "layer_norm",
    "window_scores",
    "window_bias",
    "window_softmax",
    "window_apply",
    "depthwise_conv",
    "gather_rows",
    "contrast_scores",
    "cross_entropy",
    "weighted_sum",
    "sum",
    "mask_rows",
];

/// Projects an op's output to a scalar with fixed random weights.
fn project(tape: &mut Tape<f64>, out: NodeId, weights: &NDArray<f64>) -> Result<NodeId> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Runs one random finite-difference case for a named primitive op.
pub fn primitive_case(op: &str, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let batch = rng.random_range(1..=2);
    let frames = rng.random_range(2..=5);
    let heads = rng.random_range(1..=2);
    let dh = rng.random_range(1..=3);
    let window = rng.random_range(1..=3);
    let layout = SeqLayout { batch, frames };
    let win = Window { layout, heads, window };
    let n = layout.rows();
    let d = heads * dh;
    let (m, k, c) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));

    let r = &mut rng;
    let check_with = |store: &mut ParamStore<f64>, out_shape: Vec<usize>, rng: &mut ChaCha8Rng, f: &Builder<'_>| {
        let wts = random_array(rng, &out_shape, 1.0);
        check(op, store, &|t: &mut Tape<f64>, l: &[NodeId]| {
            let o = f(t, l)?;
            project(t, o, &wts)
        })
    };

    match op {
        "matmul" => {
            store.add("a", random_array(r, &[m, k], 1.0));
            store.add("b", random_array(r, &[k, c], 1.0));
            check_with(&mut store, vec![m, c], r, &|t, l| t.matmul(l[0], l[1]))
        }
        "add_bias" => {
            store.add("x", random_array(r, &[m, c], 1.0));
            store.add("b", random_array(r, &[c], 1.0));
            check_with(&mut store, vec![m, c], r, &|t, l| t.add_bias(l[0], l[1]))
        }
        "add" | "sub" | "mul" => {
            store.add("a", random_array(r, &[m, c], 1.0));
            store.add("b", random_array(r, &[m, c], 1.0));
            let which = op.to_string();
            check_with(&mut store, vec![m, c], r, &move |t, l| match which.as_str() {
                "add" => t.add(l[0], l[1]),
                "sub" => t.sub(l[0], l[1]),
                _ => t.mul(l[0], l[1]),
            })
        }
        "scale" => {
            store.add("x", random_array(r, &[m, c], 1.0));
            let s = r.random_range(-2.0..2.0);
            check_with(&mut store, vec![m, c], r, &move |t, l| t.scale(l[0], s))
        }
        "silu" | "square" => {
            store.add("x", random_array(r, &[m, c], 2.0));
            let which = op.to_string();
            check_with(&mut store, vec![m, c], r, &move |t, l| {
                if which == "silu" {
                    t.silu(l[0])
                } else {
                    t.square(l[0])
                }
            })
        }
        "abs" => {
            store.add("x", away_from_zero(r, &[m, c]));
            check_with(&mut store, vec![m, c], r, &|t, l| t.abs(l[0]))
        }
        "layer_norm" => {
            let cols = c + 1;
            store.add("x", random_array(r, &[m, cols], 1.0));
            store.add("gamma", random_array(r, &[cols], 1.0));
            store.add("beta", random_array(r, &[cols], 1.0));
            check_with(&mut store, vec![m, cols], r, &|t, l| t.layer_norm(l[0], l[1], l[2], 1e-5))
        }
        "window_scores" => {
            store.add("q", random_array(r, &[n, d], 1.0));
            store.add("k", random_array(r, &[n, d], 1.0));
            check_with(&mut store, vec![n * heads, window + 1], r, &move |t, l| t.window_scores(l[0], l[1], win, 0.7))
        }
        "window_bias" => {
            store.add("s", random_array(r, &[n * heads, window + 1], 1.0));
            store.add("bias", random_array(r, &[heads, window + 1], 1.0));
            check_with(&mut store, vec![n * heads, window + 1], r, &move |t, l| t.window_bias(l[0], l[1], win))
        }
        "window_softmax" => {
            store.add("s", random_array(r, &[n * heads, window + 1], 2.0));
            check_with(&mut store, vec![n * heads, window + 1], r, &move |t, l| t.window_softmax(l[0], win))
        }
        "window_apply" => {
            store.add("p", random_array(r, &[n * heads, window + 1], 1.0));
            store.add("v", random_array(r, &[n, d], 1.0));
            check_with(&mut store, vec![n, d], r, &move |t, l| t.window_apply(l[0], l[1], win))
        }
        "depthwise_conv" => {
            let kernel = rng_kernel(r);
            store.add("x", random_array(r, &[n, c], 1.0));
            store.add("w", random_array(r, &[kernel, c], 1.0));
            store.add("b", random_array(r, &[c], 1.0));
            check_with(&mut store, vec![n, c], r, &move |t, l| t.depthwise_conv(l[0], l[1], l[2], layout))
        }
        "gather_rows" => {
            store.add("x", random_array(r, &[m, c], 1.0));
            let idx: Vec<usize> = (0..m + 2).map(|_| r.random_range(0..m)).collect();
            let len = idx.len();
            check_with(&mut store, vec![len, c], r, &move |t, l| t.gather_rows(l[0], idx.clone()))
        }
        "contrast_scores" => {
            let rows = m + 1;
            store.add("pred", random_array(r, &[rows, c], 1.0));
            store.add("targets", random_array(r, &[rows + 1, c], 1.0));
            let anchors: Vec<usize> = (0..3).map(|_| r.random_range(0..rows)).collect();
            let nc = 3;
            let cands: Vec<usize> = (0..anchors.len() * nc).map(|_| r.random_range(0..rows + 1)).collect();
            check_with(&mut store, vec![anchors.len(), nc], r, &move |t, l| {
                t.contrast_scores(l[0], l[1], anchors.clone(), cands.clone(), 0.5)
            })
        }
        "cross_entropy" => {
            let cols = c + 1;
            store.add("logits", random_array(r, &[m, cols], 2.0));
            let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..cols)).collect();
            let weights: Vec<f64> = (0..m).map(|_| r.random_range(0.1..1.0)).collect();
            check(op, &mut store, &move |t, l| t.cross_entropy(l[0], targets.clone(), weights.clone()))
        }
        "weighted_sum" => {
            store.add("x", random_array(r, &[m, c], 1.0));
            let weights: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
            check(op, &mut store, &move |t, l| t.weighted_sum(l[0], weights.clone()))
        }
        "sum" => {
            store.add("x", random_array(r, &[m, c], 1.0));
            let sq = |t: &mut Tape<f64>, l: &[NodeId]| {
                let s = t.square(l[0])?;
                t.sum(s)
            };
            check(op, &mut store, &sq)
        }
        "mask_rows" => {
            store.add("x", random_array(r, &[m, c], 1.0));
            let mask: Vec<bool> = (0..m).map(|_| r.random_bool(0.5)).collect();
            let fill: Vec<f64> = (0..r.random_range(0..=c)).map(|_| r.random_range(-1.0..1.0)).collect();
            check_with(&mut store, vec![m, c], r, &move |t, l| t.mask_rows(l[0], mask.clone(), &fill))
        }
        other => Err(crate::Error::Invalid(format!("no gradient case for op {other:?}"))),
    }
}

fn rng_kernel(r: &mut impl Rng) -> usize {
    r.random_range(1..=3)
}

/// Runs one random finite-difference case for an SSL loss, differentiating
/// with respect to the hidden sequence and every head parameter.
pub fn loss_case(kind: LossKind, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = LossConfig::new(kind);
    cfg.cpc = CpcConfig { future_horizon: rng.random_range(1..=3), num_negatives: rng.random_range(1..=3) };
    cfg.apc = ApcConfig { shift: rng.random_range(1..=3), tv_weight: rng.random_range(0.05..0.5) };
    cfg.w2v2 =
        W2v2Config { mask_prob: 0.3, mask_span: rng.random_range(1..=3), num_negatives: rng.random_range(1..=3) };
    let (d, d_t) = (rng.random_range(2..=4), rng.random_range(1..=3));
    let batch = rng.random_range(1..=2);
    let min = cfg.min_len();
    let frames = min + rng.random_range(0..=3);
    let lengths: Vec<usize> = (0..batch).map(|_| rng.random_range(min..=frames)).collect();
    let layout = SeqLayout { batch, frames };

    let head = LossHead::<f64>::new(&cfg, d, d_t, &mut rng);
    let (kind, projections) = (head.kind, head.projections.clone());
    let mut store = head.store;
    let hidden = store.add("hidden", random_array(&mut rng, &[layout.rows(), d], 1.0));
    let targets = random_array(&mut rng, &[layout.rows(), d_t], 1.0);
    let mask = sample_mask(&lengths, layout, &cfg.w2v2, &mut rng)?;
    let loss_seed = rng.random();

    check_store(&format!("{kind}_loss"), &mut store, &|t, store, leaves| {
        let head = LossHead { kind, store: store.clone(), projections: projections.clone() };
        let targets = t.constant(targets.clone());
        let input = LossInput { hidden: leaves[hidden.index()], targets, layout, lengths: &lengths, mask: Some(&mask) };
        ssl_loss(t, &head, &input, &cfg, &mut ChaCha8Rng::seed_from_u64(loss_seed))
    })
}

/// Worst of `cases` random cases for every primitive op and SSL loss, in
/// [`PRIMITIVES`] order followed by the losses. Cases run in parallel.
pub fn suite(cases: u64) -> Result<Vec<GradCheck>> {
    use rayon::prelude::*;
    let names: Vec<String> =
        PRIMITIVES.iter().map(|s| s.to_string()).chain(LossKind::ALL.iter().map(|k| format!("loss:{k}"))).collect();
    names
        .par_iter()
        .map(|name| {
            let mut worst = GradCheck { name: name.clone(), rel_error: 0.0 };
            for seed in 0..cases {
                let r = match name.strip_prefix("loss:") {
                    Some(k) => {
                        loss_case(LossKind::ALL.into_iter().find(|l| l.name() == k).expect("listed loss"), seed)?
                    }
                    None => primitive_case(name, seed)?,
                };
                if r.rel_error.is_nan() || r.rel_error > worst.rel_error {
                    worst.rel_error = r.rel_error;
                }
            }
            Ok(worst)
        })
        .collect()
}
