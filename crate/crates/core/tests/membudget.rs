mod common;

use std::collections::BTreeMap;

use common::*;
use lwssl::autograd::{SeqLayout, Tape};
use lwssl::encoder::{EncoderConfig, EncoderState};
use lwssl::losses::{LossConfig, LossKind};
use lwssl::membudget::*;
use lwssl::train::*;
use rand::Rng;

fn assert_agrees(cfg: &EncoderConfig, m: &Measured) -> Plan {
    let p = plan(cfg, &m.spec).unwrap();
    let (planned, measured) = (&p.report, &m.outcome.report);
    let ctx =
        format!("{:?} {:?} {}: {}", m.spec.regime, m.spec.active, m.spec.loss.kind, tensor_diff(&p, &m.outcome.saved));
    assert_eq!(planned.activation_bytes, measured.activation_bytes, "{ctx}");
    assert_eq!(planned.grad_bytes, measured.grad_bytes, "{ctx}");
    assert_eq!(planned.optimizer_bytes, measured.optimizer_bytes, "{ctx}");
    assert_eq!(planned.param_bytes, measured.param_bytes, "{ctx}");
    assert_eq!(planned.frozen_weight_bytes, measured.frozen_weight_bytes, "{ctx}");
    assert_eq!(planned.peak_bytes, measured.peak_bytes, "{ctx}");
    let errors = validate_against_measurement(&p, measured, &m.outcome.saved).unwrap();
    assert!(errors.headline_max() <= 0.01, "{errors:?}");
    p
}

fn multiset(items: impl Iterator<Item = (&'static str, Vec<usize>)>) -> BTreeMap<(&'static str, Vec<usize>), usize> {
    let mut m = BTreeMap::new();
    for key in items {
        *m.entry(key).or_default() += 1;
    }
    m
}

#[test]
fn planner_matches_tape_over_config_matrix() {
    let mut r = rng(2024);
    for num_layers in 2..=8 {
        for k in [1, 2, num_layers] {
            for len in [50, 100, 200] {
                let cfg = small_config(num_layers);
                let kind = LossKind::ALL[r.random_range(0..3)];
                let regime = match k {
                    k if k == num_layers && r.random_bool(0.5) => Regime::Glw,
                    k if k == num_layers => Regime::E2e,
                    _ => Regime::Ilw,
                };
                let num_blocks = num_layers.div_ceil(k);
                let block = if regime == Regime::Ilw { r.random_range(0..num_blocks) } else { 0 };
                let lengths = [len, len - 7, len - 13];
                let batch = batch_of(&cfg, &lengths, r.random());
                let m = measure(cfg.clone(), regime, kind, k, block, &batch);
                let p = assert_agrees(&cfg, &m);
                let planned = multiset(p.tensors.iter().map(|t| (t.op, t.shape.clone())));
                let seen = multiset(m.outcome.saved.iter().map(|t| (t.op, t.shape.clone())));
                assert_eq!(planned, seen, "L={num_layers} k={k} len={len} {kind}");
            }
        }
    }
}

#[test]
fn toy_layer_three_matches_measurement() {
    let cfg = EncoderConfig::toy();
    let batch = batch_of(&cfg, &[100, 80, 64, 90], 5);
    for kind in LossKind::ALL {
        let m = measure(cfg.clone(), Regime::Ilw, kind, 1, 2, &batch);
        assert_eq!(m.spec.active, 3..=3);
        assert_agrees(&cfg, &m);
        assert!(m.outcome.report.frozen_weight_bytes > 0);
    }
}

#[test]
fn frozen_graph_saves_nothing() {
    let cfg = small_config(3);
    let batch = batch_of(&cfg, &[40, 30], 1);
    let mut state: EncoderState = EncoderState::new(cfg.clone(), &mut rng(0)).unwrap();
    state.freeze_all();
    let mut tape = Tape::<f32>::new();
    let layout = SeqLayout { batch: 2, frames: batch.frames() };
    tape.forward(|t| {
        let x = t.constant(batch.input_matrix());
        state.encode(t, x, layout, 3)
    })
    .unwrap();
    assert_eq!(tape.activation_bytes(), 0);
    assert!(tape.saved_tensors().is_empty());

    let spec = StepSpec {
        regime: Regime::Ilw,
        #[allow(clippy::reversed_empty_ranges)]
        active: 4..=3,
        shape: StepShape { lengths: batch.lengths.clone(), frames: batch.frames(), masked_frames: 0 },
        loss: LossConfig::new(LossKind::Apc),
        quantization: QuantizationMode::F32,
    };
    let p = plan(&cfg, &spec).unwrap();
    assert_eq!(p.report.activation_bytes, 0);
    assert_eq!(p.report.grad_bytes, 0);
    assert_eq!(p.report.frozen_weight_bytes, 4 * cfg.param_count() as u64);
}

#[test]
fn doubling_the_batch_doubles_activations() {
    let cfg = small_config(4);
    for kind in [LossKind::Apc, LossKind::Cpc] {
        let one = batch_of(&cfg, &[60, 45], 8);
        let two = batch_of(&cfg, &[60, 45, 60, 45], 8);
        let a = measure(cfg.clone(), Regime::Ilw, kind, 1, 1, &one);
        let b = measure(cfg.clone(), Regime::Ilw, kind, 1, 1, &two);
        assert_eq!(2 * a.outcome.report.activation_bytes, b.outcome.report.activation_bytes);
        let (pa, pb) = (plan(&cfg, &a.spec).unwrap(), plan(&cfg, &b.spec).unwrap());
        assert_eq!(2 * pa.report.activation_bytes, pb.report.activation_bytes);
    }
}

#[test]
fn layer_tensors_sum_to_layer_params() {
    for cfg in [EncoderConfig::toy(), EncoderConfig::paper_scale(), small_config(2)] {
        assert_eq!(layer_tensor_numels(&cfg).iter().sum::<usize>(), cfg.layer_param_count());
    }
    let state: EncoderState = EncoderState::new(small_config(2), &mut rng(0)).unwrap();
    let mut actual: Vec<usize> =
        state.layer_param_ids(2).unwrap().iter().map(|&id| state.store.get(id).value.len()).collect();
    let mut planned = layer_tensor_numels(&small_config(2));
    actual.sort_unstable();
    planned.sort_unstable();
    assert_eq!(actual, planned);
}

#[test]
fn one_layer_costs_one_over_l_of_the_stack() {
    let cfg = EncoderConfig::toy();
    let loss = LossConfig::new(LossKind::Cpc);
    let spec = |regime, active| StepSpec {
        regime,
        active,
        shape: StepShape::uniform(8, 100, &loss),
        loss: loss.clone(),
        quantization: QuantizationMode::F32,
    };
    let l = cfg.num_layers;
    let e2e = plan(&cfg, &spec(Regime::E2e, 1..=l)).unwrap();
    let layer_total: u64 = e2e.breakdown.layers.iter().sum();
    for active in 1..=l {
        let one = plan(&cfg, &spec(Regime::Ilw, active..=active)).unwrap();
        assert_eq!(one.breakdown.layers.len(), active);
        let own = *one.breakdown.layers.last().unwrap();
        assert_eq!(own * l as u64, layer_total, "layer {active}");
        assert!(one.breakdown.layers[..active - 1].iter().all(|&b| b == 0));
    }

    // Whole-step ratio: 1/L up to the input and loss-head terms.
    let one = plan(&cfg, &spec(Regime::Ilw, 1..=1)).unwrap();
    let ratio = one.report.activation_bytes as f64 / e2e.report.activation_bytes as f64;
    let slack = (e2e.breakdown.stem + e2e.breakdown.head) as f64 / e2e.report.activation_bytes as f64;
    assert!((ratio - 1.0 / l as f64).abs() <= slack, "ratio {ratio} slack {slack}");

    // Measured ratio against the planner's.
    let batch = batch_of(&cfg, &[100; 4], 4);
    let m1 = measure(cfg.clone(), Regime::Ilw, LossKind::Cpc, 1, 0, &batch);
    let ml = measure(cfg.clone(), Regime::E2e, LossKind::Cpc, l, 0, &batch);
    let measured = m1.outcome.report.activation_bytes as f64 / ml.outcome.report.activation_bytes as f64;
    let planned = plan(&cfg, &m1.spec).unwrap().report.activation_bytes as f64
        / plan(&cfg, &ml.spec).unwrap().report.activation_bytes as f64;
    assert!((measured / planned - 1.0).abs() <= 0.10, "{measured} vs {planned}");
}

#[test]
fn halving_input_halves_block_activations() {
    let cfg = EncoderConfig::toy();
    let loss = LossConfig::new(LossKind::Apc);
    let at = |len| {
        let spec = StepSpec {
            regime: Regime::Ilw,
            active: 2..=2,
            shape: StepShape::uniform(4, len, &loss),
            loss: loss.clone(),
            quantization: QuantizationMode::F32,
        };
        plan(&cfg, &spec).unwrap().breakdown.layers[1]
    };
    // Hand count for one toy layer over N rows: 13 saved [N, d] values and two
    // [N, 4d] FFN values, plus H·(W+1) attention probabilities.
    let (d, h, w) = (32u64, 2u64, 8u64);
    let hand = |n: u64| 4 * n * (13 * d + 2 * 4 * d + h * (w + 1));
    assert_eq!(at(200), hand(800));
    assert_eq!(at(100), hand(400));
    assert_eq!(at(100) * 2, at(200));
}

#[test]
fn int8_frozen_weights_save_three_quarters() {
    let cfg = EncoderConfig::paper_scale();
    let loss = LossConfig::new(LossKind::Cpc);
    let f32 = plan_step(&cfg, 17..=17, 100, 8, &loss, QuantizationMode::F32).unwrap();
    let int8 = plan_step(&cfg, 17..=17, 100, 8, &loss, QuantizationMode::Int8).unwrap();
    assert!(int8.total_bytes < f32.total_bytes);
    let saved = (f32.total_bytes - int8.total_bytes) as f64;
    let expected = 0.75 * f32.frozen_weight_bytes as f64;
    assert!((saved / expected - 1.0).abs() < 1e-3, "{saved} vs {expected}");
    for r in [&f32, &int8] {
        assert_eq!(
            r.total_bytes,
            r.param_bytes + r.grad_bytes + r.optimizer_bytes + r.activation_bytes + r.frozen_weight_bytes
        );
    }
    // Layer 1 has nothing frozen below it.
    let bottom = plan_step(&cfg, 1..=1, 100, 8, &loss, QuantizationMode::Int8).unwrap();
    assert_eq!(bottom.frozen_weight_bytes, 0);
    assert_eq!(bottom.transient_bytes, 0);
    assert!(f32.transient_bytes > 0);
}

#[test]
fn short_inputs_are_rejected() {
    let cfg = EncoderConfig::toy();
    let err = plan_step(&cfg, 1..=1, 20, 8, &LossConfig::new(LossKind::Cpc), QuantizationMode::F32);
    assert!(matches!(err, Err(lwssl::Error::SequenceTooShort { required: 21, got: 20, .. })));
    assert!(plan_step(&cfg, 1..=7, 100, 8, &LossConfig::new(LossKind::Cpc), QuantizationMode::F32).is_err());
    assert!(plan_step(&cfg, 0..=1, 100, 8, &LossConfig::new(LossKind::Cpc), QuantizationMode::F32).is_err());
}

#[test]
fn activations_grow_with_length_batch_and_block() {
    let cfg = EncoderConfig::toy();
    for kind in LossKind::ALL {
        let loss = LossConfig::new(kind);
        let act = |active, len, batch| {
            plan_step(&cfg, active, len, batch, &loss, QuantizationMode::F32).unwrap().activation_bytes
        };
        for len in [50, 100, 200] {
            assert!(act(1..=1, len, 4) <= act(1..=1, len * 2, 4));
            assert!(act(1..=1, len, 4) <= act(1..=1, len, 8));
            assert!(act(1..=1, len, 4) <= act(1..=2, len, 4));
            assert!(act(1..=2, len, 4) <= act(1..=6, len, 4));
            assert!(act(2..=2, len, 4) <= act(2..=4, len, 4));
        }
    }
}

#[test]
fn paper_scale_orderings() {
    let cfg = EncoderConfig::paper_scale();
    let loss = LossConfig::new(LossKind::Cpc);
    let total = |active, len| plan_step(&cfg, active, len, 1, &loss, QuantizationMode::F32).unwrap().total_bytes;
    // More layers updated per step costs more.
    let by_k: Vec<u64> = [1, 2, 4, 17].iter().map(|&k| total(1..=k, 686)).collect();
    assert!(by_k.windows(2).all(|w| w[0] < w[1]), "{by_k:?}");
    // Shorter inputs cost less, and layer 17 always costs more than layer 1.
    let lens = [686, 300, 200, 100];
    let bottom: Vec<u64> = lens.iter().map(|&n| total(1..=1, n)).collect();
    let top: Vec<u64> = lens.iter().map(|&n| total(17..=17, n)).collect();
    assert!(bottom.windows(2).all(|w| w[0] > w[1]), "{bottom:?}");
    assert!(top.windows(2).all(|w| w[0] > w[1]), "{top:?}");
    assert!(top.iter().zip(&bottom).all(|(t, b)| t > b));
}

#[test]
fn extrapolation() {
    let exact = extrapolate_linear(&[(1.0, 10.0), (3.0, 30.0)], 5.0).unwrap();
    assert!((exact.predicted - 50.0).abs() < 1e-9);
    assert!((exact.r_squared - 1.0).abs() < 1e-12);
    assert!(extrapolate_linear(&[(2.0, 1.0), (2.0, 3.0)], 5.0).is_err());
    assert!(extrapolate_linear(&[(2.0, 1.0)], 5.0).is_err());
    assert!(extrapolate_linear(&[], 5.0).is_err());

    // Oracle: normal equations solved by hand for the three published points.
    let pts = [(1.0, 759.0), (2.0, 1257.0), (4.0, 2007.0)];
    let fit = extrapolate_linear(&pts, 17.0).unwrap();
    let slope = (3.0 * (759.0 + 2514.0 + 8028.0) - 7.0 * 4023.0) / (3.0 * 21.0 - 49.0);
    let intercept = (4023.0 - slope * 7.0) / 3.0;
    assert!((fit.slope - slope).abs() < 1e-9);
    assert!((fit.intercept - intercept).abs() < 1e-9);
    assert!(fit.r_squared > 0.98);
    // Same methodology as the published 17-layer figure; close but not equal.
    assert!((fit.predicted / 7356.0 - 1.0).abs() < 0.05, "{}", fit.predicted);
}

#[test]
fn mismatch_reports_largest_tensors() {
    let cfg = small_config(2);
    let batch = batch_of(&cfg, &[40, 30], 2);
    let m = measure(cfg.clone(), Regime::E2e, LossKind::Apc, 2, 0, &batch);
    let p = plan(&cfg, &m.spec).unwrap();
    let mut wrong = m.outcome.report;
    wrong.activation_bytes *= 2;
    let err = validate_against_measurement(&p, &wrong, &m.outcome.saved[1..]).unwrap_err().to_string();
    assert!(err.contains("over by"), "{err}");
}
