mod common;

use std::collections::BTreeSet;

use common::*;
use lwssl::autograd::{SeqLayout, Tape};
use lwssl::encoder::encode_checkpoint;
use lwssl::losses::*;
use lwssl::train::*;
use lwssl::NDArray;
use proptest::prelude::*;

fn plan(regime: Regime, kind: LossKind, total_steps: usize) -> PretrainPlan {
    PretrainPlan { batch_size: 4, ..PretrainPlan::new(regime, LossConfig::new(kind), total_steps) }
}

proptest! {
    #[test]
    fn schedules_conserve_steps(layers in 1usize..=64, extra in 0usize..500, decay in 0.05f64..1.0, kind in 0usize..3) {
        let kind = ScheduleKind::ALL[kind];
        let total = layers + extra;
        let s = build_schedule(ScheduleShape { kind, decay }, layers, total).unwrap();
        prop_assert_eq!(s.len(), layers);
        prop_assert_eq!(s.iter().sum::<usize>(), total);
        prop_assert!(s.iter().all(|&v| v >= 1));
        match kind {
            ScheduleKind::MoreAtBottom => prop_assert!(s.windows(2).all(|w| w[0] >= w[1]), "{:?}", s),
            ScheduleKind::FewerAtBottom => prop_assert!(s.windows(2).all(|w| w[0] <= w[1]), "{:?}", s),
            ScheduleKind::Uniform => prop_assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1),
        }
    }

    #[test]
    fn fewer_at_bottom_mirrors_more_at_bottom(layers in 1usize..=32, extra in 0usize..300, decay in 0.05f64..1.0) {
        let more = build_schedule(ScheduleShape { kind: ScheduleKind::MoreAtBottom, decay }, layers, layers + extra).unwrap();
        let mut fewer = build_schedule(ScheduleShape { kind: ScheduleKind::FewerAtBottom, decay }, layers, layers + extra).unwrap();
        fewer.reverse();
        prop_assert_eq!(more, fewer);
    }
}

#[test]
fn ilw_blocks_cover_layers_bottom_to_top() {
    let mut p = plan(Regime::Ilw, LossKind::Cpc, 70);
    p.layers_per_step = 2;
    p.steps_per_layer = Some(vec![20, 10, 10, 10, 10, 10]);
    let blocks = p.blocks(6).unwrap();
    assert_eq!(blocks.len(), 3);
    assert_eq!(blocks[0].layers, 1..=2);
    assert_eq!(blocks[2].layers, 5..=6);
    assert_eq!(blocks.iter().map(|b| b.steps).collect::<Vec<_>>(), vec![30, 20, 20]);
    assert_eq!(block_at(&blocks, 29), Some(0));
    assert_eq!(block_at(&blocks, 30), Some(1));
    assert_eq!(block_at(&blocks, 70), None);

    p.layers_per_step = 4;
    let blocks = p.blocks(6).unwrap();
    assert_eq!(blocks[1].layers, 5..=6);
    p.layers_per_step = 0;
    assert!(p.validate(6).is_err());
    p.layers_per_step = 1;
    p.steps_per_layer = Some(vec![10; 6]);
    assert!(p.validate(6).is_err(), "sum differs from total_steps");
}

#[test]
fn adam_matches_closed_form() {
    use lwssl::autograd::ParamStore;
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", NDArray::from_vec([2], vec![1.0, -2.0]).unwrap());
    let cfg = AdamConfig::default();
    let mut opt = OptimizerState::new(cfg.clone());
    let grads = [[0.5, -1.0], [0.25, 2.0]];
    let (mut m, mut v, mut w) = ([0.0; 2], [0.0; 2], [1.0, -2.0]);
    for (t, g) in grads.iter().enumerate() {
        store.get_mut(id).grad = Some(NDArray::from_vec([2], g.to_vec()).unwrap());
        opt.step(&mut store);
        let t = t as i32 + 1;
        for i in 0..2 {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            w[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    for (got, want) in store.get(id).value.data().iter().zip(&w) {
        assert!((got - want).abs() < 1e-14);
    }
    assert_eq!(opt.bytes(), 2 * 2 * 8);
    store.set_trainable(id, false);
    opt.retain_trainable(&store);
    assert_eq!(opt.bytes(), 0);
}

#[test]
fn ilw_step_updates_only_the_active_layer() {
    let state = small_state(6, 1);
    let mut p = plan(Regime::Ilw, LossKind::Cpc, 60);
    p.steps_per_layer = Some(vec![10; 6]);
    let mut trainer = Trainer::new(state, p).unwrap();
    let before = trainer.state.clone();
    let b = batch(4, 3);
    // Step 35 lies in layer 4's window.
    trainer.step(35, &b, &mut rng(0)).unwrap();
    for l in 1..=6 {
        let ids = before.layer_param_ids(l).unwrap();
        let same = ids.iter().all(|&id| before.store.get(id).value == trainer.state.store.get(id).value);
        assert_eq!(same, l != 4, "layer {l}");
    }
    assert_eq!(trainer.state.trainable_layers(), BTreeSet::from([4]));
}

#[test]
fn ilw_with_one_block_equals_e2e() {
    for kind in LossKind::ALL {
        let data = pool(6, 2);
        let mut ilw = plan(Regime::Ilw, kind, 8);
        ilw.layers_per_step = 3;
        let mut a = Trainer::new(small_state(3, 4), ilw).unwrap();
        let mut b = Trainer::new(small_state(3, 4), plan(Regime::E2e, kind, 8)).unwrap();
        let ra = a.pretrain(&data, 9, 0, |_, _| Ok(())).unwrap();
        let rb = b.pretrain(&data, 9, 0, |_, _| Ok(())).unwrap();
        assert_eq!(snapshot(&a.state), snapshot(&b.state), "{kind}");
        assert_eq!(ra.iter().map(|r| r.loss).collect::<Vec<_>>(), rb.iter().map(|r| r.loss).collect::<Vec<_>>());
    }
}

#[test]
fn single_layer_regimes_coincide() {
    let data = pool(6, 2);
    let run = |regime| {
        let mut t = Trainer::new(small_state(1, 4), plan(regime, LossKind::Cpc, 6)).unwrap();
        t.pretrain(&data, 5, 0, |_, _| Ok(())).unwrap();
        snapshot(&t.state)
    };
    let e2e = run(Regime::E2e);
    assert_eq!(e2e, run(Regime::Glw));
    assert_eq!(e2e, run(Regime::Ilw));
}

#[test]
fn glw_blocks_gradient_between_layers() {
    let state = small_state(3, 1).cast::<f64>();
    let cfg = LossConfig::new(LossKind::Cpc);
    let head = LossHead::<f64>::new(&cfg, 16, 32, &mut rng(2));
    let b = batch(2, 5);
    let mut tape = Tape::<f64>::new();
    let input = tape.constant(b.input_matrix().cast());
    let targets = tape.constant(b.targets().cast());
    let outs = state.encode_layers(&mut tape, input, b.layout(), 3, true).unwrap();
    let x = LossInput { hidden: outs[2], targets, layout: b.layout(), lengths: &b.lengths, mask: None };
    let loss = ssl_loss(&mut tape, &head, &x, &cfg, &mut rng(3)).unwrap();
    tape.backward(loss).unwrap();
    for l in 1..=2 {
        for id in state.layer_param_ids(l).unwrap() {
            assert!(tape.grad(state.store.key(id)).is_none(), "layer {l} got a gradient");
        }
    }
    let top = state.layer_param_ids(3).unwrap();
    assert!(top.iter().any(|&id| tape.grad(state.store.key(id)).is_some_and(|g| g.data().iter().any(|&v| v != 0.0))));
}

#[test]
fn glw_trains_every_layer_with_its_own_loss() {
    let mut t = Trainer::new(small_state(3, 1), plan(Regime::Glw, LossKind::Apc, 1)).unwrap();
    let before = t.state.clone();
    let out = t.step(0, &batch(4, 3), &mut rng(0)).unwrap();
    assert_eq!(out.layer_losses.len(), 3);
    assert!((out.loss - out.layer_losses.iter().sum::<f64>()).abs() < 1e-4);
    for l in 1..=3 {
        let ids = before.layer_param_ids(l).unwrap();
        assert!(ids.iter().any(|&id| before.store.get(id).value != t.state.store.get(id).value));
    }
}

fn one_step_report(
    regime: Regime,
    kind: LossKind,
    layers: usize,
    k: usize,
    step: usize,
) -> lwssl::membudget::MemoryReport {
    let mut p = plan(regime, kind, 10 * layers);
    p.layers_per_step = k;
    p.steps_per_layer = Some(vec![10; layers]);
    let mut t = Trainer::new(small_state(layers, 1), p).unwrap();
    t.step(step, &batch(4, 3), &mut rng(0)).unwrap().report
}

#[test]
fn glw_costs_more_than_ilw() {
    let glw = one_step_report(Regime::Glw, LossKind::Cpc, 4, 1, 0);
    let ilw = one_step_report(Regime::Ilw, LossKind::Cpc, 4, 1, 0);
    assert!(glw.activation_bytes > ilw.activation_bytes);
    assert!(glw.headline_bytes() > ilw.headline_bytes());
}

#[test]
fn layer_one_costs_about_one_layer_of_e2e() {
    let layers = 6;
    let e2e = one_step_report(Regime::E2e, LossKind::Cpc, layers, 1, 0);
    let ilw = one_step_report(Regime::Ilw, LossKind::Cpc, layers, 1, 0);
    // Slack: the loss head's saved values and the stem input, which both
    // sides carry once.
    let top = one_step_report(Regime::Ilw, LossKind::Cpc, layers, 1, 10 * layers - 1);
    let per_layer_plus_head = top.activation_bytes;
    assert!(ilw.activation_bytes <= e2e.activation_bytes / layers as u64 + per_layer_plus_head);
    assert!((ilw.activation_bytes as f64) < 0.5 * e2e.activation_bytes as f64);
}

#[test]
fn activation_bytes_grow_with_block_size() {
    let mut last = 0;
    for k in [1, 2, 4] {
        let r = one_step_report(Regime::Ilw, LossKind::Cpc, 4, k, 0);
        assert!(r.activation_bytes > last, "k={k}");
        last = r.activation_bytes;
    }
}

#[test]
fn optimizer_slots_follow_the_active_block() {
    let mut p = plan(Regime::Ilw, LossKind::Apc, 4);
    p.steps_per_layer = Some(vec![2, 2]);
    let mut t = Trainer::new(small_state(2, 1), p).unwrap();
    let b = batch(4, 3);
    for step in 0..4 {
        let r = t.step(step, &b, &mut rng(step as u64)).unwrap().report;
        assert_eq!(r.optimizer_bytes, 2 * r.param_bytes, "step {step}");
        assert_eq!(r.grad_bytes, r.param_bytes);
    }
    // Layer 2 active: the stem and layer 1 are frozen.
    let frozen: usize = t.state.layer_param_ids(1).unwrap().iter().map(|&id| t.state.store.get(id).numel()).sum();
    let r = t.step(3, &b, &mut rng(0)).unwrap().report;
    assert_eq!(r.frozen_weight_bytes, 4 * frozen as u64);
}

#[test]
fn every_param_moves_only_inside_its_block_window() {
    let mut p = plan(Regime::Ilw, LossKind::Cpc, 12);
    p.layers_per_step = 2;
    p.steps_per_layer = Some(vec![3, 1, 2, 2, 2, 2]);
    let mut t = Trainer::new(small_state(6, 1), p).unwrap();
    let blocks = t.blocks().to_vec();
    let owner: Vec<usize> = {
        let mut o = vec![0; t.state.store.len()];
        for l in 1..=6 {
            for id in t.state.layer_param_ids(l).unwrap() {
                o[id.index()] = l;
            }
        }
        o
    };
    let mut prev = snapshot(&t.state);
    let mut moved_rows = Vec::new();
    t.pretrain(&pool(6, 2), 3, 0, |t, row| {
        let now = snapshot(&t.state);
        let moved: BTreeSet<usize> = (0..now.len()).filter(|&i| now[i] != prev[i]).map(|i| owner[i]).collect();
        moved_rows.push((row.step, moved));
        prev = now;
        Ok(())
    })
    .unwrap();
    for (step, moved) in moved_rows {
        let block = &blocks[block_at(&blocks, step).unwrap()];
        let expected: BTreeSet<usize> = block.layers.clone().collect();
        assert_eq!(moved, expected, "step {step}");
    }
}

#[test]
fn zero_steps_leave_the_state_unchanged() {
    let state = small_state(2, 1);
    let (after, rows) = e2e_pretrain(state.clone(), &LossConfig::default(), &pool(4, 1), 0, 1).unwrap();
    assert!(rows.is_empty());
    assert_eq!(snapshot(&after), snapshot(&state));
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let run = || {
        let mut p = plan(Regime::Ilw, LossKind::W2v2, 6);
        p.truncate_len = Some(30);
        let mut t = Trainer::new(small_state(3, 1), p).unwrap();
        let rows = t.pretrain(&pool(6, 2), 11, 0, |_, _| Ok(())).unwrap();
        (encode_checkpoint(&t.state), rows)
    };
    assert_eq!(run(), run());
}

#[test]
fn resuming_at_a_block_boundary_replays_the_run() {
    let mut p = plan(Regime::Ilw, LossKind::Cpc, 6);
    p.steps_per_layer = Some(vec![3, 3]);
    let data = pool(6, 2);
    let mut full = Trainer::new(small_state(2, 1), p.clone()).unwrap();
    full.pretrain(&data, 4, 0, |_, _| Ok(())).unwrap();

    let mut first = Trainer::new(small_state(2, 1), p.clone()).unwrap();
    first
        .pretrain(&data, 4, 0, |t, row| {
            if row.step == 2 {
                Err(lwssl::Error::Invalid("stop".into()))
            } else {
                let _ = t;
                Ok(())
            }
        })
        .unwrap_err();
    let mut resumed = Trainer::new(first.state.clone(), p).unwrap();
    resumed.pretrain(&data, 4, 3, |_, _| Ok(())).unwrap();
    assert_eq!(snapshot(&resumed.state), snapshot(&full.state));
    assert!(Trainer::new(small_state(2, 1), resumed.plan.clone())
        .unwrap()
        .pretrain(&data, 4, 1, |_, _| Ok(()))
        .is_err());
}

#[test]
fn truncation_caps_frames_in_the_graph() {
    let mut p = plan(Regime::E2e, LossKind::Cpc, 1);
    let b = batch(4, 3);
    let full = Trainer::new(small_state(2, 1), p.clone()).unwrap().step(0, &b, &mut rng(0)).unwrap().report;
    p.truncate_len = Some(25);
    let cut = Trainer::new(small_state(2, 1), p).unwrap().step(0, &b, &mut rng(0)).unwrap().report;
    assert!(cut.activation_bytes < full.activation_bytes);
    let _ = SeqLayout { batch: 1, frames: 1 };
}

#[test]
fn cpc_starts_near_uniform_and_improves() {
    for seed in 0..3 {
        let mut t = Trainer::new(small_state(2, seed), plan(Regime::E2e, LossKind::Cpc, 200)).unwrap();
        let rows = t.pretrain(&pool(16, seed), seed, 0, |_, _| Ok(())).unwrap();
        assert!((rows[0].loss - 9f64.ln()).abs() < 0.3, "seed {seed}: {}", rows[0].loss);
        let head: f64 = rows[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let tail: f64 = rows[180..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(tail < head, "seed {seed}: {head} -> {tail}");
    }
}

#[test]
fn w2v2_improves_over_training() {
    let mut head_sum = 0.0;
    let mut tail_sum = 0.0;
    for seed in 0..3 {
        let mut t = Trainer::new(small_state(2, seed), plan(Regime::E2e, LossKind::W2v2, 200)).unwrap();
        let rows = t.pretrain(&pool(16, seed), seed, 0, |_, _| Ok(())).unwrap();
        assert!(rows[0].loss <= 9f64.ln() + 0.3);
        head_sum += rows[..20].iter().map(|r| r.loss).sum::<f64>();
        tail_sum += rows[180..].iter().map(|r| r.loss).sum::<f64>();
    }
    assert!(tail_sum < head_sum, "{head_sum} -> {tail_sum}");
}
