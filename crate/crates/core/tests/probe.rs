mod common;

use common::*;
use lwssl::data::*;
use lwssl::encoder::EncoderState;
use lwssl::probe::*;
use lwssl::train::AdamConfig;

struct Task {
    source: DomainSpec,
    target: DomainSpec,
    labeled: LabeledSet,
    pool: UnlabeledSet,
    eval_source: EvalSet,
    eval_target: EvalSet,
}

fn task(seed: u64) -> Task {
    let (source, target) = two_domains(&TaskConfig::default()).unwrap();
    let mut r = rng(seed);
    let src = source.generate(24, &mut r).unwrap().stacked(4, 3).unwrap();
    let tgt = target.generate(24, &mut r).unwrap().stacked(4, 3).unwrap();
    let labeled = LabeledSet::new(src.clone(), &source).unwrap();
    let eval_source = EvalSet::generate(&source, 12, 4, 3, &mut r).unwrap();
    let eval_target = EvalSet::generate(&target, 12, 4, 3, &mut r).unwrap();
    Task { source, target, labeled, pool: UnlabeledSet::new([src, tgt]), eval_source, eval_target }
}

fn config(steps: usize, mode: FinetuneMode) -> FinetuneConfig {
    FinetuneConfig { steps, mode, optimizer: AdamConfig::with_lr(3e-3), ..FinetuneConfig::default() }
}

fn no_op(_: usize, _: f64, _: &EncoderState, _: &ProbeHead) -> lwssl::Result<()> {
    Ok(())
}

#[test]
fn head_has_linear_param_count() {
    let head = ProbeHead::new(16, 8, &mut rng(0));
    assert_eq!(head.param_count(), 16 * 8 + 8);
}

#[test]
fn head_only_leaves_encoder_untouched() {
    let t = task(1);
    let mut state = small_state(3, 2);
    let mut head = ProbeHead::new(16, 8, &mut rng(3));
    let before = snapshot(&state);
    let head_before = head.store.get(head.weight).value.clone();
    finetune(&mut state, &mut head, &t.labeled, &config(20, FinetuneMode::HeadOnly), &mut rng(4), no_op).unwrap();
    assert_eq!(snapshot(&state), before);
    assert_ne!(head.store.get(head.weight).value, head_before);

    finetune(&mut state, &mut head, &t.labeled, &config(5, FinetuneMode::Full), &mut rng(4), no_op).unwrap();
    assert_ne!(snapshot(&state), before);
}

#[test]
fn zero_steps_change_nothing() {
    let t = task(2);
    let mut state = small_state(2, 0);
    let mut head = ProbeHead::new(16, 8, &mut rng(1));
    let before = evaluate(&state, &head, &t.eval_source, &t.eval_target, 0).unwrap();
    let losses =
        finetune(&mut state, &mut head, &t.labeled, &config(0, FinetuneMode::Full), &mut rng(2), no_op).unwrap();
    assert!(losses.is_empty());
    assert_eq!(evaluate(&state, &head, &t.eval_source, &t.eval_target, 0).unwrap(), before);
}

#[test]
fn random_head_is_at_chance() {
    let t = task(3);
    let mut rates = Vec::new();
    for seed in 0..8 {
        let state = small_state(2, seed);
        let head = ProbeHead::new(16, 8, &mut rng(seed + 50));
        rates.push(evaluate_set(&state, &head, &t.eval_target).unwrap().frame_error_rate());
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    assert!((mean - (1.0 - 1.0 / 8.0)).abs() <= 0.05, "{rates:?}");
}

#[test]
fn error_rate_counts_valid_frames_only() {
    let t = task(4);
    let state = small_state(2, 5);
    let head = ProbeHead::new(16, 8, &mut rng(6));
    let result = evaluate_set(&state, &head, &t.eval_source).unwrap();

    // Oracle: one unpadded sequence at a time.
    let (mut errors, mut frames) = (0, 0);
    let data = t.eval_source.dataset();
    for s in &data.sequences {
        let batch = FeatureBatch::from_sequences(&[(s, data.domain_id)], 4).unwrap();
        let predicted = predict(&state, &head, &batch).unwrap();
        let labels = s.labels.as_ref().unwrap();
        errors += predicted.iter().zip(labels).filter(|(p, l)| p != l).count();
        frames += s.len();
    }
    assert_eq!((result.errors, result.frames), (errors, frames));
    assert_eq!(result.frame_error_rate(), errors as f64 / frames as f64);
    assert_eq!(result.domain_id, SOURCE_DOMAIN);
}

#[test]
fn evaluation_and_finetuning_are_reproducible() {
    let t = task(5);
    let run = || {
        let mut state = small_state(2, 9);
        let mut head = ProbeHead::new(16, 8, &mut rng(10));
        finetune(&mut state, &mut head, &t.labeled, &config(15, FinetuneMode::Full), &mut rng(11), no_op).unwrap();
        evaluate(&state, &head, &t.eval_source, &t.eval_target, 9).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.seed, 9);
}

#[test]
fn finetuning_learns_the_source_task() {
    let t = task(6);
    let mut state = small_state(2, 1);
    let mut head = ProbeHead::new(16, 8, &mut rng(2));
    let mut seen = Vec::new();
    let losses = finetune(
        &mut state,
        &mut head,
        &t.labeled,
        &config(150, FinetuneMode::Full),
        &mut rng(3),
        |step, loss, _, _| {
            seen.push((step, loss));
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(seen.len(), 150);
    assert_eq!(seen[0].0, 1);
    assert!(losses[140..].iter().sum::<f64>() / 10.0 < 0.5 * losses[0]);
    let fer = evaluate_set(&state, &head, &t.eval_source).unwrap().frame_error_rate();
    assert!(fer < 0.4, "{fer}");
}

#[test]
fn oracle_ceiling_beats_source_only_on_target() {
    let t = task(7);
    let steps = config(200, FinetuneMode::Full);
    let mut state = small_state(2, 4);
    let mut head = ProbeHead::new(16, 8, &mut rng(5));
    finetune(&mut state, &mut head, &t.labeled, &steps, &mut rng(6), no_op).unwrap();
    let source_only = evaluate_set(&state, &head, &t.eval_target).unwrap().frame_error_rate();

    // The ceiling trains on held-out target labels and is scored on a
    // different target set.
    let train_target = EvalSet::generate(&t.target, 24, 4, 3, &mut rng(70)).unwrap();
    let mut state = small_state(2, 4);
    let mut head = ProbeHead::new(16, 8, &mut rng(5));
    finetune(&mut state, &mut head, &LabeledSet::oracle(&train_target), &steps, &mut rng(6), no_op).unwrap();
    let ceiling = evaluate_set(&state, &head, &t.eval_target).unwrap().frame_error_rate();
    assert!(ceiling < source_only, "ceiling {ceiling} vs source-only {source_only}");
}

#[test]
fn pseudo_labels_follow_the_model() {
    let t = task(8);
    let state = small_state(2, 3);
    let head = ProbeHead::new(16, 8, &mut rng(4));
    let pseudo = pseudo_label(&state, &head, &t.pool, TARGET_DOMAIN).unwrap();
    let part = &pseudo.parts()[0];
    assert_eq!(part.domain_id, TARGET_DOMAIN);
    for s in &part.sequences {
        let batch = FeatureBatch::from_sequences(&[(s, TARGET_DOMAIN)], 4).unwrap();
        assert_eq!(s.labels.as_ref().unwrap(), &predict(&state, &head, &batch).unwrap());
    }
    let both = t.labeled.clone().union(pseudo);
    assert_eq!(both.len(), 48);
    assert!(pseudo_label(&state, &head, &t.pool, 3).is_err());
}

#[test]
fn target_labels_cannot_reach_training() {
    let t = task(9);
    // A target dataset carrying labels, as a tampered file might.
    let mut tampered = t.eval_target.dataset().clone();
    assert!(tampered.sequences[0].labels.is_some());
    assert!(LabeledSet::new(tampered.clone(), &t.target).is_err());
    // Relabeling its domain id to pass as source is caught too.
    assert!(LabeledSet::new(tampered.clone(), &t.source).is_err());
    tampered.domain_id = SOURCE_DOMAIN;
    assert!(LabeledSet::new(tampered.clone(), &t.target).is_err());
    // The pretraining pool drops every label on construction.
    let pool = UnlabeledSet::new([t.eval_target.dataset().clone()]);
    assert!(pool.parts().iter().flat_map(|p| &p.sequences).all(|s| s.labels.is_none()));
    // Unlabeled source data is rejected for fine-tuning.
    let unlabeled = t.labeled.parts()[0].clone().strip_labels();
    assert!(LabeledSet::new(unlabeled, &t.source).is_err());
}

#[test]
fn invalid_finetune_settings_are_rejected() {
    let t = task(10);
    let mut state = small_state(2, 0);
    let mut head = ProbeHead::new(16, 4, &mut rng(0));
    let err = finetune(&mut state, &mut head, &t.labeled, &config(1, FinetuneMode::Full), &mut rng(0), no_op);
    assert!(err.is_err(), "head has 4 classes, config 8");
    let cfg = FinetuneConfig { num_classes: 4, ..config(1, FinetuneMode::Full) };
    let err = finetune(&mut state, &mut head, &t.labeled, &cfg, &mut rng(0), no_op);
    assert!(err.is_err(), "labels reach 7");
    let cfg = FinetuneConfig { batch_size: 0, ..config(1, FinetuneMode::Full) };
    assert!(cfg.validate().is_err());
}
