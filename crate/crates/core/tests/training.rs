//! Trainer behaviour on small models.

use proptest::prelude::*;
use theia::model::{encode_batch, targets, ModelConfig, TheiaModel};
use theia::taskgen::{gen_dataset, Sample, SampleConfig};
use theia::trainer::*;
use theia::K3;
use theia_autodiff::{forward_eval, EvalOptions, Stream};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        train_samples: 1_500,
        batch_size: 256,
        max_epochs: 2,
        diag_samples: 50,
        early_stop: false,
        ..TrainConfig::default()
    }
}

fn run(cfg: &TrainConfig) -> (TheiaModel, TrainOutcome) {
    let data = make_data(cfg).unwrap();
    let mut m = TheiaModel::init(ModelConfig::tiny(8), &mut Stream::new(cfg.seed, 0)).unwrap();
    let out = train(&mut m, &data, cfg, None).unwrap();
    (m, out)
}

#[test]
fn runs_are_reproducible() {
    let (a, ha) = run(&small_cfg());
    let (b, hb) = run(&small_cfg());
    for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(x.tensor.values(), y.tensor.values(), "{}", x.name);
    }
    let strip = |h: &[CheckpointRecord]| h.iter().map(|r| (r.epoch, r.train_loss, r.overall, r.rule_accuracies.clone())).collect::<Vec<_>>();
    assert_eq!(strip(&ha.history), strip(&hb.history));
    assert_eq!(ha.history.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
    assert_eq!(ha.history[0].rule_accuracies.len(), 12);
}

#[test]
fn zero_epochs_return_the_initial_model() {
    let cfg = TrainConfig {
        max_epochs: 0,
        ..small_cfg()
    };
    let data = make_data(&cfg).unwrap();
    let mut m = TheiaModel::init(ModelConfig::tiny(8), &mut Stream::new(1, 0)).unwrap();
    let before = m.params.clone();
    let out = train(&mut m, &data, &cfg, None).unwrap();
    assert!(out.history.is_empty());
    for ((_, x), (_, y)) in m.params.iter().zip(before.iter()) {
        assert_eq!(x.tensor.values(), y.tensor.values());
    }
}

#[test]
fn shift_and_uniform_presets() {
    let mut mc = ModelConfig::tiny(8);
    let mut tc = small_cfg();
    Ablation::UnknownShift.apply(&mut mc, &mut tc);
    tc.max_epochs = 1;
    let (_, out) = run(&tc);
    assert!(out.history[0].shifted_accuracy.is_some());
    let mut tc = small_cfg();
    Ablation::UniformWeights.apply(&mut mc, &mut tc);
    assert_eq!(tc.class_weights, [1.0; 3]);
    assert_eq!(TrainConfig { class_weights: DEFAULT_CLASS_WEIGHTS, ..tc }, small_cfg());
    assert!(TrainConfig { class_weights: [1.0, 0.0, 1.0], ..small_cfg() }.validate().is_err());
}

#[test]
fn weighted_loss_on_a_single_unknown_example() {
    let s: Sample = *gen_dataset(&SampleConfig::with_seed(1), 0, 200)
        .iter()
        .find(|s| s.verdict == K3::Unknown)
        .unwrap();
    let m = TheiaModel::init(ModelConfig::tiny(8), &mut Stream::new(2, 0)).unwrap();
    let loss_with = |w: [f64; 3]| {
        let (g, loss) = training_graph(&m, w).unwrap();
        let mut feed = encode_batch(&[&s], 20);
        feed.set_index("target", targets(&[&s]));
        forward_eval(&g, &m.params, &feed, &EvalOptions::eval(), &mut Stream::new(0, 0))
            .unwrap()
            .scalar(loss)
    };
    let plain = loss_with([1.0; 3]);
    let w = loss_with(DEFAULT_CLASS_WEIGHTS);
    assert!((w - 2.0 * plain).abs() < 1e-12, "{w} {plain}");
}

#[test]
fn restart_seed_formula() {
    assert_eq!(restart_seed(999, 1), 999_001);
    assert_eq!(restart_seed(42, 3), 42_003);
}

#[test]
fn plateau_examples() {
    let cfg = PlateauConfig::default();
    assert_eq!(plateau_restart_check(&[0.5; 40], &cfg), PlateauDecision::Restart);
    assert_eq!(plateau_restart_check(&[0.5; 39], &cfg), PlateauDecision::Continue);
    // 92% reached at epoch 20, then 30 flat epochs.
    let mut h: Vec<f64> = (0..19).map(|e| 0.5 + 0.02 * e as f64).collect();
    h.push(0.92);
    h.extend([0.92; 29]);
    assert_eq!(plateau_restart_check(&h, &cfg), PlateauDecision::Continue);
    h.push(0.92);
    assert_eq!(plateau_restart_check(&h, &cfg), PlateauDecision::Restart);
}

fn record(overall: f64, rules: Vec<f64>) -> CheckpointRecord {
    CheckpointRecord {
        epoch: 1,
        train_loss: 0.0,
        overall,
        per_class: [0.0; 3],
        rule_accuracies: rules,
        shifted_accuracy: None,
        wall_time_s: 0.0,
    }
}

proptest! {
    #[test]
    fn a_failing_rule_blocks_the_stop(rules in prop::collection::vec(0.991f64..1.0, 12), bad in 0usize..12, low in 0.0f64..0.99) {
        let pass = record(0.9995, rules.clone());
        prop_assert!(kleene_aware_stop(&[pass.clone(), pass.clone()]));
        let mut r = rules;
        r[bad] = low;
        prop_assert!(!kleene_aware_stop(&[pass.clone(), record(0.9995, r.clone())]));
        prop_assert!(!kleene_aware_stop(&[record(0.9995, r), pass.clone()]));
        prop_assert!(!kleene_aware_stop(&[pass]));
    }

    #[test]
    fn improving_runs_never_restart(a in 0.0f64..0.9, r in 0.9f64..0.99, len in 1usize..200) {
        // Strictly rising and past the threshold well before the coarse deadline.
        let h: Vec<f64> = (0..len).map(|e| 0.91 + (0.999 - 0.91) * (1.0 - r.powi(e as i32 + 1)) - if e == 0 { 0.91 - a } else { 0.0 }).collect();
        for k in 1..=len {
            prop_assert_eq!(plateau_restart_check(&h[..k], &PlateauConfig::default()), PlateauDecision::Continue);
        }
    }
}
