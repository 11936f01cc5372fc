use lapse_core::clip::{clip_epoch_seed, deterministic_sample, input_dropout_sample, ClipSpec};
use lapse_core::dataset::EventClass;
use lapse_core::network::{
    BackboneSpec, ClassifierConfig, GradientOptions, HeadKind, HybridClassifier,
};
use lapse_core::synthetic::{signal_clips, SignalFeatures};
use lapse_core::training::{
    adam_step, compute_loss, train_binary_model, AdamState, FeatureProvider, TrainConfig,
    TrainReport,
};
use proptest::prelude::*;

fn model(head: HeadKind, seed: u64) -> HybridClassifier {
    HybridClassifier::new(
        ClassifierConfig::new(BackboneSpec::stub(32), head).unwrap(),
        seed,
    )
    .unwrap()
}

fn run(head: HeadKind, cfg: &TrainConfig, n: usize) -> (TrainReport, HybridClassifier) {
    let features = SignalFeatures::new(32, 0.5, 1);
    let mut clips = signal_clips(n, 1, EventClass::Bleeding);
    let val = clips.split_off(n * 4 / 5);
    let mut m = model(head, 1);
    let report = train_binary_model(&mut m, &clips, &val, &features, cfg, None).unwrap();
    (report, m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn epochs_resample_most_clips(seed in any::<u64>(), epoch in 0usize..500, lengths in prop::collection::vec(60usize..=90, 100)) {
        let differ = lengths
            .iter()
            .enumerate()
            .filter(|&(i, &length)| {
                let clip = ClipSpec {
                    case_id: format!("c{i}"),
                    segment_ref: i,
                    start_frame: 30 * i,
                    length_frames: length,
                    label: EventClass::Bleeding,
                };
                let a = input_dropout_sample(&clip, clip_epoch_seed(seed, &clip, epoch)).unwrap();
                let b = input_dropout_sample(&clip, clip_epoch_seed(seed, &clip, epoch + 1)).unwrap();
                a != b
            })
            .count();
        prop_assert!(differ >= 95, "{differ}/100");
    }
}

#[test]
fn batch_loss_falls_over_first_steps() {
    let features = SignalFeatures::new(32, 0.5, 2);
    let clips = signal_clips(16, 2, EventClass::Bleeding);
    let inputs: Vec<_> = clips
        .iter()
        .map(|c| {
            features
                .features(c, &deterministic_sample(&c.clip).unwrap())
                .unwrap()
        })
        .collect();
    let labels: Vec<usize> = clips.iter().map(|c| c.target).collect();
    let cfg = TrainConfig::new(EventClass::Bleeding);
    for head in [HeadKind::Transformer, HeadKind::Lstm] {
        let mut m = model(head, 2);
        let mut state = AdamState::new(&m.params);
        let eval_loss = |m: &HybridClassifier| {
            let probs: Vec<_> = inputs
                .iter()
                .map(|x| m.predict_proba(x.view()).unwrap())
                .collect();
            compute_loss(&probs, &labels).unwrap()
        };
        let mut losses = vec![eval_loss(&m)];
        for step in 0..5 {
            let opts = GradientOptions {
                dropout_seed: Some(step),
                ..GradientOptions::default()
            };
            let g = m.parameter_gradients(&inputs, &labels, &opts).unwrap();
            adam_step(&mut m.params, &g.grads, &mut state, &cfg).unwrap();
            losses.push(eval_loss(&m));
        }
        let stalls = losses.windows(2).filter(|w| w[1] >= w[0]).count();
        assert!(stalls <= 1, "{head:?}: {losses:?}");
    }
}

#[test]
fn zero_learning_rate_freezes_validation() {
    let mut cfg = TrainConfig::new(EventClass::Bleeding);
    cfg.learning_rate = 0.0;
    cfg.max_epochs = 4;
    let (report, _) = run(HeadKind::Gru, &cfg, 40);
    assert_eq!(report.epochs.len(), 4);
    let first = &report.epochs[0];
    assert!(report
        .epochs
        .iter()
        .all(|r| r.val_loss == first.val_loss && r.val_acc == first.val_acc));
}

#[test]
fn same_seed_same_report_and_thread_count_does_not_matter() {
    let mut cfg = TrainConfig::new(EventClass::Bleeding);
    cfg.max_epochs = 3;
    let (a, ma) = run(HeadKind::Transformer, &cfg, 60);
    let (b, mb) = run(HeadKind::Transformer, &cfg, 60);
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.best_epoch, b.best_epoch);
    assert_eq!(ma.params, mb.params);
    cfg.workers = 3;
    let (c, mc) = run(HeadKind::Transformer, &cfg, 60);
    assert_eq!(a.epochs, c.epochs);
    assert_eq!(ma.params, mc.params);
}

#[test]
fn best_epoch_has_lowest_validation_loss() {
    let mut cfg = TrainConfig::new(EventClass::Bleeding);
    cfg.max_epochs = 6;
    let (report, _) = run(HeadKind::BiGru, &cfg, 40);
    let min = report
        .epochs
        .iter()
        .map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(report.best().val_loss, min);
    assert!(report
        .epochs
        .iter()
        .all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
}

#[test]
fn patience_stops_training() {
    let mut cfg = TrainConfig::new(EventClass::Bleeding);
    cfg.learning_rate = 0.0;
    cfg.early_stop_patience = 2;
    cfg.max_epochs = 20;
    let (report, _) = run(HeadKind::Lstm, &cfg, 20);
    assert!(report.stopped_early);
    assert_eq!(report.epochs.len(), 3);
}
