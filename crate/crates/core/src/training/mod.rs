//! Per-event binary training: fresh input-dropout sampling every epoch,
//! shuffled mini-batches, cross-entropy with Adam, best-checkpoint tracking
//! and early stopping.

mod features;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{FeatureProvider, VideoFeatures};

use crate::augment::{AugmentError, AugmentationPolicy, AugmentedEntry};
use crate::clip::{
    clip_epoch_seed, deterministic_sample, input_dropout_sample, tile_segment, ClipError, ClipSpec,
};
use crate::dataset::{CaseAnnotation, DatasetError, EventClass, SegmentRef};
use crate::network::{
    save_checkpoint, CheckpointMetadata, EpochRecord, GradientOptions, HybridClassifier,
    NetworkError, ParamSet,
};
use crate::seed::SeedHasher;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(String),
    #[error(
        "training split needs both classes ({positives} positive, {negatives} negative clips)"
    )]
    MissingClass { positives: usize, negatives: usize },
    #[error("case {0} is not in the annotation set")]
    MissingCase(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite {
        what: String,
        epoch: usize,
        step: usize,
    },
    #[error("loss inputs disagree: {0}")]
    Shape(String),
    #[error(transparent)]
    Clip(#[from] ClipError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub global_seed: u64,
    pub positive_class: EventClass,
    /// Threads used for feature loading and gradient evaluation.
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn new(positive_class: EventClass) -> Self {
        Self {
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-7,
            batch_size: 16,
            max_epochs: 100,
            early_stop_patience: 10,
            global_seed: 0,
            positive_class,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        // a zero rate is allowed so a run can be used as a frozen baseline
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if !self.positive_class.is_relevant() {
            return bad("positive_class must be one of the four events");
        }
        Ok(())
    }
}

/// Mean cross-entropy of two-way predictions against class indices, with
/// probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn compute_loss(probs: &[[f64; 2]], labels: &[usize]) -> Result<f64, TrainError> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(TrainError::Shape(format!(
            "{} predictions, {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if y > 1 {
            return Err(TrainError::Shape(format!("label {y} is not 0 or 1")));
        }
        total += crate::network::cross_entropy2(*p, y).0;
    }
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: ParamSet,
    pub second_moment: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    if !params.same_layout(grads) || !params.same_layout(&state.first_moment) {
        return Err(TrainError::Shape(
            "optimizer state does not match parameters".into(),
        ));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(NetworkError::NonFinite {
            name: format!("gradient of {name}"),
        }
        .into());
    }
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let lr = config.learning_rate;
    let eps = config.adam_eps;
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("same layout");
        let m = state.first_moment.get_mut(name).expect("same layout");
        ndarray::Zip::from(&mut *m)
            .and(g)
            .for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
        let v = state.second_moment.get_mut(name).expect("same layout");
        ndarray::Zip::from(&mut *v)
            .and(g)
            .for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        let m = state.first_moment.get(name).expect("same layout");
        let v = state.second_moment.get(name).expect("same layout");
        ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
            *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        });
    }
    Ok(())
}

/// A clip with its augmentation policy and binary target (1 = positive).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingClip {
    pub clip: ClipSpec,
    pub policy: AugmentationPolicy,
    pub target: usize,
}

fn tile_into(
    out: &mut Vec<TrainingClip>,
    fps: &HashMap<&str, f64>,
    segment: &SegmentRef,
    index: usize,
    policy: AugmentationPolicy,
    positive: EventClass,
) -> Result<(), TrainError> {
    let rate = *fps
        .get(segment.case_id.as_str())
        .ok_or_else(|| TrainError::MissingCase(segment.case_id.clone()))?;
    let clips = match tile_segment(segment, index, rate) {
        Ok(c) => c,
        Err(ClipError::SegmentTooShort { frames }) => {
            log::warn!(
                "skipping {} segment of {} at {:.2}s: only {frames} frames",
                segment.segment.label,
                segment.case_id,
                segment.segment.start_sec
            );
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    out.extend(clips.into_iter().map(|clip| TrainingClip {
        target: usize::from(clip.label == positive),
        clip,
        policy,
    }));
    Ok(())
}

fn fps_table(cases: &[CaseAnnotation]) -> HashMap<&str, f64> {
    cases.iter().map(|c| (c.case_id.as_str(), c.fps)).collect()
}

/// Tiles every augmented listing entry into clips.
pub fn training_clips(
    entries: &[AugmentedEntry],
    cases: &[CaseAnnotation],
    positive: EventClass,
) -> Result<Vec<TrainingClip>, TrainError> {
    let fps = fps_table(cases);
    let mut out = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        tile_into(&mut out, &fps, &e.segment, i, e.policy, positive)?;
    }
    Ok(out)
}

/// Tiles held-out segments into unaugmented clips.
pub fn evaluation_clips(
    segments: &[SegmentRef],
    cases: &[CaseAnnotation],
    positive: EventClass,
) -> Result<Vec<TrainingClip>, TrainError> {
    let fps = fps_table(cases);
    let mut out = Vec::new();
    for (i, s) in segments.iter().enumerate() {
        tile_into(&mut out, &fps, s, i, AugmentationPolicy::IDENTITY, positive)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub wall_time_sec: f64,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Io(e.into()))?;
        for r in &self.epochs {
            w.serialize(r).map_err(|e| TrainError::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Eval-mode predictions on deterministically sampled clips.
pub fn predict_clips(
    model: &HybridClassifier,
    clips: &[TrainingClip],
    provider: &dyn FeatureProvider,
) -> Result<Vec<[f64; 2]>, TrainError> {
    let inputs = deterministic_inputs(clips, provider)?;
    inputs
        .iter()
        .map(|x| Ok(model.predict_proba(x.view())?))
        .collect()
}

fn deterministic_inputs(
    clips: &[TrainingClip],
    provider: &dyn FeatureProvider,
) -> Result<Vec<Array2<f64>>, TrainError> {
    clips
        .par_iter()
        .map(|c| provider.features(c, &deterministic_sample(&c.clip)?))
        .collect()
}

fn accuracy(probs: &[[f64; 2]], labels: &[usize]) -> f64 {
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| usize::from(p[1] > p[0]) == y)
        .count();
    correct as f64 / labels.len() as f64
}

struct RunFiles<'a> {
    dir: &'a Path,
    log: fs::File,
}

impl RunFiles<'_> {
    fn line(&mut self, text: &str) -> Result<(), TrainError> {
        log::info!("{text}");
        writeln!(self.log, "{text}")?;
        Ok(())
    }
}

/// Trains `model` in place and returns the per-epoch report. The best
/// validation-loss parameters are restored into `model` before returning.
///
/// With a run directory, writes `config.json`, `report.csv`, `best.ckpt`,
/// `last.ckpt` and `log.txt` there.
pub fn train_binary_model(
    model: &mut HybridClassifier,
    train: &[TrainingClip],
    val: &[TrainingClip],
    provider: &dyn FeatureProvider,
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training".into()));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation".into()));
    }
    let positives = train.iter().filter(|c| c.target == 1).count();
    if positives == 0 || positives == train.len() {
        return Err(TrainError::MissingClass {
            positives,
            negatives: train.len() - positives,
        });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    pool.install(|| train_inner(model, train, val, provider, config, run_dir))
}

fn train_inner(
    model: &mut HybridClassifier,
    train: &[TrainingClip],
    val: &[TrainingClip],
    provider: &dyn FeatureProvider,
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    let started = Instant::now();
    let mut files = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let resolved = serde_json::json!({
                "train": config,
                "classifier": model.config(),
                "train_clips": train.len(),
                "val_clips": val.len(),
            });
            fs::write(
                dir.join("config.json"),
                serde_json::to_string_pretty(&resolved).expect("serializable"),
            )?;
            Some(RunFiles {
                dir,
                log: fs::File::create(dir.join("log.txt"))?,
            })
        }
        None => None,
    };
    let parallel = config.workers > 1;
    let val_inputs = deterministic_inputs(val, provider)?;
    let val_labels: Vec<usize> = val.iter().map(|c| c.target).collect();

    let mut state = AdamState::new(&model.params);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step = 0usize;

    for epoch in 0..config.max_epochs {
        let inputs: Vec<Array2<f64>> = train
            .par_iter()
            .map(|c| {
                let frames = input_dropout_sample(
                    &c.clip,
                    clip_epoch_seed(config.global_seed, &c.clip, epoch),
                )?;
                provider.features(c, &frames)
            })
            .collect::<Result<_, TrainError>>()?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            SeedHasher::new("shuffle", config.global_seed)
                .u64(epoch as u64)
                .finish(),
        );
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<Array2<f64>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train[i].target).collect();
            let opts = GradientOptions {
                dropout_seed: Some(
                    SeedHasher::new("step", config.global_seed)
                        .u64(step as u64)
                        .finish(),
                ),
                loss_scale: 1.0,
                parallel,
            };
            let g = model
                .parameter_gradients(&xs, &ys, &opts)
                .map_err(|e| non_finite(e.into(), "loss or gradient", epoch, step))?;
            adam_step(&mut model.params, &g.grads, &mut state, config)?;
            if let Some(name) = model.params.first_non_finite() {
                return Err(TrainError::NonFinite {
                    what: format!("parameter {name}"),
                    epoch,
                    step,
                });
            }
            loss_sum += g.loss * batch.len() as f64;
            correct += accuracy(&g.probs, &ys) * batch.len() as f64;
            step += 1;
        }

        let val_probs: Vec<[f64; 2]> = val_inputs
            .iter()
            .map(|x| model.predict_proba(x.view()))
            .collect::<Result<_, _>>()
            .map_err(|e| non_finite(e.into(), "validation output", epoch, step))?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct / train.len() as f64,
            val_loss: compute_loss(&val_probs, &val_labels)?,
            val_acc: accuracy(&val_probs, &val_labels),
        };
        let improved = best.as_ref().is_none_or(|(_, l, _)| record.val_loss < *l);
        if let Some(f) = files.as_mut() {
            f.line(&format!(
                "epoch {epoch}: train_loss={:.6} train_acc={:.4} val_loss={:.6} val_acc={:.4}{}",
                record.train_loss,
                record.train_acc,
                record.val_loss,
                record.val_acc,
                if improved { " *" } else { "" }
            ))?;
        }
        history.push(record);
        if improved {
            best = Some((epoch, history[epoch].val_loss, model.params.clone()));
            since_best = 0;
            if let Some(f) = files.as_ref() {
                save_checkpoint(
                    &f.dir.join("best.ckpt"),
                    model,
                    &metadata(epoch, config, &history),
                )?;
            }
        } else {
            since_best += 1;
            if config.early_stop_patience > 0 && since_best >= config.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, _, best_params) = best.expect("at least one epoch ran");
    if let Some(f) = files.as_mut() {
        save_checkpoint(
            &f.dir.join("last.ckpt"),
            model,
            &metadata(history.len() - 1, config, &history),
        )?;
        f.line(&format!(
            "best epoch {best_epoch}, stopped early: {stopped_early}"
        ))?;
    }
    model.params = best_params;
    let report = TrainReport {
        epochs: history,
        best_epoch,
        stopped_early,
        wall_time_sec: started.elapsed().as_secs_f64(),
    };
    if let Some(f) = files.as_ref() {
        report.write_csv(&f.dir.join("report.csv"))?;
    }
    Ok(report)
}

fn metadata(epoch: usize, config: &TrainConfig, history: &[EpochRecord]) -> CheckpointMetadata {
    CheckpointMetadata {
        epoch,
        seed: config.global_seed,
        event: Some(config.positive_class),
        history: history.to_vec(),
    }
}

fn non_finite(e: TrainError, what: &str, epoch: usize, step: usize) -> TrainError {
    match e {
        TrainError::Network(NetworkError::NonFinite { name }) => TrainError::NonFinite {
            what: format!("{what} ({name})"),
            epoch,
            step,
        },
        other => other,
    }
}
