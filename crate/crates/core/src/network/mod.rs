//! Hybrid classifier: per-frame backbone features, a temporal head and a
//! two-way softmax.
//!
//! All arithmetic runs in `f64`. Parameters live in a flat [`ParamSet`] of
//! named arrays, gradients share the same layout, and every head supplies a
//! hand-written backward pass.

pub mod backbone;
pub mod checkpoint;
mod ops;
mod params;
pub mod recurrent;
pub mod transformer;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backbone::{BackboneKind, BackboneSpec, FeatureBackbone, ProjectionBackbone};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMetadata, EpochRecord};
pub use ops::{cross_entropy2, layer_norm, softmax2, softmax_rows, LAYER_NORM_EPS};
pub use params::{glorot_uniform, ParamSet};
pub use recurrent::{RecurrentCell, RecurrentHeadConfig};
pub use transformer::TransformerHeadConfig;

use crate::clip::ClipTensor;
use crate::seed::SeedHasher;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("sequence of {len} steps exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {name}")]
    NonFinite { name: String },
    #[error("checkpoint configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Forward-pass mode. Dropout is active only in training mode, where every
/// dropout site derives its mask from `dropout_seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { dropout_seed: u64 },
}

impl Mode {
    pub fn sub_seed(self, tag: u64) -> Option<u64> {
        match self {
            Mode::Eval => None,
            Mode::Train { dropout_seed } => {
                Some(SeedHasher::new("dropout", dropout_seed).u64(tag).finish())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Transformer,
    Lstm,
    Gru,
    BiLstm,
    BiGru,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        Self::Transformer,
        Self::Lstm,
        Self::Gru,
        Self::BiLstm,
        Self::BiGru,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Transformer => "transformer",
            Self::Lstm => "lstm",
            Self::Gru => "gru",
            Self::BiLstm => "bilstm",
            Self::BiGru => "bigru",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Self::Transformer => "Transformer",
            Self::Lstm => "LSTM",
            Self::Gru => "GRU",
            Self::BiLstm => "BiLSTM",
            Self::BiGru => "BiGRU",
        }
    }

    /// Default head configuration for features of width `input_dim`.
    pub fn config(self, input_dim: usize) -> Result<HeadConfig, NetworkError> {
        let cell = match self {
            Self::Transformer => {
                return Ok(HeadConfig::Transformer(TransformerHeadConfig::new(
                    input_dim,
                )?))
            }
            Self::Lstm => RecurrentCell::Lstm,
            Self::Gru => RecurrentCell::Gru,
            Self::BiLstm => RecurrentCell::BiLstm,
            Self::BiGru => RecurrentCell::BiGru,
        };
        Ok(HeadConfig::Recurrent(RecurrentHeadConfig::new(
            cell, input_dim,
        )?))
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| NetworkError::Config(format!("unknown head {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum HeadConfig {
    Transformer(TransformerHeadConfig),
    Recurrent(RecurrentHeadConfig),
}

impl HeadConfig {
    pub fn kind(&self) -> HeadKind {
        match self {
            HeadConfig::Transformer(_) => HeadKind::Transformer,
            HeadConfig::Recurrent(r) => match r.cell {
                RecurrentCell::Lstm => HeadKind::Lstm,
                RecurrentCell::Gru => HeadKind::Gru,
                RecurrentCell::BiLstm => HeadKind::BiLstm,
                RecurrentCell::BiGru => HeadKind::BiGru,
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            HeadConfig::Transformer(t) => t.embed_dim,
            HeadConfig::Recurrent(r) => r.input_dim,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        match self {
            HeadConfig::Transformer(t) => t.validate(),
            HeadConfig::Recurrent(r) => r.validate(),
        }
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        match self {
            HeadConfig::Transformer(t) => transformer::init_params(t, rng),
            HeadConfig::Recurrent(r) => recurrent::init_params(r, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub backbone: BackboneSpec,
    pub head: HeadConfig,
    /// Train the backbone projection together with the head.
    #[serde(default)]
    pub fine_tune_backbone: bool,
}

impl ClassifierConfig {
    pub fn new(backbone: BackboneSpec, head: HeadKind) -> Result<Self, NetworkError> {
        let head = head.config(backbone.feature_dim)?;
        Ok(Self {
            backbone,
            head,
            fine_tune_backbone: false,
        })
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        self.backbone.validate()?;
        self.head.validate()?;
        if self.head.input_dim() != self.backbone.feature_dim {
            return Err(NetworkError::Config(format!(
                "head expects {} features but the backbone produces {}",
                self.head.input_dim(),
                self.backbone.feature_dim
            )));
        }
        Ok(())
    }
}

const PROJECTION_PARAM: &str = "backbone.projection";

/// Deterministic parameter initialization: variance-scaled uniform kernels,
/// `N(0, 0.02^2)` positional table, zero biases, unit layer-norm scales.
pub fn init_parameters(config: &ClassifierConfig, seed: u64) -> Result<ParamSet, NetworkError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(SeedHasher::new("init", seed).finish());
    let mut params = config.head.init(&mut rng);
    if config.fine_tune_backbone {
        let backbone = ProjectionBackbone::new(config.backbone.clone())?;
        params.insert(
            PROJECTION_PARAM,
            backbone.projection().to_owned().into_dyn(),
        );
    }
    Ok(params)
}

/// Applies `backbone` to every frame of `clip`.
pub fn extract_features(
    backbone: &dyn FeatureBackbone,
    clip: &ClipTensor,
) -> Result<Array2<f64>, NetworkError> {
    let f = backbone.extract(clip)?;
    if f.dim() != (clip.dim().0, backbone.feature_dim()) {
        return Err(NetworkError::Shape(format!(
            "backbone produced {:?}, expected ({}, {})",
            f.dim(),
            clip.dim().0,
            backbone.feature_dim()
        )));
    }
    Ok(f)
}

#[allow(clippy::large_enum_variant)]
enum HeadCache {
    Transformer(transformer::TransformerCache),
    Recurrent(recurrent::RecurrentCache),
}

pub struct ForwardCache {
    head: HeadCache,
    input: Option<Array2<f64>>,
    pub logits: [f64; 2],
    pub probs: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientOptions {
    /// Training-mode dropout; `None` evaluates in eval mode.
    pub dropout_seed: Option<u64>,
    pub loss_scale: f64,
    /// Spread the batch over the current rayon pool.
    pub parallel: bool,
}

impl Default for GradientOptions {
    fn default() -> Self {
        Self {
            dropout_seed: None,
            loss_scale: 1.0,
            parallel: false,
        }
    }
}

pub struct BatchGradients {
    /// Mean cross-entropy over the batch (before `loss_scale`).
    pub loss: f64,
    pub probs: Vec<[f64; 2]>,
    pub grads: ParamSet,
}

/// Samples per gradient partial sum; fixed so results do not depend on the
/// number of worker threads.
const GRADIENT_CHUNK: usize = 4;

#[derive(Debug, Clone)]
pub struct HybridClassifier {
    config: ClassifierConfig,
    backbone: ProjectionBackbone,
    pub params: ParamSet,
}

impl HybridClassifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self, NetworkError> {
        let params = init_parameters(&config, seed)?;
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: ClassifierConfig, params: ParamSet) -> Result<Self, NetworkError> {
        config.validate()?;
        let expected = init_parameters(&config, 0)?;
        if !expected.same_layout(&params) {
            return Err(NetworkError::ConfigMismatch(
                "parameter names or shapes do not match the configuration".into(),
            ));
        }
        let backbone = ProjectionBackbone::new(config.backbone.clone())?;
        Ok(Self {
            config,
            backbone,
            params,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn backbone(&self) -> &ProjectionBackbone {
        &self.backbone
    }

    /// Input expected by [`forward`](Self::forward) for a clip: backbone
    /// features, or pooled descriptors when the backbone is fine-tuned.
    pub fn encode(&self, clip: &ClipTensor) -> Result<Array2<f64>, NetworkError> {
        if self.config.fine_tune_backbone {
            self.backbone.describe(clip)
        } else {
            extract_features(&self.backbone, clip)
        }
    }

    pub fn forward(
        &self,
        input: ArrayView2<f64>,
        mode: Mode,
    ) -> Result<ForwardCache, NetworkError> {
        let projected = if self.config.fine_tune_backbone {
            let p = self.params.mat(PROJECTION_PARAM);
            if input.ncols() != p.nrows() {
                return Err(NetworkError::Shape(format!(
                    "expected {} descriptor columns, got {}",
                    p.nrows(),
                    input.ncols()
                )));
            }
            Some(input.dot(&p))
        } else {
            None
        };
        let features = projected.as_ref().map_or(input, |f| f.view());
        let (logits, head) = match &self.config.head {
            HeadConfig::Transformer(cfg) => {
                let (l, c) = transformer::forward(cfg, &self.params, features, mode)?;
                (l, HeadCache::Transformer(c))
            }
            HeadConfig::Recurrent(cfg) => {
                let (l, c) = recurrent::forward(cfg, &self.params, features, mode)?;
                (l, HeadCache::Recurrent(c))
            }
        };
        if logits.iter().any(|v| !v.is_finite()) {
            let name = self
                .params
                .first_non_finite()
                .map(str::to_owned)
                .or_else(|| {
                    features
                        .iter()
                        .any(|v| !v.is_finite())
                        .then(|| "input features".to_owned())
                })
                .unwrap_or_else(|| "logits".to_owned());
            return Err(NetworkError::NonFinite { name });
        }
        Ok(ForwardCache {
            head,
            input: projected.map(|_| input.to_owned()),
            logits,
            probs: softmax2(logits),
        })
    }

    /// Eval-mode class probabilities `[negative, positive]`.
    pub fn predict_proba(&self, input: ArrayView2<f64>) -> Result<[f64; 2], NetworkError> {
        Ok(self.forward(input, Mode::Eval)?.probs)
    }

    pub fn predict_clip(&self, clip: &ClipTensor) -> Result<[f64; 2], NetworkError> {
        self.predict_proba(self.encode(clip)?.view())
    }

    /// Accumulates the gradient of `loss_scale * loss` given `dlogits`.
    fn backward(&self, cache: &ForwardCache, dlogits: [f64; 2], grads: &mut ParamSet) {
        let dfeatures = match (&self.config.head, &cache.head) {
            (HeadConfig::Transformer(cfg), HeadCache::Transformer(c)) => {
                transformer::backward(cfg, &self.params, c, dlogits, grads)
            }
            (HeadConfig::Recurrent(cfg), HeadCache::Recurrent(c)) => {
                recurrent::backward(cfg, &self.params, c, dlogits, grads)
            }
            _ => unreachable!("cache built by a different head"),
        };
        if let Some(input) = &cache.input {
            grads.accumulate(PROJECTION_PARAM, &input.t().dot(&dfeatures));
        }
    }

    fn chunk_gradients(
        &self,
        inputs: &[Array2<f64>],
        labels: &[usize],
        offset: usize,
        opts: &GradientOptions,
        weight: f64,
    ) -> Result<(f64, Vec<[f64; 2]>, ParamSet), NetworkError> {
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(inputs.len());
        for (i, (x, &y)) in inputs.iter().zip(labels).enumerate() {
            let mode = match opts.dropout_seed {
                Some(seed) => Mode::Train {
                    dropout_seed: SeedHasher::new("sample", seed)
                        .u64((offset + i) as u64)
                        .finish(),
                },
                None => Mode::Eval,
            };
            let cache = self.forward(x.view(), mode)?;
            let (l, dlogits) = cross_entropy2(cache.probs, y);
            loss += l;
            probs.push(cache.probs);
            self.backward(&cache, dlogits.map(|g| g * weight), &mut grads);
        }
        Ok((loss, probs, grads))
    }

    /// Mean cross-entropy over a batch and its gradient with respect to every
    /// parameter, scaled by `opts.loss_scale`.
    pub fn parameter_gradients(
        &self,
        inputs: &[Array2<f64>],
        labels: &[usize],
        opts: &GradientOptions,
    ) -> Result<BatchGradients, NetworkError> {
        if inputs.len() != labels.len() {
            return Err(NetworkError::Shape(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if inputs.is_empty() {
            return Err(NetworkError::Shape("empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
            return Err(NetworkError::Shape(format!("label {bad} is not 0 or 1")));
        }
        let n = inputs.len();
        let weight = opts.loss_scale / n as f64;
        let chunks: Vec<usize> = (0..n).step_by(GRADIENT_CHUNK).collect();
        let run = |&start: &usize| {
            let end = (start + GRADIENT_CHUNK).min(n);
            self.chunk_gradients(
                &inputs[start..end],
                &labels[start..end],
                start,
                opts,
                weight,
            )
        };
        let parts: Vec<_> = if opts.parallel {
            chunks.par_iter().map(run).collect()
        } else {
            chunks.iter().map(run).collect()
        };
        let mut total_loss = 0.0;
        let mut probs = Vec::with_capacity(n);
        let mut grads = self.params.zeros_like();
        for part in parts {
            let (l, p, g) = part?;
            total_loss += l;
            probs.extend(p);
            grads.add_scaled(&g, 1.0);
        }
        let loss = total_loss / n as f64;
        if !loss.is_finite() {
            return Err(NetworkError::NonFinite {
                name: "loss".into(),
            });
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(NetworkError::NonFinite {
                name: name.to_owned(),
            });
        }
        Ok(BatchGradients { loss, probs, grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn tiny(head: HeadKind) -> ClassifierConfig {
        let mut cfg = ClassifierConfig::new(BackboneSpec::stub(16), HeadKind::Lstm).unwrap();
        cfg.head = match head {
            HeadKind::Transformer => HeadConfig::Transformer(TransformerHeadConfig {
                num_heads: 2,
                ff_dim: 4,
                ..TransformerHeadConfig::new(16).unwrap()
            }),
            other => match other.config(16).unwrap() {
                HeadConfig::Recurrent(r) => HeadConfig::Recurrent(RecurrentHeadConfig {
                    units: 3,
                    dense_units: 5,
                    ..r
                }),
                t => t,
            },
        };
        cfg
    }

    fn random_input(seed: u64, t: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params::normal(&mut rng, &[t, d], 1.0)
            .into_dimensionality()
            .unwrap()
    }

    #[test]
    fn zero_classifier_gives_uniform_probabilities() {
        for head in HeadKind::ALL {
            let mut m = HybridClassifier::new(tiny(head), 3).unwrap();
            m.params.get_mut("classifier.kernel").unwrap().fill(0.0);
            let p = m.predict_proba(random_input(1, 10, 16).view()).unwrap();
            assert_eq!(p, [0.5, 0.5], "{head}");
        }
    }

    #[test]
    fn all_zero_weights_give_uniform_probabilities() {
        for head in HeadKind::ALL {
            let mut m = HybridClassifier::new(tiny(head), 3).unwrap();
            for (_, t) in m.params.iter_mut() {
                t.fill(0.0);
            }
            let p = m.predict_proba(random_input(2, 10, 16).view()).unwrap();
            assert_eq!(p, [0.5, 0.5], "{head}");
        }
    }

    #[test]
    fn init_is_seeded_and_biases_start_at_zero() {
        let cfg = tiny(HeadKind::Transformer);
        let a = init_parameters(&cfg, 9).unwrap();
        assert_eq!(a, init_parameters(&cfg, 9).unwrap());
        assert_ne!(a, init_parameters(&cfg, 10).unwrap());
        for (name, t) in a.iter() {
            if name.ends_with("bias") || name.ends_with("beta") {
                assert!(t.iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let pos = a.get("pos_embedding").unwrap();
        let std = (pos.mapv(|v| v * v).mean().unwrap()).sqrt();
        assert!((std - 0.02).abs() < 0.006, "{std}");
    }

    #[test]
    fn balanced_zero_model_has_zero_bias_gradient() {
        let mut m = HybridClassifier::new(tiny(HeadKind::Transformer), 0).unwrap();
        for (_, t) in m.params.iter_mut() {
            t.fill(0.0);
        }
        let x: Vec<_> = (0..4).map(|s| random_input(s, 10, 16)).collect();
        let g = m
            .parameter_gradients(&x, &[0, 1, 0, 1], &GradientOptions::default())
            .unwrap();
        assert!((g.loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(g
            .grads
            .vector("classifier.bias")
            .iter()
            .all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn loss_scale_scales_every_gradient() {
        let m = HybridClassifier::new(tiny(HeadKind::BiGru), 5).unwrap();
        let x: Vec<_> = (0..3).map(|s| random_input(s + 7, 6, 16)).collect();
        let y = [1, 0, 1];
        let one = m
            .parameter_gradients(&x, &y, &GradientOptions::default())
            .unwrap();
        let two = m
            .parameter_gradients(
                &x,
                &y,
                &GradientOptions {
                    loss_scale: 2.0,
                    ..Default::default()
                },
            )
            .unwrap();
        for ((_, a), (_, b)) in one.grads.iter().zip(two.grads.iter()) {
            for (&u, &v) in a.iter().zip(b) {
                assert!((2.0 * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn parallel_and_serial_gradients_are_identical() {
        let m = HybridClassifier::new(tiny(HeadKind::Transformer), 5).unwrap();
        let x: Vec<_> = (0..11).map(|s| random_input(s, 10, 16)).collect();
        let y: Vec<usize> = (0..11).map(|i| i % 2).collect();
        let opts = GradientOptions {
            dropout_seed: Some(4),
            ..Default::default()
        };
        let serial = m.parameter_gradients(&x, &y, &opts).unwrap();
        let parallel = m
            .parameter_gradients(
                &x,
                &y,
                &GradientOptions {
                    parallel: true,
                    ..opts
                },
            )
            .unwrap();
        assert_eq!(serial.grads, parallel.grads);
        assert_eq!(serial.loss.to_bits(), parallel.loss.to_bits());
    }

    #[test]
    fn eval_forward_is_bit_identical_and_train_mode_uses_dropout() {
        let m = HybridClassifier::new(tiny(HeadKind::Lstm), 1).unwrap();
        let x = random_input(3, 10, 16);
        let a = m.forward(x.view(), Mode::Eval).unwrap().logits;
        let b = m.forward(x.view(), Mode::Eval).unwrap().logits;
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        let t = m
            .forward(x.view(), Mode::Train { dropout_seed: 1 })
            .unwrap()
            .logits;
        assert_ne!(a, t);
    }

    #[test]
    fn nan_parameters_are_reported_by_name() {
        let mut m = HybridClassifier::new(tiny(HeadKind::Transformer), 1).unwrap();
        m.params.get_mut("classifier.bias").unwrap()[[0]] = f64::NAN;
        match m.predict_proba(random_input(0, 4, 16).view()) {
            Err(NetworkError::NonFinite { name }) => assert_eq!(name, "classifier.bias"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn mismatched_head_width_is_rejected() {
        let mut cfg = tiny(HeadKind::Gru);
        cfg.backbone.feature_dim = 8;
        assert!(matches!(
            HybridClassifier::new(cfg, 0),
            Err(NetworkError::Config(_))
        ));
    }

    #[test]
    fn fine_tuning_trains_the_projection() {
        let mut cfg = tiny(HeadKind::Transformer);
        cfg.fine_tune_backbone = true;
        let m = HybridClassifier::new(cfg, 2).unwrap();
        let mut clip = ClipTensor::zeros((10, 224, 224, 3));
        clip.fill(0.4);
        let desc = m.encode(&clip).unwrap();
        assert_eq!(desc.dim(), (10, 147));
        let frozen = extract_features(m.backbone(), &clip).unwrap();
        let mut cfg2 = m.config().clone();
        cfg2.fine_tune_backbone = false;
        let mut params = m.params.clone();
        let mut frozen_params = ParamSet::new();
        for (name, t) in params.iter_mut() {
            if name != PROJECTION_PARAM {
                frozen_params.insert(name, t.clone());
            }
        }
        let head_only = HybridClassifier::from_parts(cfg2, frozen_params).unwrap();
        let a = m.predict_proba(desc.view()).unwrap();
        let b = head_only.predict_proba(frozen.view()).unwrap();
        assert!((a[1] - b[1]).abs() < 1e-12);
        let g = m
            .parameter_gradients(&[desc], &[1], &GradientOptions::default())
            .unwrap();
        assert!(g.grads.mat(PROJECTION_PARAM).iter().any(|v| *v != 0.0));
    }
}
