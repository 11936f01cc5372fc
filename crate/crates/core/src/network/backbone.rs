//! Per-frame feature extractors.
//!
//! Every adapter maps a `T x 224 x 224 x 3` clip to `T x D` features, one
//! frame at a time. The built-in adapters average-pool each frame onto a
//! coarse grid and apply a fixed seeded projection; the ResNet50-class and
//! EfficientNetB0-class adapters add ImageNet mean/std normalization and
//! use their networks' feature widths.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::normal;
use super::NetworkError;
use crate::clip::{ClipTensor, FRAME_SIZE};
use crate::seed::SeedHasher;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
pub const DEFAULT_GRID: usize = 7;
pub const STUB_FEATURE_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Resnet50,
    EfficientNetB0,
    Stub,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [Self::Resnet50, Self::EfficientNetB0, Self::Stub];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Resnet50 => "resnet50",
            Self::EfficientNetB0 => "efficientnetb0",
            Self::Stub => "stub",
        }
    }

    /// Display name used in reports.
    pub fn title(self) -> &'static str {
        match self {
            Self::Resnet50 => "ResNet50",
            Self::EfficientNetB0 => "EfficientNetB0",
            Self::Stub => "Stub",
        }
    }

    pub fn default_feature_dim(self) -> usize {
        match self {
            Self::Resnet50 => 2048,
            Self::EfficientNetB0 => 1280,
            Self::Stub => STUB_FEATURE_DIM,
        }
    }

    fn normalizes(self) -> bool {
        !matches!(self, Self::Stub)
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| NetworkError::Config(format!("unknown backbone {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub feature_dim: usize,
    pub grid: usize,
    pub seed: u64,
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind) -> Self {
        Self {
            kind,
            feature_dim: kind.default_feature_dim(),
            grid: DEFAULT_GRID,
            seed: 0,
        }
    }

    pub fn stub(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            ..Self::new(BackboneKind::Stub)
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.feature_dim == 0 {
            return Err(NetworkError::Config("feature_dim must be positive".into()));
        }
        if self.grid == 0 || !FRAME_SIZE.is_multiple_of(self.grid) {
            return Err(NetworkError::Config(format!(
                "grid {} must divide the frame size {FRAME_SIZE}",
                self.grid
            )));
        }
        Ok(())
    }

    /// Length of the pooled per-frame descriptor.
    pub fn descriptor_dim(&self) -> usize {
        self.grid * self.grid * 3
    }
}

/// Frame-wise feature extractor.
pub trait FeatureBackbone: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    fn feature_dim(&self) -> usize {
        self.spec().feature_dim
    }

    /// `T x 224 x 224 x 3` clip to `T x D` features.
    fn extract(&self, clip: &ClipTensor) -> Result<Array2<f64>, NetworkError>;
}

/// Grid pooling followed by a fixed linear projection.
#[derive(Debug, Clone)]
pub struct ProjectionBackbone {
    spec: BackboneSpec,
    projection: Array2<f64>,
}

impl ProjectionBackbone {
    pub fn new(spec: BackboneSpec) -> Result<Self, NetworkError> {
        spec.validate()?;
        let p = spec.descriptor_dim();
        let seed = SeedHasher::new("backbone", spec.seed)
            .str(spec.kind.as_str())
            .finish();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = normal(&mut rng, &[p, spec.feature_dim], 1.0 / (p as f64).sqrt())
            .into_dimensionality()
            .expect("2-d");
        Ok(Self { spec, projection })
    }

    pub fn projection(&self) -> ArrayView2<'_, f64> {
        self.projection.view()
    }

    /// Pooled (and, for the ImageNet adapters, normalized) frame descriptors,
    /// `T x grid*grid*3`.
    pub fn describe(&self, clip: &ClipTensor) -> Result<Array2<f64>, NetworkError> {
        let (t, h, w, c) = clip.dim();
        if h != FRAME_SIZE || w != FRAME_SIZE || c != 3 {
            return Err(NetworkError::Shape(format!(
                "expected frames of {FRAME_SIZE}x{FRAME_SIZE}x3, got {h}x{w}x{c}"
            )));
        }
        let g = self.spec.grid;
        let cell = FRAME_SIZE / g;
        let area = (cell * cell) as f64;
        let mut out = Array2::zeros((t, self.spec.descriptor_dim()));
        for (frame, mut row) in clip.axis_iter(Axis(0)).zip(out.rows_mut()) {
            let mut sums = vec![0f64; g * g * 3];
            for ((y, x, ch), &v) in frame.indexed_iter() {
                sums[((y / cell) * g + x / cell) * 3 + ch] += f64::from(v);
            }
            for (i, s) in sums.into_iter().enumerate() {
                let mut v = s / area;
                if self.spec.kind.normalizes() {
                    v = (v - IMAGENET_MEAN[i % 3]) / IMAGENET_STD[i % 3];
                }
                row[i] = v;
            }
        }
        Ok(out)
    }
}

impl FeatureBackbone for ProjectionBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn extract(&self, clip: &ClipTensor) -> Result<Array2<f64>, NetworkError> {
        Ok(self.describe(clip)?.dot(&self.projection))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn clip_with(values: &[f32]) -> ClipTensor {
        let mut c = ClipTensor::zeros((values.len(), FRAME_SIZE, FRAME_SIZE, 3));
        for (t, &v) in values.iter().enumerate() {
            c.slice_mut(s![t, .., .., ..]).fill(v);
        }
        c
    }

    #[test]
    fn output_width_matches_declared_dim() {
        for kind in BackboneKind::ALL {
            let b = ProjectionBackbone::new(BackboneSpec::new(kind)).unwrap();
            for t in [1, 3] {
                let f = b.extract(&clip_with(&vec![0.3; t])).unwrap();
                assert_eq!(f.dim(), (t, kind.default_feature_dim()));
            }
        }
    }

    #[test]
    fn identical_frames_give_identical_rows() {
        let b = ProjectionBackbone::new(BackboneSpec::stub(32)).unwrap();
        let f = b.extract(&clip_with(&[0.2, 0.7, 0.2])).unwrap();
        assert_eq!(f.row(0), f.row(2));
        assert_ne!(f.row(0), f.row(1));
    }

    #[test]
    fn wrong_frame_size_is_a_shape_error() {
        let b = ProjectionBackbone::new(BackboneSpec::stub(8)).unwrap();
        let bad = ClipTensor::zeros((10, 112, 112, 3));
        assert!(matches!(b.extract(&bad), Err(NetworkError::Shape(_))));
    }

    #[test]
    fn grid_must_divide_frame_size() {
        let spec = BackboneSpec {
            grid: 5,
            ..BackboneSpec::stub(8)
        };
        assert!(ProjectionBackbone::new(spec).is_err());
    }
}
