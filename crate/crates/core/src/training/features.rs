use std::collections::HashMap;
use std::sync::Mutex;

use ndarray::{s, Array1, Array2};

use super::{TrainError, TrainingClip};
use crate::augment::apply_policy;
use crate::clip::{ClipTensor, FrameIndexSet, SourceOpener, FRAME_SIZE};
use crate::dataset::CaseAnnotation;
use crate::network::{extract_features, HybridClassifier, ProjectionBackbone};

/// Supplies the head input (`T x width`) for a clip and a set of sampled
/// frame offsets.
pub trait FeatureProvider: Sync {
    fn features(
        &self,
        item: &TrainingClip,
        frames: &FrameIndexSet,
    ) -> Result<Array2<f64>, TrainError>;
}

type CacheKey = (String, usize, String);

/// Decodes frames from videos, applies the clip's augmentation policy and
/// encodes each frame with the classifier's backbone.
///
/// Every operation involved is frame-local, so encoded rows are cached per
/// (case, frame, policy).
pub struct VideoFeatures<'a> {
    cases: HashMap<&'a str, &'a CaseAnnotation>,
    opener: &'a dyn SourceOpener,
    backbone: ProjectionBackbone,
    descriptors: bool,
    cache: Option<Mutex<HashMap<CacheKey, Array1<f64>>>>,
}

impl<'a> VideoFeatures<'a> {
    pub fn new(
        cases: &'a [CaseAnnotation],
        opener: &'a dyn SourceOpener,
        model: &HybridClassifier,
    ) -> Self {
        Self {
            cases: cases.iter().map(|c| (c.case_id.as_str(), c)).collect(),
            opener,
            backbone: model.backbone().clone(),
            descriptors: model.config().fine_tune_backbone,
            cache: Some(Mutex::new(HashMap::new())),
        }
    }

    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    fn encode(&self, frame: &ClipTensor) -> Result<Array2<f64>, TrainError> {
        Ok(if self.descriptors {
            self.backbone.describe(frame)?
        } else {
            extract_features(&self.backbone, frame)?
        })
    }
}

impl FeatureProvider for VideoFeatures<'_> {
    fn features(
        &self,
        item: &TrainingClip,
        frames: &FrameIndexSet,
    ) -> Result<Array2<f64>, TrainError> {
        let case = self
            .cases
            .get(item.clip.case_id.as_str())
            .ok_or_else(|| TrainError::MissingCase(item.clip.case_id.clone()))?;
        let policy = item.policy.to_string();
        let mut rows: Vec<Option<Array1<f64>>> = vec![None; frames.len()];
        if let Some(cache) = &self.cache {
            let cache = cache.lock().expect("feature cache poisoned");
            for (row, abs) in rows.iter_mut().zip(frames.absolute(&item.clip)) {
                *row = cache
                    .get(&(item.clip.case_id.clone(), abs, policy.clone()))
                    .cloned();
            }
        }
        if rows.iter().any(Option::is_none) {
            let mut source = self.opener.open(case)?;
            let limit = source.frame_count();
            for (t, abs) in frames.absolute(&item.clip).into_iter().enumerate() {
                if rows[t].is_some() {
                    continue;
                }
                if abs >= limit {
                    return Err(crate::clip::ClipError::OutOfBounds { index: abs, limit }.into());
                }
                let frame = source.read_frame(abs)?;
                let mut single = ClipTensor::zeros((1, FRAME_SIZE, FRAME_SIZE, 3));
                single.slice_mut(s![0, .., .., ..]).assign(&frame);
                let augmented = apply_policy(&single, &item.policy)?;
                let row = self.encode(&augmented)?.row(0).to_owned();
                if let Some(cache) = &self.cache {
                    cache.lock().expect("feature cache poisoned").insert(
                        (item.clip.case_id.clone(), abs, policy.clone()),
                        row.clone(),
                    );
                }
                rows[t] = Some(row);
            }
        }
        let width = rows[0].as_ref().map_or(0, |r| r.len());
        let mut out = Array2::zeros((rows.len(), width));
        for (mut dst, row) in out.rows_mut().into_iter().zip(rows) {
            dst.assign(&row.expect("filled above"));
        }
        Ok(out)
    }
}
