//! Clip tiling and frame sampling.
//!
//! Segments are cut into overlapping 60-90 frame clips, and each clip is
//! reduced to a ten-frame sequence: a fresh random draw per epoch during
//! training ("input dropout") and an evenly spaced draw at inference.

mod source;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EventClass, SegmentRef};
use crate::seed::SeedHasher;

pub use source::{
    load_clip_frames, ClipTensor, Frame, FrameSource, ImageSequenceOpener, ImageSequenceSource,
    SourceOpener, SyntheticSource,
};

/// Frames fed to the temporal head per clip.
pub const SEQUENCE_LEN: usize = 10;
/// Side length of the square frames handed to backbones.
pub const FRAME_SIZE: usize = 224;
pub const MIN_CLIP_FRAMES: usize = 30;
pub const MAX_CLIP_FRAMES: usize = 90;
/// Window start stride; with 90-frame windows consecutive clips share 30 frames.
pub const CLIP_STRIDE: usize = 60;

#[derive(Debug, Error)]
pub enum ClipError {
    #[error("segment has {frames} frames, at least {MIN_CLIP_FRAMES} are required")]
    SegmentTooShort { frames: usize },
    #[error("clip has {length} frames, at least {SEQUENCE_LEN} are required for sampling")]
    ClipTooShort { length: usize },
    #[error("frame index {index} out of range (limit {limit})")]
    OutOfBounds { index: usize, limit: usize },
    #[error("cannot open video {path}: {message}")]
    Open { path: String, message: String },
    #[error("failed to decode frame {index}: {message}")]
    Decode { index: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipSpec {
    pub case_id: String,
    /// Index of the parent segment in whatever list produced it.
    pub segment_ref: usize,
    /// Absolute frame index in the video.
    pub start_frame: usize,
    pub length_frames: usize,
    pub label: EventClass,
}

/// Ten strictly increasing frame offsets relative to a clip start.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FrameIndexSet(Vec<usize>);

impl FrameIndexSet {
    pub fn new(indices: Vec<usize>, length_frames: usize) -> Result<Self, ClipError> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= length_frames) {
            return Err(ClipError::OutOfBounds {
                index: bad,
                limit: length_frames,
            });
        }
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Absolute video frame numbers for `clip`.
    pub fn absolute(&self, clip: &ClipSpec) -> Vec<usize> {
        self.0.iter().map(|i| clip.start_frame + i).collect()
    }
}

/// Window layout `(offset, length)` for a segment of `n` frames.
///
/// Segments under 60 frames become one clip. Longer ones get windows of up
/// to 90 frames every 60 frames (while at least 60 frames remain), plus an
/// end-anchored window when the stride leaves the tail uncovered.
pub fn tile_frames(n: usize) -> Result<Vec<(usize, usize)>, ClipError> {
    if n < MIN_CLIP_FRAMES {
        return Err(ClipError::SegmentTooShort { frames: n });
    }
    if n < 2 * MIN_CLIP_FRAMES {
        return Ok(vec![(0, n)]);
    }
    let mut windows = Vec::new();
    let mut start = 0;
    while start + 2 * MIN_CLIP_FRAMES <= n {
        windows.push((start, MAX_CLIP_FRAMES.min(n - start)));
        start += CLIP_STRIDE;
    }
    let covered = windows.last().map(|&(s, l)| s + l).unwrap_or(0);
    if covered < n {
        let tail = (n.saturating_sub(MAX_CLIP_FRAMES), n.min(MAX_CLIP_FRAMES));
        if !windows.contains(&tail) {
            windows.push(tail);
        }
    }
    Ok(windows)
}

/// Cuts a segment into training clips at frame rate `fps`.
pub fn tile_segment(
    segment: &SegmentRef,
    segment_ref: usize,
    fps: f64,
) -> Result<Vec<ClipSpec>, ClipError> {
    let (first, end) = segment.segment.frame_range(fps);
    Ok(tile_frames(end - first)?
        .into_iter()
        .map(|(offset, length)| ClipSpec {
            case_id: segment.case_id.clone(),
            segment_ref,
            start_frame: first + offset,
            length_frames: length,
            label: segment.segment.label,
        })
        .collect())
}

/// Seed for sampling `clip` in `epoch`.
pub fn clip_epoch_seed(global_seed: u64, clip: &ClipSpec, epoch: usize) -> u64 {
    SeedHasher::new("input-dropout", global_seed)
        .str(&clip.case_id)
        .u64(clip.segment_ref as u64)
        .u64(clip.start_frame as u64)
        .u64(epoch as u64)
        .finish()
}

/// Draws ten distinct frames uniformly without replacement, sorted.
pub fn input_dropout_sample(clip: &ClipSpec, rng_seed: u64) -> Result<FrameIndexSet, ClipError> {
    let length = clip.length_frames;
    if length < SEQUENCE_LEN {
        return Err(ClipError::ClipTooShort { length });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut indices = rand::seq::index::sample(&mut rng, length, SEQUENCE_LEN).into_vec();
    indices.sort_unstable();
    FrameIndexSet::new(indices, length)
}

/// Evenly spaced offsets `round(k (L-1) / 9)`, k = 0..9.
pub fn deterministic_indices(length: usize) -> Result<Vec<usize>, ClipError> {
    if length < SEQUENCE_LEN {
        return Err(ClipError::ClipTooShort { length });
    }
    let span = (length - 1) as f64;
    let steps = (SEQUENCE_LEN - 1) as f64;
    let mut out: Vec<usize> = Vec::with_capacity(SEQUENCE_LEN);
    for k in 0..SEQUENCE_LEN {
        let mut idx = (k as f64 * span / steps).round() as usize;
        if let Some(&prev) = out.last() {
            if idx <= prev {
                idx = prev + 1;
            }
        }
        out.push(idx);
    }
    Ok(out)
}

pub fn deterministic_sample(clip: &ClipSpec) -> Result<FrameIndexSet, ClipError> {
    FrameIndexSet::new(
        deterministic_indices(clip.length_frames)?,
        clip.length_frames,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EventSegment;
    use proptest::prelude::*;

    fn clip(length: usize) -> ClipSpec {
        ClipSpec {
            case_id: "c".into(),
            segment_ref: 0,
            start_frame: 0,
            length_frames: length,
            label: EventClass::Bleeding,
        }
    }

    #[test]
    fn tiling_examples() {
        assert_eq!(tile_frames(90).unwrap(), vec![(0, 90)]);
        assert_eq!(
            tile_frames(180).unwrap(),
            vec![(0, 90), (60, 90), (120, 60)]
        );
        assert_eq!(tile_frames(100).unwrap(), vec![(0, 90), (10, 90)]);
        assert_eq!(tile_frames(45).unwrap(), vec![(0, 45)]);
        assert_eq!(tile_frames(60).unwrap(), vec![(0, 60)]);
        assert!(matches!(
            tile_frames(29),
            Err(ClipError::SegmentTooShort { frames: 29 })
        ));
    }

    #[test]
    fn tile_segment_uses_absolute_frames() {
        // frames [60, 180): windows (0, 90) and (60, 60)
        let seg = SegmentRef::new("c", EventSegment::new(EventClass::Bleeding, 2.0, 6.0));
        let clips = tile_segment(&seg, 4, 30.0).unwrap();
        let spans: Vec<_> = clips
            .iter()
            .map(|c| (c.start_frame, c.length_frames))
            .collect();
        assert_eq!(spans, vec![(60, 90), (120, 60)]);
        assert!(clips.iter().all(|c| c.segment_ref == 4 && c.case_id == "c"));
    }

    #[test]
    fn deterministic_sampling_examples() {
        assert_eq!(
            deterministic_indices(10).unwrap(),
            (0..10).collect::<Vec<_>>()
        );
        assert_eq!(
            deterministic_indices(90).unwrap(),
            vec![0, 10, 20, 30, 40, 49, 59, 69, 79, 89]
        );
        assert_eq!(
            deterministic_indices(19).unwrap(),
            vec![0, 2, 4, 6, 8, 10, 12, 14, 16, 18]
        );
        assert!(deterministic_sample(&clip(9)).is_err());
    }

    #[test]
    fn input_dropout_forced_and_deterministic() {
        assert_eq!(
            input_dropout_sample(&clip(10), 123).unwrap().indices(),
            &(0..10).collect::<Vec<_>>()[..]
        );
        let c = clip(90);
        assert_eq!(
            input_dropout_sample(&c, 5).unwrap(),
            input_dropout_sample(&c, 5).unwrap()
        );
        assert!(matches!(
            input_dropout_sample(&clip(9), 0),
            Err(ClipError::ClipTooShort { length: 9 })
        ));
    }

    #[test]
    fn input_dropout_marginals_are_roughly_uniform() {
        let c = clip(90);
        let mut counts = [0usize; 90];
        for draw in 0..10_000u64 {
            for &i in input_dropout_sample(&c, draw).unwrap().indices() {
                counts[i] += 1;
            }
        }
        let expected = 10_000.0 * 10.0 / 90.0;
        for (i, &n) in counts.iter().enumerate() {
            assert!(
                (n as f64 - expected).abs() <= 0.2 * expected,
                "index {i}: {n}"
            );
        }
    }

    #[test]
    fn epoch_seeds_differ_per_epoch_and_clip() {
        let a = clip(90);
        let mut b = clip(90);
        b.start_frame = 60;
        assert_ne!(clip_epoch_seed(1, &a, 0), clip_epoch_seed(1, &a, 1));
        assert_ne!(clip_epoch_seed(1, &a, 0), clip_epoch_seed(1, &b, 0));
    }

    proptest! {
        #[test]
        fn samples_are_ten_increasing_in_range(len in 10usize..=90, seed in any::<u64>()) {
            for set in [input_dropout_sample(&clip(len), seed).unwrap(), deterministic_sample(&clip(len)).unwrap()] {
                let idx = set.indices();
                prop_assert_eq!(idx.len(), SEQUENCE_LEN);
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(idx.iter().all(|&i| i < len));
            }
        }
    }
}
