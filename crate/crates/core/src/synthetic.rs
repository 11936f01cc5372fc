//! Generated datasets, feature providers and videos for smoke runs and tests.

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::AugmentationPolicy;
use crate::clip::{ClipSpec, ClipTensor, FrameIndexSet, SyntheticSource};
use crate::dataset::{CaseAnnotation, EventClass, EventSegment, DEFAULT_FPS};
use crate::seed::SeedHasher;
use crate::timeline::{EventScorer, TimelineError};
use crate::training::{FeatureProvider, TrainError, TrainingClip};

/// Per-event shape of the benchmark annotations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventShape {
    pub event: EventClass,
    pub cases: usize,
    pub segments: usize,
    pub min_sec: f64,
    pub max_sec: f64,
    pub total_sec: f64,
}

pub const BENCHMARK_CASES: usize = 174;

pub const BENCHMARK_SHAPE: [EventShape; 4] = [
    EventShape {
        event: EventClass::AbdominalAccess,
        cases: 111,
        segments: 178,
        min_sec: 1.0,
        max_sec: 11.0,
        total_sec: 329.84,
    },
    EventShape {
        event: EventClass::Bleeding,
        cases: 41,
        segments: 81,
        min_sec: 2.0,
        max_sec: 108.0,
        total_sec: 1577.20,
    },
    EventShape {
        event: EventClass::CoagTransection,
        cases: 12,
        segments: 584,
        min_sec: 2.0,
        max_sec: 43.0,
        total_sec: 2929.54,
    },
    EventShape {
        event: EventClass::NeedlePassing,
        cases: 48,
        segments: 510,
        min_sec: 2.0,
        max_sec: 110.0,
        total_sec: 7036.43,
    },
];

const GAP_CS: u64 = 300;
const EMPTY_CASE_CS: u64 = 6000;

/// Durations in centiseconds: the minimum, the maximum, then equal shares of
/// the remaining total.
fn segment_durations_cs(shape: &EventShape) -> Vec<u64> {
    let cs = |v: f64| (v * 100.0).round() as u64;
    let (min, max, total) = (cs(shape.min_sec), cs(shape.max_sec), cs(shape.total_sec));
    let rest = shape.segments - 2;
    let remaining = total - min - max;
    let share = remaining / rest as u64;
    let extra = (remaining % rest as u64) as usize;
    let mut out = vec![min, max];
    out.extend((0..rest).map(|i| share + u64::from(i < extra)));
    out
}

/// Annotations with the case count, per-event case and segment counts,
/// duration ranges and totals of the benchmark dataset. Segments of each
/// event are dealt round-robin over the first cases and laid out one after
/// another with gaps.
pub fn benchmark_annotations() -> Vec<CaseAnnotation> {
    let mut per_case: Vec<Vec<(EventClass, u64)>> = vec![Vec::new(); BENCHMARK_CASES];
    for shape in &BENCHMARK_SHAPE {
        for (j, d) in segment_durations_cs(shape).into_iter().enumerate() {
            per_case[j % shape.cases].push((shape.event, d));
        }
    }
    per_case
        .into_iter()
        .enumerate()
        .map(|(i, segs)| {
            let mut cursor = GAP_CS;
            let segments = segs
                .into_iter()
                .map(|(label, d)| {
                    let seg = EventSegment::new(
                        label,
                        cursor as f64 / 100.0,
                        (cursor + d) as f64 / 100.0,
                    );
                    cursor += d + GAP_CS;
                    seg
                })
                .collect::<Vec<_>>();
            let duration = if segments.is_empty() {
                EMPTY_CASE_CS
            } else {
                cursor
            };
            CaseAnnotation {
                case_id: format!("case-{:03}", i + 1),
                fps: DEFAULT_FPS,
                duration_sec: duration as f64 / 100.0,
                video_path: format!("case-{:03}", i + 1),
                segments,
            }
        })
        .collect()
}

/// Stand-in backbone output for a separable binary task: each frame row is a
/// fixed unit direction, signed by the clip's target, plus Gaussian noise.
#[derive(Debug, Clone)]
pub struct SignalFeatures {
    direction: Array1<f64>,
    noise_sigma: f64,
    seed: u64,
}

impl SignalFeatures {
    pub fn new(dim: usize, noise_sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(SeedHasher::new("signal-direction", seed).finish());
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let raw: Array1<f64> = Array1::from_shape_fn(dim, |_| normal.sample(&mut rng));
        let norm = raw.dot(&raw).sqrt();
        Self {
            direction: raw / norm,
            noise_sigma,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    /// Row for one frame of a case; noise depends only on (case, frame).
    pub fn frame_row(&self, case_id: &str, frame: usize, target: usize) -> Array1<f64> {
        let seed = SeedHasher::new("signal-noise", self.seed)
            .str(case_id)
            .u64(frame as u64)
            .finish();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, self.noise_sigma).expect("valid sigma");
        let sign = if target == 1 { 1.0 } else { -1.0 };
        self.direction.mapv(|d| sign * d + normal.sample(&mut rng))
    }
}

impl FeatureProvider for SignalFeatures {
    fn features(
        &self,
        item: &TrainingClip,
        frames: &FrameIndexSet,
    ) -> Result<Array2<f64>, TrainError> {
        let abs = frames.absolute(&item.clip);
        let mut out = Array2::zeros((abs.len(), self.dim()));
        for (mut row, frame) in out.rows_mut().into_iter().zip(abs) {
            row.assign(&self.frame_row(&item.clip.case_id, frame, item.target));
        }
        Ok(out)
    }
}

/// `n` clips of 60 to 90 frames, alternating targets, each from its own case.
pub fn signal_clips(n: usize, seed: u64, positive: EventClass) -> Vec<TrainingClip> {
    (0..n)
        .map(|i| {
            let target = i % 2;
            let length = 60
                + (SeedHasher::new("signal-length", seed)
                    .u64(i as u64)
                    .finish()
                    % 31) as usize;
            TrainingClip {
                clip: ClipSpec {
                    case_id: format!("signal-{seed}-{i:04}"),
                    segment_ref: i,
                    start_frame: 0,
                    length_frames: length,
                    label: if target == 1 {
                        positive
                    } else {
                        EventClass::Irrelevant
                    },
                },
                policy: AugmentationPolicy::IDENTITY,
                target,
            }
        })
        .collect()
}

const SIGNATURE_RED: f32 = 0.9;
const BASE_LEVEL: f32 = 0.3;
const SIGNATURE_MARGIN: f64 = 0.3;

/// A video of `duration_sec` whose frames inside `[start_sec, end_sec)` carry
/// a red signature; all other frames are a flat gray.
pub fn planted_event_video(
    case_id: &str,
    duration_sec: f64,
    fps: f64,
    event: EventClass,
    start_sec: f64,
    end_sec: f64,
) -> (CaseAnnotation, SyntheticSource) {
    let frame_count = (duration_sec * fps).round() as usize;
    let first = (start_sec * fps).round() as usize;
    let last = (end_sec * fps).round() as usize;
    let source = SyntheticSource::new(frame_count, move |i, frame| {
        frame.fill(BASE_LEVEL);
        if (first..last).contains(&i) {
            frame.slice_mut(s![.., .., 0]).fill(SIGNATURE_RED);
        }
    });
    let case = CaseAnnotation {
        case_id: case_id.to_string(),
        fps,
        duration_sec,
        video_path: case_id.to_string(),
        segments: vec![EventSegment::new(event, start_sec, end_sec)],
    };
    (case, source)
}

/// Scores a clip by the fraction of its frames showing the red signature.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelSignatureScorer;

impl PixelSignatureScorer {
    pub fn has_signature(frame: ndarray::ArrayView3<'_, f32>) -> bool {
        let channel_mean = |c: usize| f64::from(frame.slice(s![.., .., c]).mean().unwrap_or(0.0));
        channel_mean(0) - channel_mean(1) > SIGNATURE_MARGIN
    }
}

impl EventScorer for PixelSignatureScorer {
    fn positive_probability(&self, clip: &ClipTensor) -> Result<f64, TimelineError> {
        let t = clip.shape()[0];
        if t == 0 {
            return Ok(0.0);
        }
        let hits = clip
            .outer_iter()
            .filter(|frame| Self::has_signature(frame.view()))
            .count();
        Ok(hits as f64 / t as f64)
    }
}

/// Scorer returning the same probability for every clip.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl EventScorer for ConstantScorer {
    fn positive_probability(&self, _clip: &ClipTensor) -> Result<f64, TimelineError> {
        Ok(self.0)
    }
}

/// Intersection over union between a set of disjoint intervals and one
/// reference interval.
pub fn interval_iou(predicted: &[(f64, f64)], truth: (f64, f64)) -> f64 {
    let predicted_len: f64 = predicted.iter().map(|(a, b)| b - a).sum();
    let inter: f64 = predicted
        .iter()
        .map(|&(a, b)| (b.min(truth.1) - a.max(truth.0)).max(0.0))
        .sum();
    let union = predicted_len + (truth.1 - truth.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::{deterministic_sample, FrameSource};
    use crate::dataset::{build_binary_task, dataset_statistics, filter_min_duration};

    #[test]
    fn benchmark_fixture_matches_shape() {
        let cases = benchmark_annotations();
        assert_eq!(cases.len(), BENCHMARK_CASES);
        let cases: Vec<_> = cases.into_iter().map(|c| c.validate().unwrap()).collect();
        let stats = dataset_statistics(&cases);
        for shape in &BENCHMARK_SHAPE {
            let st = stats[&shape.event];
            assert_eq!(st.num_cases, shape.cases);
            assert_eq!(st.num_segments, shape.segments);
            assert!((st.min_duration_sec - shape.min_sec).abs() < 1e-9);
            assert!((st.max_duration_sec - shape.max_sec).abs() < 1e-9);
            assert!((st.total_duration_sec - shape.total_sec).abs() < 0.005);
        }
        let kept = filter_min_duration(&cases, 1.0);
        let task = build_binary_task(&kept, EventClass::AbdominalAccess).unwrap();
        assert_eq!(task.positives.len(), 178);
    }

    #[test]
    fn signal_rows_are_reproducible_and_signed() {
        let f = SignalFeatures::new(32, 0.5, 3);
        assert!((f.direction.dot(&f.direction) - 1.0).abs() < 1e-12);
        assert_eq!(f.frame_row("a", 4, 1), f.frame_row("a", 4, 1));
        assert_ne!(f.frame_row("a", 4, 1), f.frame_row("a", 5, 1));
        let clips = signal_clips(10, 0, EventClass::Bleeding);
        assert_eq!(clips.iter().filter(|c| c.target == 1).count(), 5);
        assert!(clips
            .iter()
            .all(|c| (60..=90).contains(&c.clip.length_frames)));
        let frames = deterministic_sample(&clips[1].clip).unwrap();
        let x = f.features(&clips[1], &frames).unwrap();
        assert_eq!(x.dim(), (10, 32));
        let mean_proj = x
            .rows()
            .into_iter()
            .map(|r| r.dot(&f.direction))
            .sum::<f64>()
            / 10.0;
        assert!(mean_proj > 0.5, "{mean_proj}");
    }

    #[test]
    fn planted_frames_carry_the_signature() {
        let (case, mut src) = planted_event_video("p", 10.0, 30.0, EventClass::Bleeding, 2.0, 4.0);
        assert_eq!(src.frame_count(), 300);
        assert_eq!(case.segments.len(), 1);
        assert!(PixelSignatureScorer::has_signature(
            src.read_frame(60).unwrap().view()
        ));
        assert!(!PixelSignatureScorer::has_signature(
            src.read_frame(120).unwrap().view()
        ));
        assert!(!PixelSignatureScorer::has_signature(
            src.read_frame(59).unwrap().view()
        ));
    }

    #[test]
    fn iou_examples() {
        assert_eq!(interval_iou(&[(0.0, 2.0)], (0.0, 2.0)), 1.0);
        assert_eq!(interval_iou(&[(0.0, 1.0), (3.0, 4.0)], (0.0, 4.0)), 0.5);
        assert_eq!(interval_iou(&[], (0.0, 4.0)), 0.0);
        assert_eq!(interval_iou(&[(5.0, 6.0)], (0.0, 4.0)), 0.0);
    }
}
