//! Sliding-window inference over full videos.
//!
//! Every window is reduced to ten evenly spaced frames and scored by the
//! four one-vs-rest models; the window is assigned the most probable event
//! when that probability exceeds 0.5, and `irrelevant` otherwise.

mod export;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use export::{
    event_color, read_timeline_csv, render_svg, write_timeline, write_timeline_csv, TimelineFormat,
};

use crate::clip::{
    deterministic_sample, load_clip_frames, ClipError, ClipSpec, ClipTensor, FrameSource,
};
use crate::dataset::{CaseAnnotation, EventClass};
use crate::network::{HybridClassifier, NetworkError};

pub const WINDOW_SEC: f64 = 3.0;
pub const STRIDE_SEC: f64 = 1.0;
/// Shortest video (and shortest trailing window) that is scored.
pub const MIN_WINDOW_SEC: f64 = 1.0;
pub const DECISION_THRESHOLD: f64 = 0.5;
/// Largest tolerated fraction of windows that fail to decode.
pub const MAX_FAILED_FRACTION: f64 = 0.5;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("invalid windowing: {0}")]
    Window(String),
    #[error("no model for {0}")]
    MissingModel(EventClass),
    #[error("{failed} of {total} windows failed to decode")]
    TooManyFailures { failed: usize, total: usize },
    #[error("empty timeline")]
    Empty,
    #[error("timeline file {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Clip(#[from] ClipError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A window in seconds together with its frame span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameWindow {
    pub start_sec: f64,
    pub end_sec: f64,
    pub start_frame: usize,
    pub length_frames: usize,
}

/// Windows `[k*stride, k*stride + window)` while they fit, plus one
/// end-anchored window when the stride leaves a tail of video uncovered.
/// Videos shorter than `window_sec` (but at least one second) get a single
/// window spanning the whole video.
pub fn enumerate_windows(
    duration_sec: f64,
    fps: f64,
    window_sec: f64,
    stride_sec: f64,
) -> Result<Vec<FrameWindow>, TimelineError> {
    if !(fps > 0.0 && window_sec > 0.0 && stride_sec > 0.0) {
        return Err(TimelineError::Window(format!(
            "fps {fps}, window {window_sec} and stride {stride_sec} must be positive"
        )));
    }
    if duration_sec.is_nan() || duration_sec < MIN_WINDOW_SEC {
        return Err(TimelineError::Window(format!(
            "video of {duration_sec} s is shorter than {MIN_WINDOW_SEC} s"
        )));
    }
    let frame_window = |start: f64, end: f64| {
        let first = (start * fps).round() as usize;
        let last = (end * fps).round() as usize;
        FrameWindow {
            start_sec: start,
            end_sec: end,
            start_frame: first,
            length_frames: last - first,
        }
    };
    if duration_sec < window_sec {
        return Ok(vec![frame_window(0.0, duration_sec)]);
    }
    let mut windows = Vec::new();
    let mut k = 0usize;
    loop {
        let start = k as f64 * stride_sec;
        if start + window_sec > duration_sec + TIME_EPS {
            break;
        }
        windows.push(frame_window(start, start + window_sec));
        k += 1;
    }
    let last_end = windows.last().map_or(0.0, |w| w.end_sec);
    let next_start = k as f64 * stride_sec;
    if duration_sec - last_end > TIME_EPS && duration_sec - next_start >= MIN_WINDOW_SEC - TIME_EPS
    {
        windows.push(frame_window(duration_sec - window_sec, duration_sec));
    }
    Ok(windows)
}

/// A binary model producing the probability that a clip shows its event.
pub trait EventScorer: Sync {
    fn positive_probability(&self, clip: &ClipTensor) -> Result<f64, TimelineError>;
}

impl EventScorer for HybridClassifier {
    fn positive_probability(&self, clip: &ClipTensor) -> Result<f64, TimelineError> {
        Ok(self.predict_clip(clip)?[1])
    }
}

pub type EventModels<'a> = BTreeMap<EventClass, &'a dyn EventScorer>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub window_start_sec: f64,
    pub window_end_sec: f64,
    /// Positive-class probabilities in [`EventClass::RELEVANT`] order;
    /// `None` when the window could not be decoded.
    pub probs: Option<[f64; 4]>,
    pub assigned: EventClass,
}

impl TimelineEntry {
    pub fn prob(&self, event: EventClass) -> Option<f64> {
        let i = EventClass::RELEVANT.iter().position(|&e| e == event)?;
        self.probs.map(|p| p[i])
    }

    pub fn failed(&self) -> bool {
        self.probs.is_none()
    }
}

/// The argmax event if its probability exceeds the threshold, otherwise
/// `irrelevant`. Ties go to the event listed first.
pub fn assign_label(probs: &[f64; 4]) -> EventClass {
    let mut best = 0;
    for i in 1..4 {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    if probs[best] > DECISION_THRESHOLD {
        EventClass::RELEVANT[best]
    } else {
        EventClass::Irrelevant
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub case_id: String,
    pub window_sec: f64,
    pub stride_sec: f64,
    pub entries: Vec<TimelineEntry>,
}

impl Timeline {
    /// Time attributed to an entry: the stride-wide cell around the window
    /// centre.
    pub fn cell(&self, entry: &TimelineEntry) -> (f64, f64) {
        let centre = (entry.window_start_sec + entry.window_end_sec) / 2.0;
        let half = self.stride_sec / 2.0;
        (centre - half, centre + half)
    }

    /// Merged time intervals whose entries are assigned `label`.
    pub fn intervals(&self, label: EventClass) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for e in self.entries.iter().filter(|e| e.assigned == label) {
            let (a, b) = self.cell(e);
            match out.last_mut() {
                Some(last) if a <= last.1 + TIME_EPS => last.1 = last.1.max(b),
                _ => out.push((a, b)),
            }
        }
        out
    }

    pub fn failed_windows(&self) -> usize {
        self.entries.iter().filter(|e| e.failed()).count()
    }

    pub fn labels(&self) -> Vec<EventClass> {
        self.entries.iter().map(|e| e.assigned).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelineOptions {
    pub window_sec: f64,
    pub stride_sec: f64,
}

impl Default for TimelineOptions {
    fn default() -> Self {
        Self {
            window_sec: WINDOW_SEC,
            stride_sec: STRIDE_SEC,
        }
    }
}

/// Scores every window of `case` with the four event models.
///
/// Windows whose frames fail to decode are kept with empty probabilities
/// and the `irrelevant` label; more than half failing aborts the run.
pub fn infer_timeline(
    source: &mut dyn FrameSource,
    models: &EventModels<'_>,
    case: &CaseAnnotation,
    options: TimelineOptions,
) -> Result<Timeline, TimelineError> {
    for event in EventClass::RELEVANT {
        if !models.contains_key(&event) {
            return Err(TimelineError::MissingModel(event));
        }
    }
    let windows = enumerate_windows(
        case.duration_sec,
        case.fps,
        options.window_sec,
        options.stride_sec,
    )?;
    let mut entries = Vec::with_capacity(windows.len());
    for w in &windows {
        let clip = ClipSpec {
            case_id: case.case_id.clone(),
            segment_ref: 0,
            start_frame: w.start_frame,
            length_frames: w.length_frames,
            label: EventClass::Irrelevant,
        };
        let frames = deterministic_sample(&clip)?;
        let probs = match load_clip_frames(source, &clip, &frames) {
            Ok(tensor) => {
                let scored: Vec<f64> = EventClass::RELEVANT
                    .par_iter()
                    .map(|e| models[e].positive_probability(&tensor))
                    .collect::<Result<_, _>>()?;
                Some([scored[0], scored[1], scored[2], scored[3]])
            }
            Err(e @ (ClipError::Decode { .. } | ClipError::OutOfBounds { .. })) => {
                log::warn!(
                    "{}: window {:.2}-{:.2}s failed: {e}",
                    case.case_id,
                    w.start_sec,
                    w.end_sec
                );
                None
            }
            Err(e) => return Err(e.into()),
        };
        entries.push(TimelineEntry {
            window_start_sec: w.start_sec,
            window_end_sec: w.end_sec,
            assigned: probs.as_ref().map_or(EventClass::Irrelevant, assign_label),
            probs,
        });
    }
    let failed = entries.iter().filter(|e| e.failed()).count();
    if failed as f64 > MAX_FAILED_FRACTION * entries.len() as f64 {
        return Err(TimelineError::TooManyFailures {
            failed,
            total: entries.len(),
        });
    }
    Ok(Timeline {
        case_id: case.case_id.clone(),
        window_sec: options.window_sec,
        stride_sec: options.stride_sec,
        entries,
    })
}

/// Majority vote over a centred window of `width` labels, applied left to
/// right so each decision sees the already-smoothed labels before it. The
/// original label is kept on ties. Probabilities are untouched.
pub fn smooth_timeline(timeline: &Timeline, width: usize) -> Result<Timeline, TimelineError> {
    if width == 0 || width.is_multiple_of(2) {
        return Err(TimelineError::Window(format!(
            "smoothing width must be odd and positive, got {width}"
        )));
    }
    let mut out = timeline.clone();
    let n = out.entries.len();
    let half = width / 2;
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        let mut counts: BTreeMap<EventClass, usize> = BTreeMap::new();
        for e in &out.entries[lo..hi] {
            *counts.entry(e.assigned).or_default() += 1;
        }
        let top = counts.values().copied().max().unwrap_or(0);
        let mut leaders = counts.iter().filter(|(_, &c)| c == top).map(|(&l, _)| l);
        if let (Some(winner), None) = (leaders.next(), leaders.next()) {
            out.entries[i].assigned = winner;
        }
    }
    Ok(out)
}
