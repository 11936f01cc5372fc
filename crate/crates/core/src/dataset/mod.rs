//! Annotation data model, ingestion and per-event binary datasets.
//!
//! Times are kept in seconds throughout and converted to frame indices only
//! when clips are cut (see [`crate::clip`]).

mod manifest;
mod split;
mod stats;

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manifest::{read_split_manifest, write_split_manifest};
pub use split::{split_train_test, split_train_test_with, SplitManifest, SplitMode};
pub use stats::{dataset_statistics, format_statistics_table, EventStats};

/// Segments shorter than this are dropped, and unlabeled gaps shorter than
/// this are not turned into negatives.
pub const MIN_SEGMENT_SEC: f64 = 1.0;

pub const DEFAULT_FPS: f64 = 30.0;

/// Environment variable used to resolve relative `video_path` entries.
pub const DATA_ROOT_ENV: &str = "LAPSE_DATA_ROOT";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("case {case_id}: {reason}")]
    InvalidCase { case_id: String, reason: String },
    #[error("case {case_id}, segment {index}: {reason}")]
    InvalidSegment {
        case_id: String,
        index: usize,
        reason: String,
    },
    #[error("positive class must be one of the four relevant events, got {0}")]
    IrrelevantPositive(EventClass),
    #[error("no segments labelled {0}")]
    EmptyTask(EventClass),
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("need at least 2 positives and 2 negatives to split, got {positives} and {negatives}")]
    TooFewToSplit { positives: usize, negatives: usize },
    #[error("manifest {}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },
}

impl DatasetError {
    /// True for errors caused by bad input data rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, DatasetError::Io { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventClass {
    AbdominalAccess,
    Bleeding,
    CoagTransection,
    NeedlePassing,
    Irrelevant,
}

impl EventClass {
    /// The four events of interest, in canonical order.
    pub const RELEVANT: [EventClass; 4] = [
        EventClass::AbdominalAccess,
        EventClass::Bleeding,
        EventClass::CoagTransection,
        EventClass::NeedlePassing,
    ];

    pub const ALL: [EventClass; 5] = [
        EventClass::AbdominalAccess,
        EventClass::Bleeding,
        EventClass::CoagTransection,
        EventClass::NeedlePassing,
        EventClass::Irrelevant,
    ];

    pub fn is_relevant(self) -> bool {
        self != EventClass::Irrelevant
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventClass::AbdominalAccess => "abdominal_access",
            EventClass::Bleeding => "bleeding",
            EventClass::CoagTransection => "coag_transection",
            EventClass::NeedlePassing => "needle_passing",
            EventClass::Irrelevant => "irrelevant",
        }
    }

    /// Short column title used in printed tables.
    pub fn title(self) -> &'static str {
        match self {
            EventClass::AbdominalAccess => "Abd. Access",
            EventClass::Bleeding => "Bleeding",
            EventClass::CoagTransection => "Coag./Tran.",
            EventClass::NeedlePassing => "Needle Passing",
            EventClass::Irrelevant => "Irrelevant",
        }
    }
}

impl fmt::Display for EventClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventClass::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown event '{s}', expected one of abdominal_access, bleeding, \
                     coag_transection, needle_passing, irrelevant"
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSegment {
    pub label: EventClass,
    pub start_sec: f64,
    pub end_sec: f64,
}

impl EventSegment {
    pub fn new(label: EventClass, start_sec: f64, end_sec: f64) -> Self {
        Self {
            label,
            start_sec,
            end_sec,
        }
    }

    pub fn duration(&self) -> f64 {
        self.end_sec - self.start_sec
    }

    pub fn overlaps(&self, other: &EventSegment) -> bool {
        self.start_sec < other.end_sec && other.start_sec < self.end_sec
    }

    /// Frame range `[start, end)` of the segment at the given frame rate.
    pub fn frame_range(&self, fps: f64) -> (usize, usize) {
        let start = (self.start_sec * fps).round().max(0.0) as usize;
        let end = (self.end_sec * fps).round().max(0.0) as usize;
        (start, end.max(start))
    }
}

fn default_fps() -> f64 {
    DEFAULT_FPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseAnnotation {
    pub case_id: String,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub duration_sec: f64,
    pub video_path: String,
    #[serde(default)]
    pub segments: Vec<EventSegment>,
}

impl CaseAnnotation {
    /// Checks the case invariants and sorts segments by start time.
    pub fn validate(mut self) -> Result<Self, DatasetError> {
        let invalid_case = |reason: String| DatasetError::InvalidCase {
            case_id: self.case_id.clone(),
            reason,
        };
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(invalid_case(format!(
                "fps must be positive, got {}",
                self.fps
            )));
        }
        if !(self.duration_sec.is_finite() && self.duration_sec >= 0.0) {
            return Err(invalid_case(format!(
                "duration_sec must be non-negative, got {}",
                self.duration_sec
            )));
        }
        for (index, seg) in self.segments.iter().enumerate() {
            let reason = if !(seg.start_sec.is_finite() && seg.end_sec.is_finite()) {
                Some("segment times must be finite".to_string())
            } else if seg.start_sec < 0.0 {
                Some(format!("start_sec {} is negative", seg.start_sec))
            } else if seg.end_sec <= seg.start_sec {
                Some(format!(
                    "end_sec {} must be greater than start_sec {}",
                    seg.end_sec, seg.start_sec
                ))
            } else if seg.end_sec > self.duration_sec {
                Some(format!(
                    "end_sec {} exceeds case duration {}",
                    seg.end_sec, self.duration_sec
                ))
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(DatasetError::InvalidSegment {
                    case_id: self.case_id.clone(),
                    index,
                    reason,
                });
            }
        }

        // Sort while remembering file order so errors point at the right entry.
        let mut order: Vec<usize> = (0..self.segments.len()).collect();
        order.sort_by(|&a, &b| cmp_segments(&self.segments[a], &self.segments[b]).then(a.cmp(&b)));
        for (pos, &i) in order.iter().enumerate() {
            let seg = &self.segments[i];
            if !seg.label.is_relevant() {
                continue;
            }
            for &j in &order[pos + 1..] {
                let other = &self.segments[j];
                if other.start_sec >= seg.end_sec {
                    break;
                }
                if other.label.is_relevant() && other.label != seg.label && seg.overlaps(other) {
                    let (first, second) = (i.min(j), i.max(j));
                    return Err(DatasetError::InvalidSegment {
                        case_id: self.case_id.clone(),
                        index: second,
                        reason: format!(
                            "{} overlaps segment {first} ({}) with a different event",
                            self.segments[second].label, self.segments[first].label
                        ),
                    });
                }
            }
        }
        self.segments = order.into_iter().map(|i| self.segments[i]).collect();
        Ok(self)
    }

    /// Resolves `video_path` against an explicit root, `LAPSE_DATA_ROOT`, or
    /// the given fallback directory, in that order.
    pub fn resolve_video_path(&self, root: Option<&Path>, fallback: &Path) -> PathBuf {
        let path = Path::new(&self.video_path);
        if path.is_absolute() {
            return path.to_path_buf();
        }
        if let Some(root) = root {
            return root.join(path);
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
            _ => fallback.join(path),
        }
    }
}

fn cmp_segments(a: &EventSegment, b: &EventSegment) -> Ordering {
    a.start_sec
        .total_cmp(&b.start_sec)
        .then(a.end_sec.total_cmp(&b.end_sec))
}

pub fn parse_annotations_str(text: &str) -> Result<Vec<CaseAnnotation>, DatasetError> {
    let cases: Vec<CaseAnnotation> =
        serde_json::from_str(text).map_err(|e| DatasetError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        if !seen.insert(case.case_id.clone()) {
            return Err(DatasetError::InvalidCase {
                case_id: case.case_id,
                reason: "duplicate case_id".into(),
            });
        }
        out.push(case.validate()?);
    }
    Ok(out)
}

/// Reads and validates an annotation file.
pub fn parse_annotations(path: impl AsRef<Path>) -> Result<Vec<CaseAnnotation>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_annotations_str(&text)
}

pub fn serialize_annotations(cases: &[CaseAnnotation]) -> String {
    serde_json::to_string_pretty(cases).expect("annotations always serialize")
}

/// Drops segments shorter than `min_sec`. Cases left without segments are
/// kept since their unlabeled time still yields negatives.
pub fn filter_min_duration(cases: &[CaseAnnotation], min_sec: f64) -> Vec<CaseAnnotation> {
    cases
        .iter()
        .map(|case| CaseAnnotation {
            segments: case
                .segments
                .iter()
                .filter(|s| s.duration() >= min_sec)
                .copied()
                .collect(),
            ..case.clone()
        })
        .collect()
}

/// A segment together with the case it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRef {
    pub case_id: String,
    #[serde(flatten)]
    pub segment: EventSegment,
}

impl SegmentRef {
    pub fn new(case_id: impl Into<String>, segment: EventSegment) -> Self {
        Self {
            case_id: case_id.into(),
            segment,
        }
    }

    /// Exact identity key (bit patterns of the times).
    pub fn key(&self) -> (String, EventClass, u64, u64) {
        (
            self.case_id.clone(),
            self.segment.label,
            self.segment.start_sec.to_bits(),
            self.segment.end_sec.to_bits(),
        )
    }
}

/// One-vs-rest dataset for a single event.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryTask {
    pub positive_class: EventClass,
    pub positives: Vec<SegmentRef>,
    pub negatives: Vec<SegmentRef>,
}

impl BinaryTask {
    pub fn is_positive(&self, seg: &SegmentRef) -> bool {
        seg.segment.label == self.positive_class
    }
}

/// Unlabeled stretches of a case (including the leading and trailing parts)
/// at least `min_sec` long, materialized as irrelevant segments.
pub fn unlabeled_gaps(case: &CaseAnnotation, min_sec: f64) -> Vec<EventSegment> {
    let mut gaps = Vec::new();
    let mut cursor = 0.0_f64;
    let mut sorted = case.segments.clone();
    sorted.sort_by(cmp_segments);
    for seg in &sorted {
        if seg.start_sec - cursor >= min_sec {
            gaps.push(EventSegment::new(
                EventClass::Irrelevant,
                cursor,
                seg.start_sec,
            ));
        }
        cursor = cursor.max(seg.end_sec);
    }
    if case.duration_sec - cursor >= min_sec {
        gaps.push(EventSegment::new(
            EventClass::Irrelevant,
            cursor,
            case.duration_sec,
        ));
    }
    gaps
}

/// Builds the one-vs-rest task for `positive`: its segments against every
/// other labeled segment plus unlabeled gaps of at least one second.
pub fn build_binary_task(
    cases: &[CaseAnnotation],
    positive: EventClass,
) -> Result<BinaryTask, DatasetError> {
    if !positive.is_relevant() {
        return Err(DatasetError::IrrelevantPositive(positive));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for case in cases {
        for seg in &case.segments {
            let r = SegmentRef::new(case.case_id.clone(), *seg);
            if seg.label == positive {
                positives.push(r);
            } else {
                negatives.push(r);
            }
        }
        negatives.extend(
            unlabeled_gaps(case, MIN_SEGMENT_SEC)
                .into_iter()
                .map(|g| SegmentRef::new(case.case_id.clone(), g)),
        );
    }
    if positives.is_empty() {
        return Err(DatasetError::EmptyTask(positive));
    }
    Ok(BinaryTask {
        positive_class: positive,
        positives,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case_json(segments: &str) -> String {
        format!(
            r#"[{{"case_id": "c1", "duration_sec": 60.0, "video_path": "c1", "segments": [{segments}]}}]"#
        )
    }

    #[test]
    fn parses_single_segment_with_default_fps() {
        let cases = parse_annotations_str(&case_json(
            r#"{"label": "bleeding", "start_sec": 10.0, "end_sec": 14.5}"#,
        ))
        .unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].fps, 30.0);
        assert_eq!(cases[0].segments.len(), 1);
        assert_eq!(cases[0].segments[0].duration(), 4.5);
    }

    #[test]
    fn rejects_reversed_segment() {
        let err = parse_annotations_str(&case_json(
            r#"{"label": "bleeding", "start_sec": 10.0, "end_sec": 10.0}"#,
        ))
        .unwrap_err();
        assert!(
            matches!(err, DatasetError::InvalidSegment { index: 0, .. }),
            "{err}"
        );
    }

    #[test]
    fn rejects_segment_past_end_of_video() {
        let err = parse_annotations_str(&case_json(
            r#"{"label": "bleeding", "start_sec": 50.0, "end_sec": 61.0}"#,
        ))
        .unwrap_err();
        assert!(err.to_string().contains("c1"));
    }

    #[test]
    fn unknown_label_is_a_parse_error_with_position() {
        let err = parse_annotations_str(&case_json(
            r#"{"label": "smoke", "start_sec": 1.0, "end_sec": 2.0}"#,
        ))
        .unwrap_err();
        match err {
            DatasetError::Parse { line, message, .. } => {
                assert_eq!(line, 1);
                assert!(message.contains("smoke"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_case_ids_are_rejected() {
        let text = r#"[{"case_id": "a", "duration_sec": 5, "video_path": "a"},
                       {"case_id": "a", "duration_sec": 5, "video_path": "a"}]"#;
        assert!(matches!(
            parse_annotations_str(text),
            Err(DatasetError::InvalidCase { .. })
        ));
    }

    // Brute-force pairwise overlap check used as the oracle for validation.
    fn has_conflict(segs: &[EventSegment]) -> bool {
        segs.iter().enumerate().any(|(i, a)| {
            segs[i + 1..].iter().any(|b| {
                a.label.is_relevant()
                    && b.label.is_relevant()
                    && a.label != b.label
                    && a.start_sec < b.end_sec
                    && b.start_sec < a.end_sec
            })
        })
    }

    #[test]
    fn overlap_validation_matches_pairwise_oracle() {
        use EventClass::*;
        let fixtures: Vec<Vec<EventSegment>> = vec![
            vec![
                EventSegment::new(Bleeding, 0.0, 5.0),
                EventSegment::new(NeedlePassing, 4.0, 8.0),
            ],
            vec![
                EventSegment::new(Bleeding, 0.0, 5.0),
                EventSegment::new(NeedlePassing, 5.0, 8.0),
            ],
            vec![
                EventSegment::new(Bleeding, 0.0, 5.0),
                EventSegment::new(Bleeding, 2.0, 8.0),
            ],
            vec![
                EventSegment::new(Bleeding, 0.0, 5.0),
                EventSegment::new(Irrelevant, 2.0, 8.0),
            ],
            vec![
                EventSegment::new(AbdominalAccess, 20.0, 30.0),
                EventSegment::new(Bleeding, 0.0, 5.0),
                EventSegment::new(CoagTransection, 1.0, 2.0),
            ],
            vec![
                EventSegment::new(CoagTransection, 0.0, 50.0),
                EventSegment::new(Irrelevant, 1.0, 2.0),
                EventSegment::new(NeedlePassing, 49.5, 55.0),
            ],
        ];
        for segs in fixtures {
            let case = CaseAnnotation {
                case_id: "x".into(),
                fps: 30.0,
                duration_sec: 60.0,
                video_path: "x".into(),
                segments: segs.clone(),
            };
            assert_eq!(case.validate().is_err(), has_conflict(&segs), "{segs:?}");
        }
    }

    #[test]
    fn segments_are_sorted_after_ingestion() {
        let cases = parse_annotations_str(&case_json(
            r#"{"label": "bleeding", "start_sec": 30.0, "end_sec": 34.0},
               {"label": "needle_passing", "start_sec": 2.0, "end_sec": 4.0}"#,
        ))
        .unwrap();
        assert_eq!(cases[0].segments[0].label, EventClass::NeedlePassing);
    }

    #[test]
    fn min_duration_filter_is_inclusive() {
        use EventClass::*;
        let case = CaseAnnotation {
            case_id: "c".into(),
            fps: 30.0,
            duration_sec: 100.0,
            video_path: "c".into(),
            segments: vec![
                EventSegment::new(Bleeding, 0.0, 0.4),
                EventSegment::new(Bleeding, 1.0, 3.0),
                EventSegment::new(NeedlePassing, 10.0, 40.0),
                EventSegment::new(NeedlePassing, 50.0, 51.0),
                EventSegment::new(NeedlePassing, 60.0, 60.5),
            ],
        };
        let out = filter_min_duration(&[case], MIN_SEGMENT_SEC);
        let durations: Vec<f64> = out[0].segments.iter().map(|s| s.duration()).collect();
        assert_eq!(durations, vec![2.0, 30.0, 1.0]);
    }

    #[test]
    fn filter_keeps_cases_without_surviving_segments() {
        let case = CaseAnnotation {
            case_id: "c".into(),
            fps: 30.0,
            duration_sec: 10.0,
            video_path: "c".into(),
            segments: vec![EventSegment::new(EventClass::Bleeding, 0.0, 0.5)],
        };
        let out = filter_min_duration(&[case], 1.0);
        assert_eq!(out.len(), 1);
        assert!(out[0].segments.is_empty());
    }

    #[test]
    fn binary_task_enumerates_positives_negatives_and_gaps() {
        use EventClass::*;
        let case = CaseAnnotation {
            case_id: "c".into(),
            fps: 30.0,
            duration_sec: 60.0,
            video_path: "c".into(),
            segments: vec![
                EventSegment::new(AbdominalAccess, 2.0, 6.0),
                EventSegment::new(AbdominalAccess, 6.5, 9.0),
                EventSegment::new(Bleeding, 20.0, 30.0),
            ],
        };
        let task = build_binary_task(&[case], Bleeding).unwrap();
        assert_eq!(task.positives.len(), 1);
        // 2 abdominal-access segments, then gaps [0,2), [9,20), [30,60);
        // the 0.5 s gap between the two access segments is skipped.
        let gaps: Vec<(f64, f64)> = task
            .negatives
            .iter()
            .filter(|n| n.segment.label == Irrelevant)
            .map(|n| (n.segment.start_sec, n.segment.end_sec))
            .collect();
        assert_eq!(task.negatives.len(), 5);
        assert_eq!(gaps, vec![(0.0, 2.0), (9.0, 20.0), (30.0, 60.0)]);
        assert!(task.negatives.iter().all(|n| n.segment.label != Bleeding));
    }

    #[test]
    fn irrelevant_positive_is_rejected() {
        assert!(matches!(
            build_binary_task(&[], EventClass::Irrelevant),
            Err(DatasetError::IrrelevantPositive(_))
        ));
    }

    #[test]
    fn task_without_positives_is_an_error() {
        let case = CaseAnnotation {
            case_id: "c".into(),
            fps: 30.0,
            duration_sec: 10.0,
            video_path: "c".into(),
            segments: vec![],
        };
        assert!(matches!(
            build_binary_task(&[case], EventClass::Bleeding),
            Err(DatasetError::EmptyTask(EventClass::Bleeding))
        ));
    }

    #[test]
    fn relative_video_paths_resolve_against_explicit_root() {
        let case = CaseAnnotation {
            case_id: "c".into(),
            fps: 30.0,
            duration_sec: 10.0,
            video_path: "videos/c".into(),
            segments: vec![],
        };
        assert_eq!(
            case.resolve_video_path(Some(Path::new("/data")), Path::new("/fallback")),
            PathBuf::from("/data/videos/c")
        );
    }
}
