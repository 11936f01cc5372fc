use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::Serialize;

use super::{CaseAnnotation, EventClass};

/// Per-event dataset summary in the layout of the published statistics table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EventStats {
    pub num_cases: usize,
    pub num_segments: usize,
    pub min_duration_sec: f64,
    pub max_duration_sec: f64,
    pub total_duration_sec: f64,
}

/// Summarizes the four relevant events. Events without segments report zeros.
pub fn dataset_statistics(cases: &[CaseAnnotation]) -> BTreeMap<EventClass, EventStats> {
    let mut out = BTreeMap::new();
    for event in EventClass::RELEVANT {
        let mut stats = EventStats::default();
        let mut case_ids = BTreeSet::new();
        for case in cases {
            for seg in case.segments.iter().filter(|s| s.label == event) {
                let d = seg.duration();
                if stats.num_segments == 0 {
                    stats.min_duration_sec = d;
                    stats.max_duration_sec = d;
                } else {
                    stats.min_duration_sec = stats.min_duration_sec.min(d);
                    stats.max_duration_sec = stats.max_duration_sec.max(d);
                }
                stats.num_segments += 1;
                stats.total_duration_sec += d;
                case_ids.insert(case.case_id.as_str());
            }
        }
        stats.num_cases = case_ids.len();
        out.insert(event, stats);
    }
    out
}

pub fn format_statistics_table(stats: &BTreeMap<EventClass, EventStats>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<4} {:<16} {:>9} {:>12} {:>20} {:>20}",
        "", "Event", "No. Cases", "No. Segments", "Segment Duration (s)", "Total duration (s)"
    );
    for (i, event) in EventClass::RELEVANT.iter().enumerate() {
        let st = stats.get(event).copied().unwrap_or_default();
        let range = format!(
            "{} - {}",
            trim_float(st.min_duration_sec),
            trim_float(st.max_duration_sec)
        );
        let _ = writeln!(
            s,
            "{:<4} {:<16} {:>9} {:>12} {:>20} {:>20.2}",
            format!("E{}", i + 1),
            event.title(),
            st.num_cases,
            st.num_segments,
            range,
            st.total_duration_sec
        );
    }
    s
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}
