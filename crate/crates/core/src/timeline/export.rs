use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Timeline, TimelineEntry, TimelineError, STRIDE_SEC};
use crate::dataset::EventClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimelineFormat {
    Csv,
    Json,
    Svg,
}

impl TimelineFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
            Self::Svg => "svg",
        }
    }
}

impl FromStr for TimelineFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "svg" => Ok(Self::Svg),
            _ => Err(format!(
                "unknown timeline format '{s}', expected csv, json or svg"
            )),
        }
    }
}

pub fn event_color(event: EventClass) -> &'static str {
    match event {
        EventClass::AbdominalAccess => "yellow",
        EventClass::Bleeding => "darkred",
        EventClass::CoagTransection => "green",
        EventClass::NeedlePassing => "blue",
        EventClass::Irrelevant => "gray",
    }
}

#[derive(Serialize, Deserialize)]
struct Row {
    start_sec: f64,
    end_sec: f64,
    p_abd: Option<f64>,
    p_bleed: Option<f64>,
    p_coag: Option<f64>,
    p_needle: Option<f64>,
    assigned: EventClass,
}

pub fn write_timeline(
    timeline: &Timeline,
    path: &Path,
    format: TimelineFormat,
) -> Result<(), TimelineError> {
    if timeline.entries.is_empty() {
        return Err(TimelineError::Empty);
    }
    match format {
        TimelineFormat::Csv => write_timeline_csv(timeline, path),
        TimelineFormat::Json => {
            let text = serde_json::to_string_pretty(timeline).expect("serializable");
            fs::write(path, text)?;
            Ok(())
        }
        TimelineFormat::Svg => {
            fs::write(path, render_svg(timeline))?;
            Ok(())
        }
    }
}

/// Probabilities are written in shortest round-trip form, so reading the
/// file back reproduces them exactly. Failed windows have empty cells.
pub fn write_timeline_csv(timeline: &Timeline, path: &Path) -> Result<(), TimelineError> {
    if timeline.entries.is_empty() {
        return Err(TimelineError::Empty);
    }
    let csv_err = |e: csv::Error| TimelineError::Io(e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for e in &timeline.entries {
        let p = |event| e.prob(event);
        w.serialize(Row {
            start_sec: e.window_start_sec,
            end_sec: e.window_end_sec,
            p_abd: p(EventClass::AbdominalAccess),
            p_bleed: p(EventClass::Bleeding),
            p_coag: p(EventClass::CoagTransection),
            p_needle: p(EventClass::NeedlePassing),
            assigned: e.assigned,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a timeline CSV. The case id is taken from the file stem, the window
/// length from the first row and the stride from the first two starts.
pub fn read_timeline_csv(path: &Path) -> Result<Timeline, TimelineError> {
    let err = |message: String| TimelineError::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut entries = Vec::new();
    for (i, row) in r.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| err(format!("row {}: {e}", i + 1)))?;
        let probs = match (row.p_abd, row.p_bleed, row.p_coag, row.p_needle) {
            (Some(a), Some(b), Some(c), Some(d)) => Some([a, b, c, d]),
            (None, None, None, None) => None,
            _ => {
                return Err(err(format!(
                    "row {}: partially missing probabilities",
                    i + 1
                )))
            }
        };
        entries.push(TimelineEntry {
            window_start_sec: row.start_sec,
            window_end_sec: row.end_sec,
            probs,
            assigned: row.assigned,
        });
    }
    let first = entries.first().ok_or(TimelineError::Empty)?;
    let window_sec = first.window_end_sec - first.window_start_sec;
    let stride_sec = match entries.get(1) {
        Some(second) => second.window_start_sec - first.window_start_sec,
        None => STRIDE_SEC,
    };
    Ok(Timeline {
        case_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        window_sec,
        stride_sec,
        entries,
    })
}

const PX_PER_SEC: f64 = 10.0;
const BAR_TOP: f64 = 30.0;
const BAR_HEIGHT: f64 = 40.0;

/// One coloured bar per window (over its stride-wide centre cell) and a
/// legend of the five labels.
pub fn render_svg(timeline: &Timeline) -> String {
    let end = timeline
        .entries
        .iter()
        .map(|e| timeline.cell(e).1)
        .fold(0.0, f64::max);
    let width = (end * PX_PER_SEC).ceil().max(200.0) + 20.0;
    let height = BAR_TOP + BAR_HEIGHT + 50.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="10" y="18" font-family="sans-serif" font-size="13">{}</text>"#,
        xml_escape(&timeline.case_id)
    );
    for e in &timeline.entries {
        let (a, b) = timeline.cell(e);
        let probs = match e.probs {
            Some(p) => format!("{:.3} {:.3} {:.3} {:.3}", p[0], p[1], p[2], p[3]),
            None => "failed".into(),
        };
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{BAR_TOP}" width="{:.2}" height="{BAR_HEIGHT}" fill="{}"><title>{:.2}-{:.2}s {} [{}]</title></rect>"#,
            10.0 + a.max(0.0) * PX_PER_SEC,
            (b - a.max(0.0)) * PX_PER_SEC,
            event_color(e.assigned),
            e.window_start_sec,
            e.window_end_sec,
            e.assigned,
            probs
        );
    }
    let legend_y = BAR_TOP + BAR_HEIGHT + 25.0;
    for (i, event) in EventClass::ALL.iter().enumerate() {
        let x = 15.0 + i as f64 * 150.0;
        let _ = writeln!(
            s,
            r#"<circle cx="{x}" cy="{legend_y}" r="6" fill="{}"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            event_color(*event),
            x + 10.0,
            legend_y + 4.0,
            event.title()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
