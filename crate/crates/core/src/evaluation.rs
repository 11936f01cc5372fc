//! Binary classification metrics and backbone x head x event reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EventClass;
use crate::network::{BackboneKind, HeadKind};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("value {0} is not a binary label")]
    NotBinary(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize]) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fp += 1,
            (0, 0) => cm.tn += 1,
            (0, 1) => cm.fn_ += 1,
            _ => return Err(EvalError::NotBinary(p.max(y))),
        }
    }
    Ok(cm)
}

/// Fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 are 0 when their denominators vanish.
pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        precision,
        recall,
        f1,
    }
}

/// Class decisions from two-way probabilities: positive when `p[1] > p[0]`.
pub fn predictions_from_probs(probs: &[[f64; 2]]) -> Vec<usize> {
    probs.iter().map(|p| usize::from(p[1] > p[0])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RunKey {
    pub backbone: BackboneKind,
    pub head: HeadKind,
    pub event: EventClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPredictions {
    pub key: RunKey,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub backbone: BackboneKind,
    pub head: HeadKind,
    pub event: EventClass,
    /// Percentages.
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub cells: BTreeMap<RunKey, Metrics>,
}

pub fn build_report(runs: &[RunPredictions]) -> Result<MetricReport, EvalError> {
    let mut cells = BTreeMap::new();
    for run in runs {
        let cm = confusion(&run.predictions, &run.labels)?;
        cells.insert(run.key, metrics(&cm));
    }
    Ok(MetricReport { cells })
}

const MISSING: &str = "—";
const REPORT_BACKBONES: [BackboneKind; 2] = [BackboneKind::Resnet50, BackboneKind::EfficientNetB0];
const REPORT_HEADS: [HeadKind; 5] = [
    HeadKind::Lstm,
    HeadKind::Gru,
    HeadKind::BiLstm,
    HeadKind::BiGru,
    HeadKind::Transformer,
];
/// Column order of the report table.
pub const REPORT_EVENTS: [EventClass; 4] = [
    EventClass::AbdominalAccess,
    EventClass::NeedlePassing,
    EventClass::Bleeding,
    EventClass::CoagTransection,
];

impl MetricReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.cells
            .iter()
            .map(|(k, m)| ReportRow {
                backbone: k.backbone,
                head: k.head,
                event: k.event,
                acc: 100.0 * m.accuracy,
                precision: 100.0 * m.precision,
                recall: 100.0 * m.recall,
                f1: 100.0 * m.f1,
            })
            .collect()
    }

    /// Mean accuracy and F1 (fractions) over the four events, when all four
    /// are present.
    pub fn average(&self, backbone: BackboneKind, head: HeadKind) -> Option<Metrics> {
        let mut sum = Metrics::default();
        for event in EventClass::RELEVANT {
            let m = self.cells.get(&RunKey {
                backbone,
                head,
                event,
            })?;
            sum.accuracy += m.accuracy / 4.0;
            sum.precision += m.precision / 4.0;
            sum.recall += m.recall / 4.0;
            sum.f1 += m.f1 / 4.0;
        }
        Some(sum)
    }

    fn grid(&self) -> Vec<(BackboneKind, HeadKind)> {
        let mut backbones: Vec<BackboneKind> = REPORT_BACKBONES.to_vec();
        for k in self.cells.keys() {
            if !backbones.contains(&k.backbone) {
                backbones.push(k.backbone);
            }
        }
        backbones
            .into_iter()
            .flat_map(|b| REPORT_HEADS.into_iter().map(move |h| (b, h)))
            .collect()
    }

    /// Events as columns, one row per backbone/head pair, `acc | f1` cells
    /// in percent and a four-event average column.
    pub fn format_table(&self) -> String {
        let cell = |m: Option<&Metrics>| match m {
            Some(m) => format!("{:.2} | {:.2}", 100.0 * m.accuracy, 100.0 * m.f1),
            None => MISSING.to_string(),
        };
        let mut s = String::new();
        let _ = write!(s, "{:<16}{:<13}", "", "");
        for e in REPORT_EVENTS {
            let _ = write!(s, " {:>16}", e.title());
        }
        let _ = writeln!(s, " {:>16}", "Average");
        let _ = write!(s, "{:<16}{:<13}", "Backbone", "Head");
        for _ in 0..5 {
            let _ = write!(s, " {:>16}", "Acc | F1 (%)");
        }
        s.push('\n');
        let mut previous = None;
        for (b, h) in self.grid() {
            let name = if previous == Some(b) { "" } else { b.title() };
            previous = Some(b);
            let _ = write!(s, "{name:<16}{:<13}", h.title());
            for event in REPORT_EVENTS {
                let key = RunKey {
                    backbone: b,
                    head: h,
                    event,
                };
                let _ = write!(s, " {:>16}", cell(self.cells.get(&key)));
            }
            let _ = writeln!(s, " {:>16}", cell(self.average(b, h).as_ref()));
        }
        s
    }

    /// Columns `backbone,head,event,acc,precision,recall,f1` in percent.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Io(e.into()))?;
        for row in self.rows() {
            w.serialize(row).map_err(|e| EvalError::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Grouped bar chart of precision per model and event.
    pub fn precision_chart_svg(&self) -> String {
        const BAR: f64 = 14.0;
        const GAP: f64 = 18.0;
        const PLOT_H: f64 = 200.0;
        const TOP: f64 = 30.0;
        const LEFT: f64 = 50.0;
        let models: Vec<(BackboneKind, HeadKind)> = self
            .grid()
            .into_iter()
            .filter(|&(b, h)| {
                EventClass::RELEVANT.iter().any(|&event| {
                    self.cells.contains_key(&RunKey {
                        backbone: b,
                        head: h,
                        event,
                    })
                })
            })
            .collect();
        let group_w = 4.0 * BAR + GAP;
        let width = LEFT + group_w * models.len().max(1) as f64 + 20.0;
        let height = TOP + PLOT_H + 120.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{LEFT}" y="18" font-size="13">Precision (%)</text>"#
        );
        for tick in [0, 25, 50, 75, 100] {
            let y = TOP + PLOT_H * (1.0 - f64::from(tick) / 100.0);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" x2="{}" y1="{y}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{tick}</text>"##,
                width - 20.0,
                LEFT - 6.0,
                y + 4.0
            );
        }
        for (g, (b, h)) in models.iter().enumerate() {
            let x0 = LEFT + g as f64 * group_w + GAP / 2.0;
            for (i, event) in REPORT_EVENTS.iter().enumerate() {
                let key = RunKey {
                    backbone: *b,
                    head: *h,
                    event: *event,
                };
                if let Some(m) = self.cells.get(&key) {
                    let bar_h = PLOT_H * m.precision;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{:.1}" y="{:.1}" width="{BAR}" height="{:.1}" fill="{}"><title>{} {}: {:.2}</title></rect>"#,
                        x0 + i as f64 * BAR,
                        TOP + PLOT_H - bar_h,
                        bar_h,
                        crate::timeline::event_color(*event),
                        format_args!("{}-{}", b.title(), h.title()),
                        event.title(),
                        100.0 * m.precision
                    );
                }
            }
            let lx = x0 + 2.0 * BAR;
            let ly = TOP + PLOT_H + 12.0;
            let _ = writeln!(
                s,
                r#"<text x="{lx}" y="{ly}" text-anchor="end" transform="rotate(-45 {lx} {ly})">{}-{}</text>"#,
                b.title(),
                h.title()
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write_precision_chart(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.precision_chart_svg())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_counted_confusion() {
        let cm = confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(
            cm,
            ConfusionMatrix {
                tp: 1,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        let m = metrics(&cm);
        assert_eq!(
            m,
            Metrics {
                accuracy: 0.5,
                precision: 0.5,
                recall: 0.5,
                f1: 0.5
            }
        );
        let all = confusion(&[1; 5], &[1; 5]).unwrap();
        assert_eq!(
            all,
            ConfusionMatrix {
                tp: 5,
                ..Default::default()
            }
        );
        assert!(matches!(confusion(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(
            confusion(&[1], &[1, 0]),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            confusion(&[2], &[1]),
            Err(EvalError::NotBinary(2))
        ));
    }

    #[test]
    fn degenerate_cases_are_zero() {
        let m = metrics(&confusion(&[0, 0, 0], &[1, 0, 1]).unwrap());
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        let perfect = metrics(&confusion(&[1, 0, 1], &[1, 0, 1]).unwrap());
        assert_eq!(
            perfect,
            Metrics {
                accuracy: 1.0,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );
    }

    #[test]
    fn relabeling_keeps_accuracy_but_not_precision() {
        let p = [1, 1, 1, 0];
        let y = [1, 0, 0, 0];
        let flip = |v: &[usize]| v.iter().map(|x| 1 - x).collect::<Vec<_>>();
        let a = metrics(&confusion(&p, &y).unwrap());
        let b = metrics(&confusion(&flip(&p), &flip(&y)).unwrap());
        assert_eq!(a.accuracy, b.accuracy);
        assert_ne!(a.precision, b.precision);
        assert_ne!(a.recall, b.recall);
    }

    #[test]
    fn matches_brute_force_tally() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..40);
            let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let m = metrics(&confusion(&p, &y).unwrap());
            let hits = p.iter().zip(&y).filter(|(a, b)| a == b).count();
            let predicted = p.iter().filter(|&&a| a == 1).count();
            let actual = y.iter().filter(|&&b| b == 1).count();
            let both = p.iter().zip(&y).filter(|(&a, &b)| a == 1 && b == 1).count();
            assert_eq!(m.accuracy, hits as f64 / n as f64);
            let prec = if predicted == 0 {
                0.0
            } else {
                both as f64 / predicted as f64
            };
            let rec = if actual == 0 {
                0.0
            } else {
                both as f64 / actual as f64
            };
            assert_eq!(m.precision, prec);
            assert_eq!(m.recall, rec);
            let f1 = if both == 0 {
                0.0
            } else {
                2.0 * both as f64 / (predicted + actual) as f64
            };
            assert!((m.f1 - f1).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn f1_is_bounded_by_precision_and_recall(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..60)) {
            let (p, y): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let m = metrics(&confusion(&p, &y).unwrap());
            prop_assert!((0.0..=1.0).contains(&m.f1));
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
            prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-12 || m.f1 == 0.0);
        }
    }

    fn run(head: HeadKind, event: EventClass, correct: usize, of: usize) -> RunPredictions {
        let labels: Vec<usize> = (0..of).map(|i| i % 2).collect();
        let predictions = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| if i < correct { y } else { 1 - y })
            .collect();
        RunPredictions {
            key: RunKey {
                backbone: BackboneKind::Resnet50,
                head,
                event,
            },
            predictions,
            labels,
        }
    }

    #[test]
    fn table_cells_and_average() {
        let runs: Vec<_> = EventClass::RELEVANT
            .iter()
            .zip([8, 8, 9, 9])
            .map(|(&e, c)| run(HeadKind::Transformer, e, c, 10))
            .collect();
        let report = build_report(&runs).unwrap();
        let avg = report
            .average(BackboneKind::Resnet50, HeadKind::Transformer)
            .unwrap();
        assert_eq!(format!("{:.2}", 100.0 * avg.accuracy), "85.00");
        let table = report.format_table();
        assert!(table.contains("80.00 |"), "{table}");
        assert!(table.contains("85.00 |"), "{table}");
        assert!(table.contains("ResNet50        LSTM"), "{table}");
        let single = build_report(&[run(HeadKind::Gru, EventClass::Bleeding, 15, 16)]).unwrap();
        assert!(single.format_table().contains("93.75 |"));
    }

    #[test]
    fn empty_grid_is_all_missing() {
        let table = MetricReport::default().format_table();
        assert_eq!(table.lines().count(), 12);
        assert_eq!(table.matches(MISSING).count(), 10 * 5);
    }

    #[test]
    fn csv_and_chart_outputs() {
        let report = build_report(&[
            run(HeadKind::Transformer, EventClass::Bleeding, 7, 8),
            run(HeadKind::Lstm, EventClass::NeedlePassing, 6, 8),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        report.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("backbone,head,event,acc,precision,recall,f1\n"));
        assert!(text.contains("resnet50,transformer,bleeding,87.5,"));
        let svg = report.precision_chart_svg();
        assert_eq!(svg.matches("<rect").count(), 2);
    }
}
