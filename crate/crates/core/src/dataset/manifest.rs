use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, EventClass, EventSegment, SegmentRef, SplitManifest};

#[derive(Debug, Serialize, Deserialize)]
struct SplitRow {
    case_id: String,
    label: EventClass,
    start_sec: f64,
    end_sec: f64,
    split: SplitSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SplitSide {
    Train,
    Test,
}

fn manifest_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes `case_id,label,start_sec,end_sec,split` rows, train rows first.
pub fn write_split_manifest(path: &Path, manifest: &SplitManifest) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| manifest_err(path, e))?;
    let rows = manifest
        .train
        .iter()
        .map(|r| (r, SplitSide::Train))
        .chain(manifest.test.iter().map(|r| (r, SplitSide::Test)));
    for (r, split) in rows {
        w.serialize(SplitRow {
            case_id: r.case_id.clone(),
            label: r.segment.label,
            start_sec: r.segment.start_sec,
            end_sec: r.segment.end_sec,
            split,
        })
        .map_err(|e| manifest_err(path, e))?;
    }
    w.flush().map_err(|e| manifest_err(path, e))?;
    Ok(())
}

/// Reads a split manifest. The seed is not part of the file and is
/// supplied by the caller.
pub fn read_split_manifest(path: &Path, seed: u64) -> Result<SplitManifest, DatasetError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| manifest_err(path, e))?;
    let mut manifest = SplitManifest {
        train: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for row in r.deserialize::<SplitRow>() {
        let row = row.map_err(|e| manifest_err(path, e))?;
        let seg = SegmentRef::new(
            row.case_id,
            EventSegment::new(row.label, row.start_sec, row.end_sec),
        );
        match row.split {
            SplitSide::Train => manifest.train.push(seg),
            SplitSide::Test => manifest.test.push(seg),
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_exact_times() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        let m = SplitManifest {
            train: vec![SegmentRef::new(
                "a",
                EventSegment::new(EventClass::Bleeding, 0.1 + 0.2, 7.123456789),
            )],
            test: vec![SegmentRef::new(
                "b,with comma",
                EventSegment::new(EventClass::Irrelevant, 3.0, 4.0),
            )],
            seed: 9,
        };
        write_split_manifest(&path, &m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("case_id,label,start_sec,end_sec,split\n"));
        assert_eq!(read_split_manifest(&path, 9).unwrap(), m);
    }

    #[test]
    fn bad_split_value_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        std::fs::write(
            &path,
            "case_id,label,start_sec,end_sec,split\na,bleeding,0,1,validation\n",
        )
        .unwrap();
        assert!(matches!(
            read_split_manifest(&path, 0),
            Err(DatasetError::Manifest { .. })
        ));
    }
}
