use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BinaryTask, DatasetError, EventClass, SegmentRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Individual segments are assigned, stratified by class.
    #[default]
    Segment,
    /// Whole cases are assigned so no surgery contributes to both sides.
    Case,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub train: Vec<SegmentRef>,
    pub test: Vec<SegmentRef>,
    pub seed: u64,
}

impl SplitManifest {
    /// The training side as a one-vs-rest task for `positive`.
    pub fn train_task(&self, positive: EventClass) -> BinaryTask {
        let (positives, negatives) = self
            .train
            .iter()
            .cloned()
            .partition(|s| s.segment.label == positive);
        BinaryTask {
            positive_class: positive,
            positives,
            negatives,
        }
    }
}

/// Stratified segment-level split; see [`split_train_test_with`].
pub fn split_train_test(
    task: &BinaryTask,
    ratio: f64,
    seed: u64,
) -> Result<SplitManifest, DatasetError> {
    split_train_test_with(task, ratio, seed, SplitMode::Segment)
}

pub fn split_train_test_with(
    task: &BinaryTask,
    ratio: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<SplitManifest, DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    if task.positives.len() < 2 || task.negatives.len() < 2 {
        return Err(DatasetError::TooFewToSplit {
            positives: task.positives.len(),
            negatives: task.negatives.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, test) = match mode {
        SplitMode::Segment => {
            let (mut train, mut test) = stratum(&task.positives, ratio, &mut rng);
            let (neg_train, neg_test) = stratum(&task.negatives, ratio, &mut rng);
            train.extend(neg_train);
            test.extend(neg_test);
            (train, test)
        }
        SplitMode::Case => by_case(task, ratio, &mut rng),
    };
    Ok(SplitManifest { train, test, seed })
}

fn train_count(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).round() as usize).clamp(1, n - 1)
}

fn stratum(
    items: &[SegmentRef],
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<SegmentRef>, Vec<SegmentRef>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let n_train = train_count(items.len(), ratio);
    let mut in_train = vec![false; items.len()];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(items.len() - n_train);
    for (item, flag) in items.iter().zip(in_train) {
        if flag {
            train.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    (train, test)
}

fn by_case(
    task: &BinaryTask,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<SegmentRef>, Vec<SegmentRef>) {
    let all: Vec<&SegmentRef> = task.positives.iter().chain(&task.negatives).collect();
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &all {
        *sizes.entry(r.case_id.as_str()).or_default() += 1;
    }
    let mut cases: Vec<&str> = sizes.keys().copied().collect();
    cases.shuffle(rng);
    let target = (all.len() as f64 * ratio).round() as usize;
    let mut train_cases = std::collections::HashSet::new();
    let mut assigned = 0;
    for case in &cases {
        if assigned >= target || train_cases.len() + 1 == cases.len() {
            break;
        }
        train_cases.insert(*case);
        assigned += sizes[case];
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in all {
        if train_cases.contains(r.case_id.as_str()) {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{EventClass, EventSegment};
    use proptest::prelude::*;

    fn task(n_pos: usize, n_neg: usize, cases: usize) -> BinaryTask {
        let mk = |label, i: usize| {
            SegmentRef::new(
                format!("case{}", i % cases),
                EventSegment::new(label, i as f64 * 10.0, i as f64 * 10.0 + 5.0),
            )
        };
        BinaryTask {
            positive_class: EventClass::Bleeding,
            positives: (0..n_pos).map(|i| mk(EventClass::Bleeding, i)).collect(),
            negatives: (0..n_neg)
                .map(|i| mk(EventClass::NeedlePassing, n_pos + i))
                .collect(),
        }
    }

    #[test]
    fn balanced_twenty_splits_sixteen_four() {
        let m = split_train_test(&task(10, 10, 3), 0.8, 7).unwrap();
        assert_eq!((m.train.len(), m.test.len()), (16, 4));
    }

    #[test]
    fn same_seed_same_manifest() {
        let t = task(30, 50, 5);
        assert_eq!(
            split_train_test(&t, 0.8, 11).unwrap(),
            split_train_test(&t, 0.8, 11).unwrap()
        );
        assert_ne!(
            split_train_test(&t, 0.8, 11).unwrap().train,
            split_train_test(&t, 0.8, 12).unwrap().train
        );
    }

    #[test]
    fn table_two_access_count_rounds_to_142() {
        let m = split_train_test(&task(178, 178, 10), 0.8, 1).unwrap();
        let pos_train = m
            .train
            .iter()
            .filter(|r| r.segment.label == EventClass::Bleeding)
            .count();
        assert!(pos_train == 142 || pos_train == 143, "{pos_train}");
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(matches!(
            split_train_test(&task(1, 10, 1), 0.8, 0),
            Err(DatasetError::TooFewToSplit { .. })
        ));
        assert!(matches!(
            split_train_test(&task(5, 5, 1), 1.0, 0),
            Err(DatasetError::InvalidRatio(_))
        ));
        assert!(matches!(
            split_train_test(&task(5, 5, 1), 0.0, 0),
            Err(DatasetError::InvalidRatio(_))
        ));
    }

    #[test]
    fn case_mode_never_shares_a_case() {
        let m = split_train_test_with(&task(40, 60, 12), 0.8, 3, SplitMode::Case).unwrap();
        let train_cases: std::collections::HashSet<_> =
            m.train.iter().map(|r| r.case_id.clone()).collect();
        assert!(m.test.iter().all(|r| !train_cases.contains(&r.case_id)));
        assert!(!m.test.is_empty());
        assert_eq!(m.train.len() + m.test.len(), 100);
    }

    proptest! {
        #[test]
        fn split_partitions_and_stratifies(
            n_pos in 20usize..200,
            n_neg in 20usize..400,
            seed in any::<u64>(),
        ) {
            let t = task(n_pos, n_neg, 7);
            let m = split_train_test(&t, 0.8, seed).unwrap();
            let total = n_pos + n_neg;
            prop_assert_eq!(m.train.len() + m.test.len(), total);
            let expected = (0.8 * total as f64).round() as i64;
            prop_assert!((m.train.len() as i64 - expected).abs() <= 1);

            let keys = |v: &[SegmentRef]| v.iter().map(|r| r.key()).collect::<std::collections::HashSet<_>>();
            let train = keys(&m.train);
            let test = keys(&m.test);
            prop_assert!(train.is_disjoint(&test));
            let all = keys(&t.positives).union(&keys(&t.negatives)).cloned().collect::<std::collections::HashSet<_>>();
            prop_assert_eq!(train.union(&test).cloned().collect::<std::collections::HashSet<_>>(), all);

            let frac = |v: &[SegmentRef]| {
                v.iter().filter(|r| r.segment.label == EventClass::Bleeding).count() as f64 / v.len() as f64
            };
            let overall = n_pos as f64 / total as f64;
            prop_assert!((frac(&m.train) - overall).abs() <= 0.1 * overall);
            prop_assert!((frac(&m.test) - overall).abs() <= 0.1 * overall);
        }
    }
}
