//! Chronological cross-validation splits and the class-balanced
//! resampling used by the second training stage.
//!
//! Three folds share a fixed initial validation year; their test windows
//! are the three trailing years, consecutive and disjoint; each fold
//! trains on everything between the validation end and its test start.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::shard::SplitWindow;
use crate::classes::{FlareClass, NUM_CLASSES};
use crate::error::DataError;

pub const NUM_FOLDS: usize = 3;

/// One fold's split as sample indices into a timestamp-sorted dataset.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub fold: usize, // 1-based
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub train_window: SplitWindow,
    pub val_window: SplitWindow,
    pub test_window: SplitWindow,
}

/// Build the three folds from sample timestamps (hours). `year_steps`
/// sets the synthetic-year length; validation is the first year, test
/// windows the last three.
pub fn split_folds(timestamps: &[i64], year_steps: usize) -> Result<Vec<FoldSplit>, DataError> {
    if timestamps.is_empty() {
        return Err(DataError::Constraint("empty dataset".into()));
    }
    if timestamps.windows(2).any(|w| w[0] > w[1]) {
        return Err(DataError::Constraint(
            "split wants chronologically ordered samples".into(),
        ));
    }
    let year = year_steps as i64;
    let t0 = timestamps[0];
    let t_end = timestamps[timestamps.len() - 1] + 1;
    let span = t_end - t0;
    if span < 5 * year {
        return Err(DataError::Constraint(format!(
            "dataset spans {span} steps; time-series CV wants >= 5 synthetic years ({})",
            5 * year
        )));
    }
    let val_start = t0;
    let val_end = t0 + year;
    let mut folds = Vec::with_capacity(NUM_FOLDS);
    for fold in 1..=NUM_FOLDS {
        let test_start = t_end - (NUM_FOLDS as i64 - fold as i64 + 1) * year;
        let test_end = test_start + year;
        if test_start < val_end {
            return Err(DataError::Constraint(
                "test windows would overlap the validation period".into(),
            ));
        }
        let in_window = |lo: i64, hi: i64| -> Vec<usize> {
            timestamps
                .iter()
                .enumerate()
                .filter(|(_, &t)| t >= lo && t < hi)
                .map(|(i, _)| i)
                .collect()
        };
        let train = in_window(val_end, test_start);
        let val = in_window(val_start, val_end);
        let test = in_window(test_start, test_end);
        if train.is_empty() || val.is_empty() || test.is_empty() {
            return Err(DataError::Constraint(format!(
                "fold {fold} has an empty split"
            )));
        }
        let window = |lo: i64, hi: i64, idx: &[usize]| SplitWindow {
            start: lo,
            end: hi,
            count: idx.len(),
        };
        folds.push(FoldSplit {
            fold,
            train_window: window(val_end, test_start, &train),
            val_window: window(val_start, val_end, &val),
            test_window: window(test_start, test_end, &test),
            train,
            val,
            test,
        });
    }
    Ok(folds)
}

/// Draw one class-balanced epoch: every class contributes the same
/// number of draws (the majority-class count by default), oversampling
/// minority classes with replacement. The emitted order is a seeded
/// shuffle.
pub fn crt_resample(
    labels: &[FlareClass],
    indices: &[usize],
    per_class: Option<usize>,
    seed: u64,
) -> Result<Vec<usize>, DataError> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for &i in indices {
        by_class[labels[i].index()].push(i);
    }
    if let Some(empty) = by_class.iter().position(|v| v.is_empty()) {
        return Err(DataError::Constraint(format!(
            "class {} absent from the training split; balanced resampling undefined",
            FlareClass::from_index(empty).unwrap().letter()
        )));
    }
    let target = per_class.unwrap_or_else(|| by_class.iter().map(Vec::len).max().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(target * NUM_CLASSES);
    for class_indices in &by_class {
        if class_indices.len() == target {
            out.extend_from_slice(class_indices);
        } else {
            for _ in 0..target {
                out.push(class_indices[rng.gen_range(0..class_indices.len())]);
            }
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

use rand::Rng;

#[cfg(test)]
mod tests {
    use super::*;

    fn hourly(n: usize) -> Vec<i64> {
        (0..n as i64).collect()
    }

    #[test]
    fn folds_are_chronological_and_disjoint() {
        let ts = hourly(700); // year = 100 -> 7 years
        let folds = split_folds(&ts, 100).unwrap();
        assert_eq!(folds.len(), 3);
        for f in &folds {
            let max_train = f.train.iter().map(|&i| ts[i]).max().unwrap();
            let min_test = f.test.iter().map(|&i| ts[i]).min().unwrap();
            assert!(max_train < min_test, "fold {}", f.fold);
            // No index in two roles.
            let mut seen = std::collections::BTreeSet::new();
            for &i in f.train.iter().chain(&f.val).chain(&f.test) {
                assert!(seen.insert(i), "fold {} reuses sample {i}", f.fold);
            }
        }
        // Test windows: trailing, consecutive, disjoint; union = last 3 years.
        assert_eq!(folds[0].test_window.start, 400);
        assert_eq!(folds[1].test_window.start, 500);
        assert_eq!(folds[2].test_window.start, 600);
        assert_eq!(folds[2].test_window.end, 700);
        for w in folds.windows(2) {
            assert_eq!(w[0].test_window.end, w[1].test_window.start);
        }
        // Validation fixed to the initial year for all folds.
        for f in &folds {
            assert_eq!(f.val_window.start, 0);
            assert_eq!(f.val_window.end, 100);
        }
    }

    #[test]
    fn counts_add_up_with_unused_gap() {
        let ts = hourly(700);
        let folds = split_folds(&ts, 100).unwrap();
        for f in &folds {
            let used = f.train.len() + f.val.len() + f.test.len();
            // Unused: samples after the fold's test window (and none
            // before, since train starts at the validation end).
            let unused = ts
                .iter()
                .filter(|&&t| t >= f.test_window.end)
                .count();
            assert_eq!(used + unused, ts.len(), "fold {}", f.fold);
        }
    }

    #[test]
    fn short_dataset_rejected() {
        let ts = hourly(450); // 4.5 years at year = 100
        assert!(split_folds(&ts, 100).is_err());
    }

    #[test]
    fn unsorted_rejected() {
        let mut ts = hourly(700);
        ts.swap(0, 1);
        assert!(split_folds(&ts, 100).is_err());
    }

    #[test]
    fn crt_balances_exactly() {
        // Counts (10, 20, 30, 40) -> target 40 per class.
        let mut labels = Vec::new();
        for (count, class) in [(10, FlareClass::X), (20, FlareClass::M), (30, FlareClass::C), (40, FlareClass::O)]
        {
            labels.extend(std::iter::repeat(class).take(count));
        }
        let indices: Vec<usize> = (0..labels.len()).collect();
        let epoch = crt_resample(&labels, &indices, None, 5).unwrap();
        assert_eq!(epoch.len(), 160);
        let mut hist = [0usize; 4];
        for &i in &epoch {
            hist[labels[i].index()] += 1;
        }
        assert_eq!(hist, [40, 40, 40, 40]);
        // X draws average 4 per unique sample.
        let x_unique: std::collections::BTreeSet<usize> =
            epoch.iter().copied().filter(|&i| labels[i] == FlareClass::X).collect();
        assert!(!x_unique.is_empty() && x_unique.len() <= 10);
    }

    #[test]
    fn crt_is_deterministic_and_rejects_empty_class() {
        let labels = vec![FlareClass::X, FlareClass::M, FlareClass::C, FlareClass::O];
        let indices = vec![0, 1, 2, 3];
        let a = crt_resample(&labels, &indices, Some(8), 9).unwrap();
        let b = crt_resample(&labels, &indices, Some(8), 9).unwrap();
        assert_eq!(a, b);
        let missing = vec![FlareClass::M, FlareClass::C, FlareClass::O];
        assert!(crt_resample(&missing, &[0, 1, 2], None, 1).is_err());
    }
}
