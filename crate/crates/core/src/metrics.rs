//! Confusion matrix and per-class accuracy summary, the evaluation
//! protocol behind the reported max/min/overall accuracy numbers.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major counts, rows = true class, cols = predicted class.
pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<Vec<Vec<u64>>> {
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= classes {
            return Err(Error::LabelRange {
                label: y,
                classes,
            });
        }
        if p >= classes {
            return Err(Error::LabelRange {
                label: p,
                classes,
            });
        }
        m[y][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Vec<Vec<u64>>,
    pub per_class_acc: Vec<f64>,
    pub overall_acc: f64,
    pub max_class_acc: f64,
    pub min_class_acc: f64,
    pub acc_gap: f64,
    /// Classes with no true samples; excluded from max/min and reported
    /// with per-class accuracy 0.
    pub zero_support_classes: Vec<usize>,
}

/// Per-class accuracy is the diagonal over the row sum; overall accuracy is
/// sample-weighted (trace over total). Zero-support classes are flagged and
/// left out of max/min so the gap stays meaningful on small eval splits.
pub fn summarize(confusion: &[Vec<u64>]) -> Result<EvalReport> {
    let c = confusion.len();
    if c == 0 || confusion.iter().any(|row| row.len() != c) {
        return Err(Error::Data(format!(
            "confusion matrix must be square and non-empty, got {} rows",
            c
        )));
    }
    let mut per_class_acc = vec![0.0; c];
    let mut zero_support_classes = Vec::new();
    let mut trace = 0u64;
    let mut total = 0u64;
    let mut max_class_acc = f64::NEG_INFINITY;
    let mut min_class_acc = f64::INFINITY;
    for (i, row) in confusion.iter().enumerate() {
        let support: u64 = row.iter().sum();
        total += support;
        trace += row[i];
        if support == 0 {
            zero_support_classes.push(i);
            continue;
        }
        let acc = row[i] as f64 / support as f64;
        per_class_acc[i] = acc;
        max_class_acc = max_class_acc.max(acc);
        min_class_acc = min_class_acc.min(acc);
    }
    if total == 0 {
        return Err(Error::Data("confusion matrix has no samples".into()));
    }
    Ok(EvalReport {
        confusion: confusion.to_vec(),
        per_class_acc,
        overall_acc: trace as f64 / total as f64,
        max_class_acc,
        min_class_acc,
        acc_gap: max_class_acc - min_class_acc,
        zero_support_classes,
    })
}

/// Headerless CSV of integer counts, one row per true class.
pub fn confusion_csv(confusion: &[Vec<u64>]) -> String {
    let mut out = String::new();
    for row in confusion {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn report_to_json(report: &EvalReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("report serialization failed: {e}")))
}

pub fn report_from_json(json: &str) -> Result<EvalReport> {
    serde_json::from_str(json).map_err(|e| Error::Data(format!("bad report JSON: {e}")))
}

/// Index of the row maximum; the first one wins on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn perfect_predictions_fill_the_diagonal() {
        let labels = [0usize, 1, 1, 2, 2, 2];
        let m = confusion_matrix(&labels, &labels, 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 3]]);
    }

    #[test]
    fn constant_predictions_fill_one_column() {
        let labels = [0usize, 1, 2, 1];
        let preds = [0usize, 0, 0, 0];
        let m = confusion_matrix(&preds, &labels, 3).unwrap();
        for (i, row) in m.iter().enumerate() {
            assert!(row[1] == 0 && row[2] == 0);
            assert_eq!(row[0], labels.iter().filter(|&&y| y == i).count() as u64);
        }
    }

    #[test]
    fn large_random_case_matches_recount_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let classes = 5;
        let labels: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..classes)).collect();
        let preds: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..classes)).collect();
        let m = confusion_matrix(&preds, &labels, classes).unwrap();
        let mut oracle = std::collections::HashMap::new();
        for (&p, &y) in preds.iter().zip(&labels) {
            *oracle.entry((y, p)).or_insert(0u64) += 1;
        }
        for y in 0..classes {
            for p in 0..classes {
                assert_eq!(m[y][p], oracle.get(&(y, p)).copied().unwrap_or(0));
            }
        }
    }

    #[test]
    fn out_of_range_entries_and_length_mismatch_fail() {
        assert!(confusion_matrix(&[0, 3], &[0, 1], 3).is_err());
        assert!(confusion_matrix(&[0, 1], &[0, 3], 3).is_err());
        assert!(confusion_matrix(&[0], &[0, 1], 3).is_err());
    }

    #[test]
    fn identity_confusion_scores_ones_everywhere() {
        let m = vec![vec![4, 0], vec![0, 9]];
        let r = summarize(&m).unwrap();
        assert_eq!(r.per_class_acc, vec![1.0, 1.0]);
        assert_eq!(r.overall_acc, 1.0);
        assert_eq!(r.acc_gap, 0.0);
        assert!(r.zero_support_classes.is_empty());
    }

    #[test]
    fn hand_built_two_class_matrix() {
        let m = vec![vec![8, 2], vec![3, 7]];
        let r = summarize(&m).unwrap();
        assert_eq!(r.per_class_acc, vec![0.8, 0.7]);
        assert_eq!(r.overall_acc, 0.75);
        assert!((r.acc_gap - 0.1).abs() < 1e-12);
    }

    #[test]
    fn skewed_marginals_reproduce_a_56_point_gap() {
        // three classes of support 10000 with accuracies 93%, 37%, 54.71%,
        // so the trace gives exactly 61.57% overall
        let m = vec![
            vec![9300, 700, 0],
            vec![0, 3700, 6300],
            vec![4529, 0, 5471],
        ];
        let r = summarize(&m).unwrap();
        assert!((r.max_class_acc - 0.93).abs() < 1e-12);
        assert!((r.min_class_acc - 0.37).abs() < 1e-12);
        assert!((r.overall_acc - 0.6157).abs() < 1e-12);
        assert!((r.acc_gap - 0.56).abs() < 1e-12);
    }

    #[test]
    fn sample_order_does_not_matter() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let labels: Vec<usize> = (0..200).map(|_| rng.gen_range(0..4)).collect();
        let preds: Vec<usize> = (0..200).map(|_| rng.gen_range(0..4)).collect();
        let base = summarize(&confusion_matrix(&preds, &labels, 4).unwrap()).unwrap();

        let mut idx: Vec<usize> = (0..200).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let sl: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let sp: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        let shuffled = summarize(&confusion_matrix(&sp, &sl, 4).unwrap()).unwrap();
        assert_eq!(base, shuffled);
    }

    #[test]
    fn relabeling_permutes_per_class_and_fixes_the_rest() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let labels: Vec<usize> = (0..300).map(|_| rng.gen_range(0..4)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&y| if rng.gen_bool(0.3) { rng.gen_range(0..4) } else { y })
            .collect();
        let base = summarize(&confusion_matrix(&preds, &labels, 4).unwrap()).unwrap();

        let pi = [2usize, 0, 3, 1];
        let rl: Vec<usize> = labels.iter().map(|&y| pi[y]).collect();
        let rp: Vec<usize> = preds.iter().map(|&p| pi[p]).collect();
        let moved = summarize(&confusion_matrix(&rp, &rl, 4).unwrap()).unwrap();

        for (c, &target) in pi.iter().enumerate() {
            assert!((moved.per_class_acc[target] - base.per_class_acc[c]).abs() < 1e-15);
        }
        assert_eq!(moved.overall_acc, base.overall_acc);
        assert_eq!(moved.max_class_acc, base.max_class_acc);
        assert_eq!(moved.min_class_acc, base.min_class_acc);
        assert_eq!(moved.acc_gap, base.acc_gap);
    }

    #[test]
    fn zero_support_classes_are_flagged_and_skipped() {
        let m = vec![vec![5, 0, 1], vec![0, 0, 0], vec![2, 0, 2]];
        let r = summarize(&m).unwrap();
        assert_eq!(r.zero_support_classes, vec![1]);
        assert_eq!(r.per_class_acc[1], 0.0);
        assert!((r.max_class_acc - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.min_class_acc, 0.5);
    }

    #[test]
    fn degenerate_matrices_are_rejected() {
        assert!(summarize(&[]).is_err());
        assert!(summarize(&[vec![0, 0], vec![0, 0]]).is_err());
        assert!(summarize(&[vec![1, 0]]).is_err());
    }

    #[test]
    fn report_json_roundtrips_exactly() {
        let labels = [0usize, 1, 1, 2, 0, 2, 2];
        let preds = [0usize, 1, 0, 2, 1, 2, 1];
        let r = summarize(&confusion_matrix(&preds, &labels, 3).unwrap()).unwrap();
        let json = report_to_json(&r).unwrap();
        assert_eq!(report_from_json(&json).unwrap(), r);
        for key in [
            "confusion",
            "per_class_acc",
            "overall_acc",
            "max_class_acc",
            "min_class_acc",
            "acc_gap",
            "zero_support_classes",
        ] {
            assert!(json.contains(key), "missing {key}");
        }
    }

    #[test]
    fn confusion_csv_is_headerless_integers() {
        let m = vec![vec![1, 2], vec![30, 4]];
        assert_eq!(confusion_csv(&m), "1,2\n30,4\n");
    }

    #[test]
    fn argmax_takes_the_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[2.0, 2.0, 1.0]), 0);
        assert_eq!(argmax(&[-5.0]), 0);
    }
}
