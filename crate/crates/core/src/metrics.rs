//! Classification metrics: confusion matrix, balanced accuracy,
//! one-vs-rest sensitivity/specificity and Mann-Whitney AUROC.
//!
//! Macro averages run over the classes that actually occur in the ground
//! truth; a class with no true samples contributes nothing.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    fn col_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    /// Row-normalized proportions; empty rows stay all-zero.
    pub fn proportions(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect()
    }

    /// Recall per class, `None` for classes absent from the ground truth.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        (0..self.n_classes())
            .map(|c| {
                let row = self.row_sum(c);
                (row > 0).then(|| self.counts[c][c] as f64 / row as f64)
            })
            .collect()
    }

    /// Writes counts followed by row-normalized proportions as CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.n_classes();
        let mut header = vec!["kind".to_string(), "true".to_string()];
        header.extend((0..n).map(|c| format!("pred_{c}")));
        w.write_record(&header)?;
        for (c, row) in self.counts.iter().enumerate() {
            let mut rec = vec!["count".to_string(), c.to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        for (c, row) in self.proportions().iter().enumerate() {
            let mut rec = vec!["proportion".to_string(), c.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("confusion matrix needs at least one sample"));
    }
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::invalid(format!("class index out of range ({t}, {p})")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let recalls: Vec<f64> = cm.recalls().into_iter().flatten().collect();
    if recalls.is_empty() {
        return Err(Error::invalid("confusion matrix has no samples"));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensSpec {
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub sensitivity: Vec<Option<f64>>,
    pub specificity: Vec<Option<f64>>,
}

/// One-vs-rest sensitivity and specificity. Specificity of a class is
/// undefined (and skipped) when every sample belongs to it.
pub fn sensitivity_specificity(cm: &ConfusionMatrix) -> Result<SensSpec> {
    let n = cm.n_classes();
    let total = cm.total();
    let sensitivity = cm.recalls();
    let specificity: Vec<Option<f64>> = (0..n)
        .map(|c| {
            if cm.row_sum(c) == 0 {
                return None;
            }
            let tp = cm.counts[c][c];
            let fp = cm.col_sum(c) - tp;
            let negatives = total - cm.row_sum(c);
            let tn = negatives - fp;
            (negatives > 0).then(|| tn as f64 / (tn + fp) as f64)
        })
        .collect();
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    };
    let macro_sensitivity = mean(&sensitivity).ok_or_else(|| Error::invalid("confusion matrix has no samples"))?;
    let macro_specificity = mean(&specificity).unwrap_or(f64::NAN);
    Ok(SensSpec { macro_sensitivity, macro_specificity, sensitivity, specificity })
}

/// Mann-Whitney AUROC: `(wins + ties/2) / (n_pos * n_neg)` over every
/// positive-negative pair, computed from average ranks in O(n log n).
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::invalid("scores and flags differ in length"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuroc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start+1 ..= end share the average (start + 1 + end) / 2.
        let twice_avg = (start + 1 + end) as u128;
        let pos_in_group = order[start..end].iter().filter(|&&i| positive[i]).count() as u128;
        twice_rank_sum += twice_avg * pos_in_group;
        start = end;
    }
    let n_pos_u = n_pos as u128;
    // 2U = 2R - n_pos(n_pos + 1), and U = wins + ties/2.
    let twice_u = twice_rank_sum - n_pos_u * (n_pos_u + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Unweighted mean of one-vs-rest AUROCs using each class's probability column.
pub fn macro_auroc(probabilities: &[Vec<f64>], truth: &[usize], n_classes: usize) -> Result<f64> {
    if probabilities.len() != truth.len() {
        return Err(Error::invalid("probability rows and labels differ in length"));
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        if !truth.contains(&c) {
            return Err(Error::MissingClass(c));
        }
        let scores: Vec<f64> = probabilities.iter().map(|p| p[c]).collect();
        let flags: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        total += auroc_binary(&scores, &flags)?;
    }
    Ok(total / n_classes as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub balanced_accuracy: f64,
    /// `None` when some class is missing from the truth labels.
    pub macro_auroc: Option<f64>,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl MetricReport {
    pub fn from_probabilities(probabilities: &[Vec<f64>], truth: &[usize], n_classes: usize) -> Result<Self> {
        let predicted: Vec<usize> = probabilities.iter().map(|p| crate::linalg::argmax(p)).collect();
        let cm = confusion(truth, &predicted, n_classes)?;
        let ss = sensitivity_specificity(&cm)?;
        Ok(Self {
            balanced_accuracy: balanced_accuracy(&cm)?,
            macro_auroc: macro_auroc(probabilities, truth, n_classes).ok(),
            macro_sensitivity: ss.macro_sensitivity,
            macro_specificity: ss.macro_specificity,
            per_class_recall: cm.recalls(),
            confusion: cm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auroc(scores: &[f64], pos: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn confusion_tallies_directly() {
        let cm = confusion(&[0, 1, 2], &[0, 2, 2], 3).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 0, 1], vec![0, 0, 1]]);
        let perfect = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(perfect.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let all_zero = confusion(&[0, 1, 2], &[0, 0, 0], 3).unwrap();
        assert!(all_zero.counts.iter().all(|r| r[1] == 0 && r[2] == 0 && r[0] == 1));
    }

    #[test]
    fn confusion_rejects_length_mismatch() {
        assert!(confusion(&[0, 1], &[0], 3).is_err());
    }

    #[test]
    fn balanced_accuracy_is_mean_recall() {
        let diag = ConfusionMatrix { counts: vec![vec![3, 0, 0], vec![0, 2, 0], vec![0, 0, 5]] };
        assert_eq!(balanced_accuracy(&diag).unwrap(), 1.0);
        let cm = ConfusionMatrix { counts: vec![vec![2, 0, 0], vec![1, 1, 0], vec![0, 4, 0]] };
        assert_eq!(balanced_accuracy(&cm).unwrap(), 0.5);
        let empty = ConfusionMatrix { counts: vec![vec![0; 3]; 3] };
        assert!(balanced_accuracy(&empty).is_err());
    }

    #[test]
    fn absent_classes_are_excluded() {
        let cm = ConfusionMatrix { counts: vec![vec![4, 0, 0], vec![0, 0, 0], vec![0, 1, 1]] };
        assert!((balanced_accuracy(&cm).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn binary_sensitivity_specificity_by_hand() {
        let cm = ConfusionMatrix { counts: vec![vec![8, 2], vec![1, 9]] };
        let ss = sensitivity_specificity(&cm).unwrap();
        assert_eq!(ss.sensitivity, vec![Some(0.8), Some(0.9)]);
        assert_eq!(ss.specificity, vec![Some(0.9), Some(0.8)]);
        assert!((ss.macro_sensitivity - 0.85).abs() < 1e-15);
        assert!((ss.macro_specificity - 0.85).abs() < 1e-15);
        let diag = ConfusionMatrix { counts: vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]] };
        let ss = sensitivity_specificity(&diag).unwrap();
        assert_eq!((ss.macro_sensitivity, ss.macro_specificity), (1.0, 1.0));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc_binary(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc_binary(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert_eq!(auroc_binary(&[0.8, 0.4, 0.4, 0.2], &[true, true, false, false]).unwrap(), 0.875);
        assert!(matches!(auroc_binary(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedAuroc)));
    }

    #[test]
    fn macro_auroc_edge_cases() {
        let truth = [0, 1, 2, 0, 1, 2];
        let onehot: Vec<Vec<f64>> = truth
            .iter()
            .map(|&t| (0..3).map(|c| if c == t { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(macro_auroc(&onehot, &truth, 3).unwrap(), 1.0);
        let uniform = vec![vec![1.0 / 3.0; 3]; 6];
        assert_eq!(macro_auroc(&uniform, &truth, 3).unwrap(), 0.5);
        assert!(matches!(macro_auroc(&uniform[..2], &truth[..2], 3), Err(Error::MissingClass(2))));
    }

    #[test]
    fn six_sample_macro_auroc_matches_pair_enumeration() {
        let truth = [0, 2, 1, 1, 0, 2];
        let probs = vec![
            vec![0.5, 0.3, 0.2],
            vec![0.2, 0.2, 0.6],
            vec![0.3, 0.3, 0.4],
            vec![0.1, 0.7, 0.2],
            vec![0.3, 0.4, 0.3],
            vec![0.4, 0.2, 0.4],
        ];
        let mut expected = 0.0;
        for c in 0..3 {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let f: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            expected += brute_auroc(&s, &f) / 3.0;
        }
        assert!((macro_auroc(&probs, &truth, 3).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn report_sensitivity_equals_balanced_accuracy() {
        let truth = [0, 0, 1, 1, 2, 2, 2];
        let probs = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.1, 0.1, 0.8],
            vec![0.3, 0.3, 0.4],
            vec![0.5, 0.2, 0.3],
        ];
        let r = MetricReport::from_probabilities(&probs, &truth, 3).unwrap();
        assert!((r.macro_sensitivity - r.balanced_accuracy).abs() < 1e-15);
        let mut buf = Vec::new();
        r.confusion.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("kind,true,pred_0,pred_1,pred_2\ncount,0,1,1,0"));
    }
}
