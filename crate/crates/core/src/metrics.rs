//! Classification metrics: confusion matrix, support-weighted
//! precision/recall/F-measure, accuracy, and one-vs-rest ROC/AUC.
//!
//! Averages are support-weighted, which makes the weighted recall equal the
//! accuracy as an exact rational identity. Reported values are percentages
//! rounded to three decimals so they survive a CSV round trip bit-exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rounds a percentage to the three decimals used in reports.
pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// K x K count matrix; rows index the true class, columns the prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(counts: Vec<Vec<usize>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|row| row.len() != k) {
            return Err(Error::contract("confusion matrix must be square and non-empty"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_predictions(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::shape(format!(
                "{} true labels vs {} predictions",
                y_true.len(),
                y_pred.len()
            )));
        }
        if k == 0 {
            return Err(Error::contract("confusion matrix needs at least one class"));
        }
        let mut counts = vec![vec![0usize; k]; k];
        for (&t, &p) in y_true.iter().zip(y_pred.iter()) {
            if t >= k {
                return Err(Error::index(format!("true label {t} out of range for {k} classes")));
            }
            if p >= k {
                return Err(Error::index(format!("prediction {p} out of range for {k} classes")));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    fn row_sum(&self, i: usize) -> usize {
        self.counts[i].iter().sum()
    }

    fn col_sum(&self, j: usize) -> usize {
        self.counts.iter().map(|row| row[j]).sum()
    }
}

/// Shorthand for confusion-matrix construction from label vectors.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    ConfusionMatrix::from_predictions(y_true, y_pred, k)
}

/// Per-class metrics as percentages; `degenerate` marks 0/0 cases that were
/// reported as zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub support: usize,
    pub degenerate: bool,
}

/// Support-weighted precision/recall/F-measure plus accuracy, in percent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub accuracy: f64,
}

/// Computes per-class and weighted metrics from a confusion matrix.
pub fn weighted_prf_accuracy(
    confusion: &ConfusionMatrix,
) -> Result<(WeightedMetrics, Vec<ClassMetrics>)> {
    let total = confusion.total();
    if total == 0 {
        return Err(Error::contract("metrics over an empty confusion matrix"));
    }
    let k = confusion.num_classes();
    let mut per_class = Vec::with_capacity(k);
    let mut weighted_precision = 0.0;
    let mut weighted_f = 0.0;
    for c in 0..k {
        let tp = confusion.counts[c][c] as f64;
        let support = confusion.row_sum(c);
        let predicted = confusion.col_sum(c);
        let mut degenerate = false;
        let precision = if predicted == 0 {
            degenerate = true;
            0.0
        } else {
            tp / predicted as f64
        };
        let recall = if support == 0 {
            degenerate = true;
            0.0
        } else {
            tp / support as f64
        };
        let f_measure = if precision + recall == 0.0 {
            degenerate = degenerate || support > 0;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        weighted_precision += support as f64 * precision;
        weighted_f += support as f64 * f_measure;
        per_class.push(ClassMetrics {
            precision: round3(100.0 * precision),
            recall: round3(100.0 * recall),
            f_measure: round3(100.0 * f_measure),
            support,
            degenerate,
        });
    }
    let accuracy = confusion.trace() as f64 / total as f64;
    // Support weights cancel in the weighted recall: sum_k n_k * (d_k / n_k)
    // is the trace, so weighted recall is exactly the accuracy.
    let weighted = WeightedMetrics {
        precision: round3(100.0 * weighted_precision / total as f64),
        recall: round3(100.0 * accuracy),
        f_measure: round3(100.0 * weighted_f / total as f64),
        accuracy: round3(100.0 * accuracy),
    };
    Ok((weighted, per_class))
}

/// One point on a ROC curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// One-vs-rest ROC curve with its trapezoid AUC.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Per-class one-vs-rest ROC curves from `[N, K]` probability rows.
///
/// Classes with no positive or no negative samples have no defined curve
/// and are reported as `None`.
pub fn roc_auc(scores: &[Vec<f64>], y_true: &[usize]) -> Result<Vec<Option<RocCurve>>> {
    if scores.len() != y_true.len() {
        return Err(Error::shape(format!(
            "{} score rows vs {} labels",
            scores.len(),
            y_true.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::contract("ROC over an empty sample set"));
    }
    let k = scores[0].len();
    if scores.iter().any(|row| row.len() != k) {
        return Err(Error::shape("ragged score rows"));
    }
    if let Some(&bad) = y_true.iter().find(|&&l| l >= k) {
        return Err(Error::index(format!("label {bad} out of range for {k} classes")));
    }

    let mut curves = Vec::with_capacity(k);
    for class in 0..k {
        let positives = y_true.iter().filter(|&&l| l == class).count();
        let negatives = y_true.len() - positives;
        if positives == 0 || negatives == 0 {
            curves.push(None);
            continue;
        }
        curves.push(Some(one_vs_rest_roc(scores, y_true, class, positives, negatives)));
    }
    Ok(curves)
}

fn one_vs_rest_roc(
    scores: &[Vec<f64>],
    y_true: &[usize],
    class: usize,
    positives: usize,
    negatives: usize,
) -> RocCurve {
    let mut ranked: Vec<(f64, bool)> = scores
        .iter()
        .zip(y_true.iter())
        .map(|(row, &l)| (row[class], l == class))
        .collect();
    // Descending by score; ties share one threshold group.
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < ranked.len() {
        let threshold = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == threshold {
            if ranked[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold,
        });
    }

    let mut auc = 0.0;
    for pair in points.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }
    RocCurve { points, auc }
}

/// Full evaluation report for one model under one condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub weighted: WeightedMetrics,
    pub per_class: Vec<ClassMetrics>,
    /// Per-class one-vs-rest curves; `None` when the class is absent.
    pub roc: Option<Vec<Option<RocCurve>>>,
}

impl MetricsReport {
    /// Builds the report from labels, predictions, and optional probability
    /// rows (which enable the ROC section).
    pub fn new(
        y_true: &[usize],
        y_pred: &[usize],
        scores: Option<&[Vec<f64>]>,
        k: usize,
    ) -> Result<MetricsReport> {
        let confusion = ConfusionMatrix::from_predictions(y_true, y_pred, k)?;
        let (weighted, per_class) = weighted_prf_accuracy(&confusion)?;
        let roc = match scores {
            Some(rows) => Some(roc_auc(rows, y_true)?),
            None => None,
        };
        Ok(MetricsReport {
            confusion,
            weighted,
            per_class,
            roc,
        })
    }

    pub fn accuracy(&self) -> f64 {
        self.weighted.accuracy
    }

    /// CSV header matching the evaluation-table column order.
    pub const CSV_HEADER: &'static str = "model,condition,precision,recall,f_measure,accuracy";

    /// One CSV row, values as percentages with three decimals.
    pub fn csv_row(&self, model: &str, condition: &str) -> String {
        format!(
            "{model},{condition},{:.3},{:.3},{:.3},{:.3}",
            self.weighted.precision,
            self.weighted.recall,
            self.weighted.f_measure,
            self.weighted.accuracy
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
