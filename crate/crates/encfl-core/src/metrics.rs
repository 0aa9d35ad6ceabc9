//! Evaluation over confusion matrices.
//!
//! The headline accuracy is the per-class one-vs-rest average
//!
//!   acc = (1/C) Σ_c (TP_c + TN_c) / (TP_c + TN_c + FP_c + FN_c)
//!
//! which for C > 2 is not the usual trace/total ratio: every class
//! contributes its whole one-vs-rest contingency table, so a sample
//! counts as a true negative for the classes it does not involve. Both
//! numbers are reported, the average as `paper_accuracy` and the plain
//! ratio as `micro_accuracy`; they coincide on perfect and on
//! uniformly wrong predictions.
//!
//! Precision and recall are macro averages,
//!
//!   P = (1/K) Σ_k TP_k/(TP_k+FP_k)    R = (1/K) Σ_k TP_k/(TP_k+FN_k)
//!
//! with a zero denominator contributing 0 and the class flagged, so a
//! degenerate model shows up instead of dividing by zero.

use thiserror::Error;

use crate::data::CLASS_NAMES;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("empty confusion matrix")]
    Empty,
    #[error("label {label} outside 0..{classes}")]
    UnknownLabel { label: usize, classes: usize },
}

/// Rows are true classes, columns predicted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

/// One-vs-rest contingency counts for a single class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneVsRest {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix { classes, counts: vec![vec![0; classes]; classes] }
    }

    pub fn accumulate(&mut self, true_label: usize, predicted: usize) -> Result<(), MetricsError> {
        for label in [true_label, predicted] {
            if label >= self.classes {
                return Err(MetricsError::UnknownLabel { label, classes: self.classes });
            }
        }
        self.counts[true_label][predicted] += 1;
        Ok(())
    }

    /// Merge another matrix in; accumulation order never matters.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "class counts differ");
        for (mine, theirs) in self.counts.iter_mut().zip(&other.counts) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m += t;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn one_vs_rest(&self, class: usize) -> OneVsRest {
        let tp = self.counts[class][class];
        let fn_ = self.counts[class].iter().sum::<u64>() - tp;
        let fp = self.counts.iter().map(|row| row[class]).sum::<u64>() - tp;
        let tn = self.total() - tp - fn_ - fp;
        OneVsRest { tp, tn, fp, fn_ }
    }

    /// The per-class one-vs-rest average accuracy.
    pub fn paper_accuracy(&self) -> Result<f64, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::Empty);
        }
        let sum: f64 = (0..self.classes)
            .map(|c| {
                let o = self.one_vs_rest(c);
                (o.tp + o.tn) as f64 / (o.tp + o.tn + o.fp + o.fn_) as f64
            })
            .sum();
        Ok(sum / self.classes as f64)
    }

    /// Plain trace/total accuracy.
    pub fn micro_accuracy(&self) -> Result<f64, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::Empty);
        }
        let trace: u64 = (0..self.classes).map(|c| self.counts[c][c]).sum();
        Ok(trace as f64 / total as f64)
    }

    fn macro_ratio(&self, denom: impl Fn(&OneVsRest) -> u64) -> Result<(f64, Vec<usize>), MetricsError> {
        if self.total() == 0 {
            return Err(MetricsError::Empty);
        }
        let mut sum = 0.0;
        let mut flagged = Vec::new();
        for c in 0..self.classes {
            let o = self.one_vs_rest(c);
            let d = o.tp + denom(&o);
            if d == 0 {
                flagged.push(c);
            } else {
                sum += o.tp as f64 / d as f64;
            }
        }
        Ok((sum / self.classes as f64, flagged))
    }

    /// Macro precision and the classes whose denominator was zero.
    pub fn macro_precision(&self) -> Result<(f64, Vec<usize>), MetricsError> {
        self.macro_ratio(|o| o.fp)
    }

    /// Macro recall and the classes whose denominator was zero.
    pub fn macro_recall(&self) -> Result<(f64, Vec<usize>), MetricsError> {
        self.macro_ratio(|o| o.fn_)
    }
}

/// The metric bundle one evaluated model produces.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsSummary {
    pub paper_accuracy: f64,
    pub micro_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub zero_precision_classes: Vec<usize>,
    pub zero_recall_classes: Vec<usize>,
}

pub fn summarize(cm: &ConfusionMatrix) -> Result<MetricsSummary, MetricsError> {
    let (macro_precision, zero_precision_classes) = cm.macro_precision()?;
    let (macro_recall, zero_recall_classes) = cm.macro_recall()?;
    Ok(MetricsSummary {
        paper_accuracy: cm.paper_accuracy()?,
        micro_accuracy: cm.micro_accuracy()?,
        macro_precision,
        macro_recall,
        zero_precision_classes,
        zero_recall_classes,
    })
}

/// Everything the comparison report needs about one run.
#[derive(Clone, Debug)]
pub struct RunMetrics {
    pub mode: String,
    pub offload: f64,
    pub summary: MetricsSummary,
    pub cm: ConfusionMatrix,
}

fn class_label(cm: &ConfusionMatrix, c: usize) -> String {
    if cm.classes == CLASS_NAMES.len() {
        CLASS_NAMES[c].to_string()
    } else {
        format!("c{c}")
    }
}

/// A confusion matrix as CSV with named header row and column.
pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("true\\pred");
    for c in 0..cm.classes {
        out.push(',');
        out.push_str(&class_label(cm, c));
    }
    out.push('\n');
    for (r, row) in cm.counts.iter().enumerate() {
        out.push_str(&class_label(cm, r));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// The accuracy gap of each run against the first listed run sharing
/// its offload fraction: baselines get 0.
fn gaps(runs: &[RunMetrics]) -> Vec<f64> {
    runs.iter()
        .map(|r| {
            let base = runs
                .iter()
                .find(|b| (b.offload - r.offload).abs() < 1e-12)
                .expect("run matches itself");
            r.summary.paper_accuracy - base.summary.paper_accuracy
        })
        .collect()
}

/// Comparison rows as CSV: one line per run, metrics in percent.
pub fn comparison_csv(runs: &[RunMetrics]) -> String {
    let gap = gaps(runs);
    let mut out =
        String::from("mode,offload,paper_accuracy,micro_accuracy,macro_precision,macro_recall,accuracy_gap\n");
    for (r, g) in runs.iter().zip(&gap) {
        out.push_str(&format!(
            "{},{:.2},{:.4},{:.4},{:.4},{:.4},{:+.4}\n",
            r.mode,
            r.offload,
            100.0 * r.summary.paper_accuracy,
            100.0 * r.summary.micro_accuracy,
            100.0 * r.summary.macro_precision,
            100.0 * r.summary.macro_recall,
            100.0 * g,
        ));
    }
    out
}

/// The same comparison as an aligned text table.
pub fn comparison_table(runs: &[RunMetrics]) -> String {
    let gap = gaps(runs);
    let mut out = format!(
        "{:<10} {:>8} {:>10} {:>10} {:>10} {:>8}\n",
        "mode", "offload", "accuracy%", "precision%", "recall%", "gap%"
    );
    for (r, g) in runs.iter().zip(&gap) {
        out.push_str(&format!(
            "{:<10} {:>8.2} {:>10.3} {:>10.3} {:>10.3} {:>+8.3}\n",
            r.mode,
            r.offload,
            100.0 * r.summary.paper_accuracy,
            100.0 * r.summary.macro_precision,
            100.0 * r.summary.macro_recall,
            100.0 * g,
        ));
        for (flags, what) in [
            (&r.summary.zero_precision_classes, "precision"),
            (&r.summary.zero_recall_classes, "recall"),
        ] {
            if !flags.is_empty() {
                let names: Vec<String> =
                    flags.iter().map(|&c| class_label(&r.cm, c)).collect();
                out.push_str(&format!(
                    "           zero-denominator {}: {}\n",
                    what,
                    names.join(", ")
                ));
            }
        }
    }
    out
}
