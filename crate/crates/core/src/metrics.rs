//! Macro-averaged precision, recall and F1.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        ConfusionCounts {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    pub fn record(&mut self, target: usize, predicted: usize) {
        if target == predicted {
            self.tp[target] += 1;
        } else {
            self.fp[predicted] += 1;
            self.fn_[target] += 1;
        }
    }

    pub fn from_predictions(classes: usize, targets: &[usize], predicted: &[usize]) -> Result<Self> {
        if targets.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "{} targets but {} predictions",
                targets.len(),
                predicted.len()
            )));
        }
        let mut c = ConfusionCounts::new(classes);
        for (&t, &p) in targets.iter().zip(predicted) {
            let bad = t.max(p);
            if bad >= classes {
                return Err(Error::TargetOutOfRange { target: bad, classes });
            }
            c.record(t, p);
        }
        Ok(c)
    }

    /// Number of evaluated samples, `sum(TP) + sum(FN)`.
    pub fn samples(&self) -> usize {
        self.tp.iter().sum::<usize>() + self.fn_.iter().sum::<usize>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
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

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// One entry per class id; `None` for classes absent from the test labels.
    pub per_class: Vec<Option<ClassMetrics>>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl MetricsReport {
    /// Averages over classes with at least one true instance (`TP + FN > 0`).
    pub fn from_counts(counts: &ConfusionCounts) -> Self {
        let per_class: Vec<Option<ClassMetrics>> = (0..counts.classes())
            .map(|c| {
                let (tp, fp, fn_) = (counts.tp[c], counts.fp[c], counts.fn_[c]);
                (tp + fn_ > 0).then(|| {
                    let precision = ratio(tp, tp + fp);
                    let recall = ratio(tp, tp + fn_);
                    ClassMetrics {
                        precision,
                        recall,
                        f1: f1_score(precision, recall),
                    }
                })
            })
            .collect();
        let present: Vec<&ClassMetrics> = per_class.iter().flatten().collect();
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64
            }
        };
        MetricsReport {
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            per_class,
        }
    }

    pub fn from_predictions(classes: usize, targets: &[usize], predicted: &[usize]) -> Result<Self> {
        Ok(Self::from_counts(&ConfusionCounts::from_predictions(classes, targets, predicted)?))
    }

    /// `class,precision,recall,f1` rows for present classes, then a `macro` row.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("class,precision,recall,f1\n");
        for (c, m) in self.per_class.iter().enumerate() {
            if let Some(m) = m {
                let name = labels.get(c).cloned().unwrap_or_else(|| c.to_string());
                out.push_str(&format!("{name},{:.6},{:.6},{:.6}\n", m.precision, m.recall, m.f1));
            }
        }
        out.push_str(&format!(
            "macro,{:.6},{:.6},{:.6}\n",
            self.macro_precision, self.macro_recall, self.macro_f1
        ));
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "macro precision {:.4}  recall {:.4}  f1 {:.4}",
            self.macro_precision, self.macro_recall, self.macro_f1
        )
    }
}
