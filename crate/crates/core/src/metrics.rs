//! Class-balanced evaluation.
//!
//! Accuracy on imbalanced test data is dominated by the majority classes, so
//! every attribute is scored by its class-balanced accuracy: the mean of the
//! per-class sensitivities (recalls) read off the confusion matrix. Classes
//! absent from the test data are left out of the mean and reported.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// `counts[i * c + j]`: samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!(
                "{} counts for a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    /// Number of test samples of class `truth`.
    pub fn support(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes]
            .iter()
            .sum()
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        for v in [p, t] {
            if v >= classes {
                return Err(Error::LabelOutOfRange { label: v, classes });
            }
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

/// Per-class recall. Classes without test samples are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sensitivity {
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

impl Sensitivity {
    /// Mean sensitivity over the classes present in the test data.
    pub fn balanced_accuracy(&self) -> Result<f64> {
        let present: Vec<f64> = self.per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Contract("no class has test samples".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

pub fn sensitivity(matrix: &ConfusionMatrix) -> Sensitivity {
    let mut excluded = Vec::new();
    let per_class = (0..matrix.classes)
        .map(|i| {
            let n = matrix.support(i);
            if n == 0 {
                log::warn!("class {i} has no test samples; excluded from balanced accuracy");
                excluded.push(i);
                None
            } else {
                Some(matrix.get(i, i) as f64 / n as f64)
            }
        })
        .collect();
    Sensitivity {
        per_class,
        excluded,
    }
}

pub fn mean_balanced_accuracy(per_label: &[f64]) -> Result<f64> {
    if per_label.is_empty() {
        return Err(Error::Contract(
            "mean balanced accuracy over zero labels".into(),
        ));
    }
    Ok(per_label.iter().sum::<f64>() / per_label.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeMetrics {
    pub name: String,
    pub classes: usize,
    pub sensitivity: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
    pub balanced_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub attributes: Vec<AttributeMetrics>,
    pub mean_balanced_accuracy: f64,
}

impl MetricsReport {
    /// `predictions[j]` and `labels[j]` belong to attribute `j`.
    pub fn from_predictions(
        names: &[String],
        class_counts: &[usize],
        predictions: &[Vec<usize>],
        labels: &[Vec<usize>],
    ) -> Result<Self> {
        if predictions.len() != class_counts.len() || labels.len() != class_counts.len() {
            return Err(Error::Shape("one prediction and label column per attribute".into()));
        }
        let mut attributes = Vec::with_capacity(class_counts.len());
        for (j, &c) in class_counts.iter().enumerate() {
            let cm = confusion(&predictions[j], &labels[j], c)?;
            let s = sensitivity(&cm);
            attributes.push(AttributeMetrics {
                name: names.get(j).cloned().unwrap_or_else(|| format!("attr{j}")),
                classes: c,
                balanced_accuracy: s.balanced_accuracy()?,
                sensitivity: s.per_class,
                excluded: s.excluded,
                confusion: cm,
            });
        }
        let per: Vec<f64> = attributes.iter().map(|a| a.balanced_accuracy).collect();
        Ok(Self {
            mean_balanced_accuracy: mean_balanced_accuracy(&per)?,
            attributes,
        })
    }

    /// One row per attribute: `label,classes,sensitivities,balanced_accuracy`,
    /// sensitivities `;`-separated with `NA` for excluded classes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,classes,sensitivity,balanced_accuracy\n");
        for a in &self.attributes {
            let sens: Vec<String> = a
                .sensitivity
                .iter()
                .map(|v| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}")))
                .collect();
            let _ = writeln!(
                s,
                "{},{},{},{:.6}",
                a.name,
                a.classes,
                sens.join(";"),
                a.balanced_accuracy
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>7} {:>10}  per-class sensitivity", "label", "classes", "A_bln");
        for a in &self.attributes {
            let sens: Vec<String> = a
                .sensitivity
                .iter()
                .map(|v| v.map_or_else(|| "  -  ".to_string(), |x| format!("{x:.3}")))
                .collect();
            let _ = writeln!(
                s,
                "{:<16} {:>7} {:>10.4}  {}",
                a.name,
                a.classes,
                a.balanced_accuracy,
                sens.join(" ")
            );
        }
        let _ = writeln!(s, "{:<16} {:>7} {:>10.4}", "mean", "", self.mean_balanced_accuracy);
        s
    }
}
