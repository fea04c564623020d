//! Batch-wise class profiling and the training-set imbalance measure.

use crate::error::{Error, Result};

/// Default minority criterion: minority classes jointly hold at most half of a batch.
pub const DEFAULT_RHO: f64 = 0.5;

/// Minimum per-batch count for a minority class to provide anchors.
pub const MIN_MINABLE_COUNT: usize = 2;

pub fn class_histogram(labels: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let mut h = vec![0; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: num_classes,
            });
        }
        h[l] += 1;
    }
    Ok(h)
}

/// Minority/majority split of one attribute within one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeProfile {
    pub histogram: Vec<usize>,
    /// Admitted minority classes, in admission order (ascending count, then id).
    pub minority: Vec<usize>,
    /// Minority classes with enough samples to mine from.
    pub minable: Vec<usize>,
    pub majority: Vec<usize>,
}

impl AttributeProfile {
    pub fn batch_size(&self) -> usize {
        self.histogram.iter().sum()
    }
}

/// Greedy minority admission: sort classes by ascending count (ties by class
/// id) and admit while the cumulative count stays within `rho * n_bs`.
pub fn minority_classes(histogram: &[usize], rho: f64) -> Result<AttributeProfile> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("rho must lie in (0, 1], got {rho}")));
    }
    let n_bs: usize = histogram.iter().sum();
    let cap = rho * n_bs as f64;
    let mut order: Vec<usize> = (0..histogram.len()).collect();
    order.sort_by_key(|&k| (histogram[k], k));

    let mut minority = Vec::new();
    let mut cum = 0usize;
    for &k in &order {
        if (cum + histogram[k]) as f64 > cap {
            break;
        }
        cum += histogram[k];
        minority.push(k);
    }
    let minable = minority
        .iter()
        .copied()
        .filter(|&k| histogram[k] >= MIN_MINABLE_COUNT)
        .collect();
    let majority = (0..histogram.len())
        .filter(|k| !minority.contains(k))
        .collect();
    Ok(AttributeProfile {
        histogram: histogram.to_vec(),
        minority,
        minable,
        majority,
    })
}

/// Profiles every attribute of a batch. `labels[j]` holds attribute `j`'s labels.
pub fn profile_batch(
    labels: &[Vec<usize>],
    class_counts: &[usize],
    rho: f64,
) -> Result<Vec<AttributeProfile>> {
    if labels.len() != class_counts.len() {
        return Err(Error::Shape(format!(
            "{} label columns for {} attributes",
            labels.len(),
            class_counts.len()
        )));
    }
    labels
        .iter()
        .zip(class_counts)
        .map(|(col, &c)| minority_classes(&class_histogram(col, c)?, rho))
        .collect()
}

/// Share of extra samples needed to level every class up to the largest one:
/// `Σ_k (n_max - n_k) / (c · n_max)`. Zero for balanced counts, below one otherwise.
pub fn imbalance_measure(counts: &[usize]) -> Result<f64> {
    let n_max = counts.iter().copied().max().unwrap_or(0);
    if n_max == 0 {
        return Err(Error::Contract(
            "imbalance measure needs at least one nonzero class count".into(),
        ));
    }
    let deficit: usize = counts.iter().map(|&n| n_max - n).sum();
    Ok(deficit as f64 / (counts.len() * n_max) as f64)
}

/// Per-attribute CRL weights `α_j = η · Ω_imb^j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceWeights {
    pub eta: f64,
    pub omega: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl ImbalanceWeights {
    /// `counts[j]` are the training-set class sizes of attribute `j`.
    pub fn from_counts(counts: &[Vec<usize>], eta: f64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("eta must be a nonnegative number, got {eta}")));
        }
        let omega = counts
            .iter()
            .map(|c| imbalance_measure(c))
            .collect::<Result<Vec<_>>>()?;
        let alpha: Vec<f64> = omega.iter().map(|o| eta * o).collect();
        if let Some(a) = alpha.iter().find(|&&a| a >= 1.0) {
            return Err(Error::Config(format!(
                "eta = {eta} gives a CRL weight of {a}, which must stay below 1"
            )));
        }
        Ok(Self { eta, omega, alpha })
    }
}
